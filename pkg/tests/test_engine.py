import copy

import numpy as np
import pytest

from nestdl import core, engine, synthetic, tree as tr
from nestdl.samplers import make_rng


def alphabet(images=15, draws=40, seed=0):
    return synthetic.generate_alphabet_corpus(synthetic.default_truth(), n_images=images,
                                              draws_per_image=draws, seed=seed)


def config(**kw):
    base = dict(total_sweeps=6, burn_in=3, branching=(3, 1, 1), seed=0, hyper=core.Hyperparams(K=25))
    base.update(kw)
    return engine.RunConfig(**base)


def test_run_config_validation():
    with pytest.raises(ValueError):
        config(burn_in=6)
    with pytest.raises(ValueError):
        config(branching=(0,))
    with pytest.raises(ValueError):
        config(max_depth=2, branching=(2, 2, 2))
    assert config(flat=True).max_depth == 1


def test_same_seed_same_trace():
    corpus, _ = alphabet()
    t1, b1 = engine.run(corpus, config())
    t2, b2 = engine.run(corpus, config())
    assert t1.rows == t2.rows
    assert engine.log_joint(b1) == engine.log_joint(b2)


def test_collection_keeps_best_scoring_sample():
    corpus, _ = alphabet()
    trace, best = engine.run(corpus, config())
    assert trace.collected == [3, 4, 5]
    scores = [trace.rows[s]["score"] for s in trace.collected]
    assert trace.ml_sweep == trace.collected[int(np.argmax(scores))]
    assert engine.selection_score(best) == pytest.approx(max(scores))
    assert core.validate(best) == []


def test_trace_csv_columns(tmp_path):
    corpus, _ = alphabet(images=6)
    trace, _ = engine.run(corpus, config(total_sweeps=3, burn_in=1))
    path = tmp_path / "trace.csv"
    trace.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0].split(",") == list(engine.TRACE_FIELDS)
    assert len(lines) == 4


def test_flat_run_has_depth_one():
    corpus, _ = alphabet(images=8)
    _, best = engine.run(corpus, config(flat=True))
    assert best.tree.max_depth == 1
    assert all(a.L == 1 for a in best.assign)


def test_log_joint_terms_are_finite_and_sum():
    corpus, _ = alphabet(images=6)
    state = engine.initialize_state(corpus, config(), make_rng(0))
    terms = engine.log_joint_terms(state)
    assert all(np.isfinite(v) for v in terms.values())
    assert engine.log_joint(state, terms) == pytest.approx(sum(terms.values()))


def test_heldout_inference_leaves_model_untouched():
    corpus, _ = alphabet(images=10)
    _, best = engine.run(corpus, config())
    before = copy.deepcopy(best)
    test, _ = alphabet(images=4, seed=9)
    dists = engine.infer_heldout(best, test, sweeps=6)
    assert len(dists) == 4
    for d in dists:
        assert sum(d.values()) == pytest.approx(1.0)
        assert set(d) <= set(best.tree.nodes)
    assert set(best.tree.nodes) == set(before.tree.nodes)
    for nid, node in best.tree.nodes.items():
        if node.pi is not None:
            assert np.array_equal(node.pi, before.tree[nid].pi)


def test_heldout_rejects_dimension_clash():
    corpus, _ = alphabet(images=6)
    _, best = engine.run(corpus, config())
    bad = core.Corpus([np.zeros((2, 3))], trials=[np.ones(2)])
    with pytest.raises(ValueError):
        engine.infer_heldout(best, bad)


def test_patch_mode_sweep_runs():
    model = synthetic.planted_hierarchy(P=16, K=12, branching=(2, 2), seed=1)
    corpus, _ = synthetic.generate_patch_corpus(model, n_images=6, patches_per_image=5, seed=1)
    trace, best = engine.run(corpus, config(branching=(2, 2), hyper=core.Hyperparams(K=12)))
    assert core.validate(best) == []
    assert np.all(np.isfinite(trace.log_joint))
