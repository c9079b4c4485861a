import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nestdl import core, engine, synthetic, tree as tr
from nestdl.samplers import make_rng


def chain_tree():
    rng = make_rng(0)
    t = core.TopicTree()
    a = t.add_child(0, np.full(2, 0.5), 1.0, rng)
    b = t.add_child(a, np.full(2, 0.5), 1.0, rng)
    c = t.add_child(0, np.full(2, 0.5), 1.0, rng)
    t[0].nu = np.array([0.25, 0.5, 1.0])
    t[a].nu = np.array([0.5, 1.0])
    return t, a, b, c


def test_path_prior_weight_is_product_of_stick_weights():
    t, a, b, c = chain_tree()
    assert tr.path_prior_weight(t, [a]) == pytest.approx(0.25)
    assert tr.path_prior_weight(t, [c]) == pytest.approx(0.75 * 0.5)
    assert tr.path_prior_weight(t, [a, b]) == pytest.approx(0.25 * 0.5)


def test_path_prior_rejects_non_chains():
    t, a, b, c = chain_tree()
    with pytest.raises(core.StructuralError):
        tr.path_prior_logweight(t, [b])
    with pytest.raises(core.StructuralError):
        tr.path_prior_logweight(t, [])
    with pytest.raises(core.StructuralError):
        tr.path_prior_logweight(t, [c, b])


def tiny_alphabet_state(seed, images=12, draws=40):
    truth = synthetic.default_truth()
    corpus, _ = synthetic.generate_alphabet_corpus(truth, n_images=images, draws_per_image=draws, seed=seed)
    cfg = engine.RunConfig(total_sweeps=2, burn_in=1, branching=(3, 1, 1), seed=seed,
                           hyper=core.Hyperparams(K=25))
    return engine.initialize_state(corpus, cfg, make_rng(seed))


@given(st.integers(0, 10_000))
@settings(max_examples=8, deadline=None)
def test_sweeps_preserve_every_invariant(seed):
    state = tiny_alphabet_state(seed)
    for _ in range(3):
        engine.gibbs_sweep(state)
        assert core.validate(state) == []
        # no empty leaves survive pruning
        assert all(state.tree[n].occupancy > 0 for n in state.tree.leaves())
        for a in state.assign:
            assert a.L <= state.max_depth
            assert a.levels.max() == a.L


def test_level_pass_reports_probabilities():
    state = tiny_alphabet_state(3)
    kappas = tr.sample_levels(state, 0, state.rng)
    assert kappas.size == state.corpus.N[0]
    assert np.all((kappas >= 0) & (kappas <= 1))
    assert core.validate(state) == []


def test_path_candidates_are_normalisable():
    state = tiny_alphabet_state(4)
    cands, scores = tr.path_candidates(state, 0)
    assert len(cands) == scores.size > 0
    assert np.isfinite(scores).any()
    # the image's own chain is always among the candidates
    a = state.assign[0]
    anchors = {(u, k) for u, k in cands}
    assert (a.path[-1], 0) in anchors


def test_child_weights_follow_traffic():
    state = tiny_alphabet_state(5)
    traffic = tr.traffic_excluding(state)
    root = state.tree.root
    lw, lnew = tr.child_log_weights(state, root, traffic)
    n = np.array([traffic[c] for c in state.tree[root].children], dtype=float)
    total = np.exp(lw).sum() + np.exp(lnew)
    assert total == pytest.approx(1.0)
    assert np.allclose(np.exp(lw), n / (n.sum() + state.hyper.gamma))


def test_frozen_child_weights_exclude_new_children():
    state = tiny_alphabet_state(6)
    state.frozen = True
    lw, lnew = tr.child_log_weights(state, state.tree.root, None)
    assert lnew == -np.inf
    assert np.exp(lw).sum() == pytest.approx(1.0)


def test_prune_removes_unused_branches():
    state = tiny_alphabet_state(7)
    rng = state.rng
    leaf = state.assign[0].path[-1]
    extra = state.tree.add_child(leaf, np.full(25, 0.5), 1.0, rng)
    removed = tr.prune_and_compact(state, rng)
    assert extra in removed and extra not in state.tree.nodes
    assert core.validate(state) == []


def test_node_distribution_sums_to_one():
    state = tiny_alphabet_state(8)
    d = tr.node_distribution(state, 0)
    assert sum(d.values()) == pytest.approx(1.0)
    assert set(d) <= set(state.assign[0].path)


@given(st.integers(0, 10_000))
@settings(max_examples=8, deadline=None)
def test_subtree_moves_keep_bookkeeping_consistent(seed):
    state = tiny_alphabet_state(seed, images=16)
    engine.gibbs_sweep(state)
    units_before = state.Z.sum(axis=0)
    tr.reattach_subtrees(state, state.rng)
    assert core.validate(state) == []
    occ = {n: state.tree[n].occupancy for n in state.tree.nodes}
    tr.recount_occupancy(state)
    assert occ == {n: state.tree[n].occupancy for n in state.tree.nodes}
    counts = tr._usage(state)
    assert np.array_equal(sum(n1 for n1, _ in counts.values()), units_before)


def clone_state(n_per_branch=6, units=60):
    """Two depth-1 clones with identical usage, each carrying one distinct child."""
    rng = make_rng(1)
    top = np.r_[np.full(5, 0.5), np.zeros(5)]
    kids = [np.r_[np.zeros(5), np.full(5, 0.5)], np.r_[np.full(5, 0.0), np.array([0.5, 0.5, 0, 0, 0])]]
    t = core.TopicTree()
    tops = [t.add_child(0, np.full(10, 0.2), 1.0, rng) for _ in range(2)]
    leaves = [t.add_child(tops[i], np.full(10, 0.2), 1.0, rng) for i in range(2)]
    patches, assign = [], []
    for i in range(2):
        for _ in range(n_per_branch):
            lv = rng.integers(1, 3, size=units)
            probs = np.where((lv == 1)[:, None], top, kids[i])
            patches.append((rng.random(probs.shape) < probs).astype(float))
            assign.append(core.Assignment([tops[i], leaves[i]], lv, np.array([0.5, 1.0])))
    corpus = core.Corpus(patches, trials=[np.ones(units)] * len(patches))
    st = core.ModelState(corpus, core.Hyperparams(K=10), None, corpus.X, None, t, assign, {}, 1.0, 1.0, rng,
                         max_depth=2)
    tr.recount_occupancy(st)
    return st, tops


def test_subtree_move_merges_identical_parents():
    st, tops = clone_state()
    moved = tr.reattach_subtrees(st, st.rng)
    assert moved >= 1
    assert len(st.tree[0].children) == 1
    assert len({a.path[0] for a in st.assign}) == 1
    assert core.validate(st) == []


def test_subtree_moves_skip_frozen_and_flat_states():
    st, tops = clone_state()
    st.frozen = True
    assert tr.reattach_subtrees(st, st.rng) == 0
    assert len(st.tree[0].children) == 2
