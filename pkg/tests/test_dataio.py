import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nestdl import core, dataio, engine, synthetic
from nestdl.samplers import make_rng


# ---------------------------------------------------------------- images and patches

def test_pgm_plain_and_raw_agree(tmp_path):
    img = np.array([[0, 128, 255], [64, 32, 16]], dtype=np.uint8)
    raw = b"P5\n# comment\n3 2\n255\n" + img.tobytes()
    plain = b"P2\n3 2\n255\n" + " ".join(str(v) for v in img.ravel()).encode()
    a, b = dataio.read_pnm(raw), dataio.read_pnm(plain)
    assert np.array_equal(a, b)
    assert np.allclose(a, img / 255.0)


def test_ppm_is_channel_interleaved():
    px = np.arange(12, dtype=np.uint8).reshape(2, 2, 3)
    img = dataio.read_pnm(b"P6 2 2 11\n" + px.tobytes())
    assert img.shape == (2, 2, 3)
    assert np.allclose(img * 11, px)


def test_write_then_read_pgm(tmp_path):
    img = np.linspace(0, 1, 12).reshape(3, 4)
    dataio.write_pgm(tmp_path / "a.pgm", img)
    assert np.allclose(dataio.read_pnm(tmp_path / "a.pgm"), np.round(img * 255) / 255)


@pytest.mark.parametrize("data,offset", [(b"", 0), (b"P7 1 1 1\n", 0), (b"P5 2 2 255\n\x00", 12), (b"P2 2 x", 5)])
def test_bad_images_report_offsets(data, offset):
    with pytest.raises(dataio.FormatError) as e:
        dataio.read_pnm(data)
    assert e.value.offset == offset


def test_random_patches_from_small_image():
    img = make_rng(0).random((28, 28))
    X = dataio.extract_patches(img, dataio.PatchSpec(15, 15, 1, 50), make_rng(1))
    assert X.shape == (50, 225)
    assert X.min() >= 0 and X.max() <= 1


def test_grid_patches_of_colour_image():
    img = make_rng(0).random((64, 64, 3))
    X = dataio.extract_patches(img, dataio.PatchSpec(32, 32, 3, None), make_rng(1))
    assert X.shape == (4, 3072)
    assert np.array_equal(X[1], img[0:32, 32:64].reshape(-1))


def test_whole_image_patch_is_flattening():
    img = make_rng(0).random((5, 4, 3))
    X = dataio.extract_patches(img, dataio.PatchSpec(5, 4, 3, None), make_rng(0))
    assert np.array_equal(X[0], img.reshape(-1))


def test_oversized_patch_is_rejected():
    with pytest.raises(ValueError):
        dataio.extract_patches(np.zeros((10, 10)), dataio.PatchSpec(15, 15), make_rng(0))
    with pytest.raises(ValueError):
        dataio.PatchSpec(4, 4, count=0)


# ---------------------------------------------------------------- feature matrices

def test_two_row_csv_is_one_image():
    c = dataio.load_feature_matrix(b"1,0.5,0.5\n1,0.1,0.9", fmt="csv")
    assert c.M == 1 and c.P == 2
    assert np.array_equal(c.patches[0], [[0.5, 0.5], [0.1, 0.9]])


def test_csv_and_binary_give_the_same_corpus(tmp_path):
    rng = make_rng(0)
    corpus = core.Corpus([rng.random((3, 4)), rng.random((2, 4)), rng.random((5, 4))])
    dataio.save_feature_matrix(corpus, tmp_path / "m.csv")
    dataio.save_feature_matrix(corpus, tmp_path / "m.bin")
    a = dataio.load_feature_matrix(tmp_path / "m.csv")
    b = dataio.load_feature_matrix(tmp_path / "m.bin")
    for p, q, r in zip(a.patches, b.patches, corpus.patches):
        assert np.array_equal(p, q) and np.array_equal(p, r)


def test_empty_file_is_an_error(tmp_path):
    (tmp_path / "e.csv").write_bytes(b"")
    with pytest.raises(dataio.FormatError):
        dataio.load_feature_matrix(tmp_path / "e.csv")


def test_ragged_csv_row_offset():
    with pytest.raises(dataio.FormatError) as e:
        dataio.load_feature_matrix(b"0,1,2\n0,1\n", fmt="csv")
    assert e.value.offset == 6


def test_truncated_binary_reports_offset():
    rows, P = 2, 3
    head = struct.pack("<qqq", rows, P, 24 + rows * P * 8)
    data = head + np.zeros(rows * P).tobytes()[:-5]
    with pytest.raises(dataio.FormatError) as e:
        dataio.load_feature_matrix(data, fmt="bin")
    assert e.value.offset == len(data)


def test_count_units_need_binary_values():
    c = dataio.load_feature_matrix(b"0,1,0\n0,0,1\n1,1,1\n", fmt="csv", counts=True)
    assert c.is_counts and c.M == 2
    with pytest.raises(dataio.FormatError):
        dataio.load_feature_matrix(b"0,2,0\n", fmt="csv", counts=True)


@given(st.binary(max_size=200))
@settings(max_examples=300, deadline=None)
def test_loaders_are_total_on_arbitrary_bytes(data):
    for fmt in ("csv", "bin"):
        try:
            dataio.load_feature_matrix(data, fmt=fmt)
        except dataio.FormatError:
            pass
    try:
        dataio.read_pnm(data)
    except dataio.FormatError:
        pass


# ---------------------------------------------------------------- annotations

def test_annotations_vocabulary_and_counts(tmp_path):
    p = tmp_path / "ann.txt"
    p.write_text("a b a\n")
    vocab, counts = dataio.load_annotations(p, 1)
    assert vocab == ["a", "b"] and counts.tolist() == [[2, 1]]


def test_annotation_pruning(tmp_path):
    p = tmp_path / "ann.txt"
    p.write_text("sky " * 8 + "car\nsky tree\n")
    vocab, counts = dataio.load_annotations(p, 8)
    assert vocab == ["sky"]
    assert counts[:, 0].tolist() == [8, 1]


def test_missing_annotation_file():
    with pytest.raises(OSError):
        dataio.load_annotations("/nonexistent/ann.txt")


# ---------------------------------------------------------------- checkpoints and exports

@pytest.fixture(scope="module")
def trained():
    corpus, _ = synthetic.generate_alphabet_corpus(synthetic.default_truth(), n_images=10, draws_per_image=40)
    cfg = engine.RunConfig(total_sweeps=4, burn_in=2, branching=(3, 1, 1), hyper=core.Hyperparams(K=25))
    return engine.run(corpus, cfg)[1]


def test_checkpoint_round_trip_is_exact(trained, tmp_path):
    path = tmp_path / "ck.json"
    dataio.save_checkpoint(trained, path)
    back = dataio.load_checkpoint(path)
    assert core.validate(back) == []
    assert engine.log_joint(back) == engine.log_joint(trained)
    # the generator resumes where it stopped
    assert back.rng.random() == engine.snapshot(trained).rng.random()


def test_patch_mode_checkpoint_round_trip(tmp_path):
    model = synthetic.planted_hierarchy(P=9, K=6, branching=(2,), seed=0)
    corpus, _ = synthetic.generate_patch_corpus(model, n_images=3, patches_per_image=4)
    cfg = engine.RunConfig(total_sweeps=2, burn_in=1, branching=(2,), hyper=core.Hyperparams(K=6))
    _, st = engine.run(corpus, cfg)
    dataio.save_checkpoint(st, tmp_path / "p.json")
    back = dataio.load_checkpoint(tmp_path / "p.json")
    assert engine.log_joint(back) == engine.log_joint(st)
    assert np.array_equal(back.D, st.D) and np.array_equal(back.S, st.S)


def test_truncated_checkpoint_is_a_parse_error(trained, tmp_path):
    path = tmp_path / "ck.json"
    dataio.save_checkpoint(trained, path)
    path.write_bytes(path.read_bytes()[:500])
    with pytest.raises(dataio.CheckpointError) as e:
        dataio.load_checkpoint(path)
    assert "line" in str(e.value)


def test_unknown_major_version_is_rejected(trained, tmp_path):
    doc = dataio.state_to_doc(trained)
    doc["schema_version"] = "2.0"
    path = tmp_path / "v2.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(dataio.CheckpointVersionError):
        dataio.load_checkpoint(path)


def test_missing_field_is_located(trained, tmp_path):
    doc = dataio.state_to_doc(trained)
    del doc["assignments"][1]["levels"]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(dataio.CheckpointError) as e:
        dataio.load_checkpoint(path)
    assert e.value.location == "$.assignments[1]"


def test_single_path_tree_exports_as_a_chain():
    corpus = core.Corpus([np.eye(3)[[0, 1, 2]]], trials=[np.ones(3)])
    rng = make_rng(0)
    t = core.TopicTree()
    a = t.add_child(0, np.full(3, 0.3), 1.0, rng)
    b = t.add_child(a, np.full(3, 0.3), 1.0, rng)
    st = core.ModelState(corpus, core.Hyperparams(K=3), None, corpus.X, None, t,
                         [core.Assignment([a, b], np.array([1, 2, 2]), np.array([0.5, 0.5]))], {}, 1.0, 1.0, rng)
    dot = dataio.tree_dot(st)
    edges = [line.strip() for line in dot.splitlines() if "->" in line]
    assert edges == [f"n0 -> n{a};", f"n{a} -> n{b};"]
    assert dataio.tree_json(st)["paths"] == [[a, b]]


def test_json_export_matches_checkpoint_nodes(trained, tmp_path):
    dataio.export_tree(trained, "json", tmp_path / "t.json")
    doc = json.loads((tmp_path / "t.json").read_text())
    assert {n["id"] for n in doc["nodes"]} == set(trained.tree.nodes)
    with pytest.raises(ValueError):
        dataio.export_tree(trained, "svg", tmp_path / "t.svg")


def test_dictionary_exports(tmp_path):
    D = make_rng(0).normal(size=(16, 5))
    dataio.export_dictionary_csv(D, tmp_path / "d.csv")
    back = np.loadtxt(tmp_path / "d.csv", delimiter=",")
    assert np.array_equal(back, D)
    dataio.export_atom_sheet(D, tmp_path / "d.pgm")
    sheet = dataio.read_pnm(tmp_path / "d.pgm")
    assert sheet.shape == (2 * 5 + 1, 3 * 5 + 1)
    with pytest.raises(ValueError):
        dataio.atom_sheet(np.zeros((15, 2)))
