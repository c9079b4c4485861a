"""Reading images, feature matrices and annotations; checkpoints and exports."""
from __future__ import annotations

import csv
import io
import json
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Assignment, Corpus, Hyperparams, ModelState, TopicTree, TreeNode

SCHEMA_VERSION = "1.0"
CHECKPOINT_KIND = "nestdl-checkpoint"
BINARY_HEADER = struct.Struct("<qqq")


class FormatError(ValueError):
    """Malformed input; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int | None = None, source=None):
        where = "" if offset is None else f" at byte {offset}"
        src = "" if source is None else f"{source}: "
        super().__init__(f"{src}{message}{where}")
        self.offset = offset
        self.source = source


class CheckpointError(ValueError):
    """A checkpoint document that cannot be turned back into a state."""

    def __init__(self, message: str, location: str | None = None):
        super().__init__(message if location is None else f"{location}: {message}")
        self.location = location


class CheckpointVersionError(CheckpointError):
    pass


def _read_bytes(source) -> tuple[bytes, str]:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source), "<bytes>"
    path = Path(source)
    return path.read_bytes(), str(path)


# ---------------------------------------------------------------- images

def _pnm_tokens(data: bytes, pos: int, count: int, name):
    """``count`` whitespace-separated header integers starting at ``pos``; skips # comments."""
    out = []
    n = len(data)
    while len(out) < count:
        while pos < n and (data[pos:pos + 1].isspace() or data[pos:pos + 1] == b"#"):
            if data[pos:pos + 1] == b"#":
                while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < n and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("expected an unsigned integer", start, name)
        out.append(int(data[start:pos]))
    return out, pos


def read_pnm(source) -> np.ndarray:
    """Decode a PGM or PPM image (plain or raw) to floats in [0, 1].

    Grey images come back as (H, W), colour ones as (H, W, 3).
    """
    data, name = _read_bytes(source)
    if len(data) < 2 or data[:1] != b"P" or data[1:2] not in b"2356":
        raise FormatError("not a PGM/PPM file (magic P2, P3, P5 or P6 expected)", 0, name)
    kind = data[1:2]
    channels = 3 if kind in b"36" else 1
    (w, h, maxval), pos = _pnm_tokens(data, 2, 3, name)
    if w < 1 or h < 1:
        raise FormatError(f"image size {w}x{h} is empty", pos, name)
    if not 0 < maxval < 65536:
        raise FormatError(f"maxval {maxval} outside 1..65535", pos, name)
    count = w * h * channels
    if kind in b"56":
        if pos >= len(data) or not data[pos:pos + 1].isspace():
            raise FormatError("missing whitespace after header", pos, name)
        pos += 1
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        need = count * dtype.itemsize
        if len(data) - pos < need:
            raise FormatError(f"raster truncated: {len(data) - pos} of {need} bytes", len(data), name)
        raw = np.frombuffer(data, dtype=dtype, count=count, offset=pos).astype(float)
    else:
        raw, pos = _pnm_tokens(data, pos, count, name)
        raw = np.asarray(raw, dtype=float)
    if raw.max(initial=0) > maxval:
        raise FormatError(f"sample exceeds maxval {maxval}", None, name)
    img = raw / maxval
    return img.reshape(h, w, 3) if channels == 3 else img.reshape(h, w)


def write_pgm(path, image: np.ndarray) -> None:
    """Write a [0, 1] grey image as 8-bit raw PGM (values are clipped)."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ValueError("write_pgm expects a 2-d grey image")
    h, w = img.shape
    body = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8).tobytes()
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + body)


@dataclass
class PatchSpec:
    """``count`` None means every aligned non-overlapping tile."""

    height: int
    width: int
    channels: int = 1
    count: int | None = 50

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.channels < 1:
            raise ValueError("patch sides and channel count must be positive")
        if self.count is not None and self.count < 1:
            raise ValueError("patch count must be at least 1")

    @property
    def P(self) -> int:
        return self.height * self.width * self.channels

    @property
    def mode(self) -> str:
        return "grid" if self.count is None else "random"


def extract_patches(image: np.ndarray, spec: PatchSpec, rng: np.random.Generator) -> np.ndarray:
    """(n, P) patch vectors, rows flattened row-major with channels innermost."""
    img = np.asarray(image, dtype=float)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] != spec.channels:
        raise ValueError(f"image has shape {np.shape(image)}, spec expects {spec.channels} channel(s)")
    H, W, _ = img.shape
    if H < spec.height or W < spec.width:
        raise ValueError(f"image {H}x{W} is smaller than the {spec.height}x{spec.width} patch")
    if spec.count is None:
        ys = np.arange(0, H - spec.height + 1, spec.height)
        xs = np.arange(0, W - spec.width + 1, spec.width)
        corners = [(y, x) for y in ys for x in xs]
    else:
        ys = rng.integers(0, H - spec.height + 1, size=spec.count)
        xs = rng.integers(0, W - spec.width + 1, size=spec.count)
        corners = list(zip(ys, xs))
    return np.array([img[y:y + spec.height, x:x + spec.width].reshape(-1) for y, x in corners])


def corpus_from_images(paths, spec: PatchSpec, rng: np.random.Generator) -> Corpus:
    return Corpus([extract_patches(read_pnm(p), spec, rng) for p in paths])


# ---------------------------------------------------------------- feature matrices

def _group_rows(index: np.ndarray, rows: np.ndarray) -> list:
    """Rows grouped by image index, images ordered by first appearance."""
    _, first, inv = np.unique(index, return_index=True, return_inverse=True)
    rank = np.argsort(np.argsort(first))
    order = rank[inv]
    return [rows[order == r] for r in range(first.size)]


def _parse_csv(data: bytes, name) -> tuple[np.ndarray, np.ndarray]:
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError as exc:
        raise FormatError("non-ASCII byte in CSV", exc.start, name) from None
    index, rows = [], []
    width = None
    offset = 0
    for line in text.splitlines(keepends=True):
        start = offset
        offset += len(line)
        body = line.strip()
        if not body or body.startswith("#"):
            continue
        cells = body.split(",")
        if width is None:
            width = len(cells)
            if width < 2:
                raise FormatError("a row needs an image index and at least one value", start, name)
        elif len(cells) != width:
            raise FormatError(f"row has {len(cells)} fields, expected {width}", start, name)
        try:
            idx = int(cells[0])
            vals = [float(c) for c in cells[1:]]
        except ValueError as exc:
            raise FormatError(f"bad number ({exc})", start, name) from None
        if not np.all(np.isfinite(vals)):
            raise FormatError("non-finite value", start, name)
        index.append(idx)
        rows.append(vals)
    if not rows:
        raise FormatError("no data rows", 0, name)
    return np.asarray(index, dtype=np.int64), np.asarray(rows, dtype=float)


def _parse_binary(data: bytes, name) -> tuple[np.ndarray, np.ndarray]:
    hs = BINARY_HEADER.size
    if len(data) < hs:
        raise FormatError(f"header needs {hs} bytes, file has {len(data)}", len(data), name)
    rows, P, index_off = BINARY_HEADER.unpack_from(data, 0)
    if rows < 1 or P < 1:
        raise FormatError(f"header declares {rows} rows of dimension {P}", 0, name)
    end = hs + rows * P * 8
    if index_off != end:
        raise FormatError(f"index table offset {index_off}, expected {end}", 16, name)
    if len(data) < end:
        raise FormatError(f"matrix truncated: {len(data) - hs} of {rows * P * 8} bytes", len(data), name)
    if len(data) < end + rows * 8:
        raise FormatError(f"index table truncated: {len(data) - end} of {rows * 8} bytes", len(data), name)
    if len(data) > end + rows * 8:
        raise FormatError("trailing bytes after the index table", end + rows * 8, name)
    X = np.frombuffer(data, dtype="<f8", count=rows * P, offset=hs).reshape(rows, P).astype(float)
    index = np.frombuffer(data, dtype="<i8", count=rows, offset=end).astype(np.int64)
    bad = np.flatnonzero(~np.isfinite(X).all(axis=1))
    if bad.size:
        raise FormatError("non-finite value", hs + int(bad[0]) * P * 8, name)
    return index, X


def load_feature_matrix(source, fmt: str | None = None, counts: bool = False) -> Corpus:
    """Corpus from a CSV (image index, then values) or a binary feature matrix.

    The format follows the suffix (``.csv`` or ``.txt`` is text) unless given.
    With ``counts`` the rows are single-draw binary units.
    """
    data, name = _read_bytes(source)
    if fmt is None:
        fmt = "csv" if str(name).lower().endswith((".csv", ".txt")) else "bin"
    if not data:
        raise FormatError("empty file", 0, name)
    if fmt == "csv":
        index, X = _parse_csv(data, name)
    elif fmt == "bin":
        index, X = _parse_binary(data, name)
    else:
        raise ValueError(f"unknown matrix format {fmt!r}")
    blocks = _group_rows(index, X)
    if not counts:
        return Corpus(blocks)
    if np.any((X != 0) & (X != 1)):
        raise FormatError("count units must be 0/1", None, name)
    return Corpus(blocks, trials=[np.ones(b.shape[0], dtype=np.int64) for b in blocks])


def save_feature_matrix(corpus: Corpus, path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = fmt or ("csv" if path.suffix.lower() in (".csv", ".txt") else "bin")
    index = corpus.image_of_rows()
    X = corpus.X
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            for m, row in zip(index, X):
                w.writerow([int(m)] + [repr(float(v)) for v in row])
    elif fmt == "bin":
        rows, P = X.shape
        head = BINARY_HEADER.pack(rows, P, BINARY_HEADER.size + rows * P * 8)
        path.write_bytes(head + X.astype("<f8").tobytes() + index.astype("<i8").tobytes())
    else:
        raise ValueError(f"unknown matrix format {fmt!r}")


# ---------------------------------------------------------------- annotations

def read_terms(source) -> list:
    """Whitespace-separated terms per line; one line per image."""
    data, _ = _read_bytes(source)
    return [line.split() for line in data.decode("utf-8").splitlines()]


def load_annotations(source, min_count: int = 1, vocabulary=None):
    """(vocabulary, M x N_v counts); terms seen fewer than ``min_count`` times are dropped.

    An explicit ``vocabulary`` (list or file with one term per line) replaces
    the count rule.
    """
    if min_count < 1:
        raise ValueError("min_count must be at least 1")
    docs = read_terms(source)
    if vocabulary is None:
        totals = Counter(t for d in docs for t in d)
        vocab = sorted(t for t, c in totals.items() if c >= min_count)
    elif isinstance(vocabulary, (list, tuple)):
        vocab = list(vocabulary)
    else:
        vocab = [t for line in read_terms(vocabulary) for t in line]
    col = {t: j for j, t in enumerate(vocab)}
    counts = np.zeros((len(docs), len(vocab)), dtype=np.int64)
    for m, d in enumerate(docs):
        for t in d:
            j = col.get(t)
            if j is not None:
                counts[m, j] += 1
    return vocab, counts


def read_labels(source) -> list:
    """One class label per non-empty line."""
    data, _ = _read_bytes(source)
    return [s.strip() for s in data.decode("utf-8").splitlines() if s.strip()]


# ---------------------------------------------------------------- checkpoints

def _arr(x):
    return None if x is None else np.asarray(x).tolist()


def _rng_doc(obj):
    """Bit-generator state with arrays tagged by dtype so they come back exactly."""
    if isinstance(obj, dict):
        return {k: _rng_doc(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__array__": obj.tolist(), "dtype": obj.dtype.str}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _rng_state(doc):
    if isinstance(doc, dict):
        if "__array__" in doc:
            return np.asarray(doc["__array__"], dtype=np.dtype(doc["dtype"]))
        return {k: _rng_state(v) for k, v in doc.items()}
    return doc


def _corpus_doc(c: Corpus) -> dict:
    return {
        "patches": [p.tolist() for p in c.patches],
        "trials": None if c.trials is None else [t.tolist() for t in c.trials],
        "word_counts": _arr(c.word_counts),
        "vocabulary": c.vocabulary,
    }


def state_to_doc(state: ModelState) -> dict:
    h = state.hyper
    return {
        "kind": CHECKPOINT_KIND,
        "schema_version": SCHEMA_VERSION,
        "hyperparams": {k: getattr(h, k) for k in h.__dataclass_fields__},
        "max_depth": state.max_depth,
        "flat": state.flat,
        "frozen": state.frozen,
        "gamma_e": state.gamma_e,
        "gamma_s": state.gamma_s,
        "dictionary": _arr(state.D),
        "Z": None if state.counts_mode else _arr(state.Z),
        "S": _arr(state.S),
        "tree": tree_to_doc(state.tree),
        "assignments": [
            {"path": [int(n) for n in a.path], "levels": a.levels.tolist(), "mu": np.asarray(a.mu).tolist()}
            for a in state.assign
        ],
        "psi": [{"path": list(k), "psi": v.tolist()} for k, v in state.psi.items()],
        "rng": _rng_doc(state.rng.bit_generator.state),
        "corpus": _corpus_doc(state.corpus),
    }


def tree_to_doc(tree: TopicTree) -> dict:
    return {
        "next_id": tree.next_id,
        "nodes": [
            {"id": n.id, "parent": n.parent, "depth": n.depth, "children": list(n.children),
             "nu": n.nu.tolist(), "pi": _arr(n.pi), "occupancy": n.occupancy}
            for n in tree.nodes.values()
        ],
    }


def _need(doc: dict, key: str, where: str):
    if not isinstance(doc, dict) or key not in doc:
        raise CheckpointError(f"missing field {key!r}", where)
    return doc[key]


def _opt_array(x, dtype=float):
    return None if x is None else np.asarray(x, dtype=dtype)


def tree_from_doc(doc: dict, where: str = "tree") -> TopicTree:
    tree = TopicTree()
    tree.nodes = {}
    for i, nd in enumerate(_need(doc, "nodes", where)):
        loc = f"{where}.nodes[{i}]"
        node = TreeNode(int(_need(nd, "id", loc)), _need(nd, "parent", loc), int(_need(nd, "depth", loc)),
                        [int(c) for c in _need(nd, "children", loc)], np.asarray(_need(nd, "nu", loc), dtype=float),
                        _opt_array(_need(nd, "pi", loc)), int(_need(nd, "occupancy", loc)))
        tree.nodes[node.id] = node
    if tree.root not in tree.nodes:
        raise CheckpointError("tree has no root node", where)
    tree.next_id = int(_need(doc, "next_id", where))
    return tree


def state_from_doc(doc: dict) -> ModelState:
    if not isinstance(doc, dict) or doc.get("kind") != CHECKPOINT_KIND:
        raise CheckpointError("not a checkpoint document", "$")
    version = str(_need(doc, "schema_version", "$"))
    major = version.split(".")[0]
    if major != SCHEMA_VERSION.split(".")[0]:
        raise CheckpointVersionError(f"unsupported schema version {version} (reader supports {SCHEMA_VERSION})",
                                     "$.schema_version")
    try:
        hyper = Hyperparams(**_need(doc, "hyperparams", "$"))
    except (TypeError, ValueError) as exc:
        raise CheckpointError(str(exc), "$.hyperparams") from None
    cd = _need(doc, "corpus", "$")
    try:
        corpus = Corpus(_need(cd, "patches", "$.corpus"), _opt_array(cd.get("word_counts"), np.int64),
                        cd.get("vocabulary"), cd.get("trials"))
    except ValueError as exc:
        raise CheckpointError(str(exc), "$.corpus") from None
    tree = tree_from_doc(_need(doc, "tree", "$"), "$.tree")
    assign = []
    for i, ad in enumerate(_need(doc, "assignments", "$")):
        loc = f"$.assignments[{i}]"
        assign.append(Assignment([int(n) for n in _need(ad, "path", loc)],
                                 np.asarray(_need(ad, "levels", loc), dtype=np.int64),
                                 np.asarray(_need(ad, "mu", loc), dtype=float)))
    psi = {tuple(int(n) for n in _need(p, "path", f"$.psi[{i}]")): np.asarray(_need(p, "psi", f"$.psi[{i}]"), dtype=float)
           for i, p in enumerate(_need(doc, "psi", "$"))}
    rng = np.random.Generator(np.random.Philox())
    try:
        rng.bit_generator.state = _rng_state(_need(doc, "rng", "$"))
    except (TypeError, ValueError, KeyError) as exc:
        raise CheckpointError(f"bad generator state ({exc})", "$.rng") from None
    Z = corpus.X if corpus.is_counts else np.asarray(_need(doc, "Z", "$"), dtype=float)
    return ModelState(corpus, hyper, _opt_array(doc.get("dictionary")), Z, _opt_array(doc.get("S")), tree, assign,
                      psi, float(_need(doc, "gamma_e", "$")), float(_need(doc, "gamma_s", "$")), rng,
                      max_depth=int(_need(doc, "max_depth", "$")), flat=bool(doc.get("flat", False)),
                      frozen=bool(doc.get("frozen", False)))


def save_checkpoint(state: ModelState, path) -> None:
    """JSON document; floats are written with round-trip precision."""
    Path(path).write_text(json.dumps(state_to_doc(state)))


def load_checkpoint(path) -> ModelState:
    data, name = _read_bytes(path)
    try:
        doc = json.loads(data.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"non-UTF-8 byte at offset {exc.start}", name) from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{exc.msg} (line {exc.lineno}, column {exc.colno}, byte {exc.pos})", name) from None
    return state_from_doc(doc)


# ---------------------------------------------------------------- exports

def _top_atoms(pi, n: int = 5) -> list:
    return [] if pi is None else [int(k) for k in np.argsort(-pi, kind="stable")[:n]]


def _node_words(state: ModelState, n: int = 3) -> dict:
    """node id -> most frequent annotation terms of the images passing through it."""
    wc, vocab = state.corpus.word_counts, state.corpus.vocabulary
    if wc is None:
        return {}
    acc = {}
    for m, a in enumerate(state.assign):
        for nid in a.path:
            acc[nid] = acc.get(nid, 0) + wc[m]
    names = vocab or [str(j) for j in range(wc.shape[1])]
    return {nid: [names[j] for j in np.argsort(-c, kind="stable")[:n] if c[j] > 0] for nid, c in acc.items()}


def tree_dot(state: ModelState) -> str:
    tree = state.tree
    words = _node_words(state)
    out = ["digraph tree {", "  rankdir=TB;", '  node [shape=box, fontname="monospace"];',
           '  n0 [label="root"];']
    for node in tree.nodes.values():
        if node.id == tree.root:
            continue
        label = f"{node.id} d={node.depth} occ={node.occupancy}\\natoms {_top_atoms(node.pi)}"
        if node.id in words:
            label += "\\n" + " ".join(words[node.id])
        out.append(f'  n{node.id} [label="{label}"];')
    for node in tree.nodes.values():
        for c in node.children:
            out.append(f"  n{node.id} -> n{c};")
    out.append("}")
    return "\n".join(out) + "\n"


def tree_json(state: ModelState) -> dict:
    doc = tree_to_doc(state.tree)
    words = _node_words(state)
    for nd in doc["nodes"]:
        nd["top_atoms"] = _top_atoms(None if nd["pi"] is None else np.asarray(nd["pi"]))
        if nd["id"] in words:
            nd["top_words"] = words[nd["id"]]
    doc["paths"] = [state.tree.chain(leaf) for leaf in sorted(state.tree.leaves())]
    return doc


def export_tree(state: ModelState, fmt: str, path) -> None:
    if fmt == "dot":
        Path(path).write_text(tree_dot(state))
    elif fmt == "json":
        Path(path).write_text(json.dumps(tree_json(state), indent=1))
    else:
        raise ValueError(f"unknown tree format {fmt!r} (dot or json)")


def export_dictionary_csv(D: np.ndarray, path) -> None:
    """P rows by K columns."""
    buf = io.StringIO()
    w = csv.writer(buf)
    for row in np.asarray(D):
        w.writerow([repr(float(v)) for v in row])
    Path(path).write_text(buf.getvalue())


def atom_sheet(D: np.ndarray, columns: int | None = None, pad: int = 1) -> np.ndarray:
    """Grey contact sheet of square atoms, each scaled to its own range."""
    D = np.asarray(D, dtype=float)
    P, K = D.shape
    side = int(round(np.sqrt(P)))
    if side * side != P:
        raise ValueError(f"atoms of length {P} are not square")
    columns = columns or int(np.ceil(np.sqrt(K)))
    rows = int(np.ceil(K / columns))
    sheet = np.ones((rows * (side + pad) + pad, columns * (side + pad) + pad))
    for k in range(K):
        a = D[:, k].reshape(side, side)
        span = a.max() - a.min()
        a = (a - a.min()) / span if span > 0 else np.full_like(a, 0.5)
        r, c = divmod(k, columns)
        y, x = pad + r * (side + pad), pad + c * (side + pad)
        sheet[y:y + side, x:x + side] = a
    return sheet


def export_atom_sheet(D: np.ndarray, path, columns: int | None = None) -> None:
    write_pgm(path, atom_sheet(D, columns))
