"""Synthetic corpora with known trees, and scoring of recovered trees against them."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .core import Corpus, ModelState
from .dictionary import usage_counts
from .samplers import make_rng, sample_truncated_normal_positive, stick_break_truncated

ALLOWED_PROBS = (0.0, 0.1, 0.5)


@dataclass
class GroundTruthTree:
    """Nodes keyed by id; ``parent`` 0 is the (probability-free) root."""

    parent: dict
    probs: dict
    paths: list = field(default_factory=list)

    def __post_init__(self):
        self.parent = {int(k): int(v) for k, v in self.parent.items()}
        self.probs = {int(k): np.asarray(v, dtype=float) for k, v in self.probs.items()}
        if set(self.parent) != set(self.probs):
            raise ValueError("every node needs a parent and a probability vector")
        dims = {p.size for p in self.probs.values()}
        if len(dims) != 1:
            raise ValueError("probability vectors disagree in length")
        if not self.paths:
            self.paths = [self.chain(n) for n in self.leaves()]
        self.paths = [[int(n) for n in p] for p in self.paths]

    @property
    def P(self) -> int:
        return next(iter(self.probs.values())).size

    def depth(self, node: int) -> int:
        return len(self.chain(node))

    def chain(self, node: int) -> list:
        out = []
        while node != 0:
            out.append(node)
            node = self.parent[node]
        return out[::-1]

    def leaves(self) -> list:
        inner = set(self.parent.values())
        return sorted(n for n in self.parent if n not in inner)

    def violations(self) -> list:
        out = []
        for n, p in self.probs.items():
            bad = ~np.isin(p, ALLOWED_PROBS)
            if bad.any():
                out.append(f"node {n}: probabilities outside {ALLOWED_PROBS}")
        for n, par in self.parent.items():
            if par != 0 and par not in self.parent:
                out.append(f"node {n}: unknown parent {par}")
        return out

    def to_json(self) -> dict:
        return {
            "nodes": [
                {"id": n, "parent": self.parent[n], "probs": self.probs[n].tolist()}
                for n in sorted(self.parent)
            ],
            "paths": self.paths,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "GroundTruthTree":
        nodes = doc["nodes"]
        return cls({d["id"]: d["parent"] for d in nodes}, {d["id"]: d["probs"] for d in nodes}, doc.get("paths", []))


def default_truth() -> GroundTruthTree:
    """Four paths of depths 4, 2, 3 and 3 over a 25-symbol alphabet."""
    text = resources.files("nestdl").joinpath("data/alphabet_truth.json").read_text()
    return GroundTruthTree.from_json(json.loads(text))


def generate_alphabet_corpus(truth: GroundTruthTree, n_images: int = 100, draws_per_image: int = 1000,
                             seed: int = 0, alpha: float = 1.0):
    """Per image: a uniform path, level weights, then one binary symbol draw per node selection.

    Returns the corpus of per-draw count units and a dict with the true
    ``paths``, ``levels`` and per-image symbol ``counts``.
    """
    rng = make_rng(seed)
    units, trials, paths, levels = [], [], [], []
    counts = np.zeros((n_images, truth.P), dtype=np.int64)
    for m in range(n_images):
        path = truth.paths[int(rng.integers(len(truth.paths)))]
        theta = stick_break_truncated(alpha, len(path), rng).w
        lv = rng.choice(len(path), size=draws_per_image, p=theta)
        probs = np.array([truth.probs[n] for n in path])[lv]
        draws = (rng.random(probs.shape) < probs).astype(float)
        units.append(draws)
        trials.append(np.ones(draws_per_image, dtype=np.int64))
        paths.append(list(path))
        levels.append(lv + 1)
        counts[m] = draws.sum(axis=0)
    corpus = Corpus(units, trials=trials)
    return corpus, {"paths": paths, "levels": levels, "counts": counts}


# ---------------------------------------------------------------- scoring

def posterior_mean_usage(state: ModelState) -> dict:
    """node id -> (a + n1) / (a + b + n) under the current assignments."""
    a, b = state.hyper.beta_prior()
    out = {}
    counts = usage_counts(state)
    for nid in state.tree.nodes:
        if nid == state.tree.root:
            continue
        n1, n0 = counts.get(nid, (np.zeros(state.K), np.zeros(state.K)))
        out[nid] = (a + n1) / (a + b + n1 + n0)
    return out


def recovered_paths(state: ModelState) -> list:
    return [state.tree.chain(leaf) for leaf in sorted(state.tree.leaves())]


def score_tree_recovery(state: ModelState, truth: GroundTruthTree):
    """(topology_match, pi_error) under the best alignment of recovered to true paths.

    An alignment pairs paths one to one and maps nodes depth by depth; it must
    map nodes consistently where paths share prefixes.  pi_error is the largest
    absolute deviation of posterior-mean usage over matched nodes.
    """
    rec = recovered_paths(state)
    n_rec = len(rec)
    true = truth.paths
    pi_hat = posterior_mean_usage(state)
    if len(rec) > 8:
        # only the busiest leaves can take part in an alignment
        load = {p[-1]: 0 for p in rec}
        for a in state.assign:
            if a.path[-1] in load:
                load[a.path[-1]] += 1
        rec = sorted(rec, key=lambda p: -load[p[-1]])[:8]
    best = (False, np.inf)
    n = min(len(rec), len(true))
    for true_sel in itertools.permutations(range(len(true)), n):
        for rec_sel in itertools.combinations(range(len(rec)), n):
            mapping, consistent, depths_ok = {}, True, True
            for ri, ti in zip(rec_sel, true_sel):
                rp, tp = rec[ri], true[ti]
                depths_ok &= len(rp) == len(tp)
                for r_node, t_node in zip(rp, tp):
                    if mapping.setdefault(r_node, t_node) != t_node:
                        consistent = False
            if len(set(mapping.values())) != len(mapping):
                consistent = False
            err = max((float(np.max(np.abs(pi_hat[r] - truth.probs[t]))) for r, t in mapping.items()), default=np.inf)
            match = consistent and depths_ok and n_rec == len(true)
            if (match, -err) > (best[0], -best[1]):
                best = (match, err)
    return bool(best[0]), float(best[1])


# ---------------------------------------------------------------- planted patch corpora

@dataclass
class PlantedModel:
    """Dictionary, node usage vectors and paths from which patches are drawn."""

    D: np.ndarray
    pi: dict
    paths: list
    gamma_s: float = 1.0
    alpha: float = 1.0


def planted_hierarchy(P: int = 64, K: int = 64, branching=(2, 2, 2), atoms_per_node: int = 3,
                      usage: float = 0.8, seed: int = 0) -> PlantedModel:
    """A tree whose every node switches on its own small set of atoms.

    Patches at a node use those atoms with probability ``usage`` and every
    other atom with a small leak probability.
    """
    rng = make_rng(seed)
    D = rng.normal(0.0, 1.0 / np.sqrt(P), size=(P, K))
    pi, paths = {}, []
    next_atom = 0
    nid = 0
    frontier = [(0, [])]
    for k in branching:
        nxt = []
        for _, chain in frontier:
            for _ in range(k):
                nid += 1
                p = np.full(K, 0.01)
                idx = np.arange(next_atom, next_atom + atoms_per_node) % K
                next_atom += atoms_per_node
                p[idx] = usage
                pi[nid] = p
                nxt.append((nid, chain + [nid]))
        frontier = nxt
    paths = [chain for _, chain in frontier]
    return PlantedModel(D, pi, paths)


def generate_patch_corpus(model: PlantedModel, n_images: int = 100, patches_per_image: int = 20,
                          noise: float = 0.01, seed: int = 0, z_override=None):
    """Draw patches x = D(z * s) + e with e ~ N(0, noise I).

    Returns the corpus and a dict with planted ``Z``, ``S``, ``clean``
    reconstructions, ``paths`` and ``levels``.
    """
    if noise < 0:
        raise ValueError("noise variance must be nonnegative")
    rng = make_rng(seed)
    P, K = model.D.shape
    patches, Zs, Ss, clean, paths, levels = [], [], [], [], [], []
    for _ in range(n_images):
        path = model.paths[int(rng.integers(len(model.paths)))]
        theta = stick_break_truncated(model.alpha, len(path), rng).w
        lv = rng.choice(len(path), size=patches_per_image, p=theta)
        probs = np.array([model.pi[n] for n in path])[lv]
        z = (rng.random(probs.shape) < probs).astype(float)
        if z_override is not None:
            z = np.broadcast_to(np.asarray(z_override, dtype=float), z.shape).copy()
        s = sample_truncated_normal_positive(np.zeros(z.shape), np.full(z.shape, 1.0 / model.gamma_s), rng)
        x0 = (z * s) @ model.D.T
        x = x0 + (rng.normal(0.0, np.sqrt(noise), size=x0.shape) if noise > 0 else 0.0)
        patches.append(x)
        Zs.append(z)
        Ss.append(s)
        clean.append(x0)
        paths.append(list(path))
        levels.append(lv + 1)
    info = {"Z": np.vstack(Zs), "S": np.vstack(Ss), "clean": np.vstack(clean), "paths": paths, "levels": levels}
    return Corpus(patches), info
