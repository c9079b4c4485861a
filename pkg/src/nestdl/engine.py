"""Sweep orchestration, joint density, collection and held-out inference."""
from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special
from scipy.cluster.vq import kmeans2

from . import dictionary as dl
from . import tree as tr
from .core import Assignment, Corpus, Hyperparams, InvariantError, ModelState, TopicTree
from .samplers import log_beta_pdf, log_gamma_pdf, make_rng
from .words import gibbs_update_word_dists, log_multinomial_coefficient

log = logging.getLogger(__name__)

TRACE_FIELDS = ("sweep", "log_joint", "score", "n_nodes", "n_paths", "max_depth", "gamma_e", "gamma_s")


class SweepError(RuntimeError):
    def __init__(self, sweep: int, cause: BaseException):
        super().__init__(f"sweep {sweep}: {cause}")
        self.sweep = sweep
        self.cause = cause


@dataclass
class RunConfig:
    total_sweeps: int = 250
    burn_in: int = 150
    stride: int = 1
    seed: int = 0
    branching: tuple = (4, 2, 2, 2)
    dict_init: str = "prior"
    flat: bool = False
    max_depth: int = 8
    kmeans_iters: int = 20
    level_init_iters: int = 10
    init_pi: float = 0.1
    warmup: int = 0
    checkpoint_dir: str | None = None
    hyper: Hyperparams = field(default_factory=Hyperparams)

    def __post_init__(self):
        self.branching = tuple(int(b) for b in self.branching)
        if self.flat:
            self.max_depth = 1
            self.branching = self.branching[:1]
        problems = self.violations()
        if problems:
            raise ValueError("; ".join(problems))

    def violations(self) -> list:
        out = []
        if self.total_sweeps < 1:
            out.append("total_sweeps must be at least 1")
        if not 0 <= self.burn_in < self.total_sweeps:
            out.append(f"burn_in={self.burn_in} must lie in [0, total_sweeps={self.total_sweeps})")
        if self.stride < 1:
            out.append("stride must be at least 1")
        if not self.branching or min(self.branching) < 1:
            out.append("branching must list positive integers")
        if self.max_depth < 1:
            out.append("max_depth must be at least 1")
        elif len(self.branching) > self.max_depth:
            out.append(f"initial tree depth {len(self.branching)} exceeds max_depth={self.max_depth}")
        if self.dict_init not in dl.INIT_POLICIES:
            out.append(f"dict_init must be one of {dl.INIT_POLICIES}")
        if not 0 <= self.warmup <= self.burn_in:
            out.append("warmup must lie in [0, burn_in]")
        if not 0 < self.init_pi < 1:
            out.append("init_pi must lie in (0, 1)")
        return out


@dataclass
class Trace:
    log_joint: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    collected: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    ml_index: int | None = None

    @property
    def ml_sweep(self):
        return None if self.ml_index is None else self.collected[self.ml_index]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
            w.writeheader()
            for row in self.rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


# ---------------------------------------------------------------- initialization

def unit_features(corpus: Corpus) -> np.ndarray:
    """Per-unit vectors used for clustering: raw patches, or rates for count units."""
    X = corpus.X
    if corpus.is_counts:
        return X / np.maximum(corpus.stacked_trials(), 1)[:, None]
    return X


def _kmeans_labels(data: np.ndarray, k: int, iters: int, rng: np.random.Generator) -> np.ndarray:
    k = min(k, data.shape[0])
    if k <= 1:
        return np.zeros(data.shape[0], dtype=np.int64)
    _, labels = kmeans2(data, k, iter=iters, minit="++", seed=rng)
    return labels.astype(np.int64)


def nested_kmeans_tree(features: np.ndarray, branching, hyper: Hyperparams, rng: np.random.Generator,
                       iters: int = 20):
    """Grow a tree by K-means within each parent cluster; returns (tree, leaf chain per image)."""
    tree = TopicTree()
    paths = [[] for _ in range(features.shape[0])]
    groups = [(tree.root, np.arange(features.shape[0]))]
    for k in branching:
        nxt = []
        for parent, members in groups:
            if members.size == 0:
                continue
            labels = _kmeans_labels(features[members], k, iters, rng)
            for c in np.unique(labels):
                nid = tree.add_child(parent, None, hyper.gamma, rng)
                sub = members[labels == c]
                for m in sub:
                    paths[m].append(nid)
                nxt.append((nid, sub))
        groups = nxt
    return tree, paths


def init_levels(corpus: Corpus, paths, feats: np.ndarray, iters: int, rng: np.random.Generator) -> list:
    """Assign each unit to the nearest node centroid along its image's path."""
    off = corpus.offsets
    nodes = sorted({n for p in paths for n in p})
    members = {n: [] for n in nodes}
    for m, p in enumerate(paths):
        for n in p:
            members[n].append(m)
    centroid = {}
    for n in nodes:
        m = members[n][int(rng.integers(len(members[n])))]
        centroid[n] = feats[off[m] + int(rng.integers(max(corpus.N[m], 1)))] if corpus.N[m] else np.zeros(feats.shape[1])
    levels = [np.ones(int(corpus.N[m]), dtype=np.int64) for m in range(corpus.M)]
    for _ in range(iters):
        sums = {n: np.zeros(feats.shape[1]) for n in nodes}
        cnt = {n: 0 for n in nodes}
        for m, p in enumerate(paths):
            F = feats[off[m]:off[m + 1]]
            if F.shape[0] == 0:
                continue
            cents = np.array([centroid[n] for n in p])
            d = ((F[:, None, :] - cents[None]) ** 2).sum(axis=2)
            lv = d.argmin(axis=1)
            levels[m] = lv + 1
            for l in np.unique(lv):
                sums[p[l]] += F[lv == l].sum(axis=0)
                cnt[p[l]] += int((lv == l).sum())
        for n in nodes:
            if cnt[n]:
                centroid[n] = sums[n] / cnt[n]
    return levels


def order_chains_by_load(paths, levels, hyper: Hyperparams, rng: np.random.Generator):
    """Rebuild the tree so every chain lists its nodes from most to least used.

    Widely shared content then sits near the root, where sharing is cheap.
    """
    load = {}
    for p, lv in zip(paths, levels):
        for l, n in enumerate(p):
            load[n] = load.get(n, 0) + int(np.sum(lv == l + 1))
    tree = TopicTree()
    ids = {}
    new_paths, new_levels = [], []
    for p, lv in zip(paths, levels):
        used = [n for l, n in enumerate(p) if np.any(lv == l + 1)] or list(p[:1])
        order = sorted(used, key=lambda n: (-load[n], n))
        chain, parent = [], tree.root
        for depth in range(len(order)):
            key = tuple(order[:depth + 1])
            if key not in ids:
                ids[key] = tree.add_child(parent, None, hyper.gamma, rng)
            parent = ids[key]
            chain.append(parent)
        pos = {n: d + 1 for d, n in enumerate(order)}
        new_levels.append(np.array([pos.get(p[l - 1], 1) for l in lv], dtype=np.int64))
        new_paths.append(chain)
    return tree, new_paths, new_levels


def initialize_state(corpus: Corpus, config: RunConfig, rng: np.random.Generator) -> ModelState:
    hyper = copy.deepcopy(config.hyper)
    counts = corpus.is_counts
    P = corpus.P
    N = int(corpus.N.sum())
    if counts:
        K = P
        hyper.K = K
        D, S = None, None
        Z = corpus.X
    else:
        K = hyper.K
        D = dl.init_dictionary(P, K, config.dict_init, rng)
        Z = np.zeros((N, K))
        S = np.abs(rng.standard_normal((N, K)))

    feats = unit_features(corpus)
    off = corpus.offsets
    image_feats = np.array([
        feats[off[m]:off[m + 1]].mean(axis=0) if corpus.N[m] else np.zeros(P) for m in range(corpus.M)
    ]).reshape(corpus.M, P)
    tree, paths = nested_kmeans_tree(image_feats, config.branching, hyper, rng, config.kmeans_iters)
    levels = init_levels(corpus, paths, feats, config.level_init_iters, rng)
    tree, paths, levels = order_chains_by_load(paths, levels, hyper, rng)

    assign = []
    for m in range(corpus.M):
        L = int(levels[m].max()) if levels[m].size else 1
        assign.append(Assignment(list(paths[m][:L]), levels[m], np.full(L, 0.5)))
    for node in tree.nodes.values():
        if node.id != tree.root:
            node.pi = np.full(K, config.init_pi)

    if counts:
        gamma_e = gamma_s = 1.0
    else:
        var = float(np.var(corpus.X)) if N else 1.0
        gamma_e = 1.0 / (0.1 * var) if var > 0 else 1.0
        gamma_s = 1.0
    state = ModelState(corpus, hyper, D, Z, S, tree, assign, {}, gamma_e, gamma_s, rng,
                       max_depth=config.max_depth, flat=config.flat)
    tr.recount_occupancy(state)
    tr.prune_and_compact(state, rng)
    if counts:
        dl.gibbs_update_all_node_probs(state, rng)
    tr.refresh_level_sticks(state, rng)
    tr.refresh_child_sticks(state, rng)
    gibbs_update_word_dists(state, rng)
    return state


# ---------------------------------------------------------------- sweep

def gibbs_sweep(state: ModelState, rng: np.random.Generator | None = None, grow: bool = True) -> ModelState:
    """One pass over every conditional in a fixed order.

    With ``grow`` off, levels and paths move only among existing nodes.
    """
    rng = state.rng if rng is None else rng
    dl.gibbs_update_codes(state, rng)
    dl.gibbs_update_atoms(state, rng)
    dl.gibbs_update_precisions(state, rng)
    dl.gibbs_update_all_node_probs(state, rng)
    if not state.flat:
        for m in range(state.corpus.M):
            tr.sample_levels(state, m, rng, allow_new=grow)
    for m in range(state.corpus.M):
        tr.sample_path_retrospective(state, m, rng, allow_new=grow)
        if not state.flat:
            tr.sample_path_and_levels(state, m, rng)
    if not state.flat:
        tr.reattach_subtrees(state, rng, allow_new=grow)
    gibbs_update_word_dists(state, rng)
    tr.prune_and_compact(state, rng)
    tr.refresh_level_sticks(state, rng)
    tr.refresh_child_sticks(state, rng)
    if state.hyper.resample_concentrations:
        tr.resample_concentrations(state, rng)
    return state


# ---------------------------------------------------------------- joint density

def binomial_coefficients(state: ModelState) -> float:
    """Sum of log binomial coefficients of the count units (zero for binary units)."""
    cache = state.corpus.cache
    if "log_binom" not in cache:
        C, t = state.Z, state.trials.astype(float)
        cache["log_binom"] = float(np.sum(special.gammaln(t + 1)[:, None] - special.gammaln(C + 1)
                                          - special.gammaln(t[:, None] - C + 1)))
    return cache["log_binom"]


def log_joint_terms(state: ModelState, counts: dict | None = None) -> dict:
    """Every log-density block of the joint, keyed by name; ``counts`` as from ``usage_counts``."""
    h = state.hyper
    tree = state.tree
    terms = {}
    ids = sorted(n for n in tree.nodes if n != tree.root)
    pi = {n: tree[n].pi for n in ids}
    counts = dl.usage_counts(state) if counts is None else counts
    usage = 0.0
    for n, (n1, n0) in counts.items():
        usage += float(n1 @ np.log(pi[n]) + n0 @ np.log1p(-pi[n]))
    if state.counts_mode:
        terms["data"] = binomial_coefficients(state) + usage
    else:
        N, P = state.X.shape
        K = state.K
        R = state.residual()
        terms["data"] = -0.5 * N * P * np.log(2 * np.pi / state.gamma_e) - 0.5 * state.gamma_e * float(np.sum(R * R))
        terms["atoms"] = -0.5 * P * K * np.log(2 * np.pi / P) - 0.5 * P * float(np.sum(state.D ** 2))
        gs = state.gamma_s
        terms["weights"] = N * K * (np.log(2.0) - 0.5 * np.log(2 * np.pi / gs)) - 0.5 * gs * float(np.sum(state.S ** 2))
        terms["indicators"] = usage
        terms["precisions"] = float(log_gamma_pdf(state.gamma_e, h.c0, h.d0) + log_gamma_pdf(state.gamma_s, h.e0, h.f0))
    a, b = h.beta_prior()
    terms["usage_prior"] = float(sum(np.sum(log_beta_pdf(pi[n], a, b)) for n in ids))

    lvl_sticks = 0.0
    lvl = 0.0
    paths = 0.0
    for a_ in state.assign:
        mu = np.asarray(a_.mu)
        open_ = mu[mu < 1.0]
        lvl_sticks += float(np.sum(log_beta_pdf(open_, 1.0, h.alpha)))
        lvl += float(np.sum(np.log(a_.theta[a_.levels - 1])))
        paths += tr.path_prior_logweight(tree, a_.path)
    child = 0.0
    for node in tree.nodes.values():
        nu = node.nu[:-1]
        child += float(np.sum(log_beta_pdf(nu, 1.0, h.gamma)))
    terms["level_sticks"] = lvl_sticks
    terms["child_sticks"] = child
    terms["levels"] = lvl
    terms["paths"] = paths

    wc = state.corpus.word_counts
    if wc is not None:
        conc = h.eta / state.corpus.N_v
        terms["word_prior"] = float(sum(
            special.gammaln(h.eta) - state.corpus.N_v * special.gammaln(conc) + (conc - 1.0) * np.sum(np.log(p))
            for p in state.psi.values()
        ))
        wl = 0.0
        for m in range(state.corpus.M):
            y = wc[m]
            if not y.any():
                continue
            psi = state.psi[state.path_key(m)]
            nz = y > 0
            wl += log_multinomial_coefficient(y) + float(np.dot(y[nz], np.log(psi[nz])))
        terms["words"] = wl
    if h.resample_concentrations:
        terms["concentrations"] = float(log_gamma_pdf(h.alpha, 1.0, 1.0) + log_gamma_pdf(h.gamma, 1.0, 1.0))
    return terms


def collapsed_usage_loglik(state: ModelState, counts: dict | None = None) -> float:
    """log p(usage indicators | node assignments) with every pi integrated out."""
    a, b = state.hyper.beta_prior()
    counts = dl.usage_counts(state) if counts is None else counts
    total = 0.0
    for n1, n0 in counts.values():
        total += float(np.sum(special.betaln(a + n1, b + n0) - special.betaln(a, b)))
    if state.counts_mode:
        total += binomial_coefficients(state)
    return total


def selection_score(state: ModelState, terms: dict | None = None, counts: dict | None = None) -> float:
    """The joint with node usage probabilities integrated out.

    Used to pick the collected state: with a0/K < 1 the explicit pi density
    grows without bound as draws approach zero and would reward node count.
    """
    counts = dl.usage_counts(state) if counts is None else counts
    terms = log_joint_terms(state, counts) if terms is None else terms
    skip = {"usage_prior", "data" if state.counts_mode else "indicators"}
    return float(sum(v for k, v in terms.items() if k not in skip)) + collapsed_usage_loglik(state, counts)


def log_joint(state: ModelState, terms: dict | None = None) -> float:
    terms = log_joint_terms(state) if terms is None else terms
    for name, v in terms.items():
        if np.isnan(v):
            raise InvariantError(f"log joint term {name!r} is NaN")
    total = float(sum(terms.values()))
    if np.isnan(total):
        raise InvariantError("log joint is NaN")
    return total


# ---------------------------------------------------------------- runs

def snapshot(state: ModelState) -> ModelState:
    """Deep copy sharing the (immutable) corpus and, for count units, the usage matrix."""
    memo = {id(state.corpus): state.corpus}
    if state.counts_mode:
        memo[id(state.Z)] = state.Z
    return copy.deepcopy(state, memo)


def trace_row(state: ModelState, sweep: int, lj: float, score: float = float("nan")) -> dict:
    return {
        "sweep": sweep,
        "log_joint": lj,
        "score": score,
        "n_nodes": len(state.tree) - 1,
        "n_paths": len(state.tree.leaves()),
        "max_depth": state.tree.max_depth,
        "gamma_e": float(state.gamma_e),
        "gamma_s": float(state.gamma_s),
    }


def run(corpus: Corpus, config: RunConfig, state: ModelState | None = None, progress=None):
    """Initialise, sweep, collect post-burn-in states; returns (trace, best collected state).

    The best state maximises ``selection_score``.
    """
    rng = make_rng(config.seed) if state is None else state.rng
    if state is None:
        state = initialize_state(corpus, config, rng)
    trace = Trace()
    best, best_score = None, -np.inf
    ckdir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)
    for sweep in range(config.total_sweeps):
        try:
            gibbs_sweep(state, rng, grow=sweep >= config.warmup)
            counts = dl.usage_counts(state)
            terms = log_joint_terms(state, counts)
            lj = log_joint(state, terms)
            score = selection_score(state, terms, counts)
            if not np.isfinite(lj):
                raise InvariantError(f"log joint is {lj}")
        except Exception as exc:
            raise SweepError(sweep, exc) from exc
        trace.log_joint.append(lj)
        trace.rows.append(trace_row(state, sweep, lj, score))
        if progress is not None:
            progress(sweep, lj, state)
        if sweep >= config.burn_in and (sweep - config.burn_in) % config.stride == 0:
            trace.collected.append(sweep)
            if ckdir is not None:
                from .dataio import save_checkpoint

                path = ckdir / f"sample_{sweep:06d}.json"
                save_checkpoint(state, path)
                trace.checkpoints.append(str(path))
            if score > best_score:
                best, best_score = snapshot(state), score
                trace.ml_index = len(trace.collected) - 1
        log.debug("sweep %d log_joint %.3f nodes %d", sweep, lj, len(state.tree) - 1)
    return trace, best


def _place_heldout(tree: TopicTree, rng: np.random.Generator) -> list:
    """A depth-1 node drawn by its stick weight among the existing ones."""
    kids = tree[tree.root].children
    w = tree[tree.root].child_sticks.w[:-1]
    w = w / w.sum() if w.sum() > 0 else np.full(len(kids), 1.0 / len(kids))
    return [kids[min(int(np.searchsorted(np.cumsum(w), rng.random(), side="right")), len(kids) - 1)]]


def infer_heldout(ml_state: ModelState, corpus: Corpus, sweeps: int = 50, burn_in: int | None = None,
                  seed: int = 0) -> list:
    """Node distributions of new images with dictionary, tree, usage and word parameters frozen."""
    if sweeps < 1:
        raise ValueError("held-out inference needs at least one sweep")
    burn_in = sweeps // 2 if burn_in is None else burn_in
    if not 0 <= burn_in < sweeps:
        raise ValueError("burn_in must lie in [0, sweeps)")
    if corpus.M and corpus.P != ml_state.corpus.P:
        raise ValueError(f"held-out vectors have dimension {corpus.P}, model expects {ml_state.corpus.P}")
    if corpus.is_counts != ml_state.counts_mode:
        raise ValueError("held-out corpus kind differs from the training corpus")
    rng = make_rng(seed)
    tree = copy.deepcopy(ml_state.tree)
    for node in tree.nodes.values():
        node.occupancy = 0
    N = int(corpus.N.sum())
    K = ml_state.K
    if corpus.is_counts:
        Z, S, D = corpus.X, None, None
    else:
        D = ml_state.D.copy()
        Z = np.zeros((N, K))
        S = np.abs(rng.standard_normal((N, K))) / np.sqrt(ml_state.gamma_s)
    assign = [Assignment(_place_heldout(tree, rng), np.ones(int(n), dtype=np.int64), np.array([0.5]))
              for n in corpus.N]
    state = ModelState(corpus, copy.deepcopy(ml_state.hyper), D, Z, S, tree, assign,
                       copy.deepcopy(ml_state.psi), ml_state.gamma_e, ml_state.gamma_s, rng,
                       max_depth=ml_state.max_depth, flat=ml_state.flat, frozen=True)
    tr.recount_occupancy(state)
    tr.refresh_level_sticks(state, rng)
    acc = [dict() for _ in range(corpus.M)]
    kept = 0
    for sweep in range(sweeps):
        dl.gibbs_update_codes(state, rng)
        for m in range(corpus.M):
            if not state.flat:
                tr.sample_levels(state, m, rng, allow_new=False)
            tr.sample_path_retrospective(state, m, rng, allow_new=False)
        tr.refresh_level_sticks(state, rng)
        if sweep >= burn_in:
            kept += 1
            for m in range(corpus.M):
                for n, p in tr.node_distribution(state, m).items():
                    acc[m][n] = acc[m].get(n, 0.0) + p
    return [{n: v / kept for n, v in d.items()} for d in acc]
