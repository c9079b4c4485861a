"""Exact targets by enumeration for micro-instances, and the samplers run against them.

Each ``*_target`` returns {state key: probability}; each ``*_chain`` returns
a Counter of the same keys visited by the sampler.
"""
from __future__ import annotations

import collections
import itertools

import numpy as np
from scipy import special, stats

from nestdl import core, engine, tree as tr
from nestdl import dictionary as dl
from nestdl.samplers import make_rng


def normalise(logw: dict) -> dict:
    keys = list(logw)
    v = np.array([logw[k] for k in keys])
    return dict(zip(keys, np.exp(v - special.logsumexp(v))))


def total_variation(counts: collections.Counter, target: dict) -> float:
    n = sum(counts.values())
    keys = set(target) | set(counts)
    return 0.5 * sum(abs(counts.get(k, 0) / n - target.get(k, 0.0)) for k in keys)


def collapsed_usage(groups, a: float, b: float) -> float:
    """log p(binary units grouped by node) with each node's pi integrated against Beta(a, b)."""
    out = 0.0
    for G in groups:
        if len(G) == 0:
            continue
        G = np.asarray(G, dtype=float)
        n1 = G.sum(axis=0)
        out += float(np.sum(special.betaln(a + n1, b + len(G) - n1) - special.betaln(a, b)))
    return out


def level_prior(levels, alpha: float, max_depth: int) -> float:
    """log p(levels) with the level sticks integrated; the stick at max_depth is closed."""
    L = max(levels)
    n = [list(levels).count(l) for l in range(1, max_depth + 1)]
    above = len(levels)
    out = 0.0
    for l in range(L):
        above -= n[l]
        if l == max_depth - 1:
            continue
        out += special.betaln(1 + n[l], alpha + above) - special.betaln(1, alpha)
    return out


# ---------------------------------------------------------------- codes z

def code_state(x, D, pi, gamma_e: float, gamma_s: float, seed: int = 0):
    """One image, one node at depth 1 holding ``pi``; patches ``x`` coded over ``D``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    K = D.shape[1]
    corpus = core.Corpus([x])
    rng = make_rng(seed)
    tree = core.TopicTree()
    nid = tree.add_child(tree.root, np.asarray(pi, dtype=float), 1.0, rng)
    assign = [core.Assignment([nid], np.ones(x.shape[0], dtype=np.int64), np.array([1.0]))]
    st = core.ModelState(corpus, core.Hyperparams(K=K), np.array(D, dtype=float), np.zeros((x.shape[0], K)),
                         np.ones((x.shape[0], K)), tree, assign, {}, gamma_e, gamma_s, rng, max_depth=1)
    tr.recount_occupancy(st)
    return st


def code_target(x, D, pi, gamma_e: float, gamma_s: float, smax: float = 8.0, step: float = 0.004) -> dict:
    """p(z | x) for one patch, the positive weights integrated on a midpoint grid."""
    x = np.asarray(x, dtype=float)
    K = D.shape[1]
    grid = np.arange(step / 2, smax, step)
    half = np.log(2.0) + stats.norm.logpdf(grid, scale=1.0 / np.sqrt(gamma_s))
    sd_e = 1.0 / np.sqrt(gamma_e)
    out = {}
    for z in itertools.product((0, 1), repeat=K):
        z = np.array(z)
        lp = float(np.sum(z * np.log(pi) + (1 - z) * np.log1p(-np.asarray(pi))))
        act = np.flatnonzero(z)
        if act.size == 0:
            lik = float(np.sum(stats.norm.logpdf(x, scale=sd_e)))
        else:
            mesh = np.meshgrid(*([grid] * act.size), indexing="ij")
            S = np.stack([m.reshape(-1) for m in mesh], axis=1)
            prior = sum(np.meshgrid(*([half] * act.size), indexing="ij")).reshape(-1)
            mean = S @ D[:, act].T
            ll = stats.norm.logpdf(x[None, :], loc=mean, scale=sd_e).sum(axis=1)
            lik = float(special.logsumexp(prior + ll) + act.size * np.log(step))
        out[tuple(int(v) for v in z)] = lp + lik
    return normalise(out)


def code_chain(state, n: int) -> collections.Counter:
    cnt = collections.Counter()
    for _ in range(n):
        dl.gibbs_update_codes(state, state.rng)
        cnt[tuple(int(v) for v in state.Z[0])] += 1
    return cnt


# ---------------------------------------------------------------- levels of one image

def level_target(U, max_depth: int, hyper: core.Hyperparams) -> dict:
    """Levels of one image's binary units, pi integrated, path unconstrained."""
    a, b = hyper.beta_prior()
    out = {}
    n = len(U)
    for lv in itertools.product(range(1, max_depth + 1), repeat=n):
        groups = [[U[i] for i in range(n) if lv[i] == l] for l in range(1, max_depth + 1)]
        out[lv] = level_prior(lv, hyper.alpha, max_depth) + collapsed_usage(groups, a, b)
    return normalise(out)


def level_chain(U, max_depth: int, hyper: core.Hyperparams, n: int, seed: int = 3) -> collections.Counter:
    U = np.asarray(U, dtype=float)
    corpus = core.Corpus([U], trials=[np.ones(len(U))])
    rng = make_rng(seed)
    cfg = engine.RunConfig(total_sweeps=2, burn_in=1, branching=(1,), max_depth=max_depth, seed=seed, hyper=hyper)
    st = engine.initialize_state(corpus, cfg, rng)
    cnt = collections.Counter()
    for _ in range(n):
        dl.gibbs_update_all_node_probs(st, rng)
        tr.sample_levels(st, 0, rng)
        tr.prune_and_compact(st, rng)
        tr.refresh_level_sticks(st, rng)
        tr.refresh_child_sticks(st, rng)
        cnt[tuple(int(v) for v in st.assign[0].levels)] += 1
    return cnt


# ---------------------------------------------------------------- path on a frozen two-path tree

def frozen_tree(pis: dict, nu_root: float, nu_mid: float, rng):
    """root -> 1 -> {2, 3} with fixed usage vectors and child sticks."""
    tree = core.TopicTree()
    n1 = tree.add_child(tree.root, pis[1], 1.0, rng)
    n2 = tree.add_child(n1, pis[2], 1.0, rng)
    n3 = tree.add_child(n1, pis[3], 1.0, rng)
    tree[tree.root].nu = np.array([nu_root, 1.0])
    tree[n1].nu = np.array([nu_mid, 1.0, 1.0])
    return tree, (n1, n2, n3)


def frozen_path_target(U, pis: dict, nu_mid: float, alpha: float) -> dict:
    """(levels, path) of one image; children weighted by their sticks over existing children."""
    w2 = nu_mid
    w3 = (1 - nu_mid)
    logw_child = {2: np.log(w2 / (w2 + w3)), 3: np.log(w3 / (w2 + w3))}
    out = {}
    n = len(U)
    for lv in itertools.product((1, 2), repeat=n):
        base = level_prior(lv, alpha, 2)
        if max(lv) == 1:
            paths = [((1,), 0.0)]
        else:
            paths = [((1, c), logw_child[c]) for c in (2, 3)]
        for path, lw in paths:
            ll = 0.0
            for i, l in enumerate(lv):
                pi = pis[path[l - 1]]
                ll += float(np.sum(U[i] * np.log(pi) + (1 - U[i]) * np.log1p(-pi)))
            out[(lv, path)] = base + lw + ll
    return normalise(out)


def frozen_path_chain(U, pis: dict, nu_root: float, nu_mid: float, n: int, seed: int = 5) -> collections.Counter:
    U = np.asarray(U, dtype=float)
    corpus = core.Corpus([U], trials=[np.ones(len(U))])
    rng = make_rng(seed)
    tree, ids = frozen_tree(pis, nu_root, nu_mid, rng)
    label = dict(zip(ids, (1, 2, 3)))
    assign = [core.Assignment([ids[0]], np.ones(len(U), dtype=np.int64), np.array([0.5]))]
    st = core.ModelState(corpus, core.Hyperparams(K=U.shape[1]), None, corpus.X, None, tree, assign, {}, 1.0, 1.0,
                         rng, max_depth=2, frozen=True)
    tr.recount_occupancy(st)
    cnt = collections.Counter()
    for _ in range(n):
        tr.sample_levels(st, 0, rng, allow_new=False)
        tr.refresh_level_sticks(st, rng)
        tr.sample_path_retrospective(st, 0, rng, allow_new=False)
        tr.refresh_level_sticks(st, rng)
        a = st.assign[0]
        cnt[(tuple(int(v) for v in a.levels), tuple(label[p] for p in a.path))] += 1
    return cnt


# ---------------------------------------------------------------- two images, full sweep

TWO_IMAGES = [np.array([[1, 0], [1, 1]]), np.array([[0, 1], [0, 1]])]


def two_image_target(hyper: core.Hyperparams, depth: int = 2) -> dict:
    """Levels and path sharing of two images, everything continuous integrated.

    Key: (levels of image 0, levels of image 1, number of leading path nodes shared).
    """
    a, b = hyper.beta_prior()
    g, al = hyper.gamma, hyper.alpha
    out = {}
    for lv0 in itertools.product(range(1, depth + 1), repeat=2):
        for lv1 in itertools.product(range(1, depth + 1), repeat=2):
            lvs = (lv0, lv1)
            reach = min(max(lv0), max(lv1))
            for shared in range(reach + 1):
                # the second image follows the first for ``shared`` steps, then branches off
                lw = shared * np.log(1 / (1 + g)) + (np.log(g / (1 + g)) if shared < reach else 0.0)
                lw += level_prior(lv0, al, depth) + level_prior(lv1, al, depth)
                nodes = collections.defaultdict(list)
                for m in range(2):
                    for i, l in enumerate(lvs[m]):
                        nodes[(l,) if l <= shared else (l, m)].append(TWO_IMAGES[m][i])
                lw += collapsed_usage(nodes.values(), a, b)
                out[(lv0, lv1, shared)] = lw
    return normalise(out)


def two_image_key(st) -> tuple:
    p0, p1 = st.assign[0].path, st.assign[1].path
    shared = 0
    while shared < min(len(p0), len(p1)) and p0[shared] == p1[shared]:
        shared += 1
    return tuple(int(v) for v in st.assign[0].levels), tuple(int(v) for v in st.assign[1].levels), shared


def two_image_chain(hyper: core.Hyperparams, n: int, seed: int = 1, depth: int = 2) -> collections.Counter:
    corpus = core.Corpus(TWO_IMAGES, trials=[np.ones(2), np.ones(2)])
    rng = make_rng(seed)
    cfg = engine.RunConfig(total_sweeps=2, burn_in=1, branching=(1,), max_depth=depth, seed=seed, hyper=hyper)
    st = engine.initialize_state(corpus, cfg, rng)
    cnt = collections.Counter()
    for _ in range(n):
        engine.gibbs_sweep(st, rng)
        cnt[two_image_key(st)] += 1
    return cnt
