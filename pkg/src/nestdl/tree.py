"""Tree maintenance and the retrospective level and path samplers."""
from __future__ import annotations

import itertools
import math
from collections import Counter

import numpy as np
from scipy import special

from . import _kernels
from .core import Assignment, ModelState, StructuralError, TopicTree
from .samplers import sample_dirichlet, sample_gamma, sample_probability
from .words import word_loglik


# ---------------------------------------------------------------- path prior

def path_prior_logweight(tree: TopicTree, path) -> float:
    """log of the product of child-stick weights along ``path``."""
    path = list(path)
    if not path:
        raise StructuralError("empty path")
    out = 0.0
    parent = tree.root
    for depth, nid in enumerate(path, start=1):
        node = tree.nodes.get(nid)
        if node is None or node.parent != parent or node.depth != depth:
            raise StructuralError(f"node {nid} is not a child of {parent} at depth {depth}")
        out += tree.child_log_weight(parent, nid)
        parent = nid
    return out


def path_prior_weight(tree: TopicTree, path) -> float:
    return float(np.exp(path_prior_logweight(tree, path)))


# ---------------------------------------------------------------- likelihood pieces

def collapsed_unit_loglik(C: np.ndarray, trials: np.ndarray, a: float, b: float) -> np.ndarray:
    """log p(unit) per row with the usage vector integrated over Beta(a, b)."""
    C = np.asarray(C, dtype=float)
    t = np.asarray(trials, dtype=float)[:, None]
    return np.sum(special.betaln(a + C, b + t - C) - special.betaln(a, b), axis=1)


def collapsed_block_loglik(n1: np.ndarray, nt: float, a: float, b: float) -> float:
    """log marginal of pooled counts ``n1`` out of ``nt`` trials per atom under Beta(a, b)."""
    if nt == 0:
        return 0.0
    return float(np.sum(special.betaln(a + n1, b + nt - n1) - special.betaln(a, b)))


def _node_unit_loglik(C, trials, pi) -> np.ndarray:
    pi = np.asarray(pi, dtype=float)
    return C @ np.log(pi) + (trials[:, None] - C) @ np.log1p(-pi)


def _nodes_unit_loglik(C, trials, tree: TopicTree, nodes) -> np.ndarray:
    """(n, len(nodes)) log-likelihoods of every unit at every listed node."""
    if not len(nodes):
        return np.zeros((C.shape[0], 0))
    logs = [tree[n].log_pi for n in nodes]
    lp = np.array([g[0] for g in logs])
    lq = np.array([g[1] for g in logs])
    return C @ (lp - lq).T + np.outer(trials, lq.sum(axis=1))


def _unit_block(state: ModelState, m: int):
    """Float copies of image ``m``'s usage rows and trials."""
    rows = state.rows(m)
    return np.ascontiguousarray(state.Z[rows], dtype=float), np.ascontiguousarray(state.trials[rows], dtype=float)


def _collapsed_base(state: ModelState) -> np.ndarray:
    """Prior-predictive log mass of every unit under a node with no data, cached per corpus."""
    a, b = state.hyper.beta_prior()
    cache = state.corpus.cache if state.counts_mode else None
    if cache is not None and cache.get("base_ab") == (a, b):
        return cache["base"]
    base = collapsed_unit_loglik(state.Z, state.trials, a, b)
    if cache is not None:
        cache["base_ab"], cache["base"] = (a, b), base
    return base


def level_stats(state: ModelState, m: int):
    """Per-level usage sums of image ``m``: (n1 (L, K), trials (L,))."""
    a = state.assign[m]
    C, t = _unit_block(state, m)
    E = np.zeros((a.L, C.shape[0]))
    E[a.levels - 1, np.arange(C.shape[0])] = 1.0
    return E @ C, E @ t


# ---------------------------------------------------------------- child weights

def traffic_excluding(state: ModelState, m: int | None = None) -> dict:
    """node id -> number of images other than ``m`` whose path passes through it."""
    out = path_traffic(state)
    if m is not None:
        for nid in state.assign[m].path:
            out[nid] -= 1
    return out


def child_log_weights(state: ModelState, u: int, traffic: dict | None):
    """(log weight per child of ``u``, log weight of a new child).

    With ``traffic`` these are nested-CRP predictive weights, children nobody
    else passes getting -inf.  Without it (frozen tree) the child sticks are
    renormalised over the existing children and no new child is possible.
    """
    node = state.tree[u]
    if traffic is None:
        if not node.children:
            return [], -math.inf
        lw = node.child_sticks.log_w[:-1]
        m = lw.max()
        return lw - (m + math.log(np.exp(lw - m).sum())), -math.inf
    n = [traffic.get(c, 0) for c in node.children]
    log_tot = math.log(sum(n) + state.hyper.gamma)
    lw = [math.log(k) - log_tot if k > 0 else -math.inf for k in n]
    return lw, math.log(state.hyper.gamma) - log_tot


def _draw_index(logw, rng: np.random.Generator) -> int:
    """Index drawn with probability proportional to exp(logw)."""
    logw = np.asarray(logw, dtype=float)
    cdf = np.cumsum(np.exp(logw - logw.max()))
    return min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), logw.size - 1)


# ---------------------------------------------------------------- levels

def virtual_extension(state: ModelState, path, depth_cap: int, rng: np.random.Generator, allow_new: bool = True,
                      traffic: dict | None = None) -> list:
    """Continue ``path`` downward to ``depth_cap``; ``None`` marks a node not yet created.

    Children are drawn from ``child_log_weights``, the new-child weight giving
    a new node.  With ``allow_new`` off only existing children are used and
    the extension stops where none is reachable.
    """
    tree = state.tree
    out = []
    node = tree[path[-1]]
    depth = len(path)
    while depth < depth_cap:
        if node is None:
            out.append(None)
        else:
            lw, lnew = child_log_weights(state, node.id, traffic)
            logw = np.append(lw, lnew if allow_new else -np.inf)
            if not np.isfinite(logw).any():
                break
            idx = _draw_index(logw, rng)
            if idx < len(node.children):
                nid = node.children[idx]
                out.append(nid)
                node = tree[nid]
            else:
                out.append(None)
                node = None
        depth += 1
    return out


def acceptance_probability(mu, lik, current: int, proposal: int, L: int, L_new: int) -> float:
    """kappa for moving a patch from level ``current`` to ``proposal`` (both 1-based).

    ``mu`` are level-stick proportions and ``lik[l]`` the likelihood of the
    patch at level l + 1, both covering every level up to ``proposal``.
    """
    mu = np.asarray(mu, dtype=float)
    with np.errstate(divide="ignore"):
        ll = np.log(np.asarray(lik, dtype=float))
        log_rem = np.cumsum(np.log1p(-mu))
        log_theta = np.log(mu) + np.concatenate(([0.0], log_rem[:-1]))
    return float(np.exp(_kernels.log_acceptance(log_theta, log_rem, ll, current - 1, proposal - 1, L, L_new)))


def _resize_mu(a: Assignment, alpha: float, max_depth: int, rng: np.random.Generator):
    mu = np.asarray(a.mu, dtype=float)[: a.L]
    if mu.size < a.L:
        mu = np.concatenate((mu, rng.beta(1.0, alpha, size=a.L - mu.size)))
    if a.L == max_depth:
        mu[-1] = 1.0
    elif mu[-1] == 1.0:
        mu[-1] = rng.beta(1.0, alpha)
    a.mu = mu


def _set_occupancy(state: ModelState, path, levels, sign: int):
    cnt = np.bincount(levels)
    for l in np.flatnonzero(cnt):
        state.tree[path[l - 1]].occupancy += sign * int(cnt[l])


def sample_levels(state: ModelState, m: int, rng: np.random.Generator, allow_new: bool = True,
                  order=None) -> np.ndarray:
    """One retrospective pass over the patches of image ``m``; returns the acceptance probabilities."""
    a = state.assign[m]
    tree, hyper = state.tree, state.hyper
    rows = state.rows(m)
    C, t = _unit_block(state, m)
    n = C.shape[0]
    order = np.arange(n, dtype=np.int64) if order is None else np.asarray(order, dtype=np.int64)
    if n == 0 or order.size == 0:
        return np.zeros(0)

    traffic = None if state.frozen else traffic_excluding(state, m)
    ext = virtual_extension(state, a.path, state.max_depth, rng, allow_new, traffic)
    full = list(a.path) + ext
    Dv = len(full)
    pa, pb = hyper.beta_prior()
    own = np.bincount(a.levels, minlength=Dv + 1)[1:]
    # nodes holding no other image's patches are collapsed: their pi only reflects this image
    fresh = np.array([nid is None or (not state.frozen and tree[nid].occupancy == own[l])
                      for l, nid in enumerate(full)], dtype=np.bool_)
    ll = np.empty((n, Dv))
    explicit = np.flatnonzero(~fresh)
    ll[:, explicit] = _nodes_unit_loglik(C, t, tree, [full[l] for l in explicit])
    if fresh.any():
        base = _collapsed_base(state)[rows] if state.counts_mode else collapsed_unit_loglik(C, t, pa, pb)
        ll[:, fresh] = base[:, None]

    old_levels = a.levels.copy()
    levels = a.levels.astype(np.int64).copy()
    kappas = np.zeros(order.size)
    L_new = _kernels.level_pass(ll, levels, order, a.L, hyper.alpha, rng, kappas, C, t, fresh, pa, pb)

    _set_occupancy(state, a.path, old_levels, -1)
    for l in range(Dv):
        if not fresh[l] or (full[l] is None and l >= L_new):
            continue
        sel = levels == l + 1
        n1 = C[sel].sum(axis=0)
        pi = sample_probability(pa + n1, pb + t[sel].sum() - n1, rng)
        if full[l] is None:
            full[l] = tree.add_child(full[l - 1] if l else tree.root, pi, hyper.gamma, rng)
        else:
            tree[full[l]].pi = pi
    path = full[:L_new]
    a.path = path
    a.levels = levels
    _set_occupancy(state, a.path, levels, +1)
    _resize_mu(a, hyper.alpha, state.max_depth, rng)
    return kappas


def sample_level_retrospective(state: ModelState, m: int, i: int, rng: np.random.Generator,
                               allow_new: bool = True):
    """Single-patch level update; returns (new level, L_m)."""
    sample_levels(state, m, rng, allow_new=allow_new, order=[i])
    a = state.assign[m]
    return int(a.levels[i]), a.L


# ---------------------------------------------------------------- paths

def _word_term(state: ModelState, key, y) -> float:
    psi = state.psi.get(key)
    if psi is not None:
        return word_loglik(y, psi, coefficient=False)
    return word_loglik(y, eta=state.hyper.eta, coefficient=False)


def _own_counts(state: ModelState, m: int) -> dict:
    """node -> number of image ``m``'s patches at it."""
    a = state.assign[m]
    cnt = np.bincount(a.levels)
    return {a.path[l - 1]: int(cnt[l]) for l in np.flatnonzero(cnt)}


def _is_private(state: ModelState, nid: int, own: dict) -> bool:
    return not state.frozen and state.tree[nid].occupancy == own.get(nid, 0)


def _redraw_private(state: ModelState, m: int, rng: np.random.Generator) -> None:
    """Fresh pi for nodes on image ``m``'s path that no other image populates."""
    a = state.assign[m]
    own = _own_counts(state, m)
    pa, pb = state.hyper.beta_prior()
    n1, nt = level_stats(state, m)
    for d, nid in enumerate(a.path):
        if _is_private(state, nid, own):
            state.tree[nid].pi = sample_probability(pa + n1[d], pb + nt[d] - n1[d], rng)


def path_candidates(state: ModelState, m: int, allow_new: bool = True):
    """Candidate paths of image ``m`` with their unnormalised log probabilities.

    Returns a list of (anchor node, number of new nodes) and a matching array;
    a candidate is the chain to the anchor followed by that many new nodes.
    """
    a = state.assign[m]
    tree, hyper = state.tree, state.hyper
    L = a.L
    n1, nt = level_stats(state, m)
    pa, pb = hyper.beta_prior()
    y = None
    if state.corpus.word_counts is not None and state.corpus.word_counts[m].any():
        y = state.corpus.word_counts[m]

    # collapsed likelihood of the levels strictly below each depth
    tail = np.zeros(L + 1)
    for d in range(L - 1, -1, -1):
        tail[d] = tail[d + 1] + collapsed_block_loglik(n1[d], nt[d], pa, pb)
    new_words = word_loglik(y, eta=hyper.eta, coefficient=False) if y is not None else 0.0

    own = _own_counts(state, m)
    traffic = None if state.frozen else traffic_excluding(state, m)
    cands, scores = [], []
    score = {tree.root: 0.0}
    frontier = [tree.root]
    for depth in range(0, L + 1):
        nxt = []
        for u in frontier:
            node = tree[u]
            if depth == L:
                key = tuple(tree.chain(u))
                cands.append((u, 0))
                scores.append(score[u] + (_word_term(state, key, y) if y is not None else 0.0))
                continue
            lw, lnew = child_log_weights(state, u, traffic)
            if allow_new:
                cands.append((u, L - depth))
                scores.append(score[u] + lnew + tail[depth] + new_words)
            for idx, c in enumerate(node.children):
                if lw[idx] == -np.inf:
                    continue
                if _is_private(state, c, own):
                    fit = collapsed_block_loglik(n1[depth], nt[depth], pa, pb)
                else:
                    lp, lq = tree[c].log_pi
                    fit = float(n1[depth] @ lp) + float((nt[depth] - n1[depth]) @ lq)
                score[c] = score[u] + lw[idx] + fit
                nxt.append(c)
        frontier = nxt
    return cands, np.array(scores)


def sample_path_retrospective(state: ModelState, m: int, rng: np.random.Generator,
                              allow_new: bool = True) -> list:
    """Gibbs draw of the path of image ``m`` given its patch levels."""
    a = state.assign[m]
    tree, hyper = state.tree, state.hyper
    cands, scores = path_candidates(state, m, allow_new)
    anchor, n_new = cands[_draw_index(scores, rng)]

    path = [] if anchor == tree.root else tree.chain(anchor)
    if path == list(a.path):
        _redraw_private(state, m, rng)
        return path
    if n_new:
        traffic = path_traffic(state)
        for d in range(a.L - n_new, a.L):
            parent = path[-1] if path else tree.root
            cur = a.path[d]
            if tree[cur].parent == parent and traffic[cur] == 1:
                # the image's own branch: reuse its nodes instead of cloning them
                path.append(cur)
            else:
                path.append(tree.add_child(parent, np.full(state.K, 0.5), hyper.gamma, rng))
        if path == list(a.path):
            _redraw_private(state, m, rng)
            return path
    _set_occupancy(state, a.path, a.levels, -1)
    a.path = path
    _set_occupancy(state, a.path, a.levels, +1)
    _redraw_private(state, m, rng)
    wc = state.corpus.word_counts
    key = tuple(path)
    if wc is not None and key not in state.psi:
        state.psi[key] = sample_dirichlet(hyper.eta / state.corpus.N_v + wc[m], rng)
    return path


def _log_level_weights(a: Assignment, alpha: float, depth: int, rng: np.random.Generator) -> np.ndarray:
    """log theta over ``depth`` levels: current sticks, prior draws beyond them, closed at ``depth``."""
    mu = np.asarray(a.mu, dtype=float)[:depth]
    if mu.size < depth:
        mu = np.concatenate((mu, rng.beta(1.0, alpha, size=depth - mu.size)))
    mu = mu.copy()
    mu[-1] = 1.0
    with np.errstate(divide="ignore"):
        log_rem = np.concatenate(([0.0], np.cumsum(np.log1p(-mu[:-1]))))
        return np.log(mu) + log_rem, mu


def _logsubexp(a: float, b: float) -> float:
    if b == -np.inf:
        return a
    if b >= a:
        return -np.inf
    return a + np.log1p(-np.exp(b - a))


def sample_path_and_levels(state: ModelState, m: int, rng: np.random.Generator) -> list:
    """Blocked draw of the path of image ``m`` with its patch levels summed out.

    Candidates are the chains to every existing node populated by other
    images; a chain of depth d keeps the image's deepest occupied level at d.
    Levels are then redrawn given the chosen chain.  Skipped while the image
    sits on a node nobody else populates, whose pi would only echo its own
    patches.
    """
    a = state.assign[m]
    tree, hyper = state.tree, state.hyper
    own = _own_counts(state, m)
    if any(_is_private(state, nid, own) for nid in a.path):
        return list(a.path)
    C, t = _unit_block(state, m)
    n = C.shape[0]
    if n == 0:
        return list(a.path)
    D = state.max_depth
    log_theta_full, mu_full = _log_level_weights(a, hyper.alpha, D, rng)
    y = None
    if state.corpus.word_counts is not None and state.corpus.word_counts[m].any():
        y = state.corpus.word_counts[m]

    traffic = None if state.frozen else traffic_excluding(state, m)
    # breadth-first list of reachable, non-private nodes with their chain prior
    order, prior = [], {tree.root: 0.0}
    frontier = [tree.root]
    while frontier:
        nxt = []
        for u in frontier:
            lw, _ = child_log_weights(state, u, traffic)
            for idx, c in enumerate(tree[u].children):
                if tree[c].depth > D or lw[idx] == -np.inf or _is_private(state, c, own):
                    continue
                prior[c] = prior[u] + lw[idx]
                order.append(c)
                nxt.append(c)
        frontier = nxt
    if not order:
        return list(a.path)
    LL = _nodes_unit_loglik(C, t, tree, order)
    col = {c: j for j, c in enumerate(order)}
    # S[:, j]: sum over levels up to node j's depth of theta_l p(unit | chain node), rows scaled by exp(-shift)
    shift = LL.max(axis=1, keepdims=True)
    E = np.exp(LL - shift)
    S = np.empty_like(E)
    depth = np.array([tree[c].depth for c in order])
    parent_col = np.array([col.get(tree[c].parent, -1) for c in order])
    theta = np.exp(log_theta_full)
    for d in range(1, int(depth.max()) + 1):
        js = np.flatnonzero(depth == d)
        S[:, js] = theta[d - 1] * E[:, js]
        if d > 1:
            S[:, js] += S[:, parent_col[js]]
    with np.errstate(divide="ignore"):
        sums = np.log(S).sum(axis=0) + shift.sum()
    parent_sums = np.where(parent_col >= 0, sums[np.maximum(parent_col, 0)], -np.inf)
    scores = np.array([prior[c] for c in order])
    with np.errstate(invalid="ignore", divide="ignore"):
        gap = np.where(np.isfinite(parent_sums), parent_sums - sums, -np.inf)
        scores = scores + sums + np.log(-np.expm1(np.minimum(gap, 0.0)))
    scores[gap >= 0] = -np.inf
    if y is not None:
        scores = scores + np.array([_word_term(state, tuple(tree.chain(c)), y) for c in order])
    cands = order
    if not np.isfinite(scores).any():
        return list(a.path)
    u = cands[_draw_index(scores, rng)]
    path = tree.chain(u)
    d = len(path)

    # levels given the chain, conditioned on at least one patch at depth d
    lik = log_theta_full[:d] + LL[:, [col[c] for c in path]]
    lik -= lik.max(axis=1, keepdims=True)
    w = np.exp(lik)
    w /= w.sum(axis=1, keepdims=True)
    q = w[:, -1]
    levels = np.empty(n, dtype=np.int64)
    if d == 1:
        levels[:] = 1
    else:
        with np.errstate(divide="ignore"):
            log_none = np.concatenate(([0.0], np.cumsum(np.log1p(-np.minimum(q, 1.0)))))
            first = log_none[:-1] + np.log(q)
        f = _draw_index(first, rng)
        u_all = rng.random(n)
        below = np.cumsum(w[:f, :-1], axis=1)
        levels[:f] = np.minimum((u_all[:f, None] * below[:, -1:] > below).sum(axis=1) + 1, d - 1)
        levels[f] = d
        rest = np.cumsum(w[f + 1:], axis=1)
        levels[f + 1:] = np.minimum((u_all[f + 1:, None] * rest[:, -1:] > rest).sum(axis=1) + 1, d)

    _set_occupancy(state, a.path, a.levels, -1)
    a.path = path
    a.levels = levels
    a.mu = mu_full[:d].copy()
    _resize_mu(a, hyper.alpha, D, rng)
    _set_occupancy(state, a.path, a.levels, +1)
    wc = state.corpus.word_counts
    key = tuple(path)
    if wc is not None and key not in state.psi:
        state.psi[key] = sample_dirichlet(hyper.eta / state.corpus.N_v + wc[m], rng)
    return path


# ---------------------------------------------------------------- subtree moves

def _crp_join(t, n: int, gamma: float):
    """log nested-CRP factor for ``n`` images joining a child with traffic ``t`` (0 = new child)."""
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(t > 0, special.gammaln(t + n) - special.gammaln(np.maximum(t, 1.0)),
                        math.log(gamma) + math.lgamma(n))


def _crp_norm(cont, n: int, gamma: float):
    """log normaliser change at a node whose continuing traffic ``cont`` grows by ``n``."""
    cont = np.asarray(cont, dtype=float)
    return special.gammaln(cont + gamma) - special.gammaln(cont + n + gamma)


def reattach_subtrees(state: ModelState, rng: np.random.Generator, allow_new: bool = True) -> int:
    """Move whole subtrees between parents; returns the number of subtrees that moved.

    For a node h at depth d >= 2, every image through h is moved as a block:
    its units below depth d keep their nodes, while the chain above h is
    redrawn among every depth d-1 node populated by other images and (with
    ``allow_new``) a fresh node under every populated depth d-2 node.  The
    draw uses the nested-CRP prior and collapsed usage likelihoods; the usage
    vectors of nodes whose units changed are then redrawn.  Skipped when h's
    grandparent would otherwise be left empty, which keeps the move reversible.
    """
    if state.frozen or state.flat:
        return 0
    tree, hyper = state.tree, state.hyper
    a0, b0 = hyper.beta_prior()
    gamma = hyper.gamma
    K = state.K
    counts = {}
    for nid, (n1, n0) in _usage(state).items():
        counts[nid] = [n1.copy(), float(n1[0] + n0[0]) if n1.size else 0.0]
    traffic = path_traffic(state)
    traffic[tree.root] = state.corpus.M

    def stats(nid):
        return counts.get(nid, (np.zeros(K), 0.0))

    moved = 0
    for h in sorted((n for n in tree.nodes if tree[n].depth >= 2), key=lambda n: (tree[n].depth, n)):
        if h not in tree.nodes:
            continue
        d = tree[h].depth
        members = [m for m, a in enumerate(state.assign) if len(a.path) >= d and a.path[d - 1] == h]
        if not members:
            continue
        n_h = len(members)
        old_chain = list(state.assign[members[0]].path[:d - 1])
        g = old_chain[-2] if d >= 3 else tree.root
        rest = dict(traffic)
        for nid in old_chain:
            rest[nid] -= n_h
        rest[tree.root] -= n_h
        if rest[g] <= 0:
            continue
        # units of the group at levels 1..d-1
        g1 = np.zeros((d - 1, K))
        gt = np.zeros(d - 1)
        for m in members:
            n1, nt = level_stats(state, m)
            g1 += n1[:d - 1]
            gt += nt[:d - 1]
        base = {}
        for l, nid in enumerate(old_chain):
            c1, ct = stats(nid)
            base[nid] = (c1 - g1[l], ct - gt[l])

        def rstats(nid):
            return base.get(nid) or stats(nid)

        # per-node score of taking the group's level-l units and n_h images, given its parent is fixed
        def gain(nid, l):
            c1, ct = rstats(nid)
            return collapsed_block_loglik(c1 + g1[l], ct + gt[l], a0, b0) - collapsed_block_loglik(c1, ct, a0, b0)

        def cont(nid):
            return sum(rest.get(c, 0) for c in tree[nid].children if c != h)

        score_cache = {}

        def chain_score(nid):
            """Prior and likelihood of hanging the group's prefix on the chain ending at ``nid``."""
            if nid in score_cache:
                return score_cache[nid]
            node = tree[nid]
            l = node.depth - 1
            up = 0.0 if node.parent == tree.root else chain_score(node.parent)
            s = up + gain(nid, l) + float(_crp_join(rest[nid], n_h, gamma)) + float(_crp_norm(cont(node.parent), n_h, gamma))
            score_cache[nid] = s
            return s

        def tail(nid):
            # the group continues below the chain's last node into h alone
            return float(_crp_norm(cont(nid), n_h, gamma)) + math.log(gamma) + math.lgamma(n_h)

        options, logw = [], []
        for nid in tree.at_depth(d - 1):
            if rest.get(nid, 0) > 0:
                options.append((nid, False))
                logw.append(chain_score(nid) + tail(nid))
        if allow_new:
            parents = [tree.root] if d == 2 else [q for q in tree.at_depth(d - 2) if rest.get(q, 0) > 0]
            fresh = collapsed_block_loglik(g1[-1], gt[-1], a0, b0)
            fresh_tail = float(_crp_norm(0.0, n_h, gamma)) + math.log(gamma) + math.lgamma(n_h)
            for q in parents:
                up = 0.0 if q == tree.root else chain_score(q)
                join = math.log(gamma) + math.lgamma(n_h) + float(_crp_norm(cont(q), n_h, gamma))
                options.append((q, True))
                logw.append(up + join + fresh + fresh_tail)
        if not options:
            continue
        target, is_new = options[_draw_index(logw, rng)]
        A = old_chain[-1]
        if not is_new and target == A:
            continue
        if is_new and rest.get(A, 0) == 0 and (d == 2 or tree[A].parent == target):
            # the emptied old parent is the fresh node
            continue
        if is_new:
            new_parent = tree.add_child(target, None, gamma, rng)
            counts[new_parent] = [np.zeros(K), 0.0]
            traffic[new_parent] = 0
        else:
            new_parent = target
        tree.reparent(h, new_parent, gamma, rng)
        new_chain = tree.chain(new_parent)
        own = np.zeros(d, dtype=np.int64)
        for m in members:
            a = state.assign[m]
            old_key = tuple(a.path)
            a.path = new_chain + list(a.path[d - 1:])
            if old_key in state.psi:
                state.psi[tuple(a.path)] = state.psi.pop(old_key)
            own += np.bincount(a.levels[a.levels < d], minlength=d)[:d]
        for l, (o, n) in enumerate(zip(old_chain, new_chain)):
            c = counts.setdefault(o, [np.zeros(K), 0.0])
            counts[o] = [c[0] - g1[l], c[1] - gt[l]]
            traffic[o] -= n_h
            tree[o].occupancy -= int(own[l + 1])
            c = counts.setdefault(n, [np.zeros(K), 0.0])
            counts[n] = [c[0] + g1[l], c[1] + gt[l]]
            traffic[n] = traffic.get(n, 0) + n_h
            tree[n].occupancy += int(own[l + 1])
        for nid in set(old_chain) | set(new_chain):
            if traffic.get(nid, 0) > 0:
                c1, ct = counts[nid]
                tree[nid].pi = sample_probability(a0 + c1, b0 + ct - c1, rng)
        moved += 1
    prune_and_compact(state, rng)
    return moved


def _usage(state: ModelState) -> dict:
    from .dictionary import usage_counts

    return usage_counts(state)


# ---------------------------------------------------------------- maintenance

def recount_occupancy(state: ModelState) -> None:
    for node in state.tree.nodes.values():
        node.occupancy = 0
    for a in state.assign:
        _set_occupancy(state, a.path, a.levels, +1)


def prune_and_compact(state: ModelState, rng: np.random.Generator | None = None) -> list:
    """Drop nodes with no occupied descendants; returns the removed ids."""
    tree = state.tree
    rng = state.rng if rng is None else rng
    removed = []
    for a in state.assign:
        deepest = int(a.levels.max()) if a.levels.size else 1
        if deepest < a.L:
            a.path = list(a.path[:deepest])
            a.mu = np.asarray(a.mu)[:deepest]
    for nid in sorted(tree.nodes, key=lambda n: -tree[n].depth):
        node = tree.nodes[nid]
        if nid != tree.root and node.occupancy == 0 and not node.children:
            tree.remove(nid)
            removed.append(nid)
    if removed:
        gone = set(removed)
        state.psi = {k: v for k, v in state.psi.items() if not gone.intersection(k)}
    for a in state.assign:
        _resize_mu(a, state.hyper.alpha, state.max_depth, rng)
    return removed


def refresh_level_sticks(state: ModelState, rng: np.random.Generator) -> None:
    """mu_l ~ Beta(1 + n_l, alpha + n_{>l}) per image; the stick at max_depth stays closed."""
    alpha = state.hyper.alpha
    for a in state.assign:
        counts = np.bincount(a.levels - 1, minlength=a.L)[: a.L].astype(float)
        above = counts[::-1].cumsum()[::-1] - counts
        mu = rng.beta(1.0 + counts, alpha + above)
        if a.L == state.max_depth:
            mu[-1] = 1.0
        a.mu = np.clip(mu, 1e-300, 1.0)


def path_traffic(state: ModelState) -> dict:
    """node id -> number of images whose path passes through it."""
    out = dict.fromkeys(state.tree.nodes, 0)
    out.update(Counter(itertools.chain.from_iterable(a.path for a in state.assign)))
    return out


def refresh_child_sticks(state: ModelState, rng: np.random.Generator) -> None:
    """nu_i ~ Beta(1 + n_i, gamma + sum_{j>i} n_j) over the children of every node."""
    gamma = state.hyper.gamma
    traffic = path_traffic(state)
    for node in state.tree.nodes.values():
        if not node.children:
            node.nu = np.ones(1)
            continue
        n = np.array([traffic[c] for c in node.children], dtype=float)
        later = n[::-1].cumsum()[::-1] - n
        nu = np.ones(n.size + 1)
        nu[:-1] = np.clip(rng.beta(1.0 + n, gamma + later), 0.0, 1.0)
        node.nu = nu


def resample_concentrations(state: ModelState, rng: np.random.Generator) -> None:
    """alpha and gamma from their Gamma(1, 1) hyperprior posteriors given the open sticks."""
    mus = np.concatenate([np.asarray(a.mu)[np.asarray(a.mu) < 1.0] for a in state.assign] or [np.zeros(0)])
    nus = np.concatenate([n.nu[:-1] for n in state.tree.nodes.values()] or [np.zeros(0)])
    nus = nus[nus < 1.0]
    h = state.hyper
    h.alpha = float(sample_gamma(1.0 + mus.size, 1.0 - np.log1p(-mus).sum(), rng))
    h.gamma = float(sample_gamma(1.0 + nus.size, 1.0 - np.log1p(-nus).sum(), rng))


def node_distribution(state: ModelState, m: int) -> dict:
    """node id -> fraction of the patches of image ``m`` at that node."""
    a = state.assign[m]
    lv, cnt = np.unique(a.levels, return_counts=True)
    total = a.levels.size
    return {int(a.path[l - 1]): c / total for l, c in zip(lv, cnt)}
