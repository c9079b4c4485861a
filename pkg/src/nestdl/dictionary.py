"""Beta-Bernoulli sparse coding: conjugate Gibbs updates for D, z, s, precisions and pi."""
from __future__ import annotations

import numpy as np
from scipy import sparse, special

from .core import InvariantError, ModelState, PatchCode
from .samplers import sample_gamma, sample_probability, sample_truncated_normal_positive

INIT_POLICIES = ("prior", "dct")


def overcomplete_dct(P: int, K: int) -> np.ndarray:
    """Unit-norm overcomplete DCT atoms, separable 2-d when P is a square."""
    side = int(round(np.sqrt(P)))
    if side * side == P:
        n = int(np.ceil(np.sqrt(K)))
        base = _dct_1d(side, n)
        full = np.kron(base, base)
    else:
        full = _dct_1d(P, K)
    D = full[:, :K]
    return D / np.linalg.norm(D, axis=0)


def _dct_1d(length: int, n: int) -> np.ndarray:
    t = np.arange(length)[:, None]
    k = np.arange(n)[None, :]
    B = np.cos(t * k * np.pi / n)
    B[:, 1:] -= B[:, 1:].mean(axis=0)
    return B / np.linalg.norm(B, axis=0)


def init_dictionary(P: int, K: int, policy: str, rng: np.random.Generator) -> np.ndarray:
    if policy == "prior":
        return rng.normal(0.0, 1.0 / np.sqrt(P), size=(P, K))
    if policy == "dct":
        return overcomplete_dct(P, K)
    raise ValueError(f"unknown dictionary init policy {policy!r}; expected one of {INIT_POLICIES}")


def reconstruct_patch(D: np.ndarray, code: PatchCode) -> np.ndarray:
    z, s = np.asarray(code.z), np.asarray(code.s)
    if D.ndim != 2 or z.shape != (D.shape[1],) or s.shape != z.shape:
        raise ValueError(f"dictionary {D.shape} does not match code of length {z.shape}")
    return D @ (z * s)


def unit_loglik(C: np.ndarray, trials: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """log p(units | pi) for every unit/usage-vector pair, without binomial coefficients.

    ``C`` is (n, K) counts (binary z for patches), ``trials`` (n,), ``pi`` (h, K).
    """
    pi = np.atleast_2d(pi)
    C = np.asarray(C, dtype=float)
    return C @ np.log(pi).T + (trials[:, None] - C) @ np.log1p(-pi).T


def _node_logits(state: ModelState, rows: np.ndarray):
    nodes = state.patch_nodes()[rows]
    ids, idx = np.unique(nodes, return_inverse=True)
    pi = np.array([state.tree[n].pi for n in ids]).reshape(len(ids), state.K)
    if np.any((pi <= 0) | (pi >= 1)):
        raise InvariantError("usage probabilities must lie strictly inside (0, 1)")
    return idx, special.logit(pi)


def gibbs_update_codes(state: ModelState, rng: np.random.Generator, rows=None) -> None:
    """Resample z then s for atoms k = 1..K in turn, for every selected patch.

    Patches are independent given D, pi and the precisions, so the sweep over
    k is vectorised across rows; each row sees exactly the sequential
    single-patch update.
    """
    if state.counts_mode:
        return
    rows = np.arange(state.Z.shape[0]) if rows is None else np.atleast_1d(np.asarray(rows))
    if rows.size == 0:
        return
    D, Z, S = state.D, state.Z, state.S
    node_idx, logit = _node_logits(state, rows)
    z = Z[rows].astype(float)
    s = S[rows].copy()
    R = state.X[rows] - (z * s) @ D.T
    ge, gs = state.gamma_e, state.gamma_s
    norms = np.einsum("pk,pk->k", D, D)
    n = rows.size
    for k in range(state.K):
        d = D[:, k]
        w = z[:, k] * s[:, k]
        R += np.outer(w, d)
        dtr = R @ d
        sk = s[:, k]
        log_odds = logit[node_idx, k] + 0.5 * ge * (2.0 * sk * dtr - sk * sk * norms[k])
        zk = (rng.random(n) < special.expit(log_odds)).astype(float)
        prec = gs + ge * zk * norms[k]
        sk = sample_truncated_normal_positive(zk * ge * dtr / prec, 1.0 / prec, rng)
        z[:, k] = zk
        s[:, k] = sk
        R -= np.outer(zk * sk, d)
    Z[rows] = z.astype(Z.dtype)
    S[rows] = s


def gibbs_update_code(state: ModelState, m: int, i: int, rng: np.random.Generator) -> PatchCode:
    r = state.rows(m).start + i
    gibbs_update_codes(state, rng, rows=[r])
    return state.code(m, i)


def atom_conditional(state: ModelState, k: int, R: np.ndarray | None = None):
    """Mean vector and scalar precision of d_k given everything else."""
    R = state.residual() if R is None else R
    w = state.Z[:, k] * state.S[:, k]
    act = np.flatnonzero(w)
    P = state.D.shape[0]
    prec = P + state.gamma_e * float(np.dot(w[act], w[act]))
    if act.size == 0:
        return np.zeros(P), prec
    Rk = R[act] + np.outer(w[act], state.D[:, k])
    return state.gamma_e * (w[act] @ Rk) / prec, prec


def gibbs_update_atoms(state: ModelState, rng: np.random.Generator) -> np.ndarray:
    """Redraw each atom from its Gaussian conditional; unused atoms fall back to the prior."""
    if state.counts_mode:
        return state.D
    R = state.residual()
    P = state.D.shape[0]
    for k in range(state.K):
        w = state.Z[:, k] * state.S[:, k]
        act = np.flatnonzero(w)
        if act.size == 0:
            state.D[:, k] = rng.normal(0.0, 1.0 / np.sqrt(P), size=P)
            continue
        mean, prec = atom_conditional(state, k, R)
        d_new = mean + rng.standard_normal(P) / np.sqrt(prec)
        R[act] += np.outer(w[act], state.D[:, k] - d_new)
        state.D[:, k] = d_new
    return state.D


def precision_posteriors(state: ModelState):
    """((shape, rate) of gamma_e, (shape, rate) of gamma_s)."""
    h = state.hyper
    N, K = state.Z.shape
    P = state.D.shape[0]
    R = state.residual()
    e = (h.c0 + 0.5 * N * P, h.d0 + 0.5 * float(np.sum(R * R)))
    s = (h.e0 + 0.5 * N * K, h.f0 + 0.5 * float(np.sum(state.S * state.S)))
    return e, s


def gibbs_update_precisions(state: ModelState, rng: np.random.Generator):
    if state.counts_mode:
        return state.gamma_e, state.gamma_s
    (ae, be), (as_, bs) = precision_posteriors(state)
    state.gamma_e = float(sample_gamma(ae, be, rng))
    state.gamma_s = float(sample_gamma(as_, bs, rng))
    return state.gamma_e, state.gamma_s


def usage_counts(state: ModelState) -> dict:
    """node id -> (n_k1, n_k0): active and inactive counts of its patches per atom."""
    n1_acc, n_acc = {}, {}
    Z, trials = state.Z, state.trials
    for m, a in enumerate(state.assign):
        rows = state.rows(m)
        if rows.stop == rows.start:
            continue
        onehot = (a.levels[None, :] == np.arange(1, a.L + 1)[:, None]).astype(float)
        n1 = onehot @ Z[rows]
        nt = onehot @ trials[rows]
        for l, nid in enumerate(a.path):
            if nt[l] == 0:
                continue
            if nid in n1_acc:
                n1_acc[nid] += n1[l]
                n_acc[nid] += nt[l]
            else:
                n1_acc[nid] = n1[l].astype(float)
                n_acc[nid] = float(nt[l])
    return {int(nid): (n1_acc[nid], n_acc[nid] - n1_acc[nid]) for nid in sorted(n1_acc)}


def gibbs_update_node_probs(state: ModelState, node: int, rng: np.random.Generator, counts=None) -> np.ndarray:
    """pi_hk ~ Beta(a0/K + n_k1, b0(K-1)/K + n_k0)."""
    a, b = state.hyper.beta_prior()
    counts = usage_counts(state) if counts is None else counts
    n1, n0 = counts.get(node, (np.zeros(state.K), np.zeros(state.K)))
    pi = sample_probability(a + n1, b + n0, rng)
    state.tree[node].pi = pi
    return pi


def gibbs_update_all_node_probs(state: ModelState, rng: np.random.Generator) -> None:
    counts = usage_counts(state)
    for nid in sorted(state.tree.nodes):
        if nid != state.tree.root:
            gibbs_update_node_probs(state, nid, rng, counts)
