"""Compiled inner loop of the retrospective level sampler.

Levels are 0-based inside this module.  For one patch:

  ll[l]        log p(z | pi of the node at level l of the (virtual) path)
  log_theta[l] log of the level stick weight theta_l
  log_rem[l]   log of the stick mass left after levels 0..l
"""
from math import lgamma

import numpy as np
from numba import njit

NEG_INF = -np.inf


@njit(cache=True)
def log_ctilde(log_theta, log_rem, ll, L):
    """(log c~(L), log M(L)) for truncation L (number of levels)."""
    log_m = ll[0]
    for l in range(1, L):
        if ll[l] > log_m:
            log_m = ll[l]
    acc = 0.0
    for l in range(L):
        acc += np.exp(log_theta[l] + ll[l] - log_m)
    if log_rem[L - 1] > NEG_INF:
        acc += np.exp(log_rem[L - 1])
    return log_m + np.log(acc), log_m


@njit(cache=True)
def log_acceptance(log_theta, log_rem, ll, cur, j, L, L_new):
    """log kappa for moving a patch from level ``cur`` to proposal ``j``.

    ``L`` is the truncation before the move and ``L_new`` the one implied by it.
    """
    if j < L and L_new == L:
        return 0.0
    lc_old, log_m_old = log_ctilde(log_theta, log_rem, ll, L)
    lc_new, log_m_new = log_ctilde(log_theta, log_rem, ll, L_new)
    if j < L:
        val = lc_old + log_m_new - lc_new - ll[cur]
    else:
        val = lc_old + ll[j] - lc_new - log_m_old
    return min(0.0, val)


@njit(cache=True)
def _fill_sticks(mu, log_theta, log_rem, start, stop):
    for l in range(start, stop):
        prev = 0.0 if l == 0 else log_rem[l - 1]
        log_theta[l] = np.log(mu[l]) + prev
        log_rem[l] = prev + np.log1p(-mu[l]) if mu[l] < 1.0 else NEG_INF


@njit(cache=True)
def _collapsed_unit(c, t, n1, nt, own, a, b):
    """log predictive of one unit under an empty-prior node with stats (n1, nt), less the unit itself if ``own``."""
    out = 0.0
    nt_ex = nt - own * t
    for k in range(c.size):
        a1 = a + n1[k] - own * c[k]
        b1 = b + nt_ex - n1[k] + own * c[k]
        if t == 1:
            out += np.log((a1 if c[k] > 0.5 else b1) / (a1 + b1))
        else:
            out += (lgamma(a1 + c[k]) + lgamma(b1 + t - c[k]) - lgamma(a1 + b1 + t)
                    - lgamma(a1) - lgamma(b1) + lgamma(a1 + b1))
    return out


@njit(cache=True)
def level_pass(ll, levels, order, L, alpha, rng, kappas, C, trials, fresh, a, b):
    """Run the retrospective Metropolis-Hastings level update over ``order``.

    ``ll`` is (n, Dv): log-likelihood of each patch at each level of the path
    extended virtually to depth Dv; the stick at Dv is closed (mass 1).
    Columns flagged in ``fresh`` belong to nodes not yet in the tree; their
    usage probabilities are integrated against the Beta(a, b) prior given the
    units moved there so far, using the counts ``C`` over ``trials``.
    ``levels`` (1-based) is updated in place.  ``kappas`` receives the
    acceptance probability of each visited patch.  Returns the new L.
    """
    n, Dv = ll.shape
    K = C.shape[1]
    counts = np.zeros(Dv, dtype=np.int64)
    for i in range(n):
        counts[levels[i] - 1] += 1
    n1 = np.zeros((Dv, K))
    nt = np.zeros(Dv)
    for i in range(n):
        l = levels[i] - 1
        if fresh[l]:
            n1[l] += C[i]
            nt[l] += trials[i]
    mu = np.empty(Dv)
    log_theta = np.empty(Dv)
    log_rem = np.empty(Dv)
    row = np.empty(Dv)
    for t in range(order.size):
        i = order[t]
        cur = levels[i] - 1
        # level sticks: posterior up to L, prior beyond (drawn lazily)
        above = n
        for l in range(L):
            above -= counts[l]
            mu[l] = 1.0 if l == Dv - 1 else rng.beta(1.0 + counts[l], alpha + above)
        _fill_sticks(mu, log_theta, log_rem, 0, L)
        drawn = L
        for l in range(Dv):
            if fresh[l] and nt[l] > 0:
                own = 1.0 if l == cur else 0.0
                row[l] = _collapsed_unit(C[i], trials[i], n1[l], nt[l], own, a, b)
            else:
                row[l] = ll[i, l]
        lc_old, log_m = log_ctilde(log_theta, log_rem, row, L)

        u = rng.random()
        acc = 0.0
        j = -1
        for l in range(Dv):
            if l >= drawn:
                mu[l] = 1.0 if l == Dv - 1 else rng.beta(1.0, alpha)
                _fill_sticks(mu, log_theta, log_rem, l, l + 1)
                drawn = l + 1
            w = row[l] if l < L else log_m
            acc += np.exp(log_theta[l] + w - lc_old)
            if acc >= u:
                j = l
                break
        if j < 0:
            j = Dv - 1
            for l in range(drawn, Dv):
                mu[l] = 1.0 if l == Dv - 1 else rng.beta(1.0, alpha)
                _fill_sticks(mu, log_theta, log_rem, l, l + 1)
            drawn = Dv

        if j >= L:
            L_new = j + 1
        else:
            counts[cur] -= 1
            counts[j] += 1
            L_new = L
            while L_new > 1 and counts[L_new - 1] == 0:
                L_new -= 1
            counts[cur] += 1
            counts[j] -= 1

        lk = log_acceptance(log_theta, log_rem, row, cur, j, L, L_new)
        kappas[t] = np.exp(lk)
        if lk >= 0.0 or np.log(rng.random()) < lk:
            counts[cur] -= 1
            counts[j] += 1
            if fresh[cur]:
                n1[cur] -= C[i]
                nt[cur] -= trials[i]
            if fresh[j]:
                n1[j] += C[i]
                nt[j] += trials[i]
            levels[i] = j + 1
            L = L_new
    return L
