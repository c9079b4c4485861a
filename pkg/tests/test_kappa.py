from fractions import Fraction

import numpy as np
from hypothesis import given, settings, strategies as st

from nestdl.tree import acceptance_probability


def c_tilde(theta, lik, L):
    """Truncated normaliser: visited levels plus the tail priced at the best visited likelihood."""
    head = sum(t * p for t, p in zip(theta[:L], lik[:L]))
    return head + (1 - sum(theta[:L])) * max(lik[:L])


def kappa_hand(mu, lik, cur, j, L, L_new):
    mu = [Fraction(m) for m in mu]
    lik = [Fraction(p) for p in lik]
    theta, rem = [], Fraction(1)
    for m in mu:
        theta.append(m * rem)
        rem *= 1 - m
    if j <= L and L_new == L:
        return Fraction(1)
    if j > L:
        r = c_tilde(theta, lik, L) * lik[j - 1] / (c_tilde(theta, lik, L_new) * max(lik[:L]))
    else:
        r = c_tilde(theta, lik, L) * max(lik[:L_new]) / (c_tilde(theta, lik, L_new) * lik[cur - 1])
    return min(Fraction(1), r)


def test_move_inside_truncation_is_always_accepted():
    assert acceptance_probability([0.5, 0.5, 0.5], [0.9, 0.2, 0.3], 1, 2, 2, 2) == 1.0


def test_growing_move_hand_value():
    # c~(2) = 0.45 + 0.05 + 0.25 * 0.9 = 0.725, c~(3) = 0.65; ratio 0.725 * 0.3 / (0.65 * 0.9)
    k = acceptance_probability([0.5, 0.5, 0.5], [0.9, 0.2, 0.3], 1, 3, 2, 3)
    assert abs(k - 0.725 * 0.3 / (0.65 * 0.9)) < 1e-10
    assert abs(k - float(kappa_hand(["1/2"] * 3, ["9/10", "1/5", "3/10"], 1, 3, 2, 3))) < 1e-10


def test_shrinking_move_hand_value():
    # c~(2) = 0.1 + 0.225 + 0.25 * 0.9 = 0.55, c~(1) = 0.2, M(1) = 0.2, own likelihood 0.9
    k = acceptance_probability([0.5, 0.5], [0.2, 0.9], 2, 1, 2, 1)
    assert abs(k - 11 / 18) < 1e-10


def test_growing_move_capped_at_one():
    assert acceptance_probability([0.5, 0.5, 0.5], [0.2, 0.6, 0.9], 1, 3, 2, 3) == 1.0


probs = st.floats(1e-6, 1.0)
sticks = st.floats(0.01, 0.99)


@given(st.lists(sticks, min_size=4, max_size=4), st.lists(probs, min_size=4, max_size=4),
       st.integers(1, 3), st.integers(1, 4), st.integers(1, 3))
@settings(max_examples=300, deadline=None)
def test_kappa_is_a_probability_and_matches_exact_arithmetic(mu, lik, L, j, cur):
    cur = min(cur, L)
    L_new = max(L, j) if j > L else (L if cur != L else max(j, 1))
    k = acceptance_probability(mu, lik, cur, j, L, L_new)
    assert 0.0 <= k <= 1.0
    ref = float(kappa_hand([Fraction(m) for m in mu], [Fraction(p) for p in lik], cur, j, L, L_new))
    assert abs(k - ref) < 1e-9 * max(1.0, ref)
