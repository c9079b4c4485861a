import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from nestdl.samplers import (
    StickWeights, extend_stick, make_rng, sample_categorical_by_uniform, sample_dirichlet,
    sample_probability, sample_truncated_normal_positive, split_rng, stick_break_truncated,
)


def truncnorm_moments(mean, var):
    sd = np.sqrt(var)
    a = -mean / sd
    d = stats.truncnorm(a, np.inf, loc=mean, scale=sd)
    return d.mean(), d.var()


@pytest.mark.parametrize("mean,var", [(0.0, 1.0), (-2.0, 1.0), (1.5, 0.25)])
def test_truncated_normal_moments(mean, var):
    x = sample_truncated_normal_positive(np.full(400_000, mean), np.full(400_000, var), make_rng(1))
    m, v = truncnorm_moments(mean, var)
    assert np.all(x >= 0)
    assert abs(x.mean() - m) / m < 0.01
    assert abs(x.var() - v) / v < 0.01


def test_truncated_normal_far_tail_is_finite():
    x = sample_truncated_normal_positive(np.array([-40.0, -200.0]), np.array([1.0, 1.0]), make_rng(0))
    assert np.all(np.isfinite(x)) and np.all(x >= 0)
    assert np.all(x < 0.5)


def test_truncated_normal_rejects_bad_variance():
    with pytest.raises(ValueError):
        sample_truncated_normal_positive(0.0, 0.0, make_rng(0))


@given(st.floats(0.05, 20.0), st.integers(1, 60), st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_truncated_sticks_sum_to_one(conc, L, seed):
    w = stick_break_truncated(conc, L, make_rng(seed)).w
    assert abs(w.sum() - 1.0) < 1e-12
    assert np.all(w >= 0)


@given(st.floats(0.05, 20.0), st.integers(1, 20), st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_extend_stick_keeps_prefix(conc, L, seed):
    rng = make_rng(seed)
    s = stick_break_truncated(conc, L, rng)
    t = extend_stick(s, conc, rng)
    assert t.L == L + 1
    assert np.array_equal(t.V[:L - 1], s.V[:L - 1])
    assert np.array_equal(t.w[:L - 1], s.w[:L - 1])
    assert t.V[-1] == 1.0
    assert abs(t.w.sum() - 1.0) < 1e-12


def test_log_weights_match_weights():
    s = StickWeights(np.array([0.3, 0.0, 0.5, 1.0]))
    with np.errstate(divide="ignore"):
        assert np.allclose(np.exp(s.log_w), s.w)


@pytest.mark.parametrize("V", [[0.5], [0.5, 0.7], [1.2, 1.0], [[0.5, 1.0]]])
def test_stick_weights_validation(V):
    with pytest.raises(ValueError):
        StickWeights(np.array(V))


def test_categorical_by_uniform_brackets():
    w = [0.2, 0.3, 0.5]
    assert sample_categorical_by_uniform(w, 0.0) == 0
    assert sample_categorical_by_uniform(w, 0.2) == 0
    assert sample_categorical_by_uniform(w, 0.2000001) == 1
    assert sample_categorical_by_uniform(w, 0.5) == 1
    assert sample_categorical_by_uniform(w, 1.0) == 2
    with pytest.raises(ValueError):
        sample_categorical_by_uniform([0.5, 0.6], 0.1)


def test_dirichlet_tiny_shapes_stay_on_simplex():
    p = sample_dirichlet(np.full(50, 1e-3), make_rng(4))
    assert abs(p.sum() - 1) < 1e-12 and np.all(p > 0)


def test_probability_draws_open_interval():
    p = sample_probability(np.full(1000, 1e-4), np.full(1000, 1.0), make_rng(0))
    assert np.all((p > 0) & (p < 1))


def test_streams_are_reproducible_and_split():
    assert make_rng(3).random() == make_rng(3).random()
    assert split_rng(3, 0).random() != split_rng(3, 1).random()
