"""Random primitives and stick-breaking constructions.

Every draw in the package goes through a ``numpy.random.Generator`` backed by
the counter-based Philox bit generator, passed explicitly as ``rng``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

# Beta draws with shape a0/K underflow to exactly 0 for large K.
PI_FLOOR = 1e-12


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def split_rng(seed: int, key: int) -> np.random.Generator:
    """Independent stream for ``(seed, key)``; use one key per parallel worker."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, key])))


def sample_truncated_normal_positive(mean, variance, rng: np.random.Generator):
    """Draw from N(mean, variance) restricted to [0, inf).

    Inverts the upper-tail CDF in log space (``log_ndtr``/``ndtri_exp``), so
    the far-left tail (mean/sd around -30 and below) is handled without
    rejection loops.  Broadcasts over array arguments.
    """
    mean = np.asarray(mean, dtype=float)
    variance = np.asarray(variance, dtype=float)
    if np.any(~(variance > 0)):
        raise ValueError("variance must be positive")
    shape = np.broadcast_shapes(mean.shape, variance.shape)
    sd = np.sqrt(variance)
    lower = -mean / sd
    # u in (0, 1]; log(u) + log P(Z > lower) is the log tail mass of the draw
    u = 1.0 - rng.random(shape)
    x = -special.ndtri_exp(np.log(u) + special.log_ndtr(-lower))
    out = np.maximum(mean + sd * x, 0.0)
    return out if out.ndim else float(out)


@dataclass
class StickWeights:
    """Truncated stick-breaking weights; ``V[-1] == 1`` reserves the tail mass."""

    V: np.ndarray

    def __post_init__(self):
        self.V = np.asarray(self.V, dtype=float)
        if self.V.ndim != 1 or self.V.size < 1:
            raise ValueError("stick vector must be 1-d and non-empty")
        if self.V[-1] != 1.0:
            raise ValueError("last stick must equal 1")
        if np.any((self.V < 0) | (self.V > 1)):
            raise ValueError("stick proportions must lie in [0, 1]")

    @property
    def L(self) -> int:
        return self.V.size

    @property
    def w(self) -> np.ndarray:
        remaining = np.concatenate(([1.0], np.cumprod(1.0 - self.V[:-1])))
        return self.V * remaining

    @property
    def log_w(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            log_rem = np.concatenate(([0.0], np.cumsum(np.log1p(-self.V[:-1]))))
            return np.log(self.V) + log_rem


def stick_break_truncated(concentration: float, L: int, rng: np.random.Generator) -> StickWeights:
    if L < 1:
        raise ValueError("truncation L must be at least 1")
    if concentration <= 0:
        raise ValueError("concentration must be positive")
    V = np.ones(L)
    V[:-1] = rng.beta(1.0, concentration, size=L - 1)
    return StickWeights(V)


def extend_stick(sticks: StickWeights, concentration: float, rng: np.random.Generator) -> StickWeights:
    """Turn the reserved last stick into a real one and reserve a new tail."""
    V = np.append(sticks.V, 1.0)
    V[-2] = rng.beta(1.0, concentration)
    return StickWeights(V)


def sample_categorical_by_uniform(weights, u: float) -> int:
    """Smallest 0-based index whose cumulative weight reaches ``u``.

    Deterministic in ``(weights, u)``; the level sampler relies on this to
    locate the proposal bracket of a single uniform.
    """
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0 or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be a non-empty vector of nonnegative numbers")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"weights sum to {w.sum()!r}, expected 1")
    if not 0.0 <= u <= 1.0:
        raise ValueError("u must lie in [0, 1]")
    idx = int(np.searchsorted(np.cumsum(w), u, side="left"))
    return min(idx, w.size - 1)


def sample_probability(a, b, rng: np.random.Generator, size=None):
    """Beta draw clipped into the open interval (0, 1)."""
    return np.clip(rng.beta(a, b, size=size), PI_FLOOR, 1.0 - PI_FLOOR)


def sample_gamma(shape, rate, rng: np.random.Generator):
    """Gamma draw in the shape-rate convention."""
    return rng.gamma(shape, 1.0 / rate)


def sample_dirichlet(alpha, rng: np.random.Generator) -> np.ndarray:
    """Dirichlet via normalized gammas with small-shape underflow guarded."""
    alpha = np.asarray(alpha, dtype=float)
    # gamma(a) = gamma(a + 1) * U**(1/a) keeps log-weights finite for a << 1
    log_g = np.log(rng.standard_gamma(alpha + 1.0)) + np.log(1.0 - rng.random(alpha.shape)) / alpha
    log_g -= log_g.max()
    g = np.exp(log_g)
    g = np.maximum(g / g.sum(), np.finfo(float).tiny)
    return g / g.sum()


def log_beta_pdf(x, a, b):
    return (a - 1.0) * np.log(x) + (b - 1.0) * np.log1p(-x) - special.betaln(a, b)


def log_gamma_pdf(x, shape, rate):
    return shape * np.log(rate) - special.gammaln(shape) + (shape - 1.0) * np.log(x) - rate * x
