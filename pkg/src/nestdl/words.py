"""Per-path word distributions for annotated images."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .core import ModelState
from .samplers import sample_dirichlet


@dataclass
class PathWordDist:
    psi: np.ndarray
    counts: np.ndarray


def _check_counts(y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if np.any(y < 0):
        raise ValueError("word counts must be nonnegative")
    return y


def log_multinomial_coefficient(y) -> float:
    y = _check_counts(y)
    return float(special.gammaln(y.sum() + 1.0) - special.gammaln(y + 1.0).sum())


def word_loglik(y, psi=None, *, eta: float | None = None, counts=None, coefficient: bool = True) -> float:
    """Multinomial log mass of ``y`` under ``psi``, or collapsed over a Dirichlet.

    Without ``psi`` the Dirichlet-multinomial mass is returned, using
    concentration ``eta / N_v`` plus any existing ``counts``.
    """
    y = _check_counts(y)
    coef = log_multinomial_coefficient(y) if coefficient else 0.0
    if not y.any():
        return 0.0
    if psi is not None:
        psi = np.asarray(psi, dtype=float)
        if psi.shape != y.shape:
            raise ValueError(f"psi has {psi.shape[0]} terms, counts have {y.shape[0]}")
        nz = y > 0
        return coef + float(np.dot(y[nz], np.log(psi[nz])))
    if eta is None:
        raise ValueError("collapsed likelihood needs eta")
    a = np.full(y.shape, eta / y.size)
    if counts is not None:
        a = a + np.asarray(counts, dtype=float)
    return coef + float(
        special.gammaln(a.sum()) - special.gammaln(a.sum() + y.sum())
        + np.sum(special.gammaln(a + y) - special.gammaln(a))
    )


def path_word_counts(state: ModelState) -> dict:
    """path key -> summed word counts of the images currently on that path."""
    wc = state.corpus.word_counts
    out = {}
    if wc is None:
        return out
    for m in range(state.corpus.M):
        key = state.path_key(m)
        if key in out:
            out[key] = out[key] + wc[m]
        else:
            out[key] = wc[m].copy()
    return out


def gibbs_update_word_dists(state: ModelState, rng: np.random.Generator) -> dict:
    """psi_p ~ Dirichlet(eta/N_v + counts_p) for every path in use."""
    counts = path_word_counts(state)
    if not counts:
        state.psi = {}
        return {}
    N_v = state.corpus.N_v
    conc = state.hyper.eta / N_v
    out = {}
    for key in sorted(counts):
        out[key] = PathWordDist(sample_dirichlet(conc + counts[key], rng), counts[key])
    state.psi = {k: v.psi for k, v in out.items()}
    return out


def top_words(state: ModelState, path, n: int = 5) -> list:
    """Terms of ``path`` ranked by posterior-mean probability; ties go to the lower index."""
    N_v = state.corpus.N_v
    counts = path_word_counts(state).get(tuple(path), np.zeros(N_v))
    mean = (state.hyper.eta / N_v + counts) / (state.hyper.eta + counts.sum())
    n = min(n, N_v)
    order = np.lexsort((np.arange(N_v), -mean))[:n]
    vocab = state.corpus.vocabulary
    return [vocab[i] for i in order] if vocab is not None else [int(i) for i in order]
