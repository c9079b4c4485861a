"""Reconstruction error, chi-square nearest-neighbour classification and confusion reports."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .core import Corpus, ModelState


def reconstruction_errors(state: ModelState, corpus: Corpus | None = None) -> np.ndarray:
    """Squared error ||x - D(z * s)||^2 of every patch."""
    if state.D is None or state.S is None:
        raise ValueError("reconstruction needs a dictionary and weights (count units have neither)")
    X = state.X if corpus is None else corpus.X
    if X.shape[0] != state.Z.shape[0]:
        raise ValueError(f"codes cover {state.Z.shape[0]} patches, corpus has {X.shape[0]}")
    if X.shape[1] != state.D.shape[0]:
        raise ValueError(f"patches have dimension {X.shape[1]}, dictionary expects {state.D.shape[0]}")
    R = X - (state.Z * state.S) @ state.D.T
    return np.einsum("ij,ij->i", R, R)


def reconstruction_mse(state: ModelState, corpus: Corpus | None = None) -> tuple[float, float]:
    """(mean, standard deviation) of the per-patch squared error."""
    e = reconstruction_errors(state, corpus)
    if e.size == 0:
        return 0.0, 0.0
    return float(e.mean()), float(e.std())


def _as_pair(p, q):
    """Two aligned dense vectors from arrays or sparse {id: mass} dicts."""
    if isinstance(p, dict) or isinstance(q, dict):
        p, q = dict(p), dict(q)
        keys = sorted(set(p) | set(q))
        return np.array([p.get(k, 0.0) for k in keys], dtype=float), np.array([q.get(k, 0.0) for k in keys], dtype=float)
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"vectors differ in shape: {p.shape} vs {q.shape}")
    return p, q


def chi2_distance(p, q) -> float:
    """1/2 sum (p_i - q_i)^2 / (p_i + q_i); entries with p_i + q_i = 0 are skipped."""
    p, q = _as_pair(p, q)
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("chi-square distance needs nonnegative entries")
    s = p + q
    nz = s > 0
    return 0.5 * float(np.sum((p[nz] - q[nz]) ** 2 / s[nz]))


def feature_matrix(dists, ids=None) -> tuple[np.ndarray, list]:
    """Dense rows from sparse node distributions over a shared sorted id space."""
    ids = sorted({k for d in dists for k in d}) if ids is None else list(ids)
    col = {k: j for j, k in enumerate(ids)}
    F = np.zeros((len(dists), len(ids)))
    for i, d in enumerate(dists):
        for k, v in d.items():
            if k in col:
                F[i, col[k]] = v
    return F, ids


def chi2_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise chi-square distances between the rows of A and of B."""
    A, B = np.asarray(A, dtype=float), np.asarray(B, dtype=float)
    if np.any(A < 0) or np.any(B < 0):
        raise ValueError("chi-square distance needs nonnegative entries")
    out = np.empty((A.shape[0], B.shape[0]))
    for i, a in enumerate(A):
        s = a + B
        d = (a - B) ** 2
        with np.errstate(invalid="ignore", divide="ignore"):
            out[i] = 0.5 * np.where(s > 0, d / np.where(s > 0, s, 1.0), 0.0).sum(axis=1)
    return out


def knn_classify(train_features, train_labels, test_features, K: int = 50) -> list:
    """Majority vote among the K chi-square nearest training rows.

    Ties go to the class with the smaller mean distance among its voters,
    then to the class listed first in sorted order.  Rows may be dense
    arrays or sparse {id: mass} dicts.
    """
    train_labels = list(train_labels)
    if not train_labels:
        raise ValueError("knn_classify needs a nonempty training set")
    if K < 1:
        raise ValueError("K must be at least 1")
    if len(train_features) != len(train_labels):
        raise ValueError("one label per training row is required")
    if len(test_features) == 0:
        return []
    if isinstance(train_features[0], dict) or isinstance(test_features[0], dict):
        F, ids = feature_matrix(list(train_features) + list(test_features))
        A, B = F[len(train_labels):], F[:len(train_labels)]
    else:
        A, B = np.atleast_2d(np.asarray(test_features, dtype=float)), np.atleast_2d(np.asarray(train_features, dtype=float))
    k = min(K, len(train_labels))
    classes = sorted(set(train_labels))
    y = np.array([classes.index(c) for c in train_labels])
    dist = chi2_matrix(A, B)
    out = []
    for row in dist:
        # deterministic neighbour set: distance, then class index
        nn = np.lexsort((y, row))[:k]
        votes = np.bincount(y[nn], minlength=len(classes))
        mean_d = np.array([row[nn][y[nn] == c].mean() if votes[c] else np.inf for c in range(len(classes))])
        best = min(range(len(classes)), key=lambda c: (-votes[c], mean_d[c], c))
        out.append(classes[best])
    return out


@dataclass
class EvalReport:
    classes: list = field(default_factory=list)
    matrix: np.ndarray | None = None
    mse_mean: float | None = None
    mse_std: float | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return 0 if self.matrix is None else int(self.matrix.sum())

    @property
    def accuracy(self) -> float | None:
        if self.matrix is None or self.total == 0:
            return None
        return float(np.trace(self.matrix) / self.total)

    @property
    def per_class_accuracy(self) -> dict:
        if self.matrix is None:
            return {}
        rows = self.matrix.sum(axis=1)
        return {c: (float(self.matrix[i, i] / rows[i]) if rows[i] else float("nan")) for i, c in enumerate(self.classes)}

    def confusion_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["true\\predicted"] + list(self.classes))
        for c, row in zip(self.classes, self.matrix):
            w.writerow([c] + [int(v) for v in row])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["key", "value"])
        for k, v in self.metadata.items():
            w.writerow([k, v])
        if self.mse_mean is not None:
            w.writerow(["mse_mean", repr(self.mse_mean)])
            w.writerow(["mse_std", repr(self.mse_std)])
        if self.matrix is not None:
            w.writerow(["accuracy", repr(self.accuracy)])
            for c, a in self.per_class_accuracy.items():
                w.writerow([f"accuracy[{c}]", repr(a)])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{k}: {v}" for k, v in self.metadata.items()]
        if self.mse_mean is not None:
            lines.append(f"reconstruction MSE x1e3: {1e3 * self.mse_mean:.4f} +/- {1e3 * self.mse_std:.4f}")
        if self.matrix is not None:
            names = [str(c) for c in self.classes]
            w = max([len(n) for n in names] + [5])
            lines.append("confusion (rows true, columns predicted)")
            lines.append(" " * (w + 1) + " ".join(n.rjust(w) for n in names))
            for n, row in zip(names, self.matrix):
                lines.append(n.rjust(w) + " " + " ".join(str(int(v)).rjust(w) for v in row))
            lines.append(f"accuracy: {self.accuracy:.4f}" if self.accuracy is not None else "accuracy: n/a")
            for c, a in self.per_class_accuracy.items():
                lines.append(f"  {c}: {a:.4f}")
        return "\n".join(lines) + "\n"


def confusion(true_labels, predicted, classes=None) -> EvalReport:
    """C[t, p] counts over the class list (sorted labels of both sequences by default)."""
    true_labels, predicted = list(true_labels), list(predicted)
    if len(true_labels) != len(predicted):
        raise ValueError(f"{len(true_labels)} true labels for {len(predicted)} predictions")
    classes = sorted(set(true_labels) | set(predicted)) if classes is None else list(classes)
    idx = {c: i for i, c in enumerate(classes)}
    C = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(true_labels, predicted):
        if t not in idx or p not in idx:
            raise ValueError(f"label {t if t not in idx else p!r} is not one of the classes {classes}")
        C[idx[t], idx[p]] += 1
    return EvalReport(classes=classes, matrix=C)
