"""Attention-map statistics and hidden-state PCA structure score."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

METRICS = ("gini", "entropy", "local_focus", "mean_distance")


class GeometryError(ValueError):
    pass


# -- per-row statistics --------------------------------------------------------

def gini(row) -> float:
    """``1 - (2/n) * sum_k (S_k - A_(k)/2) / sum_j A_j`` over ascending-sorted weights."""
    a = np.sort(np.asarray(row, dtype=np.float64))
    if a.size == 0 or np.any(a < 0):
        raise GeometryError("gini needs a nonempty nonnegative row")
    total = a.sum()
    if total <= 0:
        raise GeometryError("gini of a zero-sum row")
    s = np.cumsum(a)
    return max(0.0, float(1.0 - 2.0 / a.size * np.sum(s - 0.5 * a) / total))


def entropy(row) -> float:
    """Shannon entropy in nats with ``0 log 0 = 0``."""
    a = np.asarray(row, dtype=np.float64)
    if np.any(a < 0):
        raise GeometryError("entropy of a row with negative entries")
    nz = a[a > 0]
    return float(-np.sum(nz * np.log(nz)))


def local_focus_rows(A, window: int = 2) -> np.ndarray:
    """Per query i, the mass on keys i-window..i+window (out-of-range offsets add nothing)."""
    A = np.asarray(A, dtype=np.float64)
    t_q, t_k = A.shape[-2:]
    i = np.arange(t_q)[:, None]
    j = np.arange(t_k)[None, :]
    band = np.abs(i - j) <= window
    return (A * band).sum(axis=-1)


def local_focus(A, window: int = 2) -> float:
    return float(local_focus_rows(A, window).mean())


def mean_distance_rows(A) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    t_q, t_k = A.shape[-2:]
    dist = np.abs(np.arange(t_q)[:, None] - np.arange(t_k)[None, :])
    return (A * dist).sum(axis=-1)


def mean_distance(A) -> float:
    return float(mean_distance_rows(A).mean())


def head_stats(attention: np.ndarray, length: int | None = None) -> dict[str, np.ndarray]:
    """Token-averaged statistics for every head of one prompt's [L, H, T, T] map.

    Rows and keys beyond ``length`` (padding) are ignored. Gini uses each
    query's causal support (keys 0..i) as its row length.
    """
    att = np.asarray(attention, dtype=np.float64)
    T = att.shape[-1] if length is None else length
    att = att[..., :T, :T]
    lead = att.shape[:-2]
    g = np.zeros(lead)
    h = np.zeros(lead)
    for i in range(T):
        row = att[..., i, : i + 1]
        a = np.sort(row, axis=-1)
        n = i + 1
        s = np.cumsum(a, axis=-1)
        g += 1.0 - 2.0 / n * np.sum(s - 0.5 * a, axis=-1) / a.sum(axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            h += -np.sum(np.where(row > 0, row * np.log(np.where(row > 0, row, 1.0)), 0.0), axis=-1)
    return {"gini": np.maximum(g / T, 0.0), "entropy": h / T,
            "local_focus": local_focus_rows(att).mean(axis=-1),
            "mean_distance": mean_distance_rows(att).mean(axis=-1)}


def average_stats(per_prompt: Sequence[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    if not per_prompt:
        raise GeometryError("no prompts to average")
    return {m: np.mean([p[m] for p in per_prompt], axis=0) for m in METRICS}


# -- grouped comparison ------------------------------------------------------

@dataclass
class GroupRow:
    group: str
    metric: str
    baseline: float | None
    curriculum: float | None

    @property
    def delta(self) -> float | None:
        if self.baseline is None or self.curriculum is None:
            return None
        return self.curriculum - self.baseline

    @property
    def ratio(self) -> float | None:
        if self.baseline in (None, 0) or self.curriculum is None:
            return None
        return self.curriculum / self.baseline

    @property
    def pct_change(self) -> float | None:
        r = self.ratio
        return None if r is None else (self.curriculum - self.baseline) / self.baseline * 100.0


def aggregate_groups(
    baseline: dict[str, np.ndarray],
    curriculum: dict[str, np.ndarray],
    groups: dict[str, Sequence[int]],
) -> list[GroupRow]:
    """Mean of each statistic over heads in each inclusive layer range."""
    rows = []
    n_layers = next(iter(baseline.values())).shape[0]
    for name, (lo, hi) in groups.items():
        layers = [l for l in range(lo, hi + 1) if l < n_layers]
        for m in METRICS:
            if not layers:
                rows.append(GroupRow(name, m, None, None))
                continue
            rows.append(GroupRow(name, m, float(baseline[m][layers].mean()), float(curriculum[m][layers].mean())))
    return rows


# -- eigenvalues -------------------------------------------------------------

def tridiagonalize(C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Householder reduction of a symmetric matrix; returns (diagonal, subdiagonal)."""
    A = np.array(C, dtype=np.float64)
    n = A.shape[0]
    for k in range(n - 2):
        x = A[k + 1:, k]
        norm = math.sqrt(float(x @ x))
        if norm == 0.0:
            continue
        alpha = -norm if x[0] >= 0 else norm
        v = x.copy()
        v[0] -= alpha
        vn = math.sqrt(float(v @ v))
        if vn == 0.0:
            continue
        v /= vn
        S = A[k + 1:, k + 1:]
        p = S @ v
        q = p - (v @ p) * v
        A[k + 1:, k + 1:] = S - 2.0 * np.outer(v, q) - 2.0 * np.outer(q, v)
        A[k + 1:, k] = 0.0
        A[k, k + 1:] = 0.0
        A[k + 1, k] = A[k, k + 1] = alpha
    return np.diag(A).copy(), np.diag(A, -1).copy()


def tridiagonal_eigenvalues(diag: np.ndarray, sub: np.ndarray, max_iter: int = 60) -> np.ndarray:
    """Implicit-shift QL iteration (eigenvalues only) on a symmetric tridiagonal matrix."""
    d = [float(x) for x in diag]
    n = len(d)
    e = [float(x) for x in sub] + [0.0]
    eps = np.finfo(float).eps
    for l in range(n):
        it = 0
        while True:
            m = l
            while m < n - 1:
                dd = abs(d[m]) + abs(d[m + 1])
                if abs(e[m]) <= eps * dd:
                    break
                m += 1
            if m == l:
                break
            it += 1
            if it > max_iter:
                raise GeometryError("QL iteration did not converge")
            g = (d[l + 1] - d[l]) / (2.0 * e[l])
            r = math.hypot(g, 1.0)
            g = d[m] - d[l] + e[l] / (g + math.copysign(r, g))
            s = c = 1.0
            p = 0.0
            i = m - 1
            deflated = False
            while i >= l:
                f = s * e[i]
                b = c * e[i]
                r = math.hypot(f, g)
                e[i + 1] = r
                if r == 0.0:
                    d[i + 1] -= p
                    e[m] = 0.0
                    deflated = True
                    break
                s = f / r
                c = g / r
                g = d[i + 1] - p
                r = (d[i] - g) * s + 2.0 * c * b
                p = s * r
                d[i + 1] = g + p
                g = c * r - b
                i -= 1
            if deflated:
                continue
            d[l] -= p
            e[l] = g
            e[m] = 0.0
    return np.array(sorted(d, reverse=True))


def symmetric_eigenvalues(C: np.ndarray) -> np.ndarray:
    """Eigenvalues of a symmetric matrix, descending."""
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise GeometryError("expected a square matrix")
    if C.shape[0] == 1:
        return C.reshape(1).copy()
    return tridiagonal_eigenvalues(*tridiagonalize(C))


# -- structure score -----------------------------------------------------------

def explained_top_k(X: np.ndarray, k: int = 10) -> float:
    """Share of total variance carried by the ``k`` leading principal components."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < k + 1:
        raise GeometryError(f"need at least {k + 1} samples, got {X.shape[0]}")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    ev = symmetric_eigenvalues(cov)
    # round-off leaves tiny nonzero eigenvalues in a rank-deficient covariance
    ev[ev <= ev[0] * cov.shape[0] * 10 * np.finfo(float).eps] = 0.0
    total = ev.sum()
    if total <= 0:
        return 1.0
    return float(min(1.0, ev[:k].sum() / total))


def pca_structure_score(
    layers: Sequence[np.ndarray],
    n_samples: int = 1000,
    k: int = 10,
    seed: int = 0,
) -> float:
    """Mean over layers of top-``k`` explained variance on a shared token subsample.

    ``layers[l]`` is [N, d]; rows are token positions aligned across layers.
    """
    if not layers:
        raise GeometryError("no layers given")
    n = layers[0].shape[0]
    if n < k + 1:
        raise GeometryError(f"need at least {k + 1} token states, got {n}")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=min(n, n_samples), replace=False))
    return float(np.mean([explained_top_k(np.asarray(X)[idx], k) for X in layers]))
