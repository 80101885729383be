"""Paired significance tests: sign-flip permutation and Student t."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

EXHAUSTIVE_MAX_N = 20
_TOL = 1e-12


class StatsError(ValueError):
    pass


@dataclass(frozen=True)
class StatTestResult:
    statistic: float
    p_value: float
    n: int
    method: str
    df: int | None = None


def _diffs(a: Sequence[float], b: Sequence[float]) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise StatsError("paired tests need two 1-d samples of equal length")
    if a.size < 2:
        raise StatsError("need at least two pairs")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise StatsError("samples contain non-finite values")
    return a - b


def _sign_matrix(n: int, start: int, stop: int) -> np.ndarray:
    codes = np.arange(start, stop, dtype=np.int64)[:, None]
    bits = (codes >> np.arange(n, dtype=np.int64)) & 1
    return 1.0 - 2.0 * bits


def paired_permutation_test(
    a: Sequence[float],
    b: Sequence[float],
    resamples: int = 10000,
    seed: int = 0,
    method: str = "auto",
) -> StatTestResult:
    """Two-sided sign-flip test on the mean paired difference.

    ``auto`` enumerates all ``2**n`` sign patterns when ``n <= 20`` and
    otherwise draws ``resamples`` random patterns, reporting
    ``(hits + 1) / (resamples + 1)``.
    """
    d = _diffs(a, b)
    n = d.size
    obs = abs(d.mean())
    scale = max(1.0, float(np.abs(d).max()))
    cut = obs - _TOL * scale
    if method == "auto":
        method = "exhaustive" if n <= EXHAUSTIVE_MAX_N else "monte_carlo"
    if method == "exhaustive":
        if n > 24:
            raise StatsError("exhaustive enumeration limited to n <= 24")
        total = 1 << n
        hits = 0
        chunk = 1 << 16
        for start in range(0, total, chunk):
            signs = _sign_matrix(n, start, min(total, start + chunk))
            hits += int(np.count_nonzero(np.abs(signs @ d) / n >= cut))
        return StatTestResult(float(d.mean()), hits / total, n, "exhaustive")
    if method == "monte_carlo":
        if resamples < 1:
            raise StatsError("resamples must be >= 1")
        rng = np.random.default_rng(seed)
        hits = 0
        done = 0
        while done < resamples:
            m = min(4096, resamples - done)
            signs = rng.choice((-1.0, 1.0), size=(m, n))
            hits += int(np.count_nonzero(np.abs(signs @ d) / n >= cut))
            done += m
        return StatTestResult(float(d.mean()), (hits + 1) / (resamples + 1), n, "monte_carlo")
    raise StatsError(f"unknown method {method!r}")


# -- Student t -------------------------------------------------------------------

def _betacf(a: float, b: float, x: float, max_iter: int = 300, eps: float = 1e-15) -> float:
    """Continued fraction for the regularised incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise StatsError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularised incomplete beta ``I_x(a, b)``."""
    if not 0.0 <= x <= 1.0:
        raise StatsError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: int) -> float:
    if df < 1:
        raise StatsError("df must be >= 1")
    return min(1.0, betainc(df / 2.0, 0.5, df / (df + t * t)))


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> StatTestResult:
    d = _diffs(a, b)
    n = d.size
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        raise StatsError("paired differences have zero variance")
    t = mean / (sd / math.sqrt(n))
    return StatTestResult(t, t_two_sided_p(t, n - 1), n, "paired_t", n - 1)
