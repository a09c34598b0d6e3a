"""Rank correlation, error metrics and classical tests with exact p-values.

The F and Student-t tail probabilities go through the regularized
incomplete beta function, evaluated with a modified-Lentz continued
fraction (no scipy dependency at runtime).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateStatisticError, DimensionError

_TINY = 1e-300
_EPS = 1e-16


def _as_vec(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64).reshape(-1)
    if not np.isfinite(a).all():
        raise ValueError(f"{name} contains non-finite values")
    return a


# ----------------------------------------------------------- incomplete beta

def _betacf(a: float, b: float, x: float, max_iter: int = 10_000) -> float:
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = _TINY if abs(d) < _TINY else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b) for a, b > 0 and 0 <= x <= 1."""
    if a <= 0 or b <= 0:
        raise ValueError(f"betainc needs a, b > 0 (got a={a}, b={b})")
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"betainc needs 0 <= x <= 1 (got {x})")
    if x == 0.0 or x == 1.0:
        return x
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(log_front)
    # the fraction converges fast for x < (a+1)/(a+b+2); use the reflection otherwise
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def f_sf(f: float, df1: float, df2: float) -> float:
    """P(F > f) for an F(df1, df2) variable."""
    if math.isinf(f):
        return 0.0
    if f <= 0:
        return 1.0
    return betainc(df2 / 2.0, df1 / 2.0, df2 / (df2 + df1 * f))


def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| > |t|) for a Student-t variable with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    if t == 0:
        return 1.0
    return betainc(df / 2.0, 0.5, df / (df + t * t))


# ------------------------------------------------------------- correlation

@dataclass(frozen=True)
class RankedSeries:
    values: tuple[float, ...]
    ranks: tuple[float, ...]


def rank_average(x: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    a = _as_vec(x, "x")
    n = a.size
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(n)
    sorted_a = a[order]
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sorted_a[j + 1] == sorted_a[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def ranked(x: Sequence[float]) -> RankedSeries:
    a = _as_vec(x, "x")
    return RankedSeries(tuple(a.tolist()), tuple(rank_average(a).tolist()))


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    a, b = _as_vec(x, "x"), _as_vec(y, "y")
    if a.size != b.size:
        raise DimensionError("pearson", a.shape, b.shape)
    if a.size < 2:
        raise DegenerateStatisticError("pearson needs at least 2 points")
    a = a - a.mean()
    b = b - b.mean()
    saa, sbb = float(a @ a), float(b @ b)
    if saa == 0.0 or sbb == 0.0:
        raise DegenerateStatisticError("correlation undefined for a constant series")
    # sqrt(saa * sbb) rather than sqrt(saa) * sqrt(sbb): exact when a == b
    r = float(a @ b) / math.sqrt(saa * sbb)
    return max(-1.0, min(1.0, r))


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation of average ranks (tie-corrected)."""
    a, b = _as_vec(x, "x"), _as_vec(y, "y")
    if a.size != b.size:
        raise DimensionError("spearman", a.shape, b.shape)
    if a.size < 3:
        raise DegenerateStatisticError("spearman needs at least 3 points")
    ra, rb = rank_average(a), rank_average(b)
    n = a.size
    if np.unique(a).size == n and np.unique(b).size == n:
        # tie-free: integer ranks, so the classical formula is exact up to one division
        d2 = int(((ra - rb) ** 2).sum())
        return 1.0 - 6.0 * d2 / (n * (n * n - 1))
    return pearson(ra, rb)


def mse(pred: Sequence[float], truth: Sequence[float]) -> float:
    a, b = _as_vec(pred, "pred"), _as_vec(truth, "truth")
    if a.size != b.size:
        raise DimensionError("mse", a.shape, b.shape)
    if a.size == 0:
        raise DegenerateStatisticError("mse of empty vectors")
    d = a - b
    return float(d @ d) / a.size


# -------------------------------------------------------------------- tests

@dataclass(frozen=True)
class AnovaResult:
    f_statistic: float
    df_between: int
    df_within: int
    p_value: float


def one_way_anova(groups: Sequence[Sequence[float]]) -> AnovaResult:
    gs = [_as_vec(g, f"group {i}") for i, g in enumerate(groups)]
    k = len(gs)
    if k < 2:
        raise DegenerateStatisticError("ANOVA needs at least 2 groups")
    if any(g.size < 2 for g in gs):
        raise DegenerateStatisticError("every ANOVA group needs at least 2 points")
    n = sum(g.size for g in gs)
    if n <= k:
        raise DegenerateStatisticError("ANOVA needs more points than groups")
    grand = np.concatenate(gs).mean()
    ssb = sum(g.size * (g.mean() - grand) ** 2 for g in gs)
    ssw = sum(float(((g - g.mean()) ** 2).sum()) for g in gs)
    dfb, dfw = k - 1, n - k
    if ssw == 0.0:
        if ssb == 0.0:
            return AnovaResult(0.0, dfb, dfw, 1.0)
        return AnovaResult(math.inf, dfb, dfw, 0.0)
    f = (ssb / dfb) / (ssw / dfw)
    return AnovaResult(float(f), dfb, dfw, f_sf(f, dfb, dfw))


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: float
    p_value: float


def t_test(a: Sequence[float], b: Sequence[float], variant: str = "welch") -> TTestResult:
    x, y = _as_vec(a, "a"), _as_vec(b, "b")
    if x.size < 2 or y.size < 2:
        raise DegenerateStatisticError("t-test needs at least 2 points per group")
    if variant not in ("welch", "pooled"):
        raise ValueError(f"variant must be 'welch' or 'pooled', got {variant!r}")
    nx, ny = x.size, y.size
    vx, vy = float(x.var(ddof=1)), float(y.var(ddof=1))
    diff = float(x.mean() - y.mean())
    if variant == "pooled":
        df = float(nx + ny - 2)
        sp2 = ((nx - 1) * vx + (ny - 1) * vy) / df
        se2 = sp2 * (1.0 / nx + 1.0 / ny)
    else:
        qx, qy = vx / nx, vy / ny
        se2 = qx + qy
        df = se2 * se2 / (qx * qx / (nx - 1) + qy * qy / (ny - 1)) if se2 > 0 else float(nx + ny - 2)
    if se2 == 0.0:
        if diff == 0.0:
            return TTestResult(0.0, df, 1.0)
        return TTestResult(math.copysign(math.inf, diff), df, 0.0)
    t = diff / math.sqrt(se2)
    return TTestResult(t, df, t_sf_two_sided(t, df))


def permutation_pvalue_spearman(x: Sequence[float], y: Sequence[float], n_permutations: int = 10_000,
                                seed: int = 0) -> tuple[float, float]:
    """Spearman rho with a two-sided permutation p-value (add-one corrected)."""
    rho = spearman(x, y)
    rx = rank_average(x)
    ry = rank_average(y)
    rx = (rx - rx.mean()) / np.linalg.norm(rx - rx.mean())
    ry = (ry - ry.mean()) / np.linalg.norm(ry - ry.mean())
    rng = np.random.default_rng(seed)
    hits = 0
    chunk = 1000
    for start in range(0, n_permutations, chunk):
        m = min(chunk, n_permutations - start)
        perms = rng.permuted(np.tile(ry, (m, 1)), axis=1)
        hits += int((np.abs(perms @ rx) >= abs(rho) - 1e-12).sum())
    return rho, (hits + 1) / (n_permutations + 1)
