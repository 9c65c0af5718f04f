"""Descriptive statistics, one-way ANOVA, Tukey HSD and Gaussian KDE.

The F and studentized-range distributions are evaluated here directly
(continued fraction for the incomplete beta, Gauss-Legendre quadrature for
the range distribution) so results do not depend on a statistics package.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np


class StatsError(ValueError):
    pass


class UnsupportedRangeError(StatsError):
    pass


@dataclass
class SampleGroup:
    label: str
    samples: Sequence[float]

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=float)
        if not np.all(np.isfinite(arr)):
            raise StatsError(f"group {self.label!r} contains non-finite values")
        self.samples = arr


def descriptive(samples: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (n - 1 denominator)."""
    x = np.asarray(samples, dtype=float)
    if x.size < 2:
        raise StatsError("standard deviation needs at least two samples")
    return float(x.mean()), float(x.std(ddof=1))


# -- special functions --------------------------------------------------------
def _betacf(a: float, b: float, x: float, max_iter: int = 10_000, eps: float = 1e-15) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise StatsError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise StatsError("betainc needs a, b > 0")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def f_cdf(x: float, d1: float, d2: float) -> float:
    if x <= 0:
        return 0.0
    return betainc(d1 / 2.0, d2 / 2.0, d1 * x / (d1 * x + d2))


def f_sf(x: float, d1: float, d2: float) -> float:
    """Upper tail of the F distribution, computed without cancellation."""
    if x <= 0:
        return 1.0
    if math.isinf(x):
        return 0.0
    return betainc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * x))


_GL_Z = np.polynomial.legendre.leggauss(24)
_GL_S = np.polynomial.legendre.leggauss(16)

_TAB_LO, _TAB_HI, _TAB_H = -40.0, 40.0, 1e-3


@lru_cache(maxsize=None)
def _phi_table() -> tuple[np.ndarray, np.ndarray]:
    z = np.linspace(_TAB_LO, _TAB_HI, int(round((_TAB_HI - _TAB_LO) / _TAB_H)) + 1)
    cdf = np.array([0.5 * math.erfc(-v / math.sqrt(2.0)) for v in z])
    pdf = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    return cdf, pdf


def _phi_cdf(z: np.ndarray) -> np.ndarray:
    """Standard normal CDF by cubic Hermite interpolation of a fine table."""
    cdf, pdf = _phi_table()
    z = np.clip(np.asarray(z, dtype=float), _TAB_LO, _TAB_HI - _TAB_H)
    pos = (z - _TAB_LO) / _TAB_H
    i = np.floor(pos).astype(np.int64)
    t = pos - i
    t2, t3 = t * t, t * t * t
    h00 = 2 * t3 - 3 * t2 + 1
    h10 = t3 - 2 * t2 + t
    h01 = -2 * t3 + 3 * t2
    h11 = t3 - t2
    return h00 * cdf[i] + h10 * _TAB_H * pdf[i] + h01 * cdf[i + 1] + h11 * _TAB_H * pdf[i + 1]


@lru_cache(maxsize=None)
def _z_grid() -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    # composite rule over [-9, 9]; normal mass outside is < 1e-18
    edges = np.linspace(-9.0, 9.0, 13)
    x, w = _GL_Z
    zs, ws = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        zs.append(0.5 * (hi - lo) * x + 0.5 * (hi + lo))
        ws.append(0.5 * (hi - lo) * w)
    z = np.concatenate(zs)
    wz = np.concatenate(ws)
    return z, wz, np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi), _phi_cdf(z)


def _range_cdf(w: np.ndarray, k: int) -> np.ndarray:
    """P(range of k iid standard normals <= w), vectorized over w."""
    z, wz, pdf, cdf = _z_grid()
    w = np.atleast_1d(np.asarray(w, dtype=float))
    shifted = _phi_cdf(z[None, :] - w[:, None])
    inner = np.clip(cdf[None, :] - shifted, 0.0, 1.0) ** (k - 1)
    return np.clip(k * (inner * (pdf * wz)[None, :]).sum(axis=1), 0.0, 1.0)


def studentized_range_cdf(q: float, k: int, df: float) -> float:
    """CDF of the studentized range statistic by double numerical integration."""
    if not (2 <= k <= 100) or not (df >= 1):
        raise UnsupportedRangeError(f"studentized range unsupported for k={k}, df={df}")
    if q <= 0:
        return 0.0
    if df > 1e5:
        return float(_range_cdf(np.array([q]), k)[0])
    # s = chi_df / sqrt(df); integrate its density over a window holding all but ~1e-15 of the mass
    half = 0.5 * df
    log_norm = math.log(2.0) + half * math.log(half) - math.lgamma(half)
    sd = 1.0 / math.sqrt(2.0 * df)
    lo = max(0.0, 1.0 - 12.0 * sd)
    hi = 1.0 + 12.0 * sd + (12.0 if df < 4 else 0.0)
    n_panels = 24
    edges = np.linspace(lo, hi, n_panels + 1)
    x, wts = _GL_S
    s = np.concatenate([0.5 * (b - a) * x + 0.5 * (a + b) for a, b in zip(edges[:-1], edges[1:])])
    ws = np.concatenate([0.5 * (b - a) * wts for a, b in zip(edges[:-1], edges[1:])])
    dens = np.exp(log_norm + (df - 1.0) * np.log(s) - half * s * s)
    val = float(np.sum(ws * dens * _range_cdf(q * s, k)))
    return min(1.0, max(0.0, val))


@lru_cache(maxsize=256)
def studentized_range_quantile(p: float, k: int, df: float, tol: float = 1e-9) -> float:
    """Quantile of the studentized range by bisection on the CDF."""
    if not 0.0 < p < 1.0:
        raise StatsError("probability must lie in (0, 1)")
    lo, hi = 0.0, 1.0
    while studentized_range_cdf(hi, k, df) < p:
        hi *= 2.0
        if hi > 1e4:
            raise UnsupportedRangeError(f"cannot bracket q for p={p}, k={k}, df={df}")
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if studentized_range_cdf(mid, k, df) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# -- tests ----------------------------------------------------------------------
@dataclass
class AnovaResult:
    F: float
    df_between: int
    df_within: int
    p: float
    ss_between: float
    ss_within: float
    degenerate: bool = False

    @property
    def ms_within(self) -> float:
        return self.ss_within / self.df_within


def _as_groups(groups) -> list[SampleGroup]:
    if isinstance(groups, Mapping):
        return [SampleGroup(k, v) for k, v in groups.items()]
    return [g if isinstance(g, SampleGroup) else SampleGroup(str(i), g) for i, g in enumerate(groups)]


def anova_oneway(groups) -> AnovaResult:
    gs = _as_groups(groups)
    if len(gs) < 2:
        raise StatsError("ANOVA needs at least two groups")
    if any(len(g.samples) < 2 for g in gs):
        raise StatsError("every ANOVA group needs at least two samples")
    all_x = np.concatenate([g.samples for g in gs])
    grand = all_x.mean()
    ssb = math.fsum(len(g.samples) * (g.samples.mean() - grand) ** 2 for g in gs)
    ssw = math.fsum(float(((g.samples - g.samples.mean()) ** 2).sum()) for g in gs)
    dfb = len(gs) - 1
    dfw = len(all_x) - len(gs)
    scale = max(1.0, float(np.abs(all_x).max()))
    if ssw <= 1e-24 * scale * scale * len(all_x):
        if ssb <= 1e-24 * scale * scale * len(all_x):
            return AnovaResult(0.0, dfb, dfw, 1.0, ssb, ssw, degenerate=True)
        return AnovaResult(math.inf, dfb, dfw, 0.0, ssb, ssw, degenerate=True)
    F = (ssb / dfb) / (ssw / dfw)
    return AnovaResult(F, dfb, dfw, f_sf(F, dfb, dfw), ssb, ssw)


@dataclass
class TukeyRow:
    group1: str
    group2: str
    diff: float
    ci_low: float
    ci_high: float
    threshold: float
    significant: bool


def tukey_hsd(groups, alpha: float = 0.05) -> list[TukeyRow]:
    """Pairwise mean differences (group2 - group1) with simultaneous CIs."""
    gs = _as_groups(groups)
    an = anova_oneway(gs)
    k = len(gs)
    q = studentized_range_quantile(1.0 - alpha, k, an.df_within)
    msw = an.ms_within
    rows = []
    for g1, g2 in combinations(gs, 2):
        n1, n2 = len(g1.samples), len(g2.samples)
        diff = float(g2.samples.mean() - g1.samples.mean())
        if n1 == n2:
            half = q * math.sqrt(msw / n1)
        else:
            half = q / math.sqrt(2.0) * math.sqrt(msw * (1.0 / n1 + 1.0 / n2))
        lo, hi = diff - half, diff + half
        rows.append(TukeyRow(g1.label, g2.label, diff, lo, hi, half, not (lo <= 0.0 <= hi)))
    return rows


def silverman_bandwidth(samples: Sequence[float]) -> float:
    x = np.asarray(samples, dtype=float)
    if x.size < 2:
        raise StatsError("bandwidth needs at least two samples")
    sd = float(x.std(ddof=1))
    q75, q25 = np.percentile(x, [75, 25])
    iqr = float(q75 - q25) / 1.34
    spread = min(sd, iqr) if iqr > 0 else sd
    if spread <= 0:
        raise StatsError("zero-variance sample: bandwidth undefined")
    return 0.9 * spread * x.size ** (-0.2)


def kde(samples: Sequence[float], grid: Sequence[float], bandwidth: float | None = None) -> np.ndarray:
    """Gaussian kernel density of ``samples`` evaluated on ``grid``."""
    x = np.asarray(samples, dtype=float)
    h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    if h <= 0:
        raise StatsError("bandwidth must be positive")
    g = np.asarray(grid, dtype=float)
    u = (g[:, None] - x[None, :]) / h
    return np.exp(-0.5 * u * u).sum(axis=1) / (x.size * h * math.sqrt(2.0 * math.pi))


def kde_grid(groups: Sequence[Sequence[float]], points: int = 256, pad_bandwidths: float = 4.0) -> np.ndarray:
    """A shared grid wide enough to hold every group's density."""
    lo, hi = math.inf, -math.inf
    for g in groups:
        x = np.asarray(g, dtype=float)
        try:
            h = silverman_bandwidth(x)
        except StatsError:
            h = 1.0
        lo = min(lo, float(x.min()) - pad_bandwidths * h)
        hi = max(hi, float(x.max()) + pad_bandwidths * h)
    return np.linspace(lo, hi, points)


@dataclass
class AssumptionCheck:
    label: str
    n: int
    skewness: float
    excess_kurtosis: float


def assumption_report(groups) -> dict:
    """Normality and equal-variance screen; flags when a rank-based test would be safer."""
    gs = _as_groups(groups)
    rows = []
    variances = []
    for g in gs:
        x = g.samples
        m = x.mean()
        sd = x.std()
        if sd > 0:
            skew = float(np.mean(((x - m) / sd) ** 3))
            kurt = float(np.mean(((x - m) / sd) ** 4) - 3.0)
        else:
            skew = kurt = 0.0
        rows.append(AssumptionCheck(g.label, int(x.size), skew, kurt))
        variances.append(float(x.var(ddof=1)) if x.size > 1 else 0.0)
    pos = [v for v in variances if v > 0]
    ratio = max(pos) / min(pos) if pos else 1.0
    violated = ratio > 4.0 or any(abs(r.skewness) > 1.0 or abs(r.excess_kurtosis) > 2.0 for r in rows)
    return {
        "groups": [asdict(r) for r in rows],
        "variance_ratio": ratio,
        "assumptions_questionable": violated,
        "note": "non-parametric alternative advised" if violated else "",
    }
