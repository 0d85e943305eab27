"""Nonparametric tests, effect sizes, bootstrap intervals and reliability.

Exact null distributions are built by dynamic programming over doubled
mid-ranks (mid-ranks are multiples of 1/2), so ties are handled exactly
without enumerating subsets. Above ``exact_max_n`` pooled observations the
tie- and continuity-corrected normal approximation is used.

Rank-biserial ``r`` is signed so that positive values mean the data lean
towards the alternative hypothesis. For two-sided tests positive means
``a > b`` (Mann-Whitney) or positive differences (Wilcoxon).
"""

from __future__ import annotations

import math
from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats as _sps

from councilsim.core import EffectBands
from councilsim.errors import DegenerateTestError, PreconditionError

GREATER = "greater"
LESS = "less"
TWO_SIDED = "two-sided"
_ALIASES = {
    "greater": GREATER,
    "positive": GREATER,
    "a>b": GREATER,
    "less": LESS,
    "negative": LESS,
    "a<b": LESS,
    "two-sided": TWO_SIDED,
    "two_sided": TWO_SIDED,
}

_EPS = 1e-9


def _alternative(alt: str) -> str:
    try:
        return _ALIASES[alt.replace(" ", "").lower()]
    except KeyError:
        raise PreconditionError(f"unknown alternative {alt!r}") from None


@dataclass(frozen=True)
class StatResult:
    test: str
    statistic: float
    p: float
    alternative: str
    r: float
    band: str
    n: tuple[int, ...]
    method: str
    ci: tuple[float, float] | None = None
    n_dropped: int = 0
    significant: bool | None = None
    significant_bonferroni: bool | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p={self.p} outside [0, 1]")
        if not -1.0 - _EPS <= self.r <= 1.0 + _EPS:
            raise ValueError(f"r={self.r} outside [-1, 1]")
        if self.ci is not None and self.ci[0] > self.ci[1]:
            raise ValueError("CI lower bound exceeds upper bound")

    def flagged(self, alpha: float, bonferroni_alpha: float) -> StatResult:
        return replace(self, significant=self.p < alpha, significant_bonferroni=self.p < bonferroni_alpha)

    def with_ci(self, ci: tuple[float, float]) -> StatResult:
        return replace(self, ci=ci)


def effect_band(r: float, bands: EffectBands = EffectBands()) -> str:
    a = abs(r)
    if a >= bands.large:
        return "large"
    if a >= bands.medium:
        return "medium"
    if a >= bands.small:
        return "small"
    return "negligible"


BAND_LETTER = {"large": "L", "medium": "M", "small": "S", "negligible": "-"}


# --------------------------------------------------------------------------
# ranks


def rankdata(values: Sequence[float]) -> list[float]:
    """1-based ranks; tied values share the mean of the ranks they span."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        mid = (i + j) / 2 + 1
        for t in range(i, j + 1):
            ranks[order[t]] = mid
        i = j + 1
    return ranks


def _tie_term(values: Sequence[float]) -> float:
    return float(sum(t**3 - t for t in Counter(values).values()))


def _norm_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def _tail_p(counts: dict[int, int], total: int, observed: int, centre2: int, alt: str) -> float:
    # counts are over doubled statistics; centre2 is twice the null mean (doubled scale)
    if alt == LESS:
        hit = sum(c for s, c in counts.items() if s <= observed)
    elif alt == GREATER:
        hit = sum(c for s, c in counts.items() if s >= observed)
    else:
        dev = abs(2 * observed - centre2)
        hit = sum(c for s, c in counts.items() if abs(2 * s - centre2) >= dev)
    return min(1.0, hit / total)


def _subset_sum_counts(weights: Sequence[int], size: int | None) -> dict[int, int]:
    """Number of subsets (of the given size, or any size) achieving each sum."""
    if size is None:
        dist: dict[int, int] = {0: 1}
        for w in weights:
            nxt = dict(dist)
            for s, c in dist.items():
                nxt[s + w] = nxt.get(s + w, 0) + c
            dist = nxt
        return dist
    layers: list[dict[int, int]] = [{0: 1}] + [{} for _ in range(size)]
    for w in weights:
        for k in range(size, 0, -1):
            prev = layers[k - 1]
            if not prev:
                continue
            cur = layers[k]
            for s, c in prev.items():
                cur[s + w] = cur.get(s + w, 0) + c
    return layers[size]


# --------------------------------------------------------------------------
# Mann-Whitney U


def mann_whitney_u(
    a: Sequence[float],
    b: Sequence[float],
    alternative: str = TWO_SIDED,
    *,
    exact_max_n: int = 12,
    bands: EffectBands = EffectBands(),
) -> StatResult:
    """Rank-sum test of ``a`` against ``b``; the statistic is U of ``a``.

    U counts pairs with ``a_i > b_j`` (ties count 1/2), so ``a < b``
    everywhere gives U = 0.
    """
    alt = _alternative(alternative)
    a = [float(x) for x in a]
    b = [float(x) for x in b]
    na, nb = len(a), len(b)
    if na == 0 or nb == 0:
        raise PreconditionError("both samples must be non-empty")
    pooled = a + b
    if len(set(pooled)) == 1:
        raise DegenerateTestError("all observations are identical")
    n = na + nb
    ranks = rankdata(pooled)
    r_a = sum(ranks[:na])
    u = r_a - na * (na + 1) / 2
    f = u / (na * nb)
    r = 1 - 2 * f if alt == LESS else 2 * f - 1

    if n <= exact_max_n:
        doubled = [int(round(2 * x)) for x in ranks]
        counts = _subset_sum_counts(doubled, na)
        total = math.comb(n, na)
        observed = int(round(2 * r_a))
        p = _tail_p(counts, total, observed, na * (n + 1) * 2, alt)
        method = "exact"
    else:
        mu = na * nb / 2
        var = na * nb / 12 * ((n + 1) - _tie_term(pooled) / (n * (n - 1)))
        sd = math.sqrt(var)
        if alt == GREATER:
            p = _norm_sf((u - mu - 0.5) / sd)
        elif alt == LESS:
            p = 1 - _norm_sf((u - mu + 0.5) / sd)
        else:
            p = min(1.0, 2 * _norm_sf((abs(u - mu) - 0.5) / sd))
        method = "normal"
    return StatResult(
        test="mann-whitney",
        statistic=u,
        p=max(0.0, min(1.0, p)),
        alternative=alt,
        r=r,
        band=effect_band(r, bands),
        n=(na, nb),
        method=method,
    )


# --------------------------------------------------------------------------
# Wilcoxon signed-rank


def wilcoxon_signed_rank(
    differences: Sequence[float],
    alternative: str = TWO_SIDED,
    *,
    exact_max_n: int = 12,
    bands: EffectBands = EffectBands(),
) -> StatResult:
    """Signed-rank test on paired differences; the statistic is W+.

    Zero differences are dropped before ranking and reported in ``n_dropped``.
    """
    alt = _alternative(alternative)
    d = [float(x) for x in differences]
    nonzero = [x for x in d if x != 0.0]
    dropped = len(d) - len(nonzero)
    if not nonzero:
        raise DegenerateTestError("all paired differences are zero")
    n = len(nonzero)
    ranks = rankdata([abs(x) for x in nonzero])
    w_plus = sum(rk for rk, x in zip(ranks, nonzero) if x > 0)
    w_minus = sum(rk for rk, x in zip(ranks, nonzero) if x < 0)
    r = (w_plus - w_minus) / (w_plus + w_minus)
    if alt == LESS:
        r = -r

    total_rank = n * (n + 1) / 2
    if n <= exact_max_n:
        doubled = [int(round(2 * x)) for x in ranks]
        counts = _subset_sum_counts(doubled, None)
        p = _tail_p(counts, 2**n, int(round(2 * w_plus)), int(round(2 * total_rank)), alt)
        method = "exact"
    else:
        mu = total_rank / 2
        var = n * (n + 1) * (2 * n + 1) / 24 - _tie_term([abs(x) for x in nonzero]) / 48
        sd = math.sqrt(var)
        if alt == GREATER:
            p = _norm_sf((w_plus - mu - 0.5) / sd)
        elif alt == LESS:
            p = 1 - _norm_sf((w_plus - mu + 0.5) / sd)
        else:
            p = min(1.0, 2 * _norm_sf((abs(w_plus - mu) - 0.5) / sd))
        method = "normal"
    return StatResult(
        test="wilcoxon",
        statistic=w_plus,
        p=max(0.0, min(1.0, p)),
        alternative=alt,
        r=r,
        band=effect_band(r, bands),
        n=(n,),
        method=method,
        n_dropped=dropped,
    )


# --------------------------------------------------------------------------
# bootstrap


def bootstrap_ci(
    a: Sequence[float],
    b: Sequence[float],
    *,
    paired: bool = False,
    resamples: int = 10_000,
    seed: int = 0,
    confidence: float = 0.95,
) -> tuple[float, float]:
    """Percentile interval for ``mean(a) - mean(b)``.

    Resampling draws from ``numpy.random.Generator(PCG64(seed))``: pairs are
    resampled together when ``paired``; otherwise each group independently,
    ``a`` first. Same inputs and seed give the same interval on every platform
    numpy supports.
    """
    xa = np.asarray(a, dtype=float)
    xb = np.asarray(b, dtype=float)
    if xa.size == 0 or xb.size == 0:
        raise PreconditionError("bootstrap needs non-empty samples")
    if resamples < 1:
        raise PreconditionError("resamples must be positive")
    rng = np.random.Generator(np.random.PCG64(seed))
    if paired:
        if xa.size != xb.size:
            raise PreconditionError("paired bootstrap needs equal-length samples")
        d = xa - xb
        idx = rng.integers(0, d.size, size=(resamples, d.size))
        dist = d[idx].mean(axis=1)
    else:
        ia = rng.integers(0, xa.size, size=(resamples, xa.size))
        ib = rng.integers(0, xb.size, size=(resamples, xb.size))
        dist = xa[ia].mean(axis=1) - xb[ib].mean(axis=1)
    tail = (1 - confidence) / 2 * 100
    lo, hi = np.percentile(dist, [tail, 100 - tail])
    return float(lo), float(hi)


# --------------------------------------------------------------------------
# correlation and reliability


def _check_pair(x: Sequence[float], y: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    xa = np.asarray(x, dtype=float)
    ya = np.asarray(y, dtype=float)
    if xa.shape != ya.shape or xa.ndim != 1:
        raise PreconditionError("x and y must be 1-D and of equal length")
    if xa.size < 2:
        raise PreconditionError("need at least two points")
    return xa, ya


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    xa, ya = _check_pair(x, y)
    dx = xa - xa.mean()
    dy = ya - ya.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    # exact constancy test; sxx of a constant float vector can be a rounding residue
    if xa.min() == xa.max() or ya.min() == ya.max() or sxx <= 0 or syy <= 0:
        raise DegenerateTestError("correlation undefined: zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def pearson_test(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Pearson r with its two-sided p from the t distribution on n - 2 df."""
    r = pearson(x, y)
    n = len(x)
    if n < 3:
        return r, float("nan")
    if abs(r) >= 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1 - r * r))
    return r, float(2 * _sps.t.sf(abs(t), n - 2))


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    xa, ya = _check_pair(x, y)
    return pearson(rankdata(list(xa)), rankdata(list(ya)))


def icc_3_1(measurements: Sequence[Sequence[float]]) -> float:
    """Two-way mixed, consistency, single-measure ICC of an n x k matrix."""
    m = np.asarray(measurements, dtype=float)
    if m.ndim != 2:
        raise PreconditionError("measurements must be an n x k matrix")
    n, k = m.shape
    if n < 2 or k < 2:
        raise PreconditionError("ICC(3,1) needs n >= 2 subjects and k >= 2 occasions")
    if not np.all(np.isfinite(m)):
        raise PreconditionError("matrix must be complete and finite")
    grand = m.mean()
    ss_rows = k * float(((m.mean(axis=1) - grand) ** 2).sum())
    ss_cols = n * float(((m.mean(axis=0) - grand) ** 2).sum())
    ss_total = float(((m - grand) ** 2).sum())
    ss_err = max(ss_total - ss_rows - ss_cols, 0.0)
    ms_rows = ss_rows / (n - 1)
    ms_err = ss_err / ((n - 1) * (k - 1))
    if ms_rows <= 1e-14 * max(grand * grand, 1.0):
        raise DegenerateTestError("ICC undefined: no between-subject variance")
    return (ms_rows - ms_err) / (ms_rows + (k - 1) * ms_err)
