"""Agreement and hypothesis-test statistics.

Implements the small statistical toolbox the validation harness needs:
Pearson correlation, ICC(3,1) with a Shrout-Fleiss 95% confidence interval,
Bland-Altman bias and limits of agreement, the paired Wilcoxon signed-rank
test (exact for small samples, normal approximation beyond), and Bonferroni
correction.  F quantiles are computed in-house from the regularised
incomplete beta function so no statistics library is required.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, DomainError

# Wilcoxon switches from the exact null distribution to the normal
# approximation above this effective sample size.
EXACT_CUTOFF = 20


@dataclass
class AgreementStats:
    icc: float
    ci_low: float
    ci_high: float
    pearson_r: float


@dataclass
class BlandAltman:
    bias: float
    loa_low: float
    loa_high: float
    sd_diff: float


@dataclass
class TestResult:
    statistic: float
    p_value: float
    method: str  # "exact" or "normal-approx"
    n_effective: int


# ---------------------------------------------------------------------------
# Regularised incomplete beta and F quantiles


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 400):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 3e-14:
            break
    return h


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularised incomplete beta function I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise DomainError("beta parameters must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def f_cdf(x: float, d1: float, d2: float) -> float:
    if x <= 0.0:
        return 0.0
    return betainc_reg(d1 / 2.0, d2 / 2.0, d1 * x / (d1 * x + d2))


def f_ppf(q: float, d1: float, d2: float, tol: float = 1e-10) -> float:
    """Quantile of the F(d1, d2) distribution by bisection to abs tol."""
    if not 0.0 < q < 1.0:
        raise DomainError("quantile level must be in (0, 1)")
    lo, hi = 0.0, 1.0
    while f_cdf(hi, d1, d2) < q:
        hi *= 2.0
        if hi > 1e14:
            raise DomainError("F quantile out of range")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if f_cdf(mid, d1, d2) < q:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _norm_cdf(z: float) -> float:
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


# ---------------------------------------------------------------------------
# Agreement statistics


def pearson(x, y) -> float:
    """Sample Pearson correlation coefficient."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 3:
        raise DomainError("pearson needs two equal-length vectors of length >= 3")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = math.sqrt(float(dx @ dx))
    sy = math.sqrt(float(dy @ dy))
    if sx == 0.0 or sy == 0.0:
        raise DegenerateInputError("pearson of a constant vector")
    return float(dx @ dy) / (sx * sy)


def icc31(data) -> AgreementStats:
    """ICC(3,1): two-way mixed-effects, single-measures, consistency form.

    ``data`` is an n-subjects x k-raters matrix with no missing cells.  The
    95% CI uses the F interval on BMS/EMS with (n-1, (n-1)(k-1)) degrees of
    freedom.  A zero error mean square (raters identical up to a shift)
    returns ICC 1 with the degenerate CI [1, 1].
    """
    data = np.asarray(data, dtype=float)
    if data.ndim != 2:
        raise DomainError("icc31 needs a 2-D matrix")
    n, k = data.shape
    if n < 5 or k < 2:
        raise DomainError(f"icc31 needs >= 5 subjects and >= 2 raters, got {n}x{k}")
    if not np.isfinite(data).all():
        raise DomainError("icc31 input has missing or non-finite cells")
    grand = data.mean()
    rows = data.mean(axis=1)
    cols = data.mean(axis=0)
    ss_total = float(((data - grand) ** 2).sum())
    ss_rows = k * float(((rows - grand) ** 2).sum())
    ss_cols = n * float(((cols - grand) ** 2).sum())
    ss_err = max(ss_total - ss_rows - ss_cols, 0.0)
    df1 = n - 1
    df2 = (n - 1) * (k - 1)
    bms = ss_rows / df1
    ems = ss_err / df2
    r = _pearson_or_nan(data)
    if ems <= 1e-12 * max(bms, 1e-30):
        return AgreementStats(icc=1.0, ci_low=1.0, ci_high=1.0, pearson_r=r)
    icc = (bms - ems) / (bms + (k - 1) * ems)
    f_obs = bms / ems
    f_low = f_obs / f_ppf(0.975, df1, df2)
    f_high = f_obs * f_ppf(0.975, df2, df1)
    ci_low = (f_low - 1.0) / (f_low + k - 1.0)
    ci_high = (f_high - 1.0) / (f_high + k - 1.0)
    return AgreementStats(icc=float(icc), ci_low=float(ci_low), ci_high=float(ci_high),
                          pearson_r=r)


def _pearson_or_nan(data: np.ndarray) -> float:
    if data.shape[1] != 2:
        return float("nan")
    try:
        return pearson(data[:, 0], data[:, 1])
    except DegenerateInputError:
        return float("nan")


def bland_altman(ref, test) -> BlandAltman:
    """Bias and 95% limits of agreement of test - ref."""
    ref = np.asarray(ref, dtype=float)
    test = np.asarray(test, dtype=float)
    if ref.shape != test.shape or ref.ndim != 1 or len(ref) < 2:
        raise DomainError("bland_altman needs two equal-length vectors of length >= 2")
    diffs = test - ref
    bias = float(diffs.mean())
    sd = float(diffs.std(ddof=1))
    return BlandAltman(bias=bias, loa_low=bias - 1.96 * sd, loa_high=bias + 1.96 * sd,
                       sd_diff=sd)


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank


def _midranks(values: np.ndarray) -> np.ndarray:
    """Ranks (1-based) with ties assigned the mid-rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _exact_wplus_counts(double_ranks: np.ndarray) -> np.ndarray:
    """Null distribution of 2*W+ over all sign patterns, as pattern counts."""
    total = int(double_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    top = 0
    for r in double_ranks:
        r = int(r)
        counts[r : top + r + 1] += counts[: top + 1]
        top += r
    return counts


def wilcoxon_signed_rank(x, y) -> TestResult:
    """Two-sided paired Wilcoxon signed-rank test.

    Zero differences are dropped; |d| ties get mid-ranks.  The p-value is
    exact (full sign-pattern null distribution) when the effective n is at
    most EXACT_CUTOFF, otherwise a normal approximation with tie-corrected
    variance and a 0.5 continuity correction.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 3:
        raise DomainError("wilcoxon needs two equal-length vectors of length >= 3")
    d = x - y
    d = d[d != 0.0]
    n = len(d)
    if n == 0:
        return TestResult(statistic=0.0, p_value=1.0, method="exact", n_effective=0)
    ranks = _midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= EXACT_CUTOFF:
        double_ranks = np.rint(2.0 * ranks).astype(np.int64)
        counts = _exact_wplus_counts(double_ranks)
        w2 = int(round(2.0 * w_plus))
        n_patterns = 2**n
        tail_low = int(counts[: w2 + 1].sum())
        tail_high = int(counts[w2:].sum())
        p = min(1.0, 2.0 * min(tail_low, tail_high) / n_patterns)
        return TestResult(statistic=w_plus, p_value=p, method="exact", n_effective=n)
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var -= float((tie_counts**3 - tie_counts).sum()) / 48.0
    if var <= 0:
        raise DegenerateInputError("wilcoxon variance vanished (all |d| tied)")
    delta = w_plus - mean
    if delta == 0.0:
        return TestResult(statistic=w_plus, p_value=1.0, method="normal-approx",
                          n_effective=n)
    z = (delta - 0.5 * math.copysign(1.0, delta)) / math.sqrt(var)
    p = min(1.0, 2.0 * (1.0 - _norm_cdf(abs(z))))
    return TestResult(statistic=w_plus, p_value=p, method="normal-approx", n_effective=n)


def bonferroni(p_values, m: int) -> list[float]:
    """Multiply each p-value by m and cap at 1."""
    p_values = list(p_values)
    if m < len(p_values):
        raise DomainError("Bonferroni m must be >= number of p-values")
    return [min(1.0, p * m) for p in p_values]
