import math

import numpy as np
import pytest
from scipy import stats as sps

from neurovox.errors import DegenerateInputError, DomainError
from neurovox.stats import (
    bland_altman,
    bonferroni,
    f_ppf,
    icc31,
    pearson,
    wilcoxon_signed_rank,
)


# ---------------------------------------------------------------------------
# Oracles


def enumerate_wilcoxon_p(d: np.ndarray) -> float:
    """Two-sided exact p by brute-force enumeration of all sign patterns."""
    d = d[d != 0.0]
    n = len(d)
    ranks = sps.rankdata(np.abs(d))  # mid-ranks for ties
    w_obs = ranks[d > 0].sum()
    bits = (np.arange(2**n)[:, None] >> np.arange(n)) & 1
    w_all = bits @ ranks
    eps = 1e-9
    lo = (w_all <= w_obs + eps).mean()
    hi = (w_all >= w_obs - eps).mean()
    return min(1.0, 2.0 * min(lo, hi))


def anova_icc31(data: np.ndarray):
    """ICC(3,1) via the residual-matrix ANOVA route."""
    n, k = data.shape
    grand = data.mean()
    rows = data.mean(axis=1, keepdims=True)
    cols = data.mean(axis=0, keepdims=True)
    resid = data - rows - cols + grand
    bms = k * ((rows - grand) ** 2).sum() / (n - 1)
    ems = (resid**2).sum() / ((n - 1) * (k - 1))
    return (bms - ems) / (bms + (k - 1) * ems)


# ---------------------------------------------------------------------------
# Pearson


def test_pearson_perfect_lines():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    assert pearson(x, 2.0 * x + 1.0) == pytest.approx(1.0, abs=1e-12)
    assert pearson(x, -x) == pytest.approx(-1.0, abs=1e-12)


def test_pearson_hand_value():
    assert pearson([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5, abs=1e-12)


def test_pearson_affine_invariance(rng):
    x = rng.normal(size=30)
    y = rng.normal(size=30)
    r = pearson(x, y)
    assert pearson(3.0 * x + 5.0, -2.0 * y + 1.0) == pytest.approx(-r, abs=1e-10)


def test_pearson_matches_numpy(rng):
    for _ in range(10):
        x = rng.normal(size=25)
        y = x + rng.normal(size=25)
        assert pearson(x, y) == pytest.approx(np.corrcoef(x, y)[0, 1], abs=1e-12)


def test_pearson_degenerate():
    with pytest.raises(DegenerateInputError):
        pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(DomainError):
        pearson([1.0, 2.0], [1.0, 2.0])


# ---------------------------------------------------------------------------
# ICC(3,1)


def test_icc_hand_table_shifted_raters():
    data = np.array([[1, 2], [2, 3], [3, 4], [4, 5], [5, 6]], dtype=float)
    out = icc31(data)
    assert out.icc == 1.0
    assert (out.ci_low, out.ci_high) == (1.0, 1.0)
    assert out.pearson_r == pytest.approx(1.0, abs=1e-12)


def test_icc_duplicate_columns():
    data = np.column_stack([np.arange(6.0), np.arange(6.0)])
    assert icc31(data).icc == 1.0


def test_icc_column_shift_invariance(rng):
    data = rng.normal(size=(10, 3)) + rng.normal(size=(10, 1)) * 2.0
    shifted = data + np.array([0.0, 5.0, -3.0])
    a, b = icc31(data), icc31(shifted)
    assert a.icc == pytest.approx(b.icc, abs=1e-9)
    assert a.ci_low == pytest.approx(b.ci_low, abs=1e-6)


def test_icc_matches_anova_oracle(rng):
    for _ in range(40):
        n = int(rng.integers(5, 15))
        k = int(rng.integers(2, 5))
        subj = rng.normal(scale=2.0, size=(n, 1))
        data = subj + rng.normal(scale=1.0, size=(n, k))
        assert icc31(data).icc == pytest.approx(anova_icc31(data), abs=1e-9)


def test_icc_ci_brackets_estimate(rng):
    data = rng.normal(size=(12, 1)) * 3.0 + rng.normal(size=(12, 2))
    out = icc31(data)
    assert out.ci_low <= out.icc <= out.ci_high
    assert out.ci_high <= 1.0


def test_icc_shape_errors():
    with pytest.raises(DomainError):
        icc31(np.zeros((4, 2)))
    with pytest.raises(DomainError):
        icc31(np.zeros((6, 1)))
    bad = np.ones((6, 2))
    bad[0, 0] = np.nan
    with pytest.raises(DomainError):
        icc31(bad)


def test_f_quantile_matches_scipy():
    for d1, d2 in ((4, 8), (9, 9), (19, 19), (1, 30), (30, 1)):
        for q in (0.025, 0.5, 0.975):
            assert f_ppf(q, d1, d2) == pytest.approx(sps.f.ppf(q, d1, d2), abs=1e-7)


# ---------------------------------------------------------------------------
# Bland-Altman


def test_bland_altman_hand_case():
    out = bland_altman(ref=[1.0, 1.0], test=[0.0, 2.0])  # diffs -1, +1
    assert out.bias == 0.0
    assert out.sd_diff == pytest.approx(math.sqrt(2.0))
    assert out.loa_high == pytest.approx(1.96 * math.sqrt(2.0))
    assert out.loa_high == pytest.approx(2.772, abs=1e-3)
    assert out.loa_low == pytest.approx(-out.loa_high)


def test_bland_altman_identical_and_swap(rng):
    x = rng.normal(size=12)
    same = bland_altman(x, x)
    assert same.bias == 0.0 and same.sd_diff == 0.0
    assert same.loa_low == 0.0 and same.loa_high == 0.0
    y = x + rng.normal(size=12)
    fw, bw = bland_altman(x, y), bland_altman(y, x)
    assert fw.bias == pytest.approx(-bw.bias)
    assert fw.loa_high == pytest.approx(-bw.loa_low)


def test_bland_altman_shape_error():
    with pytest.raises(DomainError):
        bland_altman([1.0], [2.0])


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank


def test_wilcoxon_n3_all_positive():
    out = wilcoxon_signed_rank([2.0, 4.0, 6.0], [1.0, 2.0, 3.0])
    assert out.p_value == pytest.approx(0.25)
    assert out.method == "exact"
    assert out.n_effective == 3
    assert out.statistic == 6.0


def test_wilcoxon_identical_vectors():
    x = [1.0, 2.0, 3.0, 4.0]
    out = wilcoxon_signed_rank(x, x)
    assert out.p_value == 1.0
    assert out.n_effective == 0


def test_wilcoxon_exact_matches_enumeration(rng):
    for _ in range(60):
        n = int(rng.integers(3, 13))
        d = rng.normal(size=n).round(1)  # rounding provokes ties and zeros
        x = rng.normal(size=n).round(1)
        y = x - d
        diffs = x - y  # exactly what the implementation ranks
        if not (diffs != 0.0).any():
            continue
        out = wilcoxon_signed_rank(x, y)
        assert out.method == "exact"
        assert out.p_value == pytest.approx(enumerate_wilcoxon_p(diffs), abs=1e-12)


def test_wilcoxon_symmetry(rng):
    x = rng.normal(size=10)
    y = rng.normal(size=10)
    assert wilcoxon_signed_rank(x, y).p_value == pytest.approx(
        wilcoxon_signed_rank(y, x).p_value, abs=1e-12)


def test_wilcoxon_normal_approx_near_exact_at_cutoff(rng):
    # At n = 20 the exact route still applies; the normal approximation
    # evaluated by hand should sit within 0.02 of it.
    for _ in range(10):
        x = rng.normal(size=20)
        y = x - rng.normal(loc=0.3, scale=1.0, size=20)
        out = wilcoxon_signed_rank(x, y)
        assert out.method == "exact"
        n = out.n_effective
        if n < 20:
            continue
        mean = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0
        delta = out.statistic - mean
        if delta == 0.0:
            continue
        z = (delta - 0.5 * math.copysign(1.0, delta)) / math.sqrt(var)
        p_norm = 2.0 * sps.norm.sf(abs(z))
        assert out.p_value == pytest.approx(p_norm, abs=0.02)


def test_wilcoxon_switches_to_normal_beyond_cutoff(rng):
    x = rng.normal(size=25)
    y = x - rng.normal(loc=0.5, size=25)
    out = wilcoxon_signed_rank(x, y)
    assert out.method == "normal-approx"
    assert 0.0 <= out.p_value <= 1.0


def test_wilcoxon_matches_scipy_exact(rng):
    for _ in range(20):
        n = int(rng.integers(6, 13))
        x = rng.normal(size=n)
        y = x - rng.normal(size=n)
        ours = wilcoxon_signed_rank(x, y)
        ref = sps.wilcoxon(x, y, mode="exact")
        assert ours.p_value == pytest.approx(ref.pvalue, abs=1e-12)


def test_wilcoxon_shape_error():
    with pytest.raises(DomainError):
        wilcoxon_signed_rank([1.0, 2.0], [2.0, 1.0])


# ---------------------------------------------------------------------------
# Bonferroni


def test_bonferroni_scales_and_caps():
    assert bonferroni([0.01, 0.04], m=3) == [pytest.approx(0.03), pytest.approx(0.12)]
    assert bonferroni([0.6, 0.001], m=4) == [1.0, pytest.approx(0.004)]


def test_bonferroni_m_too_small():
    with pytest.raises(DomainError):
        bonferroni([0.1, 0.2, 0.3], m=2)
