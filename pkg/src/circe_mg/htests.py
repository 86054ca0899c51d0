"""Hypothesis tests and model-selection helpers.

Wald test for equality of one factor's variance across two groups, AIC for
pooled-versus-multigroup comparison, and a Kolmogorov-Smirnov normality check
of the standardized residuals against a fixed N(0, 1) null (no parameter-
estimation correction — the test is deliberately conservative in that
respect, which the calibration tests quantify).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._stats import CHI2_1_CRIT_5PCT, chi2_sf_1, kolmogorov_sf, normal_cdf_array, normal_quantile
from .diagnostics import FisherBlocks, asymptotic_variances
from .exceptions import CirceError, IndexOutOfRange, TooFewSamples
from .model import ModelParams


@dataclass(frozen=True)
class WaldResult:
    """Wald comparison of sigma2[s, j] and sigma2[s2, j].

    With an unavailable variance term the test is undefined and reported as
    statistic=nan, p_value=nan, reject_at_5pct=False.
    """

    statistic: float
    p_value: float
    pair: tuple
    reject_at_5pct: bool


def wald_test(f: FisherBlocks, params: ModelParams, s: int, s2: int, j: int) -> WaldResult:
    """Test sigma2[s, j] == sigma2[s2, j] (0-based indices).

    The variance terms come from the full per-group variance-block inverses;
    the cross-covariance between groups is zero because the information is
    block diagonal across groups.  The statistic is asymptotically
    chi-square(1) under equality.
    """
    q, p = params.q, params.p
    for name, val, hi in (("group", s, q), ("group", s2, q), ("factor", j, p)):
        if not 0 <= val < hi:
            raise IndexOutOfRange(f"{name} index {val} out of range [0, {hi})")
    if s == s2:
        raise CirceError("Wald comparison needs two distinct groups")
    av = asymptotic_variances(f)
    pair = (s, s2, j)

    def _var(g):
        inv = av.var_block_invs[g]
        if inv is None:
            return math.inf
        return float(inv[j, j])

    var_s, var_s2 = _var(s), _var(s2)
    denom = var_s + var_s2
    if not math.isfinite(denom) or denom <= 0:
        return WaldResult(math.nan, math.nan, pair, False)
    diff = float(params.sigma2[s, j] - params.sigma2[s2, j])
    stat = diff * diff / denom
    return WaldResult(stat, chi2_sf_1(stat), pair, stat > CHI2_1_CRIT_5PCT)


def n_parameters(p: int, q: int, model: str) -> int:
    """Free parameter count: 2p pooled, (q+1)p multigroup."""
    if p < 1 or q < 1:
        raise CirceError("p and q must be >= 1")
    if model == "pooled":
        return 2 * p
    if model == "multigroup":
        return (q + 1) * p
    raise CirceError(f"unknown model {model!r}")


def aic(loglik: float, n_params: int) -> float:
    """Akaike criterion 2*k - 2*loglik; lower is better."""
    if n_params < 1:
        raise CirceError("n_params must be >= 1")
    return 2.0 * n_params - 2.0 * loglik


@dataclass(frozen=True)
class KsResult:
    statistic: float
    p_value: float
    n: int


def ks_normality_test(residuals) -> KsResult:
    """Kolmogorov-Smirnov test of the residuals against N(0, 1).

    D_n is the classic two-sided sup statistic over the sorted sample; the
    p-value is the asymptotic Kolmogorov tail at sqrt(n) * D_n.
    """
    e = np.sort(np.asarray(residuals, dtype=float).reshape(-1))
    n = e.shape[0]
    if n < 3:
        raise TooFewSamples(f"KS test needs at least 3 residuals, got {n}")
    if not np.all(np.isfinite(e)):
        raise CirceError("residuals contain non-finite values")
    fhat = normal_cdf_array(e)
    i = np.arange(1, n + 1)
    d_plus = np.max(i / n - fhat)
    d_minus = np.max(fhat - (i - 1) / n)
    stat = float(max(d_plus, d_minus))
    return KsResult(stat, kolmogorov_sf(math.sqrt(n) * stat), n)


def qq_plot_data(residuals) -> np.ndarray:
    """Sorted residuals against normal quantiles at (i - 1/2) / n; (n, 2)
    array with the theoretical quantile in column 0."""
    e = np.sort(np.asarray(residuals, dtype=float).reshape(-1))
    n = e.shape[0]
    if n < 2:
        raise TooFewSamples(f"QQ data needs at least 2 residuals, got {n}")
    theo = np.array([normal_quantile((i - 0.5) / n) for i in range(1, n + 1)])
    return np.column_stack([theo, e])
