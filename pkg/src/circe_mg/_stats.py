"""Scalar distribution helpers (standard normal, chi-square(1), Kolmogorov).

Kept dependency-free on purpose: the CDF goes through ``math.erfc``, the
quantile through the standard library's ``NormalDist`` (accurate to ~1e-15,
far beyond the 1.2e-8 the diagnostics require), and the Kolmogorov survival
function through its classical series expansions.
"""
from __future__ import annotations

import math
from statistics import NormalDist

import numpy as np

_STD_NORMAL = NormalDist()

# 95% point of the chi-square distribution with one degree of freedom.
CHI2_1_CRIT_5PCT = 3.841459


def normal_cdf(x: float) -> float:
    """Standard normal CDF."""
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def normal_cdf_array(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.array([normal_cdf(v) for v in x.ravel()]).reshape(x.shape)


def normal_quantile(p: float) -> float:
    """Standard normal quantile (inverse CDF), p in the open unit interval."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {p}")
    return _STD_NORMAL.inv_cdf(p)


def chi2_sf_1(w: float) -> float:
    """Upper tail probability of chi-square with 1 degree of freedom.

    Uses the identity P(chi2_1 > w) = erfc(sqrt(w/2)).
    """
    if w < 0:
        raise ValueError(f"chi-square statistic must be >= 0, got {w}")
    if math.isnan(w):
        return math.nan
    return math.erfc(math.sqrt(0.5 * w))


def kolmogorov_sf(x: float, min_terms: int = 100) -> float:
    """Survival function of the Kolmogorov sup-norm limit distribution.

    For large arguments the direct alternating series
    ``2 * sum_k (-1)^(k-1) exp(-2 k^2 x^2)`` is used; for small arguments it
    oscillates, so the theta-transformed series for the CDF takes over.  At
    least ``min_terms`` terms are available in either branch, with early exit
    once the tail is converged.
    """
    if math.isnan(x):
        return math.nan
    if x <= 0.0:
        return 1.0
    if x < 1.0:
        t = math.pi * math.pi / (8.0 * x * x)
        total = 0.0
        for k in range(1, max(min_terms, 100) + 1):
            term = math.exp(-((2 * k - 1) ** 2) * t)
            total += term
            if term <= 1e-18 * max(total, 1e-300):
                break
        cdf = math.sqrt(2.0 * math.pi) / x * total
        return float(min(max(1.0 - cdf, 0.0), 1.0))
    total = 0.0
    for k in range(1, max(min_terms, 100) + 1):
        term = (-1.0) ** (k - 1) * math.exp(-2.0 * k * k * x * x)
        total += term
        if abs(term) <= 1e-18:
            break
    return float(min(max(2.0 * total, 0.0), 1.0))
