"""Identifiability and adequacy diagnostics for a fitted factor model.

The observed information of the marginal Gaussian model is block diagonal
between the mean and the variances: the mean block sums h_ij h_ik / V_i over
all observations, the per-group variance blocks sum h_ij^2 h_ik^2 / (2 V_i^2)
over that group's observations, and the mean/variance cross terms vanish.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._stats import normal_quantile
from .exceptions import DegenerateVariance, IndexOutOfRange, PreconditionViolated
from .model import Dataset, ModelParams, check_compatible, observation_variances


@dataclass(frozen=True, eq=False)
class FisherBlocks:
    """Fisher information blocks: ``mean_block`` (p, p) and ``var_blocks``
    (q, p, p), one variance block per group."""

    mean_block: np.ndarray
    var_blocks: np.ndarray


@dataclass(frozen=True, eq=False)
class AsymptoticVariances:
    """Asymptotic variances of the estimates.

    ``var_of_mean`` and ``var_of_sigma2`` are the element-wise reciprocals of
    the block diagonals (the cross-terms-negligible approximation), with inf
    where the information vanishes.  ``mean_block_inv`` and ``var_block_invs``
    expose the full block inverses (None where a block is singular); the Wald
    test draws its variance terms from the latter.
    """

    var_of_mean: np.ndarray
    var_of_sigma2: np.ndarray
    mean_block_inv: np.ndarray | None
    var_block_invs: tuple


def fisher_information(d: Dataset, params: ModelParams) -> FisherBlocks:
    v = observation_variances(d, params)
    if np.any(v < d.variance_floor):
        raise DegenerateVariance("observation variances below the floor")
    mean_block = d.h.T @ (d.h / v[:, None])
    var_blocks = np.empty((d.q, d.p, d.p))
    h2 = d.h * d.h
    for s in range(d.q):
        mask = d.groups0 == s
        rows = h2[mask]
        var_blocks[s] = 0.5 * rows.T @ (rows / (v[mask] ** 2)[:, None])
    return FisherBlocks(mean_block=mean_block, var_blocks=var_blocks)


def _try_inv(block: np.ndarray):
    try:
        inv = np.linalg.inv(block)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(inv)):
        return None
    return inv


def asymptotic_variances(f: FisherBlocks) -> AsymptoticVariances:
    with np.errstate(divide="ignore"):
        var_m = 1.0 / np.diag(f.mean_block)
        var_s = np.stack([1.0 / np.diag(b) for b in f.var_blocks])
    return AsymptoticVariances(
        var_of_mean=var_m,
        var_of_sigma2=var_s,
        mean_block_inv=_try_inv(f.mean_block),
        var_block_invs=tuple(_try_inv(b) for b in f.var_blocks),
    )


def nec(f: FisherBlocks, params: ModelParams) -> np.ndarray:
    """Normalized estimation criterion, shape (q, p).

    NEC[s, j] = sd(m_j) / sd_{s,j} with sd(m_j) from the reciprocal of the
    mean-block diagonal; inf where the group variance is zero.
    """
    with np.errstate(divide="ignore"):
        sd_m = np.sqrt(1.0 / np.diag(f.mean_block))
    with np.errstate(divide="ignore"):
        out = sd_m[None, :] / np.sqrt(params.sigma2)
    return out


def standardized_residuals(d: Dataset, params: ModelParams) -> np.ndarray:
    """(y_i - h_i m) / sqrt(V_i), using each observation's own group variance."""
    v = observation_variances(d, params)
    if np.any(v < d.variance_floor):
        raise DegenerateVariance("observation variances below the floor")
    return (d.y - d.h @ params.m) / np.sqrt(v)


def prediction_interval(
    params: ModelParams,
    group: int,
    factor: int,
    form: str = "gaussian",
    confidence: float = 0.95,
):
    """Central prediction interval for one factor in one group (0-based
    indices).

    The Gaussian form returns m +/- z*sd; the log-Gaussian form exponentiates
    both endpoints.  At the default 95% level z is the conventional rounded
    quantile 1.96; other levels use the exact normal quantile.
    """
    if not 0 <= group < params.q:
        raise IndexOutOfRange(f"group index {group} out of range [0, {params.q})")
    if not 0 <= factor < params.p:
        raise IndexOutOfRange(f"factor index {factor} out of range [0, {params.p})")
    if not 0.0 < confidence < 1.0:
        raise PreconditionViolated("confidence must lie in (0, 1)")
    z = 1.96 if confidence == 0.95 else normal_quantile(0.5 * (1.0 + confidence))
    m = float(params.m[factor])
    sd = math.sqrt(float(params.sigma2[group, factor]))
    lo, hi = m - z * sd, m + z * sd
    if form == "gaussian":
        return lo, hi
    if form == "log-gaussian":
        return math.exp(lo), math.exp(hi)
    raise PreconditionViolated(f"unknown interval form {form!r}")


@dataclass(frozen=True, eq=False)
class DiagnosticsReport:
    """Bundle of the standard post-fit diagnostics."""

    nec: np.ndarray
    var_of_mean: np.ndarray
    var_of_sigma2: np.ndarray
    residuals: np.ndarray
    prediction_intervals: np.ndarray  # (q, p, 2)
    form: str


def diagnostics_report(d: Dataset, params: ModelParams, form: str = "gaussian") -> DiagnosticsReport:
    f = fisher_information(d, params)
    av = asymptotic_variances(f)
    pis = np.empty((params.q, params.p, 2))
    for s in range(params.q):
        for j in range(params.p):
            pis[s, j] = prediction_interval(params, s, j, form=form)
    return DiagnosticsReport(
        nec=nec(f, params),
        var_of_mean=av.var_of_mean,
        var_of_sigma2=av.var_of_sigma2,
        residuals=standardized_residuals(d, params),
        prediction_intervals=pis,
        form=form,
    )
