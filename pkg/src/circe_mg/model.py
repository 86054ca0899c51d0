"""Data model and marginal likelihood for multiplicative-factor uncertainty.

The estimation input couples ``n`` scalar code/experiment discrepancies ``y``
with an ``n x p`` matrix ``h`` of code-response derivatives, per-observation
known noise variances ``r`` (zero where unknown), and a partition of the
observations into ``q`` groups.  Each observation is modeled as

    y_i ~ N( h_i . m ,  sum_j h_ij^2 * sigma2[s(i), j] + r_i )

with a mean vector ``m`` shared by all groups and a per-group diagonal
variance matrix ``sigma2[s]``.  Every container is immutable once built and
every function is pure, so instances are safe to share across threads.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import (
    CirceError,
    DegenerateVariance,
    DimensionMismatch,
    EmptyGroup,
    IndexOutOfRange,
    NegativeNoiseVariance,
    PreconditionViolated,
    RankDeficientH,
)

#: Relative floor applied to observation variances (scaled by the dataset's
#: mean squared response, see :attr:`Dataset.variance_floor`).
VARIANCE_FLOOR_REL = 1e-12


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, order="C", copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Validated estimation input; build through :func:`validate_dataset`.

    Attributes
    ----------
    y : (n,) float array
    h : (n, p) float array, full column rank
    r : (n,) float array of known noise variances, >= 0
    groups : (n,) int array of compact group labels 1..q
    group_labels : original label for each compact index (position s-1 holds
        the label that was mapped to compact group s)
    n_per_group : (q,) int array of group sizes
    """

    y: np.ndarray
    h: np.ndarray
    r: np.ndarray
    groups: np.ndarray
    group_labels: tuple
    n_per_group: np.ndarray

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.h.shape[1]

    @property
    def q(self) -> int:
        return len(self.group_labels)

    @property
    def groups0(self) -> np.ndarray:
        """Zero-based group index per observation."""
        return self.groups - 1

    @property
    def variance_floor(self) -> float:
        """Numerical floor for observation variances, relative to scale(y^2)."""
        return VARIANCE_FLOOR_REL * max(1.0, float(np.mean(self.y**2)))

    @property
    def noise_known(self) -> bool:
        """Whether any observation carries a known (positive) noise variance."""
        return bool(np.any(self.r > 0))

    @property
    def singleton_groups(self) -> tuple:
        """Compact indices (1-based) of groups with a single observation."""
        return tuple(int(s) for s in np.nonzero(self.n_per_group == 1)[0] + 1)


def validate_dataset(y, h, r=None, groups=None, n_groups=None) -> Dataset:
    """Check shapes, rank, noise signs, and group structure; return a Dataset.

    Group labels may be arbitrary integers; they are compacted to 1..q in
    ascending label order and the original labels recorded.  When ``n_groups``
    is given the labels must already be 1..n_groups and every one of those
    groups must be populated (``EmptyGroup`` otherwise).
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    h = np.asarray(h, dtype=float)
    if h.ndim != 2:
        raise DimensionMismatch(f"h must be a 2-D array, got ndim={h.ndim}")
    n = y.shape[0]
    if n < 1:
        raise DimensionMismatch("need at least one observation")
    if h.shape[0] != n:
        raise DimensionMismatch(f"h has {h.shape[0]} rows but y has {n} entries")
    p = h.shape[1]
    if p < 1:
        raise DimensionMismatch("h must have at least one column")

    if r is None:
        r = np.zeros(n)
    r = np.asarray(r, dtype=float).reshape(-1)
    if r.shape[0] != n:
        raise DimensionMismatch(f"r has {r.shape[0]} entries but y has {n}")

    for name, arr in (("y", y), ("h", h), ("r", r)):
        if not np.all(np.isfinite(arr)):
            raise PreconditionViolated(f"{name} contains non-finite values")
    if np.any(r < 0):
        raise NegativeNoiseVariance("noise variances r must be >= 0")

    if p > n:
        raise RankDeficientH(f"p={p} factors but only n={n} observations")
    sv = np.linalg.svd(h, compute_uv=False)
    tol = sv[0] * n * np.finfo(float).eps
    if np.sum(sv > tol) < p:
        raise RankDeficientH("h is numerically rank deficient")

    if groups is None:
        groups = np.ones(n, dtype=int)
    groups = np.asarray(groups)
    if groups.shape != (n,):
        raise DimensionMismatch(f"groups has shape {groups.shape}, expected ({n},)")
    if not np.all(np.isfinite(np.asarray(groups, dtype=float))):
        raise CirceError("groups contains non-finite values")
    gi = np.asarray(groups, dtype=float)
    if np.any(gi != np.round(gi)):
        raise CirceError("group labels must be integers")
    gi = gi.astype(int)

    if n_groups is not None:
        if n_groups < 1:
            raise EmptyGroup("n_groups must be >= 1")
        if np.any(gi < 1) or np.any(gi > n_groups):
            raise DimensionMismatch(
                f"group labels must lie in 1..{n_groups} when n_groups is given"
            )
        counts = np.bincount(gi - 1, minlength=n_groups)
        if np.any(counts == 0):
            missing = int(np.nonzero(counts == 0)[0][0]) + 1
            raise EmptyGroup(f"group {missing} has no observations")
        labels = tuple(range(1, n_groups + 1))
        compact = gi
    else:
        uniq = np.unique(gi)
        labels = tuple(int(u) for u in uniq)
        lookup = {u: k + 1 for k, u in enumerate(labels)}
        compact = np.array([lookup[v] for v in gi], dtype=int)
        counts = np.bincount(compact - 1, minlength=len(labels))

    return Dataset(
        y=_readonly(y),
        h=_readonly(h),
        r=_readonly(r),
        groups=_readonly(compact),
        group_labels=labels,
        n_per_group=_readonly(counts),
    )


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Mean vector and per-group diagonal variances.

    ``m`` has shape (p,); ``sigma2`` has shape (q, p) with non-negative
    entries (negative raw estimates live in ``FitResult.raw_sigma2``, never
    here).
    """

    m: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float).reshape(-1)
        sigma2 = np.asarray(self.sigma2, dtype=float)
        if sigma2.ndim != 2:
            raise DimensionMismatch(f"sigma2 must be 2-D (q, p), got ndim={sigma2.ndim}")
        if sigma2.shape[1] != m.shape[0]:
            raise DimensionMismatch(
                f"sigma2 has {sigma2.shape[1]} columns but m has {m.shape[0]} entries"
            )
        if m.shape[0] < 1 or sigma2.shape[0] < 1:
            raise DimensionMismatch("m and sigma2 must be non-empty")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(sigma2))):
            raise PreconditionViolated("parameters contain non-finite values")
        if np.any(sigma2 < 0):
            raise PreconditionViolated("sigma2 entries must be >= 0")
        object.__setattr__(self, "m", _readonly(m))
        object.__setattr__(self, "sigma2", _readonly(sigma2))

    @property
    def p(self) -> int:
        return self.m.shape[0]

    @property
    def q(self) -> int:
        return self.sigma2.shape[0]


@dataclass(frozen=True)
class PredictiveMoments:
    """Marginal mean and variance of one observation, with a degeneracy flag."""

    mean: float
    var: float
    degenerate: bool


def check_compatible(d: Dataset, params: ModelParams) -> None:
    if params.p != d.p:
        raise DimensionMismatch(f"params have p={params.p} but data has p={d.p}")
    if params.q != d.q:
        raise DimensionMismatch(f"params have q={params.q} but data has q={d.q}")


def observation_variances(d: Dataset, params: ModelParams) -> np.ndarray:
    """Raw (unfloored) marginal variances V_i = sum_j h_ij^2 sigma2[s(i),j] + r_i."""
    check_compatible(d, params)
    sig_rows = params.sigma2[d.groups0]
    return (d.h * d.h * sig_rows).sum(axis=1) + d.r


def log_likelihood(d: Dataset, params: ModelParams, *, strict: bool = True) -> float:
    """Gaussian marginal log-likelihood of the dataset under ``params``.

    In strict mode (the default) a variance below the dataset's floor raises
    :class:`DegenerateVariance`; with ``strict=False`` variances are floored
    instead, which is what the fit loop uses while variances transit the
    boundary.
    """
    v = observation_variances(d, params)
    floor = d.variance_floor
    if strict and np.any(v < floor):
        raise DegenerateVariance(
            "some observation variances fall below the floor "
            f"({floor:g}); the model is degenerate at these parameters"
        )
    vf = np.maximum(v, floor)
    a = d.y - d.h @ params.m
    return float(-0.5 * np.sum(np.log(2.0 * np.pi * vf) + a * a / vf))


def predictive_moments(d: Dataset, params: ModelParams, i: int) -> PredictiveMoments:
    """Marginal moments of observation ``i`` (0-based); floors and flags
    rather than raising when the variance is degenerate."""
    check_compatible(d, params)
    if not 0 <= i < d.n:
        raise IndexOutOfRange(f"observation index {i} out of range [0, {d.n})")
    s0 = int(d.groups0[i])
    v = float((d.h[i] * d.h[i] * params.sigma2[s0]).sum() + d.r[i])
    floor = d.variance_floor
    degenerate = v < floor
    return PredictiveMoments(
        mean=float(d.h[i] @ params.m),
        var=max(v, floor),
        degenerate=degenerate,
    )
