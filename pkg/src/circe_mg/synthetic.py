"""Synthetic data generation and replication studies.

``simulate`` draws one dataset from a fully specified generative law;
``replicate`` repeats simulate+fit over independent replication seeds and
aggregates the estimates, including the replication-based NEC table (the
spread of the mean estimates across replications divided by the mean
estimated factor standard deviation).  RNG: numpy ``default_rng`` (PCG64);
one generator per dataset, with the draw order fixed as (1) design matrix,
(2) factor deviations as an (n, p) standard-normal block, (3) observation
noise.  Replication k of a study uses the stream
``SeedSequence(entropy=seed, spawn_key=(k,))``.
"""
from __future__ import annotations

import concurrent.futures
import io
from dataclasses import dataclass

import numpy as np

from .ecme import EcmeConfig, fit_multigroup
from .exceptions import CirceError, DimensionMismatch, ParseError
from .model import Dataset, validate_dataset


@dataclass(frozen=True, eq=False)
class FixedDesign:
    """Use this exact (n, p) matrix as the design."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2:
            raise DimensionMismatch("fixed design matrix must be 2-D")
        object.__setattr__(self, "matrix", m)


@dataclass(frozen=True)
class UniformColumns:
    """Independent uniform draw per column: bounds[j] = (lo_j, hi_j)."""

    bounds: tuple

    def __post_init__(self):
        b = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        for lo, hi in b:
            if not lo < hi:
                raise CirceError(f"uniform bounds must satisfy lo < hi, got ({lo}, {hi})")
        object.__setattr__(self, "bounds", b)


@dataclass(frozen=True)
class GroupRanges:
    """Scalar design with one uniform range per group: bounds[s] = (lo_s, hi_s).

    This is the thresholded regime law (each group lives on its own segment
    of the design axis); only defined for p = 1.
    """

    bounds: tuple

    def __post_init__(self):
        b = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        for lo, hi in b:
            if not lo < hi:
                raise CirceError(f"range bounds must satisfy lo < hi, got ({lo}, {hi})")
        object.__setattr__(self, "bounds", b)


@dataclass(frozen=True)
class NoiseSpec:
    """Known-noise law: kind 'zero', 'constant' (r_i = value), or
    'proportional' (r_i = value * h_i, scalar designs with h_i > 0 only)."""

    kind: str = "zero"
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in ("zero", "constant", "proportional"):
            raise CirceError(f"unknown noise law {self.kind!r}")
        if self.kind != "zero" and self.value < 0:
            raise CirceError("noise coefficient must be >= 0")


@dataclass(frozen=True, eq=False)
class SimulationSpec:
    """Complete generative description of one synthetic dataset."""

    p: int
    q: int
    group_sizes: tuple
    true_m: np.ndarray
    true_sigma2: np.ndarray
    h_law: object
    noise: NoiseSpec
    seed: int

    def __post_init__(self):
        if self.p < 1 or self.q < 1:
            raise CirceError("p and q must be >= 1")
        sizes = tuple(int(v) for v in self.group_sizes)
        if len(sizes) != self.q or any(v < 1 for v in sizes):
            raise CirceError("group_sizes needs one positive size per group")
        m = np.asarray(self.true_m, dtype=float).reshape(-1)
        s2 = np.asarray(self.true_sigma2, dtype=float)
        if m.shape != (self.p,):
            raise DimensionMismatch(f"true_m must have shape ({self.p},)")
        if s2.shape != (self.q, self.p):
            raise DimensionMismatch(f"true_sigma2 must have shape ({self.q}, {self.p})")
        if np.any(s2 < 0):
            raise CirceError("true_sigma2 entries must be >= 0")
        law = self.h_law
        if isinstance(law, FixedDesign):
            if law.matrix.shape != (sum(sizes), self.p):
                raise DimensionMismatch(
                    f"fixed design must have shape ({sum(sizes)}, {self.p})"
                )
        elif isinstance(law, UniformColumns):
            if len(law.bounds) != self.p:
                raise CirceError("uniform law needs one (lo, hi) pair per factor")
        elif isinstance(law, GroupRanges):
            if self.p != 1:
                raise CirceError("the group-ranges law is only defined for p = 1")
            if len(law.bounds) != self.q:
                raise CirceError("group-ranges law needs one (lo, hi) pair per group")
        else:
            raise CirceError(f"unknown design law {type(law).__name__}")
        if self.noise.kind == "proportional":
            if self.p != 1:
                raise CirceError("proportional noise is only defined for p = 1")
            if isinstance(law, UniformColumns) and law.bounds[0][0] <= 0:
                raise CirceError("proportional noise requires strictly positive designs")
            if isinstance(law, GroupRanges) and any(lo <= 0 for lo, _ in law.bounds):
                raise CirceError("proportional noise requires strictly positive designs")
            if isinstance(law, FixedDesign) and np.any(law.matrix <= 0):
                raise CirceError("proportional noise requires strictly positive designs")
        if int(self.seed) < 0:
            raise CirceError("seed must be a non-negative integer")
        object.__setattr__(self, "group_sizes", sizes)
        object.__setattr__(self, "true_m", m)
        object.__setattr__(self, "true_sigma2", s2)
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def n(self) -> int:
        return sum(self.group_sizes)

    def with_group_sizes(self, sizes) -> "SimulationSpec":
        sizes = tuple(int(v) for v in sizes)
        return SimulationSpec(
            p=self.p,
            q=self.q,
            group_sizes=sizes,
            true_m=self.true_m,
            true_sigma2=self.true_sigma2,
            h_law=self.h_law,
            noise=self.noise,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        law = self.h_law
        if isinstance(law, FixedDesign):
            law_d = {"kind": "fixed", "matrix": law.matrix.tolist()}
        elif isinstance(law, UniformColumns):
            law_d = {"kind": "uniform", "bounds": [list(b) for b in law.bounds]}
        else:
            law_d = {"kind": "group_ranges", "bounds": [list(b) for b in law.bounds]}
        return {
            "p": self.p,
            "q": self.q,
            "group_sizes": list(self.group_sizes),
            "true_m": self.true_m.tolist(),
            "true_sigma2": self.true_sigma2.tolist(),
            "h_law": law_d,
            "noise": {"kind": self.noise.kind, "value": self.noise.value},
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationSpec":
        try:
            law_d = d["h_law"]
            kind = law_d["kind"]
            if kind == "fixed":
                law = FixedDesign(np.asarray(law_d["matrix"], dtype=float))
            elif kind == "uniform":
                law = UniformColumns(tuple(tuple(b) for b in law_d["bounds"]))
            elif kind == "group_ranges":
                law = GroupRanges(tuple(tuple(b) for b in law_d["bounds"]))
            else:
                raise ParseError(f"unknown design law kind {kind!r}")
            noise_d = d.get("noise", {"kind": "zero", "value": 0.0})
            return cls(
                p=int(d["p"]),
                q=int(d["q"]),
                group_sizes=tuple(d["group_sizes"]),
                true_m=np.asarray(d["true_m"], dtype=float),
                true_sigma2=np.asarray(d["true_sigma2"], dtype=float),
                h_law=law,
                noise=NoiseSpec(noise_d.get("kind", "zero"), float(noise_d.get("value", 0.0))),
                seed=int(d.get("seed", 0)),
            )
        except KeyError as exc:
            raise ParseError(f"simulation spec is missing field {exc.args[0]!r}") from exc


def _group_labels(spec: SimulationSpec) -> np.ndarray:
    return np.repeat(np.arange(1, spec.q + 1), spec.group_sizes)


def simulate(spec: SimulationSpec, rng=None) -> Dataset:
    """Draw one dataset from the spec; deterministic given the seed."""
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    n = spec.n
    labels = _group_labels(spec)
    law = spec.h_law
    if isinstance(law, FixedDesign):
        h = np.array(law.matrix, dtype=float)
    elif isinstance(law, UniformColumns):
        h = np.empty((n, spec.p))
        for j, (lo, hi) in enumerate(law.bounds):
            h[:, j] = rng.uniform(lo, hi, size=n)
    else:
        cols = [rng.uniform(lo, hi, size=ns) for (lo, hi), ns in zip(law.bounds, spec.group_sizes)]
        h = np.concatenate(cols).reshape(-1, 1)

    z = rng.standard_normal((n, spec.p))
    lam = spec.true_m[None, :] + z * np.sqrt(spec.true_sigma2[labels - 1])

    if spec.noise.kind == "zero":
        r = np.zeros(n)
    elif spec.noise.kind == "constant":
        r = np.full(n, spec.noise.value)
    else:
        if np.any(h[:, 0] <= 0):
            raise CirceError("proportional noise requires strictly positive h values")
        r = spec.noise.value * h[:, 0]
    eps = rng.standard_normal(n) * np.sqrt(r)

    y = (h * lam).sum(axis=1) + eps
    return validate_dataset(y, h, r, labels, n_groups=spec.q)


@dataclass(frozen=True, eq=False)
class ReplicationReport:
    """Aggregated outcome of simulate+fit replications for one spec.

    ``estimates_sigma2`` holds the *raw* per-replication variance estimates
    (signed when the fit ran unclamped); ``nec`` is the replication-based
    table sd(m_hat_j) / sqrt(max(mean(sigma2_hat), 0)), the mean taken over
    the signed raw estimates.
    """

    spec: SimulationSpec
    n_replications: int
    estimates_m: np.ndarray        # (K, p)
    estimates_sigma2: np.ndarray   # (K, q, p) raw values
    clamped: np.ndarray            # (K, q, p) bool
    converged: np.ndarray          # (K,) bool
    nec: np.ndarray                # (q, p)
    summary: dict
    failures: tuple                # ((replication, message), ...)


_QUANTS = (0.025, 0.25, 0.5, 0.75, 0.975)


def _summarize(estimates_m, estimates_sigma2) -> dict:
    def stats(a):
        return {
            "mean": float(np.mean(a)),
            "sd": float(np.std(a, ddof=1)) if a.shape[0] > 1 else 0.0,
            "quantiles": {str(qq): float(np.quantile(a, qq)) for qq in _QUANTS},
        }

    out = {"m": [], "sigma2": []}
    for j in range(estimates_m.shape[1]):
        out["m"].append(stats(estimates_m[:, j]))
    for s in range(estimates_sigma2.shape[1]):
        out["sigma2"].append(
            [stats(estimates_sigma2[:, s, j]) for j in range(estimates_sigma2.shape[2])]
        )
    return out


def _replication_rng(seed: int, k: int):
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(k,)))


def _replicate_one(spec: SimulationSpec, k: int, cfg: EcmeConfig):
    d = simulate(spec, rng=_replication_rng(spec.seed, k))
    res = fit_multigroup(d, cfg)
    return res.params.m, res.raw_sigma2, res.clamped, res.converged


def replicate(
    spec: SimulationSpec,
    n_replications: int,
    cfg: EcmeConfig | None = None,
    jobs: int = 1,
) -> ReplicationReport:
    """Run ``n_replications`` independent simulate+fit cycles and aggregate.

    Per-replication fit failures are recorded, not fatal.  Results are
    assembled by replication index, so the output is independent of ``jobs``.
    """
    if n_replications < 1:
        raise CirceError("n_replications must be >= 1")
    if cfg is None:
        cfg = EcmeConfig()
    results: dict[int, tuple] = {}
    failures = []
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = {
                pool.submit(_replicate_one, spec, k, cfg): k for k in range(n_replications)
            }
            for fut in concurrent.futures.as_completed(futs):
                k = futs[fut]
                try:
                    results[k] = fut.result()
                except CirceError as exc:
                    failures.append((k, str(exc)))
    else:
        for k in range(n_replications):
            try:
                results[k] = _replicate_one(spec, k, cfg)
            except CirceError as exc:
                failures.append((k, str(exc)))
    if not results:
        raise CirceError("every replication failed")
    keys = sorted(results)
    est_m = np.stack([results[k][0] for k in keys])
    est_s2 = np.stack([results[k][1] for k in keys])
    clamped = np.stack([results[k][2] for k in keys])
    converged = np.array([results[k][3] for k in keys])

    # Replication-based NEC: spread of the mean estimates over replications,
    # against the square root of the average variance estimate.  The average
    # keeps the signed raw values — clipping each replication first would bias
    # the denominator upward for weakly identified factors.
    sd_m = np.std(est_m, axis=0, ddof=1) if est_m.shape[0] > 1 else np.zeros(spec.p)
    mean_sd = np.sqrt(np.maximum(np.mean(est_s2, axis=0), 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        nec_table = sd_m[None, :] / mean_sd
    nec_table = np.where(mean_sd > 0, nec_table, np.inf)

    return ReplicationReport(
        spec=spec,
        n_replications=n_replications,
        estimates_m=est_m,
        estimates_sigma2=est_s2,
        clamped=clamped,
        converged=converged,
        nec=nec_table,
        summary=_summarize(est_m, est_s2),
        failures=tuple(sorted(failures)),
    )


def nec_study(
    spec: SimulationSpec,
    sizes,
    n_replications: int,
    cfg: EcmeConfig | None = None,
    jobs: int = 1,
) -> list:
    """Replicate the spec at several common group sizes (every group resized
    to the same value); one report per size, each on its own derived seed."""
    reports = []
    for size in sizes:
        size = int(size)
        child_seed = int(
            np.random.SeedSequence(entropy=spec.seed, spawn_key=(size,)).generate_state(1)[0]
        )
        sized = SimulationSpec(
            p=spec.p,
            q=spec.q,
            group_sizes=(size,) * spec.q,
            true_m=spec.true_m,
            true_sigma2=spec.true_sigma2,
            h_law=spec.h_law,
            noise=spec.noise,
            seed=child_seed,
        )
        reports.append(replicate(sized, n_replications, cfg, jobs=jobs))
    return reports


def _fmt(v: float) -> str:
    return "%.17g" % v


def violin_export(report: ReplicationReport) -> str:
    """Long-format CSV of the per-replication estimates.

    Columns: parameter,group,factor,group_size,replication,value.  Mean rows
    leave group and group_size empty; variance rows carry the raw (signed)
    estimates.  Output is byte-stable for a fixed report.
    """
    buf = io.StringIO()
    buf.write("parameter,group,factor,group_size,replication,value\n")
    k_tot, p = report.estimates_m.shape
    q = report.estimates_sigma2.shape[1]
    sizes = report.spec.group_sizes
    for k in range(k_tot):
        for j in range(p):
            buf.write(f"m,,{j + 1},,{k + 1},{_fmt(report.estimates_m[k, j])}\n")
        for s in range(q):
            for j in range(p):
                buf.write(
                    f"sigma2,{s + 1},{j + 1},{sizes[s]},{k + 1},"
                    f"{_fmt(report.estimates_sigma2[k, s, j])}\n"
                )
    return buf.getvalue()


def nec_curve_export(reports) -> str:
    """CSV of the replication-based NEC per (group size, group, factor)."""
    buf = io.StringIO()
    buf.write("n_tilde,group,factor,nec\n")
    for rep in reports:
        sizes = set(rep.spec.group_sizes)
        label = sizes.pop() if len(sizes) == 1 else rep.spec.n
        q, p = rep.nec.shape
        for s in range(q):
            for j in range(p):
                buf.write(f"{label},{s + 1},{j + 1},{_fmt(rep.nec[s, j])}\n")
    return buf.getvalue()
