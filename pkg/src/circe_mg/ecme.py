"""ECME maximum-likelihood fit of the factor mean and per-group variances.

Each iteration alternates two closed-form moves:

* a variance refresh per group and factor, built from the posterior moments
  of the latent factor deviations given the data (conditional maximization of
  the expected complete-data likelihood over the variances, mean fixed), and
* a weighted-least-squares mean refresh using the freshly updated variances
  (conditional maximization of the observed likelihood over the mean).

Both moves can only increase the observed-data log-likelihood, so the
per-iteration trace is monotone up to roundoff.

A structural property of the variance refresh is that it maps non-negative
variances to non-negative variances — it averages posterior second moments —
so the iteration alone never produces the negative estimates that
unconstrained maximum likelihood yields when the optimum sits outside the
parameter space; boundary coordinates instead decay geometrically toward
zero.  The fit therefore finishes with an exact first-order boundary check:
a coordinate whose likelihood score at zero is non-positive is either snapped
to exactly zero and flagged (``clamp_negative_variances=True``, the default)
or, with clamping disabled, polished by a safeguarded one-dimensional search
into the feasible negative range so the signed stationary value can be
reported (``raw_sigma2``).  Either way each accepted move is checked to keep
the log-likelihood non-decreasing.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .exceptions import CirceError, PreconditionViolated, SingularNormalEquations
from .model import Dataset, ModelParams, check_compatible, validate_dataset


@dataclass(frozen=True)
class EcmeConfig:
    """Stopping rules, multi-start policy, and boundary handling for the fit.

    Convergence requires *both* the relative log-likelihood change
    ``|dl| / (1 + |l|)`` below ``rel_loglik_tol`` and the max absolute
    parameter change below ``param_tol``.  Start 0 is deterministic
    (least-squares mean, moment-matched variances); starts 1..n_random_starts
    perturb it by independent log-uniform factors in [0.1, 10], each on its
    own RNG stream ``default_rng((seed, k))``.
    """

    max_iterations: int = 10000
    rel_loglik_tol: float = 1e-10
    param_tol: float = 1e-9
    n_random_starts: int = 8
    seed: int = 0
    clamp_negative_variances: bool = True

    def __post_init__(self):
        if self.max_iterations < 1:
            raise CirceError("max_iterations must be >= 1")
        if not (self.rel_loglik_tol > 0 and self.param_tol > 0):
            raise CirceError("tolerances must be > 0")
        if self.n_random_starts < 0:
            raise CirceError("n_random_starts must be >= 0")
        if self.seed < 0:
            raise CirceError("seed must be a non-negative integer")


@dataclass(frozen=True, eq=False)
class FitResult:
    """Outcome of a multi-start ECME fit.

    ``params`` always satisfies the non-negativity invariant; ``raw_sigma2``
    carries the signed pre-clamp variance values (identical to
    ``params.sigma2`` away from the boundary, possibly negative when the fit
    ran with clamping disabled).  ``loglik`` and the final trace entry are
    evaluated at the raw values.  ``clamped`` marks coordinates the boundary
    resolution identified as zero-bound.  ``iterations`` counts ECME steps of
    the winning start; scoring-acceleration passes and boundary-resolution
    sweeps append to the trace but are not counted as iterations.
    ``converged`` reports whether the dual stopping rule (relative
    log-likelihood change and maximum parameter change both under tolerance)
    was met, either inside the ECME loop or during the scoring passes that
    finish a budget-exhausted run.
    """

    params: ModelParams
    loglik: float
    loglik_trace: np.ndarray
    iterations: int
    converged: bool
    best_start: int
    clamped: np.ndarray
    raw_sigma2: np.ndarray
    start_logliks: tuple
    singleton_groups: tuple


class _StartRun(NamedTuple):
    m: np.ndarray
    sigma2: np.ndarray
    loglik: float
    trace: list
    iterations: int
    converged: bool


def _floored_loglik(d: Dataset, h2: np.ndarray, m: np.ndarray, sigma2: np.ndarray) -> float:
    """Observed log-likelihood with variances floored; tolerates signed sigma2."""
    v = (h2 * sigma2[d.groups0]).sum(axis=1) + d.r
    vf = np.maximum(v, d.variance_floor)
    a = d.y - d.h @ m
    return float(-0.5 * np.sum(np.log(2.0 * np.pi * vf) + a * a / vf))


def _cm2_mean(d: Dataset, h2: np.ndarray, sigma2: np.ndarray) -> np.ndarray:
    """Weighted least-squares mean given the current variances."""
    v = np.maximum((h2 * sigma2[d.groups0]).sum(axis=1) + d.r, d.variance_floor)
    w = 1.0 / v
    mm = d.h.T @ (d.h * w[:, None])
    rhs = d.h.T @ (w * d.y)
    try:
        m = np.linalg.solve(mm, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularNormalEquations("weighted normal equations are singular") from exc
    if not np.all(np.isfinite(m)):
        raise SingularNormalEquations("weighted normal equations produced non-finite mean")
    return m


def _step_arrays(d, h2, m, sigma2, clamp):
    """One ECME iteration on bare arrays; returns (m_new, sigma2_new, raw)."""
    g0 = d.groups0
    sig_rows = sigma2[g0]
    v = np.maximum((h2 * sig_rows).sum(axis=1) + d.r, d.variance_floor)
    w = 1.0 / v
    a = d.y - d.h @ m
    b = sig_rows * d.h
    post_mean = b * (a * w)[:, None]
    t = post_mean * post_mean - b * b * w[:, None]
    acc = np.empty_like(sigma2)
    for j in range(d.p):
        acc[:, j] = np.bincount(g0, weights=t[:, j], minlength=d.q)
    raw = sigma2 + acc / d.n_per_group[:, None]
    sigma2_new = np.maximum(raw, 0.0) if clamp else raw
    m_new = _cm2_mean(d, h2, sigma2_new)
    return m_new, sigma2_new, raw


def ecme_step_multigroup(d: Dataset, params: ModelParams):
    """One ECME iteration from ``params``.

    Returns ``(new_params, raw_sigma2)``: the returned parameters carry the
    clamped (non-negative) variances, ``raw_sigma2`` the pre-clamp values of
    this step.
    """
    check_compatible(d, params)
    h2 = d.h * d.h
    m_new, _, raw = _step_arrays(d, h2, params.m, np.array(params.sigma2), True)
    return ModelParams(m=m_new, sigma2=np.maximum(raw, 0.0)), raw


def _initial_arrays(d: Dataset):
    """Deterministic start: OLS mean, per-group moment-matched variances."""
    m0, *_ = np.linalg.lstsq(d.h, d.y, rcond=None)
    res = d.y - d.h @ m0
    mse = np.bincount(d.groups0, weights=res * res, minlength=d.q) / d.n_per_group
    h2m = np.empty((d.q, d.p))
    for j in range(d.p):
        h2m[:, j] = np.bincount(d.groups0, weights=d.h[:, j] ** 2, minlength=d.q)
    h2m /= d.n_per_group[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        sig0 = mse[:, None] / (d.p * h2m)
    sig0 = np.where(np.isfinite(sig0), sig0, d.variance_floor)
    sig0 = np.maximum(sig0, d.variance_floor)
    return m0, sig0


def initial_params(d: Dataset, mode: str = "deterministic", rng=None) -> ModelParams:
    """Starting point for the fit.

    ``mode="deterministic"`` uses the least-squares mean and per-group
    variances mse_s / (p * mean(h_ij^2)); ``mode="random"`` multiplies every
    deterministic entry by an independent log-uniform factor in [0.1, 10]
    drawn from ``rng`` (mean factors first, then variance factors).
    """
    m0, sig0 = _initial_arrays(d)
    if mode == "deterministic":
        return ModelParams(m=m0, sigma2=sig0)
    if mode != "random":
        raise PreconditionViolated(f"unknown start mode {mode!r}")
    if rng is None:
        rng = np.random.default_rng(0)
    fm = 10.0 ** rng.uniform(-1.0, 1.0, size=m0.shape)
    fs = 10.0 ** rng.uniform(-1.0, 1.0, size=sig0.shape)
    return ModelParams(m=m0 * fm, sigma2=sig0 * fs)


def _score_sigma(a, mask, row_base, hj2, x, floor):
    """d loglik / d sigma2[s,j] with that entry at ``x``, everything else fixed."""
    v = np.maximum(row_base + hj2 * x, floor)
    am = a[mask]
    return 0.5 * float(np.sum(hj2 * (am * am / (v * v) - 1.0 / v)))


def _bisect_score(score, xa, xb, iters=200):
    """Root of a scalar score on a sign-changing bracket [xa, xb]."""
    fa = score(xa)
    for _ in range(iters):
        xm = 0.5 * (xa + xb)
        fm = score(xm)
        if fm == 0.0 or abs(xb - xa) <= 1e-15 * max(1.0, abs(xm)):
            return xm
        if (fm > 0) == (fa > 0):
            xa, fa = xm, fm
        else:
            xb = xm
    return 0.5 * (xa + xb)


def _negative_root(a, mask, row_base, hj2, floor, v_guard):
    """Stationary variance value in the feasible negative range, or 0.0.

    Feasibility keeps every observation variance at or above ``v_guard``,
    which rules out the degenerate likelihood spikes where a single
    observation variance collapses: x >= max((v_guard - row_base) / hj2).
    Returns 0.0 when there is no negative room or no sign change of the
    score inside it.
    """
    pos = hj2 > 0
    if not np.any(pos):
        return 0.0
    x_min = float(np.max((v_guard - row_base[pos]) / hj2[pos]))
    if not np.isfinite(x_min) or x_min >= -1e-300:
        return 0.0

    def score(x):
        return _score_sigma(a, mask, row_base, hj2, x, floor)

    lo = x_min
    if score(lo) <= 0:
        lo = None
        for u in (0.999, 0.99, 0.9, 0.75, 0.5, 0.25, 0.1, 0.01):
            cand = x_min * u
            if score(cand) > 0:
                lo = cand
                break
        if lo is None:
            return 0.0
    return float(_bisect_score(score, lo, 0.0))


def _positive_root(a, mask, row_base, hj2, floor, scale):
    """Stationary variance value on the positive side (score(0) > 0)."""

    def score(x):
        return _score_sigma(a, mask, row_base, hj2, x, floor)

    hi = max(scale, floor)
    for _ in range(200):
        if score(hi) < 0:
            return float(_bisect_score(score, 0.0, hi))
        hi *= 4.0
    return None


def _collapse_guards(d, h2, sigma2, masks):
    """Per-group lower bounds on the observation variances.

    The unclamped likelihood is unbounded along directions where one
    observation variance goes to zero while the mean refresh zeroes the
    matching residual.  The stationary points of interest keep every
    observation variance on the scale of the ECME terminus, so moves below
    a small fraction of the entry minimum are treated as infeasible.
    """
    guards = np.empty(len(masks))
    for s, mask in enumerate(masks):
        v = (h2[mask] * sigma2[s]).sum(axis=1) + d.r[mask]
        v_min = float(np.min(v)) if v.size else 0.0
        guards[s] = max(d.variance_floor, 1e-3 * v_min)
    return guards


def _group_score_info(d, h2, a, mask, sigma_row, r_mask):
    """Score vector and information matrix for one group's variance row."""
    v = np.maximum((h2[mask] * sigma_row).sum(axis=1) + r_mask, d.variance_floor)
    am = a[mask]
    u = am * am / (v * v) - 1.0 / v
    g = 0.5 * (h2[mask] * u[:, None]).sum(axis=0)
    rows = h2[mask] / v[:, None]
    info = 0.5 * rows.T @ rows
    return g, info


def _newton_accelerate(d, h2, m, sigma2, cfg, trace, signed=False):
    """Fisher-scoring passes over the variance rows.

    Each pass takes one guarded Newton step per group (scoring direction,
    backtracking line search, accepted only if the floored log-likelihood
    does not decrease) followed by the exact mean refresh.  In the default
    projected mode steps are clipped at zero on the free set, which is how
    the ECME terminus is polished regardless of the clamping setting.  In
    signed mode (joint refinement of negative stationary values) steps move
    through signed variances, with the step length capped so that no
    observation variance drops below the per-group collapse guard — the
    unconstrained likelihood is unbounded along collapse directions, and the
    finite stationary points of interest all keep the observation variances
    on the scale of the entry point.
    Returns (m, sigma2, converged) with the same dual stopping rule as the
    main loop applied per pass.
    """
    q, p = sigma2.shape
    sigma2 = sigma2.copy()
    masks = [d.groups0 == s for s in range(q)]
    guards = _collapse_guards(d, h2, sigma2, masks)
    cur = _floored_loglik(d, h2, m, sigma2)
    converged = False
    for _ in range(300):
        m_old = m.copy()
        sig_old = sigma2.copy()
        ll_old = cur
        a = d.y - d.h @ m
        for s in range(q):
            mask = masks[s]
            g, info = _group_score_info(d, h2, a, mask, sigma2[s], d.r[mask])
            free = np.ones(p, dtype=bool) if signed else (sigma2[s] > 0) | (g > 0)
            if not np.any(free):
                continue
            delta = np.zeros(p)
            sub = info[np.ix_(free, free)]
            try:
                delta[free] = np.linalg.solve(sub, g[free])
            except np.linalg.LinAlgError:
                diag = np.diag(info)[free]
                delta[free] = np.where(diag > 0, g[free] / np.maximum(diag, 1e-300), 0.0)
            t = 1.0
            if signed:
                # largest step keeping every observation variance above guard
                v0 = (h2[mask] * sigma2[s]).sum(axis=1) + d.r[mask]
                w = h2[mask] @ delta
                shrink = w < 0
                if np.any(shrink):
                    t_max = float(np.min((v0[shrink] - guards[s]) / (-w[shrink])))
                    t = min(t, max(0.999 * t_max, 0.0))
            for _ in range(40):
                step = sigma2[s] + t * delta
                cand = step if signed else np.maximum(step, 0.0)
                if np.any(cand != sigma2[s]):
                    trial = sigma2.copy()
                    trial[s] = cand
                    ll = _floored_loglik(d, h2, m, trial)
                    if ll >= cur - 1e-11:
                        sigma2 = trial
                        cur = ll
                        break
                t *= 0.5
        m = _cm2_mean(d, h2, sigma2)
        cur = _floored_loglik(d, h2, m, sigma2)
        trace.append(cur)
        dparam = max(
            float(np.max(np.abs(m - m_old))), float(np.max(np.abs(sigma2 - sig_old)))
        )
        rel = abs(cur - ll_old) / (1.0 + abs(cur))
        if rel < cfg.rel_loglik_tol and dparam < cfg.param_tol:
            converged = True
            break
    return m, sigma2, converged


def _boundary_sweeps(d, h2, m, sigma2, clamp, trace, guards, max_sweeps=50):
    """Coordinate sweeps snapping or rooting boundary-bound variance entries.

    For every coordinate whose score at zero is non-positive the constrained
    optimum sits on the boundary: snap to exactly 0 (clamp mode) or move to
    the signed stationary value inside the feasible negative range (unclamped
    mode).  Moves are accepted only if the floored log-likelihood does not
    decrease (roundoff margin), the mean is re-solved after each sweep, and
    accepted sweeps append to the trace.
    """
    q, p = sigma2.shape
    sigma2 = sigma2.copy()
    clamped = np.zeros((q, p), dtype=bool)
    floor = d.variance_floor
    masks = [d.groups0 == s for s in range(q)]
    cur = _floored_loglik(d, h2, m, sigma2)
    slack = 1e-11
    for _ in range(max_sweeps):
        changed = False
        a = d.y - d.h @ m
        for s in range(q):
            mask = masks[s]
            for j in range(p):
                row = sigma2[s].copy()
                row[j] = 0.0
                row_base = (h2[mask] * row).sum(axis=1) + d.r[mask]
                hj2 = h2[mask, j]
                score0 = _score_sigma(a, mask, row_base, hj2, 0.0, floor)
                if score0 > 0:
                    if sigma2[s, j] >= 0:
                        continue
                    # a previous sweep overshot; pull back to the positive root
                    scale = max(abs(sigma2[s, j]), floor)
                    cand = _positive_root(a, mask, row_base, hj2, floor, scale)
                    if cand is None:
                        continue
                    unclamp_flag = False
                else:
                    cand = (
                        0.0
                        if clamp
                        else _negative_root(a, mask, row_base, hj2, floor, guards[s])
                    )
                    unclamp_flag = True
                if cand == sigma2[s, j]:
                    if unclamp_flag:
                        clamped[s, j] = cand <= 0.0
                    continue
                trial = sigma2.copy()
                trial[s, j] = cand
                ll = _floored_loglik(d, h2, m, trial)
                if ll >= cur - slack:
                    sigma2 = trial
                    cur = ll
                    changed = True
                    clamped[s, j] = unclamp_flag and cand <= 0.0
        if not changed:
            break
        m = _cm2_mean(d, h2, sigma2)
        cur = _floored_loglik(d, h2, m, sigma2)
        trace.append(cur)
    return m, sigma2, clamped, cur


def _resolve_boundary(d, h2, m, sigma2, cfg, trace):
    """Boundary treatment after the ECME loop and projected polishing.

    Runs the coordinate sweeps, then — when clamping is off and negative
    stationary values appeared — jointly refines the signed variances with
    scoring passes.  The refinement is a revertible trial: on datasets where
    the unconstrained likelihood has no finite stationary point nearby (it
    is unbounded along variance-collapse directions) the passes stall on the
    collapse guard without meeting the tolerances, and the stable
    coordinate-wise solution is kept instead.
    """
    clamp = cfg.clamp_negative_variances
    masks = [d.groups0 == s for s in range(sigma2.shape[0])]
    guards = _collapse_guards(d, h2, sigma2, masks)
    m, sigma2, clamped, cur = _boundary_sweeps(
        d, h2, m, sigma2, clamp, trace, guards
    )
    if not clamp and np.any(sigma2 < 0):
        local = []
        m2, sig2, ok = _newton_accelerate(
            d, h2, m.copy(), sigma2, cfg, local, signed=True
        )
        ll2 = _floored_loglik(d, h2, m2, sig2)
        if ok and ll2 >= cur - 1e-11:
            trace.extend(local)
            m, sigma2, clamped, cur = _boundary_sweeps(
                d, h2, m2, sig2, clamp, trace, guards, max_sweeps=10
            )
    return m, sigma2, clamped, cur


def _run_start(d, h2, m0, sig0, cfg):
    m = np.array(m0, dtype=float)
    sigma2 = np.array(sig0, dtype=float)
    ll = _floored_loglik(d, h2, m, sigma2)
    trace = [ll]
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        m_new, sig_new, _ = _step_arrays(d, h2, m, sigma2, cfg.clamp_negative_variances)
        ll_new = _floored_loglik(d, h2, m_new, sig_new)
        dparam = max(
            float(np.max(np.abs(m_new - m))), float(np.max(np.abs(sig_new - sigma2)))
        )
        rel = abs(ll_new - ll) / (1.0 + abs(ll_new))
        m, sigma2, ll = m_new, sig_new, ll_new
        trace.append(ll)
        if rel < cfg.rel_loglik_tol and dparam < cfg.param_tol:
            converged = True
            break
    return _StartRun(m, sigma2, ll, trace, it, converged)


def _fit(d: Dataset, cfg: EcmeConfig) -> FitResult:
    h2 = d.h * d.h
    m0, sig0 = _initial_arrays(d)
    starts = [(m0, sig0)]
    for k in range(1, cfg.n_random_starts + 1):
        rng = np.random.default_rng((cfg.seed, k))
        fm = 10.0 ** rng.uniform(-1.0, 1.0, size=m0.shape)
        fs = 10.0 ** rng.uniform(-1.0, 1.0, size=sig0.shape)
        starts.append((m0 * fm, sig0 * fs))

    runs = [_run_start(d, h2, m_s, s_s, cfg) for m_s, s_s in starts]
    best_ll = max(run.loglik for run in runs)
    best = next(i for i, run in enumerate(runs) if run.loglik >= best_ll - 1e-12)
    winner = runs[best]

    trace = list(winner.trace)
    m_w, sig_w, converged = winner.m, winner.sigma2, winner.converged
    if not converged:
        m_w, sig_w, converged = _newton_accelerate(d, h2, m_w, sig_w, cfg, trace)
    m, raw_sigma2, clamped, ll_final = _resolve_boundary(d, h2, m_w, sig_w, cfg, trace)
    return FitResult(
        params=ModelParams(m=m, sigma2=np.maximum(raw_sigma2, 0.0)),
        loglik=ll_final,
        loglik_trace=np.asarray(trace),
        iterations=winner.iterations,
        converged=converged,
        best_start=best,
        clamped=clamped,
        raw_sigma2=raw_sigma2,
        start_logliks=tuple(run.loglik for run in runs),
        singleton_groups=d.singleton_groups,
    )


def fit_multigroup(d: Dataset, cfg: EcmeConfig | None = None) -> FitResult:
    """Multi-start ECME fit with one variance vector per group."""
    if cfg is None:
        cfg = EcmeConfig()
    return _fit(d, cfg)


def fit_regular(d: Dataset, cfg: EcmeConfig | None = None) -> FitResult:
    """Pooled fit: group labels are ignored and a single variance vector is
    estimated for all observations."""
    if cfg is None:
        cfg = EcmeConfig()
    pooled = validate_dataset(d.y, d.h, d.r, None)
    return _fit(pooled, cfg)


def closed_form_mle(d: Dataset) -> ModelParams:
    """Exact pooled MLE for the scalar noiseless case (p=1, all r=0, h != 0).

    The ratios u_i = y_i / h_i are then i.i.d. N(m, sigma2), so the MLE is
    their sample mean and (1/n)-variance.
    """
    if d.p != 1:
        raise PreconditionViolated("closed form requires a single factor (p=1)")
    if np.any(d.r > 0):
        raise PreconditionViolated("closed form requires all noise variances zero")
    hcol = d.h[:, 0]
    if np.any(hcol == 0):
        raise PreconditionViolated("closed form requires every h_i nonzero")
    u = d.y / hcol
    m = float(np.mean(u))
    s2 = float(np.mean((u - m) ** 2))
    return ModelParams(m=np.array([m]), sigma2=np.array([[s2]]))
