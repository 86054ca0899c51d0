"""Command-line interface.

Subcommands: fit, simulate, diagnose, test, replicate.  Reports are JSON
(schema_version "1"), datasets are CSV (columns y, h_1..h_p, optional r,
group, g_ref) or an equivalent JSON layout; CSV floats use 17 significant
digits.  Every command is deterministic given its inputs and seed.  Seed
precedence: --seed flag, then the CIRCE_MG_SEED environment variable, then
the spec file's seed (simulate/replicate) or 0.

Exit codes: 0 success, 1 usage/IO/validation error, 2 estimator
non-convergence (the report is still written).
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from .diagnostics import (
    asymptotic_variances,
    fisher_information,
    nec,
    prediction_interval,
    standardized_residuals,
)
from .ecme import EcmeConfig, FitResult, fit_multigroup, fit_regular
from .exceptions import CirceError, DegenerateVariance, ParseError
from .htests import aic, ks_normality_test, n_parameters, qq_plot_data, wald_test
from .model import Dataset, ModelParams, validate_dataset
from .synthetic import SimulationSpec, nec_curve_export, replicate, violin_export

SCHEMA_VERSION = "1"

_OPTIONAL_COLUMNS = ("r", "group", "g_ref")


def _fmt(v: float) -> str:
    return "%.17g" % v


# ---------------------------------------------------------------------------
# dataset ingestion


def _parse_cell(text: str, row: int, column: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ParseError(
            f"could not parse value {text!r} at row {row}, column {column}",
            row=row,
            column=column,
        ) from None


def _ingest_csv(path: Path) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        header = [c.strip() for c in header]
        rows = [row for row in reader if row and any(c.strip() for c in row)]

    if "y" not in header:
        raise ParseError(f"{path}: missing required column 'y'")
    h_cols = [c for c in header if c.startswith("h_")]
    expected = [f"h_{j}" for j in range(1, len(h_cols) + 1)]
    if not h_cols or sorted(h_cols) != sorted(expected):
        raise ParseError(
            f"{path}: derivative columns must be named h_1..h_p contiguously, got {h_cols}"
        )
    unknown = [c for c in header if c != "y" and c not in h_cols and c not in _OPTIONAL_COLUMNS]
    if unknown:
        raise ParseError(f"{path}: unknown columns {unknown}")

    idx = {c: header.index(c) for c in header}
    p = len(h_cols)
    n = len(rows)
    if n == 0:
        raise ParseError(f"{path}: no data rows")
    y = np.empty(n)
    h = np.empty((n, p))
    r = np.zeros(n)
    groups = np.ones(n, dtype=int)
    for i, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise ParseError(f"{path}: row {i} has {len(row)} cells, expected {len(header)}", row=i)
        y[i - 1] = _parse_cell(row[idx["y"]], i, "y")
        for j in range(1, p + 1):
            h[i - 1, j - 1] = _parse_cell(row[idx[f"h_{j}"]], i, f"h_{j}")
        if "r" in idx:
            r[i - 1] = _parse_cell(row[idx["r"]], i, "r")
        if "group" in idx:
            g = _parse_cell(row[idx["group"]], i, "group")
            if g != round(g):
                raise ParseError(
                    f"group label {g!r} at row {i} is not an integer", row=i, column="group"
                )
            groups[i - 1] = int(g)
        if "g_ref" in idx:
            y[i - 1] -= _parse_cell(row[idx["g_ref"]], i, "g_ref")
    return validate_dataset(y, h, r, groups)


def _ingest_json(path: Path) -> Dataset:
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    if "y" not in obj or "h" not in obj:
        raise ParseError(f"{path}: JSON dataset needs 'y' and 'h' fields")
    y = np.asarray(obj["y"], dtype=float)
    if "g_ref" in obj:
        y = y - np.asarray(obj["g_ref"], dtype=float)
    return validate_dataset(y, obj["h"], obj.get("r"), obj.get("groups"))


def ingest_dataset(path, fmt: str | None = None) -> Dataset:
    """Load a dataset from CSV or JSON; format inferred from the extension
    unless given.  ``g_ref`` columns are subtracted from y on load."""
    path = Path(path)
    if fmt is None:
        fmt = "json" if path.suffix.lower() == ".json" else "csv"
    if fmt == "csv":
        return _ingest_csv(path)
    if fmt == "json":
        return _ingest_json(path)
    raise ParseError(f"unknown dataset format {fmt!r}")


def write_dataset_csv(d: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        cols = ["y"] + [f"h_{j}" for j in range(1, d.p + 1)] + ["r", "group"]
        fh.write(",".join(cols) + "\n")
        for i in range(d.n):
            cells = [_fmt(d.y[i])]
            cells += [_fmt(v) for v in d.h[i]]
            cells.append(_fmt(d.r[i]))
            cells.append(str(int(d.groups[i])))
            fh.write(",".join(cells) + "\n")


# ---------------------------------------------------------------------------
# shared helpers


def _resolve_seed(args, fallback=None):
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("CIRCE_MG_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise CirceError(f"CIRCE_MG_SEED must be an integer, got {env!r}") from None
    return fallback


def _config_from_args(args, seed: int, clamp_default: bool) -> EcmeConfig:
    clamp = args.clamp_negative_variances
    if clamp is None:
        clamp = clamp_default
    return EcmeConfig(
        max_iterations=args.max_iter,
        rel_loglik_tol=args.tol_loglik,
        param_tol=args.tol_param,
        n_random_starts=args.starts,
        seed=seed,
        clamp_negative_variances=clamp,
    )


def _write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _interval_table(params: ModelParams) -> dict:
    out = {}
    for form in ("gaussian", "log-gaussian"):
        out[form] = [
            [list(prediction_interval(params, s, j, form=form)) for j in range(params.p)]
            for s in range(params.q)
        ]
    return out


def _fit_report(d: Dataset, res: FitResult, model: str, form: str, seed: int) -> dict:
    params = res.params
    try:
        f = fisher_information(d, params)
        av = asymptotic_variances(f)
        nec_rows = nec(f, params).tolist()
        var_m = av.var_of_mean.tolist()
        var_s = av.var_of_sigma2.tolist()
        degenerate = False
    except DegenerateVariance:
        nec_rows = None
        var_m = None
        var_s = None
        degenerate = True
    return {
        "schema_version": SCHEMA_VERSION,
        "command": "fit",
        "model": model,
        "form": form,
        "n": d.n,
        "p": d.p,
        "q": params.q,
        "group_labels": list(d.group_labels) if model == "multigroup" else [1],
        "group_sizes": d.n_per_group.tolist() if model == "multigroup" else [d.n],
        "noise_known": d.noise_known,
        "seed": seed,
        "params": {"m": params.m.tolist(), "sigma2": params.sigma2.tolist()},
        "raw_sigma2": res.raw_sigma2.tolist(),
        "clamped": res.clamped.tolist(),
        "singleton_groups": list(res.singleton_groups),
        "degenerate": degenerate,
        "loglik": res.loglik,
        "n_parameters": n_parameters(params.p, params.q, model),
        "aic": aic(res.loglik, n_parameters(params.p, params.q, model)),
        "nec": nec_rows,
        "var_of_mean": var_m,
        "var_of_sigma2": var_s,
        "prediction_intervals": _interval_table(params),
        "converged": res.converged,
        "iterations": res.iterations,
        "best_start": res.best_start,
        "loglik_trace": res.loglik_trace.tolist(),
    }


# ---------------------------------------------------------------------------
# subcommands


def cmd_fit(args) -> int:
    d = ingest_dataset(args.input, args.format)
    if args.model == "pooled":
        d = validate_dataset(d.y, d.h, d.r, None)
    seed = _resolve_seed(args, fallback=0)
    cfg = _config_from_args(args, seed, clamp_default=True)
    res = fit_multigroup(d, cfg) if args.model == "multigroup" else fit_regular(d, cfg)
    report = _fit_report(d, res, args.model, args.form, seed)
    _write_json(report, args.output)
    return 0 if res.converged else 2


def cmd_simulate(args) -> int:
    with open(args.input) as fh:
        try:
            spec_d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{args.input}: invalid JSON ({exc})") from exc
    seed = _resolve_seed(args, fallback=None)
    if seed is not None:
        spec_d = dict(spec_d, seed=seed)
    spec = SimulationSpec.from_dict(spec_d)
    d = simulate_dataset(spec)
    write_dataset_csv(d, args.output)
    return 0


def simulate_dataset(spec: SimulationSpec) -> Dataset:
    from .synthetic import simulate

    return simulate(spec)


def _load_params(path) -> ModelParams:
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    if "params" in obj:
        obj = obj["params"]
    if "m" not in obj or "sigma2" not in obj:
        raise ParseError(f"{path}: expected a fit report or an object with 'm' and 'sigma2'")
    return ModelParams(m=np.asarray(obj["m"], dtype=float), sigma2=np.asarray(obj["sigma2"], dtype=float))


def cmd_diagnose(args) -> int:
    d = ingest_dataset(args.input, args.format)
    if not Path(args.params).exists():
        raise CirceError(f"params file not found: {args.params}")
    params = _load_params(args.params)
    if args.model == "pooled" and params.q == 1:
        d = validate_dataset(d.y, d.h, d.r, None)
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)

    e = standardized_residuals(d, params)
    with open(outdir / "residuals.csv", "w", newline="") as fh:
        fh.write("index,group,residual\n")
        for i in range(d.n):
            fh.write(f"{i + 1},{int(d.groups[i])},{_fmt(e[i])}\n")

    qq = qq_plot_data(e)
    with open(outdir / "qq_plot.csv", "w", newline="") as fh:
        fh.write("theoretical,empirical\n")
        for row in qq:
            fh.write(f"{_fmt(row[0])},{_fmt(row[1])}\n")

    ks = ks_normality_test(e)
    degenerate = bool(np.max(np.abs(e)) < 1e-12)
    _write_json(
        {
            "schema_version": SCHEMA_VERSION,
            "statistic": ks.statistic,
            "p_value": ks.p_value,
            "n": ks.n,
            "degenerate_residuals": degenerate,
        },
        outdir / "ks_test.json",
    )

    f = fisher_information(d, params)
    av = asymptotic_variances(f)
    _write_json(
        {
            "schema_version": SCHEMA_VERSION,
            "nec": nec(f, params).tolist(),
            "var_of_mean": av.var_of_mean.tolist(),
            "var_of_sigma2": av.var_of_sigma2.tolist(),
            "prediction_intervals": _interval_table(params),
            "form": args.form,
        },
        outdir / "nec_pi.json",
    )
    return 0


def cmd_test(args) -> int:
    d = ingest_dataset(args.input, args.format)
    seed = _resolve_seed(args, fallback=0)
    cfg = _config_from_args(args, seed, clamp_default=True)
    res_mg = fit_multigroup(d, cfg)
    res_pool = fit_regular(d, cfg)

    def _branch(res: FitResult, model: str) -> dict:
        k = n_parameters(res.params.p, res.params.q, model)
        return {
            "params": {"m": res.params.m.tolist(), "sigma2": res.params.sigma2.tolist()},
            "loglik": res.loglik,
            "n_parameters": k,
            "aic": aic(res.loglik, k),
            "converged": res.converged,
            "iterations": res.iterations,
        }

    f = fisher_information(d, res_mg.params)
    wald_rows = []
    for s in range(d.q):
        for s2 in range(s + 1, d.q):
            for j in range(d.p):
                w = wald_test(f, res_mg.params, s, s2, j)
                wald_rows.append(
                    {
                        "groups": [s + 1, s2 + 1],
                        "factor": j + 1,
                        "statistic": w.statistic,
                        "p_value": w.p_value,
                        "reject_at_5pct": w.reject_at_5pct,
                    }
                )
    mg = _branch(res_mg, "multigroup")
    pool = _branch(res_pool, "pooled")
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": "test",
        "n": d.n,
        "p": d.p,
        "q": d.q,
        "group_labels": list(d.group_labels),
        "seed": seed,
        "multigroup": mg,
        "pooled": pool,
        "wald": wald_rows,
        "preferred_model": "multigroup" if mg["aic"] <= pool["aic"] else "pooled",
    }
    _write_json(report, args.output)
    return 0 if (res_mg.converged and res_pool.converged) else 2


def cmd_replicate(args) -> int:
    with open(args.input) as fh:
        try:
            spec_d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{args.input}: invalid JSON ({exc})") from exc
    seed = _resolve_seed(args, fallback=None)
    if seed is not None:
        spec_d = dict(spec_d, seed=seed)
    spec = SimulationSpec.from_dict(spec_d)
    cfg = _config_from_args(args, spec.seed, clamp_default=False)

    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)

    if args.sizes:
        sizes = [int(v) for v in args.sizes.split(",")]
        from .synthetic import nec_study

        reports = nec_study(spec, sizes, args.replications, cfg, jobs=args.jobs)
    else:
        reports = [replicate(spec, args.replications, cfg, jobs=args.jobs)]

    runs = []
    for rep in reports:
        raw = rep.estimates_sigma2
        runs.append(
            {
                "group_sizes": list(rep.spec.group_sizes),
                "seed": rep.spec.seed,
                "n_replications": rep.n_replications,
                "nec": rep.nec.tolist(),
                "summary": rep.summary,
                "converged_fraction": float(np.mean(rep.converged)),
                "clamped_fraction": float(np.mean(rep.clamped)),
                "negative_raw_fraction": float(np.mean(raw < 0)),
                "failures": [list(f) for f in rep.failures],
            }
        )
    _write_json(
        {
            "schema_version": SCHEMA_VERSION,
            "command": "replicate",
            "spec": spec.to_dict(),
            "runs": runs,
        },
        outdir / "report.json",
    )

    violin_parts = []
    for k, rep in enumerate(reports):
        text = violin_export(rep)
        violin_parts.append(text if k == 0 else text.split("\n", 1)[1])
    (outdir / "violin.csv").write_text("".join(violin_parts))
    (outdir / "nec_curve.csv").write_text(nec_curve_export(reports))
    return 0


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1 (2 is reserved for
    estimator non-convergence)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_ecme_args(sub):
    sub.add_argument("--seed", type=int, default=None, help="RNG seed (default: CIRCE_MG_SEED or 0)")
    sub.add_argument("--max-iter", type=int, default=10000, help="ECME iteration cap")
    sub.add_argument("--tol-loglik", type=float, default=1e-10, help="relative log-likelihood tolerance")
    sub.add_argument("--tol-param", type=float, default=1e-9, help="parameter-change tolerance")
    sub.add_argument("--starts", type=int, default=8, help="number of random restarts")
    sub.add_argument(
        "--clamp-negative-variances",
        choices=("true", "false"),
        default=None,
        type=lambda v: v == "true",
        help="clamp boundary variances to zero (default: true for fit/test, false for replicate)",
    )


def _add_io_args(sub, output_help):
    sub.add_argument("--input", required=True, help="input file path")
    sub.add_argument("--output", required=True, help=output_help)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="circe-mg", description=__doc__.split("\n\n")[0])
    cmds = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_fit = cmds.add_parser("fit", help="estimate the factor model from a dataset")
    _add_io_args(p_fit, "JSON report path")
    p_fit.add_argument("--model", choices=("pooled", "multigroup"), default="multigroup")
    p_fit.add_argument("--form", choices=("gaussian", "log-gaussian"), default="gaussian")
    p_fit.add_argument("--format", choices=("csv", "json"), default=None, help="input dataset format")
    _add_ecme_args(p_fit)

    p_sim = cmds.add_parser("simulate", help="draw a synthetic dataset from a spec")
    _add_io_args(p_sim, "dataset CSV path")
    p_sim.add_argument("--seed", type=int, default=None, help="override the spec's seed")

    p_diag = cmds.add_parser("diagnose", help="residual/NEC/interval diagnostics for fitted params")
    _add_io_args(p_diag, "output directory")
    p_diag.add_argument("--params", required=True, help="fit report (or bare params) JSON")
    p_diag.add_argument("--model", choices=("pooled", "multigroup"), default="multigroup")
    p_diag.add_argument("--form", choices=("gaussian", "log-gaussian"), default="gaussian")
    p_diag.add_argument("--format", choices=("csv", "json"), default=None)

    p_test = cmds.add_parser("test", help="Wald variance comparisons and AIC model choice")
    _add_io_args(p_test, "JSON report path")
    p_test.add_argument("--format", choices=("csv", "json"), default=None)
    _add_ecme_args(p_test)

    p_rep = cmds.add_parser("replicate", help="replication study: simulate+fit many times")
    _add_io_args(p_rep, "output directory")
    p_rep.add_argument("--replications", type=int, default=100)
    p_rep.add_argument("--sizes", default=None, help="comma-separated common group sizes, e.g. 125,250,500,1000")
    p_rep.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker processes")
    _add_ecme_args(p_rep)

    return parser


_DISPATCH = {
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "diagnose": cmd_diagnose,
    "test": cmd_test,
    "replicate": cmd_replicate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _DISPATCH[args.command](args)
    except ParseError as exc:
        print(f"circe-mg: parse error: {exc}", file=sys.stderr)
        return 1
    except CirceError as exc:
        print(f"circe-mg: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"circe-mg: i/o error: {exc}", file=sys.stderr)
        return 1


def run() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    run()
