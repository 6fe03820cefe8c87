"""Batch command-line front end.

Subcommands: ``estimate`` (one sensitivity pair), ``grid`` (a grid of
pairs), ``subgroup`` (estimate within a filtered target), ``calibrate``
(partition calibration plus verdict), ``verdict`` (re-classify existing
outputs), and ``simulate`` (replication studies).

Library values are raw proportions; the human-readable tables printed here
scale estimates by 100 (percentage points). Every output file embeds the
resolved-config hash and the package version. Exit codes: 2 schema,
3 positivity, 4 estimation, 5 configuration.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from pathlib import Path

from . import __version__
from .calibration import PartitionSpec, calibrate, classify
from .data import CovariateSchema, load_table, subgroup
from .eif_estimator import CrossfitOptions, crossfit_estimate, variance_and_ci
from .errors import (ConfigError, EstimationError, PositivityError,
                     SchemaError, TiltTransportError)
from .or_estimator import NuisanceOptions, bootstrap_ci, grid_estimates
from .reports import EstimateReport
from .simulation import builtin_dgp, run_study
from .tilt import GammaGrid, SensitivityPair

EXIT_SCHEMA = 2
EXIT_POSITIVITY = 3
EXIT_ESTIMATION = 4
EXIT_CONFIG = 5


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are configuration errors
        raise ConfigError(message)


def _fmt_x100(value: float) -> str:
    """Two-decimal percentage-point formatting with trailing zeros trimmed."""
    return format(round(100.0 * value, 2), "g")


def format_report_row(report: EstimateReport) -> str:
    return (f"{_fmt_x100(report.point)} ({_fmt_x100(report.lo)}, "
            f"{_fmt_x100(report.hi)})")


def _config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _meta(config: dict, command: str) -> dict:
    return {"command": command, "config_hash": _config_hash(config),
            "version": __version__}


def _write_jsonl(path: Path, meta: dict, rows: list[dict]) -> None:
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(meta, sort_keys=True) + "\n")
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _write_csv(path: Path, meta: dict, header: list[str],
               rows: list[list]) -> None:
    with path.open("w", encoding="utf-8") as fh:
        fh.write(f"# tilttransport {meta['version']} "
                 f"config_hash={meta['config_hash']}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _write_text(path: Path, meta: dict, lines: list[str]) -> None:
    body = [f"# tilttransport {meta['version']} "
            f"config_hash={meta['config_hash']}"] + lines
    path.write_text("\n".join(body) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------


def _pair_of_floats(text: str) -> tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise ConfigError(f"expected 'lo,hi', got {text!r}")
    return float(parts[0]), float(parts[1])


def _add_io_options(sub):
    sub.add_argument("--input", required=True, help="CSV data file")
    sub.add_argument("--schema", required=True, help="schema JSON file")
    sub.add_argument("--out", required=True, help="output directory")
    sub.add_argument("--seed", required=True, type=int,
                     help="root seed (mandatory for reproducibility)")
    sub.add_argument("--threads", type=int,
                     default=int(os.environ.get("TT_THREADS", "1")))


def _add_estimator_options(sub):
    sub.add_argument("--method", choices=("or", "eif"), default="or")
    sub.add_argument("--B", type=int, default=1000,
                     help="bootstrap replicates (or method)")
    sub.add_argument("--K", type=int, default=2, help="folds (eif method)")
    sub.add_argument("--alpha", type=float, default=0.05)
    sub.add_argument("--mu-method", choices=("frequency", "wls-ipw"),
                     default="frequency")
    sub.add_argument("--w-method", choices=("discrete-ratio", "offset-logistic"),
                     default="discrete-ratio")
    sub.add_argument("--clip-pi", type=_pair_of_floats, default=(0.01, 0.99))
    sub.add_argument("--clip-w", type=_pair_of_floats, default=(0.01, 100.0))


def _add_grid_options(sub):
    sub.add_argument("--gamma0-range", type=_pair_of_floats,
                     default=(-0.05, 0.05))
    sub.add_argument("--gamma1-range", type=_pair_of_floats,
                     default=(-0.05, 0.05))
    sub.add_argument("--gamma-step", type=float, default=0.002)


def _grid_from_args(args) -> GammaGrid:
    return GammaGrid((*args.gamma0_range, args.gamma_step),
                     (*args.gamma1_range, args.gamma_step))


def _load_inputs(args):
    schema_path = Path(args.schema)
    input_path = Path(args.input)
    for p in (schema_path, input_path):
        if not p.exists():
            raise ConfigError(f"path does not exist: {p}")
    schema = CovariateSchema.from_json_dict(
        json.loads(schema_path.read_text(encoding="utf-8")))
    table = load_table(input_path.read_bytes(), schema)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return table, out


def _or_options(args) -> NuisanceOptions:
    return NuisanceOptions(mu_method=args.mu_method)


def _eif_options(args) -> CrossfitOptions:
    return CrossfitOptions(mu_method=args.mu_method, w_method=args.w_method,
                           clip_pi=args.clip_pi, clip_w=args.clip_w)


def _single_report(table, args, pair: SensitivityPair) -> EstimateReport:
    if args.method == "eif":
        result = crossfit_estimate(table, args.K, seed=args.seed, pair=pair,
                                   options=_eif_options(args))
        return variance_and_ci(result.tate, args.alpha)
    report, _ = bootstrap_ci(table, pair, args.B, args.alpha, seed=args.seed,
                             options=_or_options(args))
    return report


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _cmd_estimate(args, config) -> None:
    table, out = _load_inputs(args)
    if getattr(args, "filter", None):
        table = subgroup(table, _parse_filters(args.filter))
    pair = SensitivityPair(args.gamma0, args.gamma1)
    report = _single_report(table, args, pair)
    meta = _meta(config, args.command)
    _write_jsonl(out / "reports.jsonl", meta, [report.to_json_dict()])
    level = int(round(report.level * 100))
    _write_text(out / "estimates.txt", meta, [
        f"TATE ({level}% CI) x100, method {report.method}, "
        f"gamma0={report.gamma0:g} gamma1={report.gamma1:g}",
        format_report_row(report),
    ])


def _cmd_grid(args, config) -> None:
    table, out = _load_inputs(args)
    grid = _grid_from_args(args)
    reports = _grid_reports(table, args, grid)
    meta = _meta(config, args.command)
    _write_jsonl(out / "grid.jsonl", meta, [r.to_json_dict() for r in reports])
    rows = [[r.gamma0, r.gamma1, r.point, r.lo, r.hi] for r in reports]
    _write_csv(out / "grid.csv", meta, ["gamma0", "gamma1", "point", "lo", "hi"],
               rows)


def _grid_reports(table, args, grid: GammaGrid) -> list[EstimateReport]:
    if args.method == "eif":
        from .eif_estimator import crossfit_grid
        results = crossfit_grid(table, list(grid.points()), args.K,
                                seed=args.seed, options=_eif_options(args))
        return [variance_and_ci(r.tate, args.alpha) for r in results]
    return grid_estimates(table, grid, args.B, args.alpha, seed=args.seed,
                          options=_or_options(args))


def _parse_filters(filters: list[str]) -> dict:
    out: dict = {}
    for text in filters:
        if "=" not in text:
            raise ConfigError(f"filter must look like column=level, got {text!r}")
        column, levels = text.split("=", 1)
        tokens = levels.split("|")
        out[column.strip()] = tokens[0] if len(tokens) == 1 else set(tokens)
    return out


def _cmd_calibrate(args, config) -> None:
    table, out = _load_inputs(args)
    grid = _grid_from_args(args)
    spec = PartitionSpec(args.partition_column,
                         frozenset(args.partition_levels.split(",")))
    region = calibrate(
        table, spec, grid, estimator=args.method, alpha=args.alpha,
        seed=args.seed, n_boot=args.B, n_folds=args.K,
        or_options=_or_options(args), eif_options=_eif_options(args),
        standard_method=args.standard_method,
        standard_on_full_partition=args.standard_on_full_partition)
    reports = _grid_reports(table, args, grid)
    verdict = classify(reports, region)
    meta = _meta(config, args.command)
    rows = []
    for report, c1, c2, c in zip(reports, region.in_c1.reshape(-1),
                                 region.in_c2.reshape(-1),
                                 region.in_c.reshape(-1)):
        rows.append([report.gamma0, report.gamma1, int(c1), int(c2), int(c),
                     report.lo, report.hi])
    _write_csv(out / "region.csv", meta,
               ["gamma0", "gamma1", "in_C1", "in_C2", "in_C", "ci_lo", "ci_hi"],
               rows)
    payload = dict(verdict.to_json_dict(), **meta)
    (out / "verdict.json").write_text(json.dumps(payload, sort_keys=True) + "\n",
                                      encoding="utf-8")


def _cmd_verdict(args, config) -> None:
    region_path = Path(args.region)
    reports_path = Path(args.reports)
    for p in (region_path, reports_path):
        if not p.exists():
            raise ConfigError(f"path does not exist: {p}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    with region_path.open(encoding="utf-8") as fh:
        body = [line for line in fh if not line.startswith("#")]
    for row in csv.DictReader(io.StringIO("".join(body))):
        rows.append(row)
    reports = []
    with reports_path.open(encoding="utf-8") as fh:
        for line in fh:
            d = json.loads(line)
            if "estimand" in d:
                reports.append(EstimateReport(
                    d["estimand"], d["gamma0"], d["gamma1"], d["point"],
                    d["lo"], d["hi"], d["level"], d["method"], d["seed"],
                    B=d.get("B"), K=d.get("K"), sigma2=d.get("sigma2")))
    in_c = [bool(int(r["in_C"])) for r in rows]
    if len(in_c) != len(reports):
        raise ConfigError("region and reports files do not align")
    # classify from flat masks without rebuilding the region object
    import math
    pos = neg = False
    min_tilt = None
    for flag, report in zip(in_c, reports):
        if not flag:
            continue
        if report.excludes_zero_above:
            pos = True
        if report.excludes_zero_below:
            neg = True
        if report.excludes_zero_above or report.excludes_zero_below:
            tilt = math.exp(abs(report.gamma1 - report.gamma0))
            min_tilt = tilt if min_tilt is None else min(min_tilt, tilt)
    direction = {(False, False): "Neither Direction",
                 (True, False): "Positive Only",
                 (False, True): "Negative Only",
                 (True, True): "Both Directions"}[(pos, neg)]
    meta = _meta(config, args.command)
    payload = dict({"direction": direction, "min_tilt": min_tilt}, **meta)
    (out / "verdict.json").write_text(json.dumps(payload, sort_keys=True) + "\n",
                                      encoding="utf-8")


def _cmd_simulate(args, config) -> None:
    cfg = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"path does not exist: {path}")
        cfg = json.loads(path.read_text(encoding="utf-8"))
    scenario = args.scenario or cfg.get("scenario", "A")
    estimators = args.estimator or cfg.get("estimator", "or")
    estimators = [estimators] if isinstance(estimators, str) else list(estimators)
    if estimators == ["both"]:
        estimators = ["or", "eif"]
    gammas = args.gamma1 if args.gamma1 is not None else cfg.get("gamma1", 0.0)
    gammas = [gammas] if isinstance(gammas, (int, float)) else list(gammas)
    n = args.n or cfg.get("n")
    replicates = args.replicates or cfg.get("replicates")
    alpha = args.alpha if args.alpha is not None else cfg.get("alpha", 0.05)
    seed = args.seed if args.seed is not None else cfg.get("seed")
    if n is None or replicates is None or seed is None:
        raise ConfigError("simulate needs n, replicates, and seed "
                          "(flags or config file)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dgp = builtin_dgp(scenario)
    rows = []
    for estimator in estimators:
        for gamma1 in gammas:
            report = run_study(dgp, estimator, int(n), float(gamma1),
                               int(replicates), float(alpha), seed=int(seed),
                               n_boot=args.B, n_folds=args.K,
                               n_workers=args.threads)
            r = report.row_x1000()
            rows.append([r["estimator"], r["scenario"], r["n"], r["gamma1"],
                         f"{r['bias_x1000']:.3f}", f"{r['rmse_x1000']:.3f}",
                         f"{r['emp_sd_x1000']:.3f}", f"{r['est_se_x1000']:.3f}",
                         f"{r['rate']:.3f}", r["replicates"], r["seed"]])
    meta = _meta(config, args.command)
    _write_csv(out / "study.csv", meta,
               ["estimator", "scenario", "n", "gamma1", "bias_x1000",
                "rmse_x1000", "emp_sd_x1000", "est_se_x1000", "rate",
                "replicates", "seed"], rows)


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="tilttransport", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    est = subs.add_parser("estimate", help="estimate at one sensitivity pair")
    _add_io_options(est)
    _add_estimator_options(est)
    est.add_argument("--gamma0", type=float, default=0.0)
    est.add_argument("--gamma1", type=float, default=0.0)

    sub_g = subs.add_parser("grid", help="estimate over a sensitivity grid")
    _add_io_options(sub_g)
    _add_estimator_options(sub_g)
    _add_grid_options(sub_g)

    sgr = subs.add_parser("subgroup",
                          help="estimate within a filtered target subgroup")
    _add_io_options(sgr)
    _add_estimator_options(sgr)
    sgr.add_argument("--gamma0", type=float, default=0.0)
    sgr.add_argument("--gamma1", type=float, default=0.0)
    sgr.add_argument("--filter", action="append", required=True,
                     help="column=level or column=level1|level2 (repeatable)")

    cal = subs.add_parser("calibrate",
                          help="calibrate sensitivity parameters and classify")
    _add_io_options(cal)
    _add_estimator_options(cal)
    _add_grid_options(cal)
    cal.add_argument("--partition-column", required=True)
    cal.add_argument("--partition-levels", required=True,
                     help="comma-separated levels forming part one")
    cal.add_argument("--standard-method",
                     choices=("diff-in-means", "wls-covariates"),
                     default="diff-in-means")
    cal.add_argument("--standard-on-full-partition", action="store_true")

    ver = subs.add_parser("verdict",
                          help="classify existing region/report files")
    ver.add_argument("--region", required=True)
    ver.add_argument("--reports", required=True)
    ver.add_argument("--out", required=True)

    sim = subs.add_parser("simulate", help="run a replication study")
    sim.add_argument("--config", help="study config JSON")
    sim.add_argument("--scenario", choices=("A", "B"))
    sim.add_argument("--estimator", nargs="+", choices=("or", "eif", "both"))
    sim.add_argument("--n", type=int)
    sim.add_argument("--gamma1", type=float, nargs="+")
    sim.add_argument("--replicates", type=int)
    sim.add_argument("--alpha", type=float)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--B", type=int, default=1000)
    sim.add_argument("--K", type=int, default=2)
    sim.add_argument("--threads", type=int,
                     default=int(os.environ.get("TT_THREADS", "1")))
    sim.add_argument("--out", required=True)
    return parser


_HANDLERS = {
    "estimate": _cmd_estimate,
    "grid": _cmd_grid,
    "subgroup": _cmd_estimate,   # same flow with --filter applied
    "calibrate": _cmd_calibrate,
    "verdict": _cmd_verdict,
    "simulate": _cmd_simulate,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        config = {k: sorted(v) if isinstance(v, set) else v
                  for k, v in vars(args).items()}
        _HANDLERS[args.command](args, config)
        return 0
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except PositivityError as exc:
        print(f"positivity error: {exc}", file=sys.stderr)
        return EXIT_POSITIVITY
    except EstimationError as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except (ConfigError, TiltTransportError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
