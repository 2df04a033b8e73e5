"""Command-line interface: simulate, impute, estimate.

simulate   run a Monte Carlo study from a key=value config file
impute     complete a partially observed CSV outcome matrix
estimate   per-item population means from a partially observed CSV

Exit codes: 0 success, 2 usage or configuration error, 3 too many replicate
failures. Every subcommand writes a JSON manifest recording the resolved
options, input digests, package versions, and stage timings, so a run can be
reproduced exactly.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .data_model import (
    SampleData,
    format_value,
    read_matrix_csv,
    read_weights_csv,
    write_matrix_csv,
)
from .estimators import METHODS, EstimatorOptions, compute_estimates
from .matrix_completion import fit_completion
from .response_model import fit_response_matrix
from .simulation import (
    SimConfig,
    SimulationError,
    run_monte_carlo,
    summarize_tables,
    validate_config,
    write_results_csv,
)

WORKERS_ENV = "SURVEYMC_WORKERS"


class ConfigError(ValueError):
    pass


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"expected true/false, got {raw!r}")


def _parse_list(raw: str, conv):
    return tuple(conv(tok.strip()) for tok in raw.split(",") if tok.strip())


_CONFIG_KEYS = {
    "n_units": ("cfg", int),
    "n_items": ("cfg", int),
    "n_covariates": ("cfg", int),
    "rank": ("cfg", int),
    "snr": ("cfg", float),
    "designs": ("cfg", lambda v: _parse_list(v, str)),
    "informative": ("cfg", _parse_bool),
    "n": ("cfg:n_list", lambda v: _parse_list(v, int)),
    "replicates": ("cfg", int),
    "methods": ("cfg", lambda v: _parse_list(v, str)),
    "seed": ("cfg", int),
    "response_rate": ("cfg", float),
    "slope_sd": ("cfg", float),
    "folds": ("opt", int),
    "p_clip": ("opt", float),
    "max_iter": ("opt", int),
    "tau1_grid": ("opt:n_tau1", int),
    "tau2_grid": ("opt:n_frac", int),
    "alphas": ("opt", lambda v: _parse_list(v, float)),
    "mi_imputations": ("opt", int),
    "mi_items": ("opt", int),
    "mi_sweeps": ("opt", int),
    "ipw_design_weighted": ("opt", _parse_bool),
}


def parse_sim_config(path) -> SimConfig:
    """Parse a key = value config file into a SimConfig.

    Unknown keys and unparsable values raise ConfigError naming the key.
    """
    cfg_fields = {}
    opt_fields = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for lineno, line in enumerate(lines, 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        target, conv = _CONFIG_KEYS[key]
        try:
            value = conv(raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"config key {key!r}: {exc}") from None
        dest, _, rename = target.partition(":")
        name = rename or key
        (cfg_fields if dest == "cfg" else opt_fields)[name] = value
    try:
        cfg = SimConfig(**cfg_fields, options=EstimatorOptions(**opt_fields))
        validate_config(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(path, payload) -> None:
    payload = dict(payload)
    payload["package"] = {"name": "surveymc", "version": __version__}
    payload["versions"] = {
        "python": sys.version.split()[0],
        "numpy": np.__version__,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


class _Stages:
    def __init__(self):
        self.timings = {}
        self._t0 = time.perf_counter()
        self._mark = self._t0

    def done(self, name):
        now = time.perf_counter()
        self.timings[name] = round(now - self._mark, 6)
        self._mark = now

    def total(self):
        return round(time.perf_counter() - self._t0, 6)


def _resolve_workers(args) -> int:
    if args.workers is not None:
        return max(1, args.workers)
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            print(f"warning: ignoring non-integer {WORKERS_ENV}={env!r}", file=sys.stderr)
    return 1


def cmd_simulate(args) -> int:
    stages = _Stages()
    try:
        cfg = parse_sim_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    workers = _resolve_workers(args)
    os.makedirs(args.out, exist_ok=True)
    stages.done("setup")
    try:
        summary = run_monte_carlo(cfg, workers=workers)
    except SimulationError as exc:
        print(f"simulation aborted: {exc}", file=sys.stderr)
        return 3
    stages.done("monte_carlo")
    results_path = os.path.join(args.out, "results.csv")
    write_results_csv(summary, results_path)
    table1, table2 = summarize_tables(summary)
    with open(os.path.join(args.out, "table1.txt"), "w") as fh:
        fh.write(table1)
    with open(os.path.join(args.out, "table2.txt"), "w") as fh:
        fh.write(table2)
    stages.done("report")
    failures = {f"{c.design}/n={c.n}": c.n_failed for c in summary.cells if c.n_failed}
    _write_manifest(
        os.path.join(args.out, "manifest.json"),
        {
            "command": "simulate",
            "config_file": os.path.abspath(args.config),
            "config_sha256": _sha256(args.config),
            "config": {
                **{
                    k: (list(v) if isinstance(v, tuple) else v)
                    for k, v in vars(cfg).items()
                    if k != "options"
                },
                "options": {
                    k: (list(v) if isinstance(v, tuple) else v)
                    for k, v in vars(cfg.options).items()
                },
            },
            "workers": workers,
            "replicate_failures": failures,
            "timings_seconds": {**stages.timings, "total": stages.total()},
        },
    )
    print(f"wrote {results_path}")
    print(table2, end="")
    return 0


def _load_matrix(path, label):
    try:
        return read_matrix_csv(path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"{label}: {exc}") from None


def _build_sample(args, warnings) -> tuple[SampleData, list[str], object]:
    """Shared CSV ingestion for impute/estimate.

    Returns the sample (with standardized covariates), the kept covariate
    names, and the parsed outcome CSV (for pass-through writing).
    """
    y_csv = _load_matrix(args.y, "outcomes")
    x_csv = _load_matrix(args.x, "covariates")
    n = y_csv.values.shape[0]
    if x_csv.values.shape[0] != n:
        raise ConfigError(
            f"covariates have {x_csv.values.shape[0]} rows but outcomes have {n}"
        )
    if not x_csv.mask.all():
        i, j = np.argwhere(x_csv.mask == 0)[0]
        raise ConfigError(f"covariates: cell ({i + 1},{j + 1}) is missing; X must be complete")

    sd = x_csv.values.std(axis=0)
    keep = sd > 0
    if not keep.any():
        raise ConfigError("covariates: every column is constant, nothing to model on")
    for j in np.flatnonzero(~keep):
        warnings.append(f"dropped constant covariate column {x_csv.header[j]!r}")
    x = x_csv.values[:, keep]
    x = (x - x.mean(axis=0)) / x.std(axis=0)
    kept_names = [h for h, k in zip(x_csv.header, keep) if k]

    if args.weights:
        w = read_weights_csv(args.weights)
        if w.shape[0] != n:
            raise ConfigError(f"weights have {w.shape[0]} rows but outcomes have {n}")
        if (w <= 0).any() or not np.isfinite(w).all():
            raise ConfigError("weights must be positive and finite")
        pi = 1.0 / w if args.weights_are_w else w.copy()
        if (pi > 1).any() and not args.weights_are_w:
            warnings.append("some inclusion probabilities exceed 1; treating as given")
        pop_size = args.population_size or float(np.sum(1.0 / pi))
    else:
        if args.population_size:
            pi = np.full(n, n / args.population_size)
            pop_size = float(args.population_size)
        else:
            pi = np.ones(n)
            pop_size = float(n)
        warnings.append("no weights supplied; assuming equal inclusion probabilities")

    sample = SampleData(
        X=x,
        y=np.where(y_csv.mask == 1, y_csv.values, np.nan),
        resp=y_csv.mask,
        pi=pi,
        pop_size=pop_size,
    )
    return sample, kept_names, y_csv


def _estimator_options(args) -> EstimatorOptions:
    return EstimatorOptions(
        p_clip=args.p_clip,
        max_iter=args.max_iter,
        folds=args.folds,
        alphas=tuple(float(t) for t in args.alphas.split(",")) if args.alphas else (0.5, 0.9, 0.99, 1.0),
        n_tau1=args.tau1_grid,
        n_frac=args.tau2_grid,
        mi_imputations=args.mi_imputations,
        mi_items=args.mi_items,
        ipw_design_weighted=not args.ipw_unweighted,
    )


def _write_cv_trace(path, trace) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        folds = len(trace[0][1]) if trace else 0
        w.writerow(["tau1", "tau2", "alpha"] + [f"fold{i + 1}" for i in range(folds)] + ["mean"])
        for trip, losses, mean in trace:
            w.writerow(
                [format_value(trip.tau1), format_value(trip.tau2), format_value(trip.alpha)]
                + [format_value(v) for v in losses]
                + [format_value(mean)]
            )


def cmd_impute(args) -> int:
    stages = _Stages()
    warnings: list[str] = []
    try:
        sample, kept, y_csv = _build_sample(args, warnings)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for msg in warnings:
        print(f"warning: {msg}", file=sys.stderr)
    stages.done("ingest")

    response = fit_response_matrix(sample, p_clip=args.p_clip, max_iter=args.max_iter)
    stages.done("response_model")
    options = _estimator_options(args)
    fit = fit_completion(
        sample,
        response.p_hat,
        folds=options.folds,
        rng=np.random.default_rng(args.seed),
        n_tau1=options.n_tau1,
        n_frac=options.n_frac,
        alphas=options.alphas,
    )
    stages.done("completion")

    # Observed cells pass through byte for byte; only missing cells are filled.
    import csv as _csv

    with open(args.out, "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(y_csv.header)
        for i, row in enumerate(y_csv.cells):
            out_row = list(row)
            for j in np.flatnonzero(y_csv.mask[i] == 0):
                out_row[j] = format_value(fit.imputed[i, j])
            w.writerow(out_row)
    if args.fitted:
        write_matrix_csv(args.fitted, fit.fitted, header=y_csv.header)
    if args.cv_trace:
        _write_cv_trace(args.cv_trace, fit.cv_trace)
    stages.done("write")

    manifest_path = args.manifest or args.out + ".manifest.json"
    _write_manifest(
        manifest_path,
        {
            "command": "impute",
            "inputs": {
                "y": {"path": os.path.abspath(args.y), "sha256": _sha256(args.y)},
                "x": {"path": os.path.abspath(args.x), "sha256": _sha256(args.x)},
                **(
                    {"weights": {"path": os.path.abspath(args.weights), "sha256": _sha256(args.weights)}}
                    if args.weights
                    else {}
                ),
            },
            "options": {
                "seed": args.seed,
                "p_clip": args.p_clip,
                "max_iter": args.max_iter,
                "folds": args.folds,
                "tau1_grid": args.tau1_grid,
                "tau2_grid": args.tau2_grid,
                "alphas": list(options.alphas),
                "weights_are_w": args.weights_are_w,
                "population_size": args.population_size,
                "covariates_kept": kept,
            },
            "tuning": {
                "tau1": fit.tuning.tau1,
                "tau2": fit.tuning.tau2,
                "alpha": fit.tuning.alpha,
            },
            "response_model": {
                "clip_count": response.clip_count,
                "items_not_converged": int((~response.converged).sum()),
            },
            "warnings": warnings,
            "timings_seconds": {**stages.timings, "total": stages.total()},
        },
    )
    print(f"wrote {args.out}")
    return 0


def cmd_estimate(args) -> int:
    stages = _Stages()
    warnings: list[str] = []
    try:
        sample, kept, y_csv = _build_sample(args, warnings)
        if args.method == "full" and not y_csv.mask.all():
            raise ConfigError("method 'full' requires a fully observed outcome matrix")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for msg in warnings:
        print(f"warning: {msg}", file=sys.stderr)
    stages.done("ingest")

    options = _estimator_options(args)
    y_full = sample.y if args.method == "full" else None
    bundle = compute_estimates(
        sample,
        (args.method,),
        y_full=y_full,
        rng=np.random.default_rng(args.seed),
        options=options,
    )
    est = bundle.estimates[args.method]
    stages.done("estimate")

    import csv as _csv

    with open(args.out, "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["item", "name", "estimate", "unreliable"])
        for j in range(est.theta.shape[0]):
            w.writerow(
                [
                    j + 1,
                    y_csv.header[j],
                    format_value(est.theta[j]),
                    "true" if est.unreliable[j] else "false",
                ]
            )
    stages.done("write")

    manifest_path = args.manifest or args.out + ".manifest.json"
    payload = {
        "command": "estimate",
        "method": args.method,
        "inputs": {
            "y": {"path": os.path.abspath(args.y), "sha256": _sha256(args.y)},
            "x": {"path": os.path.abspath(args.x), "sha256": _sha256(args.x)},
            **(
                {"weights": {"path": os.path.abspath(args.weights), "sha256": _sha256(args.weights)}}
                if args.weights
                else {}
            ),
        },
        "options": {
            "seed": args.seed,
            "p_clip": args.p_clip,
            "max_iter": args.max_iter,
            "folds": args.folds,
            "ipw_unweighted": args.ipw_unweighted,
            "covariates_kept": kept,
        },
        "warnings": warnings,
        "timings_seconds": {**stages.timings, "total": stages.total()},
    }
    if bundle.completion_fit is not None:
        payload["tuning"] = {
            "tau1": bundle.completion_fit.tuning.tau1,
            "tau2": bundle.completion_fit.tuning.tau2,
            "alpha": bundle.completion_fit.tuning.alpha,
        }
    _write_manifest(manifest_path, payload)
    print(f"wrote {args.out}")
    return 0


def _add_common_io(p):
    p.add_argument("--y", required=True, help="outcome matrix CSV (header row; blank or NA = missing)")
    p.add_argument("--x", required=True, help="covariate matrix CSV (complete, header row)")
    p.add_argument("--weights", help="one-column CSV of inclusion probabilities (or weights with --weights-are-w)")
    p.add_argument("--weights-are-w", action="store_true",
                   help="weights file holds design weights w = 1/pi instead of probabilities")
    p.add_argument("--population-size", type=float, default=None,
                   help="known population size (default: sum of the weights)")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--manifest", help="manifest path (default: <out>.manifest.json)")
    p.add_argument("--seed", type=int, default=0, help="seed for cross-validation and imputation draws")
    p.add_argument("--p-clip", type=float, default=0.01,
                   help="clip fitted response probabilities to [p, 1 - p/2]")
    p.add_argument("--max-iter", type=int, default=100, help="logistic fit iteration cap")
    p.add_argument("--folds", type=int, default=5, help="cross-validation folds")
    p.add_argument("--tau1-grid", type=int, default=6, help="ridge grid size")
    p.add_argument("--tau2-grid", type=int, default=6, help="low-rank grid size")
    p.add_argument("--alphas", help="comma-separated penalty mixes (default 0.5,0.9,0.99,1.0)")
    p.add_argument("--mi-imputations", type=int, default=5, help="multiple-imputation chains")
    p.add_argument("--mi-items", type=int, default=20, help="items covered by multiple imputation")
    p.add_argument("--ipw-unweighted", action="store_true",
                   help="ipw only: drop the design-weight factor so the mean is a plain "
                        "response-weighted average")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="surveymc",
        description="Design-weighted matrix completion and estimation for survey nonresponse",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="run a Monte Carlo study from a config file")
    p_sim.add_argument("--config", required=True, help="key = value config file")
    p_sim.add_argument("--out", required=True, help="output directory")
    p_sim.add_argument("--workers", type=int, default=None,
                       help=f"worker processes (default: ${WORKERS_ENV} or 1); results do not depend on this")
    p_sim.set_defaults(func=cmd_simulate)

    p_imp = sub.add_parser("impute", help="complete a partially observed outcome matrix")
    _add_common_io(p_imp)
    p_imp.add_argument("--fitted", help="also write the full fitted matrix to this CSV")
    p_imp.add_argument("--cv-trace", help="write the cross-validation trace to this CSV")
    p_imp.set_defaults(func=cmd_impute)

    p_est = sub.add_parser("estimate", help="estimate per-item population means")
    _add_common_io(p_est)
    p_est.add_argument("--method", required=True, choices=METHODS, help="estimator to run")
    p_est.set_defaults(func=cmd_estimate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
