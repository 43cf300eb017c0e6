"""Command-line front end: simulate, reconstruct, tune, evaluate, compare.

Every command reads an optional ``--config`` JSON file; the per-field flags
override it.  Results go to files under ``--out`` and a JSON summary is printed
on stdout; logs go to stderr.  Exit codes: 0 ok, 2 configuration, 3 numerical
failure, 4 I/O or file format.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import metrics
from .errors import ConfigError, IoFailure, MatrixFormatError, NumericalError, TwrError
from .model_io import (
    ProblemInstance,
    dumps_json,
    ensure_dir,
    read_geometry,
    read_json,
    read_matrix,
    write_geometry,
    write_json,
    write_matrix,
)
from .penalty import second_diff_penalty
from .simulate import ScenarioSpec, desk_scenario, grid_geometry, simulate
from .solver import SolverOptions, sowr_solve, towr_solve, twr_solve
from .stage1 import raw_estimate, raw_estimate_ridge, thin_svd
from .tuning import CvSpec, GcvSpec, auto_tune, gcv_mu2, kfold_cv_mu1

log = logging.getLogger("twreg")

METHODS = ("mne", "twr", "towr", "sowr", "mne+sowr", "mne+twr")
# default ridge for the mne+ methods: lambda = mean(d^2) / RIDGE_SNR^2
RIDGE_SNR = 3.0
CONFIG_KEYS = {"scenario", "solver", "cv", "gcv", "method", "methods", "ridge_lambda",
               "tune", "n_runs", "base_seed", "X", "Y", "geometry", "truth", "estimate",
               "peak_times_s", "sample_rate_hz"}


# ---------------------------------------------------------------------------
# method runner shared by reconstruct and compare

def default_ridge_lambda(X) -> float:
    d = thin_svd(X).d
    return float(np.mean(d * d)) / RIDGE_SNR ** 2


def reconstruct(X, Y, method: str, opts: SolverOptions, ridge_lambda: float | None = None):
    """Estimate ``B`` with one of :data:`METHODS`; returns ``(B_est, diagnostics)``."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    t0 = time.perf_counter()
    if method.startswith("mne+") or (method == "mne" and ridge_lambda):
        lam = default_ridge_lambda(X) if ridge_lambda is None else ridge_lambda
        B_hat = raw_estimate_ridge(X, Y, lam).B_hat
    else:
        B_hat = raw_estimate(X, Y).B_hat
    stage2 = method.split("+")[-1]
    if stage2 == "mne":
        diag = {"iterations_run": 0, "converged": True, "objective_trace": [], "sparsity_trace": []}
        B_est = B_hat
    else:
        penalty = second_diff_penalty(B_hat.shape[1])
        if stage2 == "twr":
            state = twr_solve(B_hat, penalty, opts)
        elif stage2 == "towr":
            state = towr_solve(B_hat, penalty, opts)
        else:
            state = sowr_solve(B_hat, opts, penalty)
        diag = state.diagnostics()
        B_est = state.B_tilde
    diag["method"] = method
    diag["wall_time_s"] = time.perf_counter() - t0
    return B_est, diag


def tune_for_method(instance: ProblemInstance, method: str, opts: SolverOptions,
                    cv: CvSpec, gcv: GcvSpec) -> SolverOptions:
    """Penalties for ``method``: both tuned for TWR, CV only for sOWR, GCV only for tOWR."""
    stage2 = method.split("+")[-1]
    if stage2 == "twr":
        res = auto_tune(instance, cv, gcv, opts)
        return opts.with_(mu1=res.mu1_star, mu2=res.mu2_star)
    if stage2 == "sowr":
        mu1, _ = kfold_cv_mu1(instance, cv, 0.0, opts)
        return opts.with_(mu1=mu1, mu2=0.0)
    if stage2 == "towr":
        B_hat = raw_estimate(instance.X, instance.Y).B_hat
        penalty = second_diff_penalty(instance.s)
        state = towr_solve(B_hat, penalty, opts.with_(mu1=0.0, mu2=0.0))
        return opts.with_(mu1=0.0, mu2=gcv_mu2(B_hat, state.A, penalty, gcv).mu2_star)
    return opts


def mean_and_se(values) -> tuple[float, float]:
    """Sample mean and standard error; the error is 0 for a single value."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ConfigError("no values to summarize")
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


# ---------------------------------------------------------------------------
# configuration

def load_config(path) -> dict:
    if path is None:
        return {}
    cfg = read_json(path)
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    unknown = set(cfg) - CONFIG_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    return cfg


def _section(cfg, name) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    return dict(sec)


def solver_options(cfg, args) -> SolverOptions:
    sec = _section(cfg, "solver")
    if getattr(args, "mu1", None) is not None:
        sec["mu1"] = args.mu1
    if getattr(args, "mu2", None) is not None:
        sec["mu2"] = args.mu2
    try:
        return SolverOptions(**sec)
    except TypeError as exc:
        raise ConfigError(f"solver section: {exc}") from exc


def cv_spec(cfg) -> CvSpec:
    try:
        return CvSpec(**_section(cfg, "cv"))
    except TypeError as exc:
        raise ConfigError(f"cv section: {exc}") from exc


def gcv_spec(cfg) -> GcvSpec:
    try:
        return GcvSpec(**_section(cfg, "gcv"))
    except TypeError as exc:
        raise ConfigError(f"gcv section: {exc}") from exc


def scenario_spec(cfg, args) -> ScenarioSpec:
    sec = _section(cfg, "scenario")
    if getattr(args, "snr_db", None) is not None:
        sec["snr_db"] = args.snr_db
    if getattr(args, "seed", None) is not None:
        sec["noise_seed"] = args.seed
    if not sec.keys() - {"snr_db", "noise_seed"}:
        base = desk_scenario().to_dict()
        base.update(sec)
        sec = base
    return ScenarioSpec.from_dict(sec)


def _path(cfg, args, key, flag):
    value = getattr(args, flag, None) or cfg.get(key)
    if value is None:
        raise ConfigError(f"missing required path {key!r} (flag --{flag.replace('_', '-')})")
    return Path(value)


def _out_dir(args) -> Path:
    return ensure_dir(args.out)


def _emit(obj) -> None:
    sys.stdout.write(dumps_json(obj))


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(args, cfg) -> int:
    spec = scenario_spec(cfg, args)
    X = read_matrix(cfg["X"]) if "X" in cfg else None
    geometry = read_geometry(cfg["geometry"]) if "geometry" in cfg else None
    data = simulate(spec, X, geometry)
    out = _out_dir(args)
    write_matrix(data.X, out / "X.txt")
    write_matrix(data.B, out / "B_true.txt")
    write_matrix(data.Y, out / "Y.txt")
    write_geometry(data.geometry, out / "geometry.txt")
    echo = spec.to_dict()
    snr = data.achieved_snr_db
    echo["achieved_snr_db"] = snr if math.isfinite(snr) else "inf"
    echo["peak_samples"] = [spec.peak_sample(a.waveform.peak_time_s) for a in spec.active_sets]
    write_json(echo, out / "scenario.json")
    _emit({"command": "simulate", "out": str(out),
           "files": ["X.txt", "B_true.txt", "Y.txt", "geometry.txt", "scenario.json"],
           "achieved_snr_db": echo["achieved_snr_db"]})
    return 0


def cmd_reconstruct(args, cfg) -> int:
    X = read_matrix(_path(cfg, args, "X", "x"))
    Y = read_matrix(_path(cfg, args, "Y", "y"))
    method = args.method or cfg.get("method", "twr")
    opts = solver_options(cfg, args)
    B_est, diag = reconstruct(X, Y, method, opts, cfg.get("ridge_lambda"))
    if args.no_timing:
        diag["wall_time_s"] = 0.0
    diag["mu1"], diag["mu2"] = opts.mu1, opts.mu2
    out = _out_dir(args)
    write_matrix(B_est, out / "B_est.txt")
    write_json(diag, out / "diagnostics.json")
    _emit({"command": "reconstruct", "out": str(out), "method": method,
           "iterations_run": diag["iterations_run"], "converged": diag["converged"]})
    return 0


def _instance(cfg, args) -> ProblemInstance:
    X = read_matrix(_path(cfg, args, "X", "x"))
    Y = read_matrix(_path(cfg, args, "Y", "y"))
    gpath = getattr(args, "geometry", None) or cfg.get("geometry")
    if gpath is not None:
        geometry = read_geometry(gpath)
    else:
        if X.shape[1] % 3:
            raise ConfigError("without a geometry file X must have 3 columns per dipole")
        geometry = grid_geometry(X.shape[1] // 3)
    return ProblemInstance(X, Y, geometry, float(cfg.get("sample_rate_hz", 355.0)))


def cmd_tune(args, cfg) -> int:
    inst = _instance(cfg, args)
    res = auto_tune(inst, cv_spec(cfg), gcv_spec(cfg), solver_options(cfg, args))
    out = _out_dir(args)
    write_json(res.report, out / "tuning.json")
    _emit(res.report)
    return 0


def _peak_indices(cfg, args, s) -> list[int]:
    if args.peaks:
        return [int(v) for v in args.peaks.split(",")]
    times = cfg.get("peak_times_s")
    if times is None:
        scen = getattr(args, "scenario", None)
        if scen:
            return list(read_json(scen).get("peak_samples", []))
        return []
    fs = float(cfg.get("sample_rate_hz", 355.0))
    t = np.arange(s) / fs
    return [int(np.argmin(np.abs(t - v))) for v in times]


def cmd_evaluate(args, cfg) -> int:
    B_true = read_matrix(_path(cfg, args, "truth", "truth"))
    B_est = read_matrix(_path(cfg, args, "estimate", "estimate"))
    geometry = read_geometry(_path(cfg, args, "geometry", "geometry"))
    peaks = _peak_indices(cfg, args, B_true.shape[1])
    rep = metrics.evaluate(B_true, B_est, geometry, peaks)
    out = _out_dir(args)
    write_json(rep.to_dict(), out / "evaluation.json")
    write_matrix(metrics.energy_table(B_true, geometry), out / "energy_true.txt")
    write_matrix(metrics.energy_table(B_est, geometry), out / "energy_est.txt")
    _emit(rep.to_dict())
    return 0


def _compare_cell(data, method, opts, cv, gcv, tune, ridge_lambda, peaks):
    inst = ProblemInstance(data.X, data.Y, data.geometry, data.spec.sample_rate_hz)
    t0 = time.perf_counter()
    run_opts = tune_for_method(inst, method, opts, cv, gcv) if tune else opts
    B_est, diag = reconstruct(data.X, data.Y, method, run_opts, ridge_lambda)
    elapsed = time.perf_counter() - t0
    rep = metrics.evaluate(data.B, B_est, data.geometry, peaks, runtime_s=elapsed)
    return rep, run_opts, diag


def cmd_compare(args, cfg) -> int:
    spec = scenario_spec(cfg, args)
    methods = args.methods.split(",") if args.methods else list(cfg.get("methods", METHODS))
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}")
    n_runs = args.n_runs if args.n_runs is not None else int(cfg.get("n_runs", 20))
    base_seed = args.base_seed if args.base_seed is not None else int(cfg.get("base_seed", 0))
    if n_runs < 1:
        raise ConfigError("n_runs must be >= 1")
    opts, cv, gcv = solver_options(cfg, args), cv_spec(cfg), gcv_spec(cfg)
    tune = bool(cfg.get("tune", True)) and not args.no_tune
    peaks = [spec.peak_sample(a.waveform.peak_time_s) for a in spec.active_sets]

    cells = {m: [] for m in methods}
    X = read_matrix(cfg["X"]) if "X" in cfg else None
    for run in range(n_runs):
        run_spec = ScenarioSpec.from_dict({**spec.to_dict(), "noise_seed": base_seed + run})
        data = simulate(run_spec, X)
        for m in methods:
            try:
                rep, used, diag = _compare_cell(data, m, opts, cv, gcv, tune,
                                                cfg.get("ridge_lambda"), peaks)
                cells[m].append({"run": run, "ok": True, "mu1": used.mu1, "mu2": used.mu2,
                                 "iterations_run": diag["iterations_run"], **rep.to_dict()})
            except TwrError as exc:
                log.warning("run %d, method %s failed: %s", run, m, exc)
                cells[m].append({"run": run, "ok": False, "error": f"{type(exc).__name__}: {exc}"})
            log.info("run %d/%d %s done", run + 1, n_runs, m)

    table = []
    for m in methods:
        ok = [c for c in cells[m] if c["ok"]]
        row = {"method": m, "n_ok": len(ok), "n_failed": len(cells[m]) - len(ok)}
        if ok:
            cols = {"mse": [c["mse"] for c in ok], "sparsity": [c["sparsity"] for c in ok],
                    "runtime_s": [c["runtime_s"] for c in ok]}
            for k in peaks:
                cols[f"d_{k}"] = [c["peak_distances"][str(k)] for c in ok]
            for name, vals in cols.items():
                if args.no_timing and name == "runtime_s":
                    vals = [0.0] * len(vals)
                row[name], row[f"{name}_se"] = mean_and_se(vals)
        table.append(row)
    if args.no_timing:
        for m in methods:
            for c in cells[m]:
                if c["ok"]:
                    c["runtime_s"] = 0.0

    out = _out_dir(args)
    result = {"scenario": spec.to_dict(), "n_runs": n_runs, "base_seed": base_seed,
              "tuned": tune, "peak_samples": peaks, "table": table, "cells": cells}
    write_json(result, out / "compare.json")
    (out / "compare.csv").write_text(_table_csv(table))
    _emit({"command": "compare", "out": str(out), "table": table})
    return 0


def _table_csv(table) -> str:
    keys = []
    for row in table:
        keys.extend(k for k in row if k not in keys)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    for row in table:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="twreg", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("simulate", help="generate X, B_true, Y and geometry")
    common(p)
    p.add_argument("--snr-db", type=float)
    p.add_argument("--seed", type=int, help="noise seed")

    p = sub.add_parser("reconstruct", help="estimate B from X and Y")
    common(p)
    p.add_argument("--x")
    p.add_argument("--y")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--mu1", type=float)
    p.add_argument("--mu2", type=float)
    p.add_argument("--no-timing", action="store_true", help="record wall time as 0 for reproducible output")

    p = sub.add_parser("tune", help="choose mu1 by CV and mu2 by GCV")
    common(p)
    p.add_argument("--x")
    p.add_argument("--y")
    p.add_argument("--geometry")
    p.add_argument("--mu1", type=float, help="starting mu1")
    p.add_argument("--mu2", type=float, help="starting mu2")

    p = sub.add_parser("evaluate", help="score an estimate against the truth")
    common(p)
    p.add_argument("--truth")
    p.add_argument("--estimate")
    p.add_argument("--geometry")
    p.add_argument("--peaks", help="comma-separated time indices for d_k")
    p.add_argument("--scenario", help="scenario.json from simulate (supplies peak samples)")

    p = sub.add_parser("compare", help="repeated simulation over methods, mean and standard error")
    common(p)
    p.add_argument("--methods", help=f"comma-separated subset of {','.join(METHODS)}")
    p.add_argument("--n-runs", type=int)
    p.add_argument("--base-seed", type=int)
    p.add_argument("--snr-db", type=float)
    p.add_argument("--mu1", type=float)
    p.add_argument("--mu2", type=float)
    p.add_argument("--no-tune", action="store_true", help="use the given penalties for every method")
    p.add_argument("--no-timing", action="store_true", help="record runtimes as 0 for reproducible output")
    return ap


COMMANDS = {
    "simulate": cmd_simulate,
    "reconstruct": cmd_reconstruct,
    "tune": cmd_tune,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
}


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, (IoFailure, MatrixFormatError)):
        return 4
    if isinstance(exc, ConfigError):
        return 2
    if isinstance(exc, NumericalError):
        return 3
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except TwrError as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
