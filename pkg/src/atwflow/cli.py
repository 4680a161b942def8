"""Command-line driver: ``atw run``, ``atw study``, ``atw check`` and ``atw dump-field``.

Exit codes: 0 success, 1 a check failed, 2 invalid configuration or input,
3 solver failure. ``ATW_WORKERS`` overrides the worker count.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import diagnostics as D
from . import io
from .config import ConfigError, RunConfig, StudyConfig
from .grid import PaddingError, ScalarField, SetMask, shape_from_dict, synth_shape
from .scheme import Trajectory, arrival_time, run_scheme

logger = logging.getLogger("atwflow")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3
TRAJECTORY_DIR = "trajectory"
STUDY_COLUMNS = ("n", "dx", "h", "steps", "extinction_time", "tv_isotropic", "tv_anisotropic", "tv_euclidean",
                 "tv_error", "sup_error", "unconverged_steps", "pinning_risk", "stalled")


def worker_count(default: int = 1) -> int:
    """``ATW_WORKERS`` when set, else ``default``."""
    raw = os.environ.get("ATW_WORKERS")
    if raw is None or raw == "":
        return default
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"ATW_WORKERS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"ATW_WORKERS must be a positive integer, got {raw!r}")
    return n


# checks ----------------------------------------------------------------------

def _with_tolerance(report: D.CheckReport, tolerances: dict) -> D.CheckReport:
    if report.name in tolerances:
        return dataclasses.replace(report, tolerance=float(tolerances[report.name]))
    return report


def _outward_min(traj: Trajectory, opts: dict, seed: int) -> D.CheckReport:
    delta = float(opts.get("delta", 5 * traj.grid.spacing))
    live = [k for k, E in enumerate(traj.steps) if not E.is_empty]
    stride = int(opts.get("stride", max(1, math.ceil(len(live) / 4))))
    mode = opts.get("mode", traj.tv_mode)
    reports = {k: D.outward_min_probe(traj.steps[k], delta, int(opts.get("n_probes", 200)), seed + k, mode)
               for k in live[::stride]}
    k = max(reports, key=lambda j: reports[j].worst)
    return D.CheckReport("outward_min", reports[k].worst, reports[k].tolerance, reports[k].units, location=k,
                         details={"delta": delta, "steps": list(reports), "worst_per_step":
                                  [reports[j].worst for j in reports]})


def evaluate_checks(traj: Trajectory, cfg: RunConfig, workers: int = 1,
                    curvature=None) -> list[D.CheckReport]:
    """The checks requested by ``cfg``, in the order listed, with tolerance overrides applied."""
    opts = {name: dict(cfg.check_options.get(name, {})) for name in cfg.checks}
    oracle = cfg.ball_oracle()
    if curvature is None and {"minH_monotone", "ball_curvature", "apriori_ledger"} & set(cfg.checks):
        curvature = D.curvature_series(traj)
    arrival = None
    if {"modulus", "coarea"} & set(cfg.checks) and traj.failure is None:
        arrival = arrival_time(traj)

    def comparison():
        other = synth_shape(traj.grid, shape_from_dict(opts["comparison"]["shape"]))
        inner = run_scheme(other, traj.h, cfg.solver_params(), cfg.to_dict()["resolved"]["scheme"]["max_steps"],
                           distance=traj.distance, band=cfg.scheme.get("band", "auto"))
        return D.check_comparison(inner, traj)

    def modulus():
        o = opts["modulus"]
        H0 = float(o.pop("H0")) if "H0" in o else oracle.H0
        return D.modulus_check(arrival, H0, seed=cfg.seed, **o)

    jobs = {
        "nestedness": lambda: D.check_nestedness(traj, **opts.get("nestedness", {})),
        "perimeter_monotone": lambda: D.check_perimeter_monotone(traj, **opts.get("perimeter_monotone", {})),
        "minH_monotone": lambda: D.check_minH_monotone(traj, curvature=curvature, **opts.get("minH_monotone", {})),
        "ball_radius": lambda: D.check_ball_radius(traj, oracle, **opts.get("ball_radius", {})),
        "ball_lower_bound": lambda: D.check_ball_lower_bound(traj, oracle, **opts.get("ball_lower_bound", {})),
        "ball_upper_bound": lambda: D.check_ball_upper_bound(traj, oracle, **opts.get("ball_upper_bound", {})),
        "ball_curvature": lambda: D.check_ball_curvature(traj, oracle, curvature=curvature,
                                                         **opts.get("ball_curvature", {})),
        "apriori_ledger": lambda: D.apriori_ledger(traj, curvature=curvature, **opts.get("apriori_ledger", {}))[1],
        "coarea": lambda: D.coarea_identity(traj, arrival, **opts.get("coarea", {})),
        "modulus": modulus,
        "outward_min": lambda: _outward_min(traj, opts.get("outward_min", {}), cfg.seed),
        "comparison": comparison,
    }

    def run(name):
        try:
            return _with_tolerance(jobs[name](), cfg.tolerances)
        except ValueError as exc:
            logger.error("check %s could not be evaluated: %s", name, exc)
            return D.CheckReport(name, math.inf, 0.0, "error", details={"error": str(exc)})

    if workers > 1 and len(cfg.checks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(run, cfg.checks))
    return [run(name) for name in cfg.checks]


def _print_reports(reports) -> None:
    for r in reports:
        print(r)


# run -------------------------------------------------------------------------

def _prepare_output(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    if (out / TRAJECTORY_DIR).exists():
        shutil.rmtree(out / TRAJECTORY_DIR)
    for name in ("arrival.atwf", "series.csv", "reports.json", io.MANIFEST_NAME):
        (out / name).unlink(missing_ok=True)


def cmd_run(config, output: str | None = None, workers: int | None = None) -> int:
    try:
        cfg = RunConfig.from_json(config)
        if output is not None:
            cfg = dataclasses.replace(cfg, output=output)
        workers = worker_count(1) if workers is None else workers
        grid = cfg.build_grid()
        E0 = synth_shape(grid, cfg.build_shape())
        if E0.is_empty:
            raise ConfigError("the shape covers no cell centre")
        if "outward_min" in cfg.checks:
            delta = float(cfg.check_options.get("outward_min", {}).get("delta", 5 * grid.spacing))
            if E0.padding * grid.spacing < delta:
                raise ConfigError(f"padding {E0.padding * grid.spacing:.4g} is below the probe width {delta}")
        h = cfg.time_step()
        params = cfg.solver_params()
        scheme = cfg.to_dict()["resolved"]["scheme"]
    except (ConfigError, PaddingError, ValueError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.output)
    _prepare_output(out)
    logger.info("run: grid %s, h = %.6g, %s", grid.shape, h, params.tv_mode)
    traj = run_scheme(E0, h, params, scheme["max_steps"], distance=scheme["distance"], band=scheme["band"])
    io.save_trajectory(out / TRAJECTORY_DIR, traj)
    summary = {"kind": "run", "n_steps": traj.n_steps, "extinct": traj.extinct, "truncated": traj.truncated,
               "stalled": traj.stalled, "failure": traj.failure, "unconverged_steps": traj.unconverged_steps}
    if traj.failure is not None:
        print(f"solver failure: {traj.failure}", file=sys.stderr)
        io.write_manifest(out, cfg.to_dict(), summary)
        return EXIT_SOLVER
    curvature = D.curvature_series(traj)
    ledger = D.energy_ledger(traj, curvature=curvature)
    io.write_series(out / "series.csv", traj, ledger)
    io.dump_field(out / "arrival.atwf", arrival_time(traj).u)
    reports = evaluate_checks(traj, cfg, workers, curvature)
    io.write_reports(out / "reports.json", reports)
    summary["all_passed"] = all(r.passed for r in reports)
    io.write_manifest(out, cfg.to_dict(), summary)
    _print_reports(reports)
    print(f"{traj.n_steps} steps, extinct={traj.extinct}; output in {out}")
    return EXIT_OK if summary["all_passed"] else EXIT_CHECK


# study -----------------------------------------------------------------------

def write_study_table(path, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STUDY_COLUMNS)
        for r in rows:
            d = dataclasses.asdict(r)
            w.writerow([repr(float(d[c])) if isinstance(d[c], float) else str(d[c]) for c in STUDY_COLUMNS])
    return path


def cmd_study(config, output: str | None = None, workers: int | None = None) -> int:
    try:
        cfg = StudyConfig.from_json(config)
        if output is not None:
            cfg = dataclasses.replace(cfg, output=output)
        workers = worker_count(cfg.workers) if workers is None else workers
        ladder = cfg.ladder()
        params = cfg.solver_params()
    except (ConfigError, ValueError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    for p in out.glob("rung_*"):
        shutil.rmtree(p)
    try:
        result = D.tv_convergence_study(ladder, cfg.side, cfg.r0, cfg.dim, params, workers, cfg.slack,
                                        output=out)
    except RuntimeError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    write_study_table(out / "table.csv", result.rows)
    io.write_reports(out / "reports.json", [result.report])
    io.write_manifest(out, cfg.to_dict(), {"kind": "study", "all_passed": result.report.passed})
    for k, r in enumerate(result.rows):
        flag = " [pinning risk]" if r.pinning_risk else ""
        flag += " [stalled]" if r.stalled else ""
        print(f"rung {k}: n={r.n} h={r.h:.5g} steps={r.steps} tv_error={r.tv_error:.4f} "
              f"sup_error={r.sup_error:.4f}{flag}")
    print(result.report)
    return EXIT_OK if result.report.passed else EXIT_CHECK


# check -----------------------------------------------------------------------

def _study_rows(directory: Path) -> list[D.StudyRow]:
    rows = []
    for p in sorted(directory.glob("rung_*/rung.json")):
        d = json.loads(p.read_text())
        d["sup_error"] = math.nan if d["sup_error"] is None else d["sup_error"]
        rows.append(D.StudyRow(**d, wall_time=0.0))
    return rows


def cmd_check(directory, workers: int | None = None, report_path: str | None = None) -> int:
    directory = Path(directory)
    try:
        manifest = io.read_manifest(directory)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"cannot read manifest: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    problems = io.verify_manifest(directory)
    if problems:
        for p in problems:
            print(f"FAIL manifest: {p}")
        return EXIT_CHECK
    try:
        workers = worker_count(1) if workers is None else workers
        if manifest.get("kind") == "study":
            cfg = StudyConfig.from_json({k: v for k, v in manifest["config"].items() if k != "resolved"})
            reports = [D.study_report(_study_rows(directory), cfg.slack)]
        else:
            cfg = RunConfig.from_json({k: v for k, v in manifest["config"].items() if k != "resolved"})
            traj = io.load_trajectory(directory / TRAJECTORY_DIR)
            if traj.failure is not None:
                print(f"solver failure recorded: {traj.failure}", file=sys.stderr)
                return EXIT_SOLVER
            reports = evaluate_checks(traj, cfg, workers)
    except (ConfigError, KeyError, TypeError) as exc:
        print(f"invalid run directory: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (io.FieldFormatError, FileNotFoundError, ValueError) as exc:
        print(f"FAIL load: {exc}")
        return EXIT_CHECK
    _print_reports(reports)
    if report_path:
        io.write_reports(report_path, reports)
    return EXIT_OK if all(r.passed for r in reports) else EXIT_CHECK


# dump-field ------------------------------------------------------------------

def field_summary(obj: ScalarField | SetMask) -> dict:
    g = obj.grid
    d = {"shape": list(g.shape), "spacing": g.spacing, "origin": list(g.origin)}
    if isinstance(obj, SetMask):
        d.update(kind="mask", count=obj.count, volume=obj.volume)
    else:
        v = np.asarray(obj.values)
        d.update(kind="field", min=float(v.min()), max=float(v.max()), mean=float(v.mean()))
    return d


def cmd_dump_field(path, npy: str | None = None) -> int:
    try:
        obj = io.load_field(path)
    except (OSError, io.FieldFormatError, ValueError) as exc:
        print(f"cannot load field: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(io.dumps_json(field_summary(obj)), end="")
    if npy:
        np.save(npy, obj.inside if isinstance(obj, SetMask) else obj.values)
    return EXIT_OK


# entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="atw", description="Minimizing-movements mean curvature flow.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more log output")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one trajectory and its checks")
    r.add_argument("config")
    r.add_argument("-o", "--output", help="override the output directory")
    s = sub.add_parser("study", help="run a refinement ladder")
    s.add_argument("config")
    s.add_argument("-o", "--output", help="override the output directory")
    c = sub.add_parser("check", help="re-run the checks of a persisted run")
    c.add_argument("directory")
    c.add_argument("--report", help="write the reports as JSON to this file")
    d = sub.add_parser("dump-field", help="describe a field or mask dump")
    d.add_argument("file")
    d.add_argument("--npy", help="also save the values as a .npy file")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args.config, args.output)
        if args.command == "study":
            return cmd_study(args.config, args.output)
        if args.command == "check":
            return cmd_check(args.directory, report_path=args.report)
        return cmd_dump_field(args.file, args.npy)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
