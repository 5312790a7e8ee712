"""Command-line entry point: ``moldflux {direct,offline,invert,benchmark,select}``.

Exit codes: 0 success, 2 configuration or input error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .benchmark import (RESULT_COLUMNS, SweepSpec, _Cache, add_noise, run_sweep, synthesize_measurements,
                        write_rows_csv)
from .config import RunConfig, load_config
from .dense_linalg import svd, write_spectrum_csv
from .errors import (ConfigError, InvalidArgument, InvalidState, MoldFluxError, OptimizationFailure,
                     OutOfDomain, OutOfRange, SelectionFailure, SingularMatrix, SolverFailure)
from .fvm import TimeGrid, assemble_operators, solve_direct, StepSolver
from .mesh import ladder_mesh
from .offline import build_offline
from .online import IllConditionedWarning, MeasurementSeries, run_sequential_inversion
from .rbf import RbfBasis
from .selection import select_for_training

log = logging.getLogger("moldflux")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3
_INPUT_ERRORS = (ConfigError, InvalidArgument, OutOfDomain, OutOfRange, InvalidState)
_SOLVER_ERRORS = (SolverFailure, SingularMatrix, OptimizationFailure, SelectionFailure)


class CommandFailed(MoldFluxError):
    """A run finished but reported a numerical failure (exit 3)."""


def _mesh_meta(mesh) -> dict:
    return {f"mesh_{k}": v for k, v in mesh.metadata().items()}


def _flux(cfg: RunConfig):
    if cfg.direct.flux is not None:
        value = float(cfg.direct.flux)
        return lambda x, t: np.full(np.asarray(x).reshape(-1, 3).shape[0], value)
    if cfg.benchmark is not None:
        return cfg.truth_flux()
    return None


# ---------------------------------------------------------------- commands

def cmd_direct(cfg: RunConfig, out: Path) -> None:
    cfg.require("physics")
    mesh = cfg.build_mesh()
    sensors = cfg.build_sensors()
    sensors.check_inside(mesh)
    res = solve_direct(mesh, cfg.physics, cfg.time, _flux(cfg), probes=sensors.points,
                       store="measurements" if cfg.direct.write_fields else "none",
                       probe_mode=cfg.sensors.probe)
    header = cfg.header("direct", {**_mesh_meta(mesh), "probe_mode": cfg.sensors.probe})
    MeasurementSeries(sensors, cfg.time.measurement_times[1:], res.probes).to_csv(
        out / "measurements.csv", header)
    if cfg.direct.write_fields:
        with open(out / "trajectory.csv", "w") as fh:
            for line in header.splitlines():
                fh.write(f"# {line}\n")
            fh.write("k,tau_s,cell,T_K\n")
            for k, (t, T) in enumerate(zip(res.trajectory.times, res.trajectory.snapshots)):
                for c, v in enumerate(T):
                    fh.write(f"{k},{t:.17e},{c},{v:.17e}\n")


def _offline(cfg: RunConfig, out: Path):
    cfg.require("physics")
    mesh = cfg.build_mesh()
    sensors = cfg.build_sensors()
    basis = RbfBasis.from_sensors(sensors, mesh, cfg.basis.eta)
    op = assemble_operators(mesh, cfg.physics)
    solver = StepSolver(op, cfg.time.dt)
    cache = cfg.resolve(cfg.paths.offline_cache) or out / "cache"
    off = build_offline(mesh, cfg.physics, cfg.time, basis, sensors, solver=solver, op=op,
                        cache_dir=cache, probe_mode=cfg.sensors.probe)
    return mesh, sensors, basis, op, solver, off


def cmd_offline(cfg: RunConfig, out: Path) -> None:
    mesh, sensors, basis, _, _, off = _offline(cfg, out)
    header = cfg.header("offline", {**_mesh_meta(mesh), "offline_fingerprint": off.fingerprint,
                                    "eta": basis.eta, "probe_mode": cfg.sensors.probe})
    off.write_matrices_csv(out / "offline_matrices.csv", header)
    for name in ("Theta", "Theta_tilde"):
        path = out / f"spectrum_{name}.csv"
        write_spectrum_csv(path, svd(getattr(off, name)).sigma_all)


def cmd_invert(cfg: RunConfig, out: Path, measurements: str | None) -> None:
    src = measurements or cfg.paths.measurements
    if src is None:
        raise ConfigError("no measurement file: pass --measurements or set paths.measurements")
    src = Path(src) if measurements else cfg.resolve(src)
    mesh, sensors, basis, op, solver, off = _offline(cfg, out)
    try:
        series = MeasurementSeries.from_csv(src, sensors)
    except OSError as exc:
        raise ConfigError(f"cannot read measurements {src}: {exc}") from exc
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IllConditionedWarning)
        sol = run_sequential_inversion(mesh, cfg.physics, cfg.time, basis, cfg.inverse_config(), series,
                                       offline=off, solver=solver, op=op, keep_fields=False)
    header = cfg.header("invert", {**_mesh_meta(mesh), "offline_fingerprint": off.fingerprint,
                                   "eta": basis.eta, "condition_estimate": sol.condition,
                                   "completed_intervals": sol.completed})
    sol.timeline.to_csv(out / "weights.csv", header)
    sol.write_diagnostics_csv(out / "diagnostics.csv", header)
    if not sol.ok:
        raise CommandFailed(sol.error)


def cmd_benchmark(cfg: RunConfig, out: Path) -> None:
    spec = cfg.sweep_spec()
    cache = _Cache(spec)
    rows = run_sweep(spec, cache=cache)
    header = cfg.header("benchmark", {"eta": spec.eta, "probe_mode": spec.probe_mode,
                                      "sensor_grid": spec.sensor_grid})
    # wall times go to their own file so the results table reruns byte-identically
    cols = [c for c in RESULT_COLUMNS if c != "wall_ms_per_iter"]
    write_rows_csv(out / "results.csv", rows, cols, header)
    write_rows_csv(out / "timing.csv", [dict(r, index=i) for i, r in enumerate(rows)],
                   ["index", "mesh", "dt", "p_g", "basis", "wall_ms_per_iter"], header)
    for (m, dt), series in sorted(cache.data.items(), key=lambda kv: (str(kv[0][0]), kv[0][1])):
        series.to_csv(out / f"measurements_mesh{m}_dt{dt}.csv", header)
    n_failed = sum(r["failed_samples"] for r in rows)
    if n_failed:
        log.warning("%d inversion runs failed; see failed_samples in results.csv", n_failed)


def cmd_select(cfg: RunConfig, out: Path, measurements: str | None) -> None:
    cfg.require("physics")
    sel = cfg.selection
    meshes = [ladder_mesh(m, cfg.geometry) for m in sel.meshes]
    src = measurements or cfg.paths.measurements
    if src is not None:
        src = Path(src) if measurements else cfg.resolve(src)
        training = MeasurementSeries.from_csv(src)
    else:
        data_mesh = ladder_mesh(sel.data_mesh, cfg.geometry) if sel.data_mesh is not None \
            else min(meshes, key=lambda m: m.dx)
        data_dt = sel.data_dt if sel.data_dt is not None else min(sel.dts)
        training = synthesize_measurements(data_mesh, cfg.physics, cfg.time.with_dt(data_dt),
                                           cfg.truth_flux(), cfg.build_sensors(),
                                           probe_mode=cfg.sensors.probe)
        if cfg.noise.omega > 0:
            training = add_noise(training, cfg.noise_spec(cfg.seed))
    header = cfg.header("select", {"eta": cfg.basis.eta, "probe_mode": cfg.sensors.probe,
                                   "threshold_units": "m + s taken as plain numbers"})
    training.to_csv(out / "training_measurements.csv", header)
    try:
        res = select_for_training(meshes, sel.dts, cfg.physics, training, p_g0=sel.p_g0,
                                  max_outer=sel.max_outer, eta=cfg.basis.eta,
                                  time_basis=cfg.basis.time_basis, t_f=cfg.time.t_f,
                                  f_samp=cfg.time.f_samp, probe_mode=cfg.sensors.probe,
                                  cache_dir=cfg.resolve(cfg.paths.offline_cache))
    except SelectionFailure as exc:
        with open(out / "selection_failure.txt", "w") as fh:
            fh.write(f"{exc}\n")
            for row in exc.trace:
                fh.write(f"{row}\n")
        raise
    res.write_trace_csv(out / "selection_trace.csv", header)
    res.write_table_csv(out / "selection_table.csv", header)
    res.write_stability_csv(out / "selection_stability.csv", header)


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moldflux", description="Hot-face heat flux estimation for a mold plate.")
    p.add_argument("--version", action="version", version=f"moldflux {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("direct", "offline", "invert", "benchmark", "select"):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="YAML run configuration")
        s.add_argument("--out", default=".", help="output directory (created if missing)")
        s.add_argument("--threads", type=int, default=1, help="worker bound (runs are sequential)")
        s.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        s.add_argument("-v", "--verbose", action="store_true")
        if name in ("invert", "select"):
            s.add_argument("--measurements", default=None, help="measurement CSV (k,tau_s,sensor_id,temperature_K)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "direct":
            cmd_direct(cfg, out)
        elif args.command == "offline":
            cmd_offline(cfg, out)
        elif args.command == "invert":
            cmd_invert(cfg, out, args.measurements)
        elif args.command == "benchmark":
            cmd_benchmark(cfg, out)
        else:
            cmd_select(cfg, out, args.measurements)
    except _INPUT_ERRORS as exc:
        print(f"moldflux: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (*_SOLVER_ERRORS, CommandFailed) as exc:
        print(f"moldflux: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except MoldFluxError as exc:
        print(f"moldflux: error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
