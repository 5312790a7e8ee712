"""Synthetic test cases, noise injection, error metrics and parameter sweeps.

Two manufactured hot-face fluxes are provided (outward convention, so both
are negative and heat the plate)::

    B1: g = -k_s (0.5 t g1 + g1),                                g1 = b z^2 + c
    B2: g = -k_s (g1 + g1/2 sin(2 pi f_max t^2 / t_f) + g2 e^{-0.1 t}),
        g2 = 10 c / (1 + (x - 1)^2 + z^2)
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidArgument
from .fvm import (DEFAULT_PROBE_MODE, PhysicalParams, StepSolver, TimeGrid, assemble_operators,
                  hot_face_quadrature, solve_direct)
from .mesh import Geometry, Mesh, ladder_mesh
from .offline import build_offline
from .online import LU, IllConditionedWarning, InverseConfig, MeasurementSeries, run_sequential_inversion
from .rbf import RbfBasis, SensorArray, WeightsTimeline, uniform_sensor_grid

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TruthFlux:
    """Manufactured flux; ``benchmark = 0`` gives a zero flux (test hook)."""

    benchmark: int = 1
    a: float = 1100.0  # carried for completeness, neither formula uses it
    b: float = 1200.0
    c: float = 3000.0
    f_max: float = 0.1
    t_f: float = 50.0
    k_s: float = 383.0

    def __post_init__(self):
        if self.benchmark not in (0, 1, 2):
            raise InvalidArgument(f"unknown benchmark {self.benchmark}")

    def __call__(self, x: np.ndarray, t: float) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        pts = x.reshape(-1, 3)
        X, Z = pts[:, 0], pts[:, 2]
        g1 = self.b * Z ** 2 + self.c
        if self.benchmark == 0:
            g = np.zeros_like(g1)
        elif self.benchmark == 1:
            g = -self.k_s * (0.5 * t * g1 + g1)
        else:
            g2 = 10.0 * self.c / (1.0 + (X - 1.0) ** 2 + Z ** 2)
            g = -self.k_s * (g1 + 0.5 * g1 * np.sin(2.0 * np.pi * self.f_max * t ** 2 / self.t_f)
                             + g2 * np.exp(-0.1 * t))
        return float(g[0]) if x.ndim == 1 else g


def truth_flux(spec: TruthFlux, x, t: float):
    return spec(x, t)


# noise levels [K] swept when no explicit list is configured
NOISE_LEVELS = (0.1, 0.5, 1.0, 2.0)


@dataclass(frozen=True)
class NoiseSpec:
    omega: float = 0.0
    seed: int = 0
    samples: int = 1

    def __post_init__(self):
        if not self.omega >= 0:
            raise InvalidArgument("omega must be >= 0")
        if self.samples < 1:
            raise InvalidArgument("samples must be >= 1")


def synthesize_measurements(mesh: Mesh, params: PhysicalParams, time_grid: TimeGrid, spec,
                            sensors: SensorArray, solver: StepSolver | None = None,
                            probe_mode: str = DEFAULT_PROBE_MODE) -> MeasurementSeries:
    """Run the direct model with ``spec`` as flux and read the sensors at every tau^k."""
    sensors.check_inside(mesh)
    res = solve_direct(mesh, params, time_grid, spec, probes=sensors.points, store="none", solver=solver,
                       probe_mode=probe_mode)
    return MeasurementSeries(sensors, time_grid.measurement_times[1:], res.probes)


def add_noise(series: MeasurementSeries, noise: NoiseSpec, sample: int = 0) -> MeasurementSeries:
    """One noisy copy; ``sample`` selects an independent draw of the seeded stream."""
    if noise.omega == 0.0:
        return series.with_values(series.values.copy())
    rng = np.random.default_rng([noise.seed, sample])
    return series.with_values(series.values + rng.normal(0.0, noise.omega, series.values.shape))


def noisy_samples(series: MeasurementSeries, noise: NoiseSpec):
    for s in range(noise.samples):
        yield add_noise(series, noise, s)


@dataclass
class ErrorReport:
    times: np.ndarray
    l2: np.ndarray
    linf: np.ndarray

    @property
    def max_l2(self) -> float:
        return float(np.max(self.l2))

    @property
    def mean_l2(self) -> float:
        return float(np.mean(self.l2))

    @property
    def max_linf(self) -> float:
        return float(np.max(self.linf))

    @property
    def mean_linf(self) -> float:
        return float(np.mean(self.linf))

    def summary(self) -> dict:
        return {"mean_l2": self.mean_l2, "max_l2": self.max_l2,
                "mean_linf": self.mean_linf, "max_linf": self.max_linf}


def relative_error_norms(g_true: np.ndarray, g_est: np.ndarray, areas: np.ndarray) -> tuple[float, float]:
    """Area-normalised L2 and max norm of ``(g_true - g_est) / g_true``."""
    e = (g_true - g_est) / g_true
    return float(np.sqrt(np.sum(e * e * areas) / np.sum(areas))), float(np.max(np.abs(e)))


def error_report(spec, basis: RbfBasis, timeline: WeightsTimeline, mesh: Mesh,
                 time_grid: TimeGrid | None = None, n_intervals: int | None = None) -> ErrorReport:
    """Relative flux error at the hot-face centers at each populated tau^k."""
    _, centers, areas, _ = hot_face_quadrature(mesh)
    V = basis.values(centers)
    n = timeline.n_filled if n_intervals is None else n_intervals
    times = timeline.times[1:n + 1] if time_grid is None else time_grid.measurement_times[1:n + 1]
    l2, linf = np.empty(n), np.empty(n)
    for i, t in enumerate(times):
        g_true = np.asarray(spec(centers, t), dtype=float)
        if np.any(g_true == 0):
            raise InvalidArgument(f"true flux vanishes on the hot face at t={t}")
        l2[i], linf[i] = relative_error_norms(g_true, V @ timeline.coefficients(t), areas)
    return ErrorReport(np.asarray(times), l2, linf)


# ---------------------------------------------------------------- sweeps

@dataclass
class SweepSpec:
    benchmark: int = 1
    meshes: tuple = (5,)
    dts: tuple = (0.5,)
    p_gs: tuple = (0.0,)
    bases: tuple = ("linear",)
    regularizers: tuple = ((LU, None),)  # (name, alpha) pairs
    omegas: tuple = NOISE_LEVELS
    samples: int = 1
    seed: int = 0
    eta: float | None = None
    t_f: float = 50.0
    f_samp: float = 1.0
    same_grid_data: bool = False
    data_mesh: int | None = None
    data_dt: float | None = None
    geometry: Geometry = field(default_factory=Geometry)
    params: PhysicalParams = field(default_factory=PhysicalParams)
    sensor_grid: tuple = (10, 10, 0.02)
    probe_mode: str = DEFAULT_PROBE_MODE

    def combinations(self):
        return list(itertools.product(self.meshes, self.dts, self.p_gs, self.bases,
                                      self.regularizers, self.omegas))


RESULT_COLUMNS = ["mesh", "dt", "p_g", "basis", "regularizer", "alpha", "omega", "samples",
                  "mean_l2", "max_l2", "mean_linf", "max_linf", "mean_S1", "wall_ms_per_iter",
                  "failed_samples"]


def combination_seed(base_seed: int, index: int) -> int:
    h = hashlib.sha256(f"{base_seed}:{index}".encode()).digest()
    return int.from_bytes(h[:8], "little")


class _Cache:
    """Meshes, solvers, offline data and clean series shared across a sweep."""

    def __init__(self, spec: SweepSpec):
        self.spec = spec
        self.meshes, self.solvers, self.offline, self.data = {}, {}, {}, {}

    def mesh(self, m) -> Mesh:
        if m not in self.meshes:
            self.meshes[m] = ladder_mesh(m, self.spec.geometry) if isinstance(m, int) else m
        return self.meshes[m]

    def sensors(self, mesh) -> SensorArray:
        nx, nz, depth = self.spec.sensor_grid
        return uniform_sensor_grid(mesh.geometry, nx, nz, depth)

    def time_grid(self, dt) -> TimeGrid:
        return TimeGrid(t_f=self.spec.t_f, dt=dt, f_samp=self.spec.f_samp)

    def solver(self, m, dt):
        key = (m, dt)
        if key not in self.solvers:
            mesh = self.mesh(m)
            op = assemble_operators(mesh, self.spec.params)
            self.solvers[key] = (op, StepSolver(op, dt))
        return self.solvers[key]

    def measurements(self, m, dt) -> MeasurementSeries:
        s = self.spec
        if s.same_grid_data:
            key = (m, dt)
        else:
            key = (s.data_mesh if s.data_mesh is not None else min(s.meshes, key=lambda q: self.mesh(q).dx),
                   s.data_dt if s.data_dt is not None else min(s.dts))
        if key not in self.data:
            mesh = self.mesh(key[0])
            op, solver = self.solver(*key)
            flux = TruthFlux(s.benchmark, t_f=s.t_f, k_s=s.params.k_s)
            self.data[key] = synthesize_measurements(mesh, s.params, self.time_grid(key[1]), flux,
                                                     self.sensors(mesh), solver=solver,
                                                     probe_mode=s.probe_mode)
        return self.data[key]

    def basis(self, m) -> RbfBasis:
        mesh = self.mesh(m)
        return RbfBasis.from_sensors(self.sensors(mesh), mesh, self.spec.eta)

    def offline_data(self, m, dt):
        key = (m, dt)
        if key not in self.offline:
            mesh = self.mesh(m)
            op, solver = self.solver(m, dt)
            self.offline[key] = build_offline(mesh, self.spec.params, self.time_grid(dt), self.basis(m),
                                              self.sensors(mesh), solver=solver, op=op,
                                              probe_mode=self.spec.probe_mode)
        return self.offline[key]


def run_single(cache: _Cache, m, dt, cfg: InverseConfig, series: MeasurementSeries | None = None):
    """Inversion for one discretization; returns (solution, error report)."""
    mesh = cache.mesh(m)
    tg = cache.time_grid(dt)
    op, solver = cache.solver(m, dt)
    series = series if series is not None else cache.measurements(m, dt)
    series = series.restrict(tg.measurement_times[1:])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IllConditionedWarning)
        sol = run_sequential_inversion(mesh, cache.spec.params, tg, cache.basis(m), cfg, series,
                                       offline=cache.offline_data(m, dt), solver=solver, op=op,
                                       keep_fields=False)
    flux = TruthFlux(cache.spec.benchmark, t_f=cache.spec.t_f, k_s=cache.spec.params.k_s)
    rep = error_report(flux, cache.basis(m), sol.timeline, mesh, tg, n_intervals=sol.completed) \
        if sol.completed else None
    return sol, rep


def run_sweep(spec: SweepSpec, out_csv=None, header: str | None = None, cache: _Cache | None = None) -> list:
    """One row per combination; noisy combinations average over ``spec.samples`` draws."""
    cache = cache or _Cache(spec)
    rows = []
    for idx, (m, dt, p_g, basis, (reg, alpha), omega) in enumerate(spec.combinations()):
        cfg = InverseConfig(time_basis=basis, p_g=p_g, regularizer=reg, alpha=alpha,
                            on_ill_conditioned="ignore")
        clean = cache.measurements(m, dt)
        noise = NoiseSpec(omega, combination_seed(spec.seed, idx), spec.samples if omega > 0 else 1)
        stats, walls, s1, failed = [], [], [], 0
        for sample in noisy_samples(clean, noise):
            sol, rep = run_single(cache, m, dt, cfg, sample)
            if not sol.ok or rep is None:
                failed += 1
                continue
            stats.append(rep.summary())
            walls.append(np.nanmean(sol.wall_time))
            s1.append(sol.mean_S1)
        row = {"mesh": getattr(cache.mesh(m), "name", m), "dt": dt, "p_g": p_g, "basis": basis,
               "regularizer": reg, "alpha": alpha if alpha is not None else "", "omega": omega,
               "samples": noise.samples, "failed_samples": failed}
        for key in ("mean_l2", "max_l2", "mean_linf", "max_linf"):
            row[key] = float(np.mean([s[key] for s in stats])) if stats else float("nan")
        row["mean_S1"] = float(np.mean(s1)) if s1 else float("nan")
        row["wall_ms_per_iter"] = 1e3 * float(np.mean(walls)) if walls else float("nan")
        rows.append(row)
        log.info("sweep %d: %s", idx, row)
    if out_csv is not None:
        write_rows_csv(out_csv, rows, RESULT_COLUMNS, header)
    return rows


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.17e}"
    return str(v)


def write_rows_csv(path, rows, columns, header: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header:
            for line in header.splitlines():
                fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])


def time_online_iteration(mesh: Mesh, params: PhysicalParams, time_grid: TimeGrid, basis: RbfBasis,
                          sensors: SensorArray, cfg: InverseConfig, n_intervals: int = 3,
                          solver: StepSolver | None = None) -> float:
    """Median wall time [s] of one online interval on zero-information data.

    Offline data and solver setup are excluded from the timing.
    """
    op = assemble_operators(mesh, params)
    solver = solver or StepSolver(op, time_grid.dt)
    offline = build_offline(mesh, params, time_grid, basis, sensors, solver=solver, op=op)
    tg = TimeGrid(t_f=n_intervals / time_grid.f_samp, dt=time_grid.dt, f_samp=time_grid.f_samp)
    series = MeasurementSeries(sensors, tg.measurement_times[1:], np.full((n_intervals, sensors.P), params.T_f))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IllConditionedWarning)
        sol = run_sequential_inversion(mesh, params, tg, basis, replace(cfg), series, offline=offline,
                                       solver=solver, op=op, keep_fields=False)
    return float(np.median(sol.wall_time[: sol.completed]))
