"""Sequential inverse loop over the measurement intervals.

For each interval ``k`` the field at ``tau^{k-1}`` is advanced with zero
hot-face flux (the IC problem), the P x P normal equations give ``w^k`` and
the field at ``tau^k`` is rebuilt by superposition of the stored unit
responses.  That field seeds interval ``k+1``.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import dense_linalg as dl
from .errors import InvalidArgument, InvalidState, MoldFluxError, SingularMatrix
from .fvm import DiscreteOperator, PhysicalParams, StepSolver, TimeGrid, assemble_operators
from .mesh import Mesh
from .offline import OfflineData, build_offline
from .rbf import CONSTANT, LINEAR, TIME_BASES, RbfBasis, SensorArray, WeightsTimeline

log = logging.getLogger(__name__)

LU = "LU"
TSVD = "TSVD"
# TSVD truncation chosen at the largest gap of the singular spectrum
ALPHA_GAP = "gap"
# condition estimate above which an LU solve is reported as near-singular
LU_CONDITION_LIMIT = 1e14


class IllConditionedWarning(UserWarning):
    pass


@dataclass(eq=False)
class MeasurementSeries:
    """Readings ``values[k-1, i]`` of sensor ``i`` at ``times[k-1] = tau^k``."""

    sensors: SensorArray
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.times.size, self.sensors.P):
            raise InvalidArgument(f"readings must have shape {(self.times.size, self.sensors.P)}, "
                                  f"got {self.values.shape}")
        if np.any(np.diff(self.times) <= 0):
            raise InvalidArgument("measurement times must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise InvalidArgument("measurements contain non-finite values")

    @property
    def n_times(self) -> int:
        return self.times.size

    def check_grid(self, time_grid: TimeGrid) -> None:
        expected = time_grid.measurement_times[1:]
        if self.times.size != expected.size or not np.allclose(self.times, expected, atol=1e-9):
            raise InvalidArgument("measurement times do not match the time grid")

    def restrict(self, times: np.ndarray) -> "MeasurementSeries":
        """Subset of rows at the requested instants (must all be present)."""
        idx = []
        for t in np.asarray(times, dtype=float):
            j = int(np.argmin(np.abs(self.times - t)))
            if abs(self.times[j] - t) > 1e-9 * max(1.0, t):
                raise InvalidArgument(f"no measurement at t={t}")
            idx.append(j)
        return MeasurementSeries(self.sensors, self.times[idx], self.values[idx])

    def with_values(self, values: np.ndarray) -> "MeasurementSeries":
        return MeasurementSeries(self.sensors, self.times.copy(), values)

    def to_csv(self, path, header: str | None = None) -> None:
        with open(path, "w") as fh:
            if header:
                for line in header.splitlines():
                    fh.write(f"# {line}\n")
            for i, p in enumerate(self.sensors.points, 1):
                fh.write(f"# sensor {i} {p[0]:.17e} {p[1]:.17e} {p[2]:.17e}\n")
            fh.write("k,tau_s,sensor_id,temperature_K\n")
            for k, t in enumerate(self.times, 1):
                for i in range(self.sensors.P):
                    fh.write(f"{k},{t:.17e},{i + 1},{self.values[k - 1, i]:.17e}\n")

    @classmethod
    def from_csv(cls, path, sensors: SensorArray | None = None) -> "MeasurementSeries":
        """Read the long-format table; sensor positions come from the comment rows
        unless ``sensors`` is given."""
        pts, rows, header_seen = [], [], False
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    parts = line[1:].split()
                    if len(parts) == 5 and parts[0] == "sensor":
                        pts.append([float(v) for v in parts[2:]])
                    continue
                if not header_seen:
                    if line.replace(" ", "") != "k,tau_s,sensor_id,temperature_K":
                        raise InvalidArgument(f"unexpected measurement header {line!r}")
                    header_seen = True
                    continue
                k, t, s, v = line.split(",")
                rows.append((int(k), float(t), int(s), float(v)))
        if not rows:
            raise InvalidArgument(f"no measurements in {path}")
        if sensors is None:
            if not pts:
                raise InvalidArgument("sensor positions are neither in the file nor given")
            sensors = SensorArray(np.array(pts))
        ks = sorted({r[0] for r in rows})
        if ks != list(range(1, len(ks) + 1)):
            raise InvalidArgument("measurement indices k must run 1..P_t without gaps")
        values = np.full((len(ks), sensors.P), np.nan)
        times = np.full(len(ks), np.nan)
        for k, t, s, v in rows:
            if not 1 <= s <= sensors.P:
                raise InvalidArgument(f"sensor id {s} outside 1..{sensors.P}")
            values[k - 1, s - 1] = v
            times[k - 1] = t
        if np.isnan(values).any():
            raise InvalidArgument("measurement table is incomplete")
        return cls(sensors, times, values)


@dataclass(frozen=True)
class InverseConfig:
    time_basis: str = LINEAR
    p_g: float = 0.0
    regularizer: str = LU
    alpha: int | str | None = None
    w0: tuple | None = None
    # behaviour when the LU condition estimate exceeds LU_CONDITION_LIMIT
    on_ill_conditioned: str = "warn"

    def __post_init__(self):
        if self.time_basis not in TIME_BASES:
            raise InvalidArgument(f"time_basis must be one of {TIME_BASES}")
        if not (np.isfinite(self.p_g) and self.p_g >= 0):
            raise InvalidArgument("p_g must be >= 0")
        if self.regularizer not in (LU, TSVD):
            raise InvalidArgument("regularizer must be 'LU' or 'TSVD'")
        if self.regularizer == TSVD and self.alpha != ALPHA_GAP and \
                (not isinstance(self.alpha, (int, np.integer)) or self.alpha < 1):
            raise InvalidArgument(f"TSVD needs an integer alpha >= 1 or {ALPHA_GAP!r}")
        if self.on_ill_conditioned not in ("warn", "raise", "ignore"):
            raise InvalidArgument("on_ill_conditioned must be warn, raise or ignore")


class NormalEquations:
    """The k-independent system ``K w = rhs`` factorised once per run."""

    def __init__(self, offline: OfflineData, cfg: InverseConfig):
        self.offline = offline
        self.cfg = cfg
        G = offline.Theta if cfg.time_basis == CONSTANT else offline.Theta_tilde
        self.G = G
        self.K = G.T @ G + 2.0 * cfg.p_g * offline.Phi
        self.condition = None
        self.alpha = None  # TSVD truncation actually used
        if cfg.regularizer == LU:
            self._lu = dl.lu_factor_full_pivot(self.K)
            self.condition = self._lu.condition_1norm(self.K)
            if self.condition > LU_CONDITION_LIMIT and cfg.on_ill_conditioned != "ignore":
                msg = f"normal matrix condition estimate {self.condition:.3e} exceeds {LU_CONDITION_LIMIT:.0e}"
                if cfg.on_ill_conditioned == "raise":
                    raise SingularMatrix(msg, condition=self.condition)
                warnings.warn(msg, IllConditionedWarning, stacklevel=3)
        else:
            self._svd = dl.svd(self.K)
            self.alpha = dl.spectrum_gap_alpha(self._svd.sigma) if cfg.alpha == ALPHA_GAP else int(cfg.alpha)
            if self.alpha > self._svd.r:
                raise InvalidArgument(f"alpha={self.alpha} exceeds numerical rank {self._svd.r}")
            self.condition = float(self._svd.sigma[0] / self._svd.sigma[self.alpha - 1])

    def rhs(self, T_hat: np.ndarray, T_ic: np.ndarray, w_prev: np.ndarray | None = None) -> np.ndarray:
        if self.cfg.time_basis == CONSTANT:
            return self.G.T @ (T_hat - T_ic)
        return self.G.T @ (T_hat + self.offline.Theta_d @ w_prev - T_ic)

    def solve(self, c: np.ndarray) -> np.ndarray:
        if self.cfg.regularizer == LU:
            return self._lu.solve(c)
        return dl.tsvd_solve(self._svd, c, self.alpha)


def solve_weights_constant(offline: OfflineData, cfg: InverseConfig, T_hat_k, T_IC_k,
                           system: NormalEquations | None = None) -> np.ndarray:
    """``(Theta^T Theta + 2 p_g Phi) w = Theta^T (T_hat - T_IC)``."""
    if cfg.time_basis != CONSTANT:
        raise InvalidArgument("configuration is not for the constant basis")
    system = system or NormalEquations(offline, cfg)
    return system.solve(system.rhs(np.asarray(T_hat_k, float), np.asarray(T_IC_k, float)))


def solve_weights_linear(offline: OfflineData, cfg: InverseConfig, T_hat_k, T_IC_k, w_prev,
                         system: NormalEquations | None = None) -> np.ndarray:
    """``(Tt^T Tt + 2 p_g Phi) w = Tt^T (T_hat + Theta_d w_prev - T_IC)`` with ``Tt = Theta_tilde``."""
    if cfg.time_basis != LINEAR:
        raise InvalidArgument("configuration is not for the linear basis")
    system = system or NormalEquations(offline, cfg)
    return system.solve(system.rhs(np.asarray(T_hat_k, float), np.asarray(T_IC_k, float),
                                   np.asarray(w_prev, float)))


@dataclass
class ICResult:
    final: np.ndarray
    probes: np.ndarray
    inner: np.ndarray | None = None  # (steps_per_meas, n_cells)


def solve_ic_problem(mesh: Mesh, params: PhysicalParams, time_grid: TimeGrid, T_prev: np.ndarray,
                     probe, solver: StepSolver | None = None,
                     op: DiscreteOperator | None = None, store_inner: bool = False) -> ICResult:
    """Advance ``T_prev`` over one interval with zero hot-face flux and full Robin cooling."""
    op = op or assemble_operators(mesh, params)
    solver = solver or StepSolver(op, time_grid.dt)
    T = np.asarray(T_prev, dtype=float)
    if T.shape != (mesh.n_cells,):
        raise InvalidArgument("T_prev has the wrong size")
    inner = []
    for _ in range(time_grid.steps_per_meas):
        T = solver.step(T, op.b_fixed)
        if store_inner:
            inner.append(T)
    return ICResult(final=T, probes=probe @ T, inner=np.array(inner) if store_inner else None)


def reconstruct_temperature(offline: OfflineData, time_basis: str, w_k, w_prev, T_IC_k) -> np.ndarray:
    """Field at tau^k from the unit responses and the IC field."""
    w_k = np.asarray(w_k, dtype=float)
    T = offline.phi_fields @ w_k + np.asarray(T_IC_k, dtype=float)
    if time_basis == LINEAR:
        T = T + offline.d_fields @ (offline.f_samp * (w_k - np.asarray(w_prev, dtype=float)))
    return T


def reconstruct_inner(offline: OfflineData, time_basis: str, w_k, w_prev, ic_inner: np.ndarray) -> np.ndarray:
    """Fields at every inner step of the interval, shape (steps_per_meas, n_cells)."""
    if offline.phi_inner is None:
        raise InvalidState("offline data was built without inner snapshots")
    if ic_inner is None or len(ic_inner) != len(offline.inner_times):
        raise InvalidState("IC inner snapshots missing or of the wrong length")
    w_k = np.asarray(w_k, dtype=float)
    out = np.empty_like(ic_inner)
    for n, s in enumerate(offline.inner_times):
        Tp, Td = offline.phi_inner[n], offline.d_inner[n]
        if time_basis == CONSTANT:
            out[n] = Tp @ w_k + ic_inner[n]
        else:
            dw = offline.f_samp * (w_k - np.asarray(w_prev, dtype=float))
            out[n] = Tp @ np.asarray(w_prev, dtype=float) + s * (Tp @ dw) + Td @ dw + ic_inner[n]
    return out


@dataclass
class InverseSolution:
    timeline: WeightsTimeline
    fields: list = field(default_factory=list)  # fields at tau^1..tau^K
    S1: np.ndarray = None
    S2: np.ndarray = None
    residual_norm: np.ndarray = None
    wall_time: np.ndarray = None
    condition: float | None = None
    completed: int = 0
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def mean_S1(self) -> float:
        return float(np.mean(self.S1[: self.completed]))

    def write_diagnostics_csv(self, path, header: str | None = None) -> None:
        with open(path, "w") as fh:
            if header:
                for line in header.splitlines():
                    fh.write(f"# {line}\n")
            fh.write("k,tau_s,S1,S2,residual_norm\n")
            for k in range(1, self.completed + 1):
                fh.write(f"{k},{self.timeline.times[k]:.17e},{self.S1[k - 1]:.17e},"
                         f"{self.S2[k - 1]:.17e},{self.residual_norm[k - 1]:.17e}\n")


def run_sequential_inversion(mesh: Mesh, params: PhysicalParams, time_grid: TimeGrid, basis: RbfBasis,
                             cfg: InverseConfig, measurements: MeasurementSeries,
                             offline: OfflineData | None = None, solver: StepSolver | None = None,
                             op: DiscreteOperator | None = None, keep_fields: bool = True,
                             T_init: np.ndarray | None = None, cache_dir=None) -> InverseSolution:
    """Estimate the weights interval by interval.

    A failure inside the loop is recorded in ``error`` and the results up to
    the last completed interval are returned.
    """
    measurements.check_grid(time_grid)
    op = op or assemble_operators(mesh, params)
    solver = solver or StepSolver(op, time_grid.dt)
    if offline is None:
        offline = build_offline(mesh, params, time_grid, basis, measurements.sensors,
                                solver=solver, op=op, cache_dir=cache_dir)
    if offline.P != basis.P:
        raise InvalidArgument("offline data and basis sizes differ")
    system = NormalEquations(offline, cfg)
    P, nk = basis.P, measurements.n_times
    w0 = np.zeros(P) if cfg.w0 is None else np.asarray(cfg.w0, dtype=float).reshape(P)
    timeline = WeightsTimeline(time_grid.measurement_times, P, cfg.time_basis, w0=w0)
    sol = InverseSolution(timeline=timeline, S1=np.full(nk, np.nan), S2=np.full(nk, np.nan),
                          residual_norm=np.full(nk, np.nan), wall_time=np.full(nk, np.nan),
                          condition=system.condition)
    probe = offline.probe
    T = np.full(mesh.n_cells, params.T_0) if T_init is None else np.asarray(T_init, dtype=float)
    w_prev = w0
    for k in range(1, nk + 1):
        t0 = time.perf_counter()
        try:
            ic = solve_ic_problem(mesh, params, time_grid, T, probe, solver=solver, op=op)
            T_hat = measurements.values[k - 1]
            w = system.solve(system.rhs(T_hat, ic.probes, w_prev))
            T = reconstruct_temperature(offline, cfg.time_basis, w, w_prev, ic.final)
        except MoldFluxError as exc:
            sol.error = f"interval {k}: {exc}"
            log.error("inversion aborted at interval %d: %s", k, exc)
            break
        sol.wall_time[k - 1] = time.perf_counter() - t0
        R = probe @ T - T_hat
        sol.S1[k - 1] = 0.5 * float(R @ R)
        sol.S2[k - 1] = sol.S1[k - 1] + cfg.p_g * float(w @ offline.Phi @ w)
        sol.residual_norm[k - 1] = float(np.linalg.norm(R))
        timeline.set(k, w)
        if keep_fields:
            sol.fields.append(T)
        sol.completed = k
        w_prev = w
    return sol
