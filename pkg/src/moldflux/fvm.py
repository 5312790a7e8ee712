"""Finite-volume discretisation of the mold heat equation.

Semi-discrete system::

    rho*C_p * M dT/dt + A T = b(t),   b = b_fixed + b_flux(t) + b_source(t)

advanced with implicit Euler::

    (rho*C_p*M + dt*A) T^{n+1} = rho*C_p*M T^n + dt*b^{n+1}

``M`` holds the cell volumes, ``A`` the two-point diffusion stencil plus the
Robin term ``h*area`` of the water-cooled faces.  The hot-face flux enters
only through ``b_flux``; adiabatic faces contribute nothing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InvalidArgument, SolverFailure
from .mesh import Mesh, Patch

log = logging.getLogger(__name__)

FluxFunction = Callable[[np.ndarray, float], np.ndarray]

# meshes above this size are solved with preconditioned CG instead of a sparse factorisation;
# beyond ~30k cells the factor's fill-in makes each solve slower than CG
DIRECT_SOLVER_MAX_CELLS = 30_000


@dataclass(frozen=True)
class PhysicalParams:
    k_s: float = 383.0
    rho: float = 8940.0
    C_p: float = 390.0
    h: float = 5.66e4
    T_f: float = 350.0
    T_0: float = 350.0

    def __post_init__(self):
        for name in ("k_s", "rho", "C_p"):
            if not getattr(self, name) > 0:
                raise InvalidArgument(f"{name} must be > 0")
        # h = 0 is accepted as a fully adiabatic test configuration
        if not self.h >= 0:
            raise InvalidArgument("h must be >= 0")
        if not (np.isfinite(self.T_f) and np.isfinite(self.T_0)):
            raise InvalidArgument("temperatures must be finite")

    @property
    def rho_cp(self) -> float:
        return self.rho * self.C_p


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time steps with measurements every ``1/f_samp`` seconds."""

    t_f: float = 50.0
    dt: float = 0.5
    f_samp: float = 1.0

    def __post_init__(self):
        if not (self.t_f > 0 and self.dt > 0 and self.f_samp > 0):
            raise InvalidArgument("t_f, dt and f_samp must be > 0")
        for label, ratio in (("t_f/dt", self.t_f / self.dt),
                             ("1/(f_samp*dt)", 1.0 / (self.f_samp * self.dt)),
                             ("t_f*f_samp", self.t_f * self.f_samp)):
            if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio) or round(ratio) < 1:
                raise InvalidArgument(f"{label} = {ratio} must be a positive integer")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_f / self.dt))

    @property
    def steps_per_meas(self) -> int:
        return int(round(1.0 / (self.f_samp * self.dt)))

    @property
    def n_meas(self) -> int:
        return int(round(self.t_f * self.f_samp))

    @property
    def measurement_times(self) -> np.ndarray:
        """tau^0 .. tau^{P_t}; tau^k coincides with step k*steps_per_meas."""
        return np.arange(self.n_meas + 1) * self.steps_per_meas * self.dt

    def step_time(self, n: int) -> float:
        return n * self.dt

    def with_dt(self, dt: float) -> "TimeGrid":
        return TimeGrid(t_f=self.t_f, dt=dt, f_samp=self.f_samp)


@dataclass(eq=False)
class DiscreteOperator:
    mesh: Mesh
    params: PhysicalParams
    M: np.ndarray
    A: sp.csr_matrix
    b_fixed: np.ndarray
    _hot: np.ndarray = field(repr=False, default=None)

    def flux_load(self, g: FluxFunction, t: float) -> np.ndarray:
        return flux_load_vector(self.mesh, g, t)

    def energy(self, T: np.ndarray) -> float:
        return self.params.rho_cp * float(self.M @ T)


def assemble_operators(mesh: Mesh, params: PhysicalParams) -> DiscreteOperator:
    n = mesh.n_cells
    inner = mesh.neighbor >= 0
    own, nbr = mesh.owner[inner], mesh.neighbor[inner]
    d = np.linalg.norm(mesh.cell_centers[nbr] - mesh.cell_centers[own], axis=1)
    coef = params.k_s * mesh.face_area[inner] / d

    water = mesh.boundary_faces(Patch.WATER_FACE)
    robin = params.h * mesh.face_area[water]
    diag = np.zeros(n)
    diag += np.bincount(own, coef, n) + np.bincount(nbr, coef, n)
    diag += np.bincount(mesh.owner[water], robin, n)

    rows = np.concatenate([own, nbr, np.arange(n)])
    cols = np.concatenate([nbr, own, np.arange(n)])
    vals = np.concatenate([-coef, -coef, diag])
    A = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    b_fixed = np.bincount(mesh.owner[water], robin * params.T_f, n)
    return DiscreteOperator(mesh=mesh, params=params, M=mesh.volumes, A=A, b_fixed=b_fixed)


def hot_face_quadrature(mesh: Mesh):
    """(face ids, face centers, areas, owner cells) of the hot face."""
    f = mesh.boundary_faces(Patch.HOT_FACE)
    return f, mesh.face_center[f], mesh.face_area[f], mesh.owner[f]


def flux_load_vector(mesh: Mesh, g: FluxFunction, t: float) -> np.ndarray:
    """Load from an outward hot-face flux ``g``: entry ``-g*area`` per face."""
    _, centers, areas, owners = hot_face_quadrature(mesh)
    gv = np.asarray(g(centers, t), dtype=float)
    gv = np.broadcast_to(gv, areas.shape)
    if not np.all(np.isfinite(gv)):
        raise InvalidArgument(f"flux is not finite at t={t}")
    return np.bincount(owners, -gv * areas, mesh.n_cells)


def hot_face_load_matrix(mesh: Mesh, face_values: np.ndarray) -> np.ndarray:
    """Loads for several flux patterns at once.

    ``face_values`` has shape (n_hot_faces, m); the result is (n_cells, m).
    """
    _, _, areas, owners = hot_face_quadrature(mesh)
    out = np.zeros((mesh.n_cells, face_values.shape[1]))
    np.add.at(out, owners, -face_values * areas[:, None])
    return out


class StepSolver:
    """Solves ``(rho*C_p*M + dt*A) x = rhs`` repeatedly for a fixed ``dt``.

    ``method="direct"`` factorises once with SuperLU (symmetric minimum-degree
    ordering); ``"cg"`` runs Jacobi-preconditioned conjugate gradients to a
    relative residual of ``tol``.  ``"auto"`` picks by mesh size.
    """

    def __init__(self, op: DiscreteOperator, dt: float, method: str = "auto",
                 tol: float = 1e-10, maxiter: int | None = None):
        if not dt > 0:
            raise InvalidArgument("dt must be > 0")
        n = op.mesh.n_cells
        self.op = op
        self.dt = dt
        self.tol = tol
        self.maxiter = maxiter if maxiter is not None else 10 * n
        if method == "auto":
            method = "direct" if n <= DIRECT_SOLVER_MAX_CELLS else "cg"
        if method not in ("direct", "cg"):
            raise InvalidArgument(f"unknown linear solver {method!r}")
        self.method = method
        self.mass = op.params.rho_cp * op.M
        self.S = (sp.diags(self.mass) + dt * op.A).tocsc()
        if method == "direct":
            self._lu = spla.splu(self.S, permc_spec="MMD_AT_PLUS_A",
                                 options=dict(SymmetricMode=True))
        else:
            inv_diag = 1.0 / self.S.diagonal()
            self._prec = spla.LinearOperator(self.S.shape, matvec=lambda x: inv_diag * x,
                                             dtype=float)

    def solve(self, rhs: np.ndarray, x0: np.ndarray | None = None) -> np.ndarray:
        if self.method == "direct":
            return self._lu.solve(rhs)
        if rhs.ndim == 2:
            cols = [self.solve(rhs[:, c], None if x0 is None else x0[:, c])
                    for c in range(rhs.shape[1])]
            return np.column_stack(cols) if cols else np.zeros_like(rhs)
        bnorm = np.linalg.norm(rhs)
        if bnorm == 0.0:
            return np.zeros_like(rhs)
        x, info = spla.cg(self.S, rhs, x0=x0, rtol=self.tol, atol=0.0,
                          maxiter=self.maxiter, M=self._prec)
        if info != 0:
            res = np.linalg.norm(self.S @ x - rhs) / bnorm
            raise SolverFailure(f"CG did not converge (info={info}, residual={res:.3e})", res)
        return x

    def step(self, T_n: np.ndarray, b_next: np.ndarray) -> np.ndarray:
        mass = self.mass if T_n.ndim == 1 else self.mass[:, None]
        return self.solve(mass * T_n + self.dt * b_next, x0=T_n)


def step_implicit_euler(op: DiscreteOperator, T_n: np.ndarray, dt: float,
                        b_next: np.ndarray, solver: StepSolver | None = None) -> np.ndarray:
    if not dt > 0:
        raise InvalidArgument("dt must be > 0")
    if solver is None or solver.dt != dt or solver.op is not op:
        solver = StepSolver(op, dt)
    return solver.step(np.asarray(T_n, dtype=float), b_next)


@dataclass
class Trajectory:
    times: np.ndarray
    snapshots: np.ndarray  # (n_times, n_cells)

    def at(self, t: float) -> np.ndarray:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise KeyError(f"no snapshot stored at t={t}")
        return self.snapshots[i]


@dataclass
class DirectResult:
    trajectory: Trajectory
    probes: np.ndarray  # (P_t, n_probes): values at tau^1..tau^{P_t}
    final: np.ndarray


PROBE_MODES = ("cell", "trilinear")
DEFAULT_PROBE_MODE = "cell"


def probe_cells(mesh: Mesh, points) -> np.ndarray:
    return mesh.locate_cells(np.asarray(points, dtype=float).reshape(-1, 3))


def probe_operator(mesh: Mesh, points, mode: str = DEFAULT_PROBE_MODE) -> sp.csr_matrix:
    """Sparse map from a cell field to point values.

    ``"cell"`` reads the value of the containing cell; ``"trilinear"``
    interpolates between the surrounding cell centers.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if mode == "cell":
        cells = probe_cells(mesh, points)
        n = cells.size
        return sp.csr_matrix((np.ones(n), (np.arange(n), cells)), shape=(n, mesh.n_cells))
    if mode == "trilinear":
        return mesh.interpolation_matrix(points)
    raise InvalidArgument(f"unknown probe mode {mode!r}; choose from {PROBE_MODES}")


def solve_direct(mesh: Mesh, params: PhysicalParams, time_grid: TimeGrid, g: FluxFunction | None,
                 T_init=None, probes=None, store: str = "measurements",
                 solver: StepSolver | None = None, op: DiscreteOperator | None = None,
                 probe_mode: str = DEFAULT_PROBE_MODE) -> DirectResult:
    """March the full problem over ``(0, t_f]``.

    ``store`` is ``"measurements"`` (snapshots at every tau^k), ``"all"``
    (every step) or ``"none"``.  The flux for step ``n -> n+1`` is evaluated
    at ``t^{n+1}``.
    """
    if store not in ("measurements", "all", "none"):
        raise InvalidArgument(f"unknown store mode {store!r}")
    op = op or assemble_operators(mesh, params)
    solver = solver or StepSolver(op, time_grid.dt)
    if T_init is None:
        T = np.full(mesh.n_cells, params.T_0)
    else:
        T = np.array(np.broadcast_to(np.asarray(T_init, dtype=float), (mesh.n_cells,)))
    if probes is not None:
        Pop = probe_operator(mesh, probes, probe_mode)
    else:
        Pop = sp.csr_matrix((0, mesh.n_cells))

    nsm = time_grid.steps_per_meas
    times, snaps, probe_rows = [0.0], [T.copy()], []
    for n in range(time_grid.n_steps):
        t_next = time_grid.step_time(n + 1)
        b = op.b_fixed if g is None else op.b_fixed + op.flux_load(g, t_next)
        T = solver.step(T, b)
        at_meas = (n + 1) % nsm == 0
        if at_meas:
            probe_rows.append(Pop @ T)
        if store == "all" or (store == "measurements" and at_meas):
            times.append(t_next)
            snaps.append(T.copy())
    if store == "none":
        times, snaps = times[:1], snaps[:1]
    traj = Trajectory(np.array(times), np.array(snaps))
    probes_arr = np.array(probe_rows).reshape(len(probe_rows), Pop.shape[0])
    return DirectResult(trajectory=traj, probes=probes_arr, final=T)


def write_field_csv(path, mesh: Mesh, T: np.ndarray, header: str | None = None) -> None:
    data = np.column_stack([np.arange(mesh.n_cells), mesh.cell_centers, T])
    with open(path, "w") as fh:
        if header:
            for line in header.splitlines():
                fh.write(f"# {line}\n")
        fh.write("cell,x,y,z,T\n")
        for row in data:
            fh.write(f"{int(row[0])},{row[1]:.17e},{row[2]:.17e},{row[3]:.17e},{row[4]:.17e}\n")


def write_vtk(path, mesh: Mesh, T: np.ndarray, name: str = "T") -> None:
    """Legacy VTK STRUCTURED_POINTS file with ``T`` as cell data."""
    hx, hy, hz = mesh.spacing
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\nmoldflux temperature\nASCII\n")
        fh.write("DATASET STRUCTURED_POINTS\n")
        fh.write(f"DIMENSIONS {mesh.nx + 1} {mesh.ny + 1} {mesh.nz + 1}\n")
        fh.write("ORIGIN 0 0 0\n")
        fh.write(f"SPACING {hx:.17e} {hy:.17e} {hz:.17e}\n")
        fh.write(f"CELL_DATA {mesh.n_cells}\nSCALARS {name} double 1\nLOOKUP_TABLE default\n")
        for v in T:
            fh.write(f"{v:.17e}\n")
