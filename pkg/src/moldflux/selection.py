"""Automated choice of mesh, timestep and heat-norm weight ``p_g``.

The score of a discretization is ``m_S``, the mean over the measurement
instants of the sensor misfit ``S_1^k``.  Selection runs in two phases:

1. starting from ``p_g0``, multiply it by 10 until the spread ``Delta T`` of
   the reconstructed fields across all discretizations falls below
   ``dx_coarsest + dt_coarsest``; pick the discretization with the lowest
   ``m_S`` at that weight;
2. minimize ``m_S`` over ``p_g`` at the current pick (Nelder-Mead in
   ``log10 p_g``), rescore every discretization at the new weight and
   re-pick; stop when the pick repeats.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, OptimizationFailure, SelectionFailure
from .fvm import DEFAULT_PROBE_MODE, PhysicalParams, StepSolver, TimeGrid, assemble_operators
from .mesh import Mesh
from .offline import build_offline
from .online import LU, IllConditionedWarning, InverseConfig, MeasurementSeries, run_sequential_inversion
from .rbf import LINEAR, RbfBasis

log = logging.getLogger(__name__)

LOG10_PG_BOX = (-22.0, -4.0)


# ---------------------------------------------------------------- scores

def compute_mS(S1) -> float:
    """Arithmetic mean of the per-interval misfits."""
    S1 = np.asarray(S1, dtype=float).ravel()
    if S1.size == 0:
        raise InvalidArgument("m_S needs at least one S1 value")
    return float(S1.mean())


def compute_deltaT(trajectories, volumes) -> float:
    """Largest pairwise ``max_k ||T_a(tau^k) - T_b(tau^k)||_L2`` over all setups.

    Parameters
    ----------
    trajectories : sequence of arrays, each (K, n)
        Fields already sampled onto the common comparison cells at the
        shared measurement instants.
    volumes : array (n,)
        Volumes of the comparison cells, used as L2 weights.

    A trajectory that is shorter than the others (aborted solve) or not
    finite makes the spread infinite.
    """
    trajectories = [np.asarray(T, dtype=float) for T in trajectories]
    if len(trajectories) < 2:
        raise InvalidArgument("Delta T needs at least two discretization setups")
    vol = np.asarray(volumes, dtype=float)
    shapes = {T.shape for T in trajectories}
    if len(shapes) != 1:
        return math.inf
    worst = 0.0
    for a, b in itertools.combinations(trajectories, 2):
        with np.errstate(over="ignore", invalid="ignore"):
            d = np.sqrt(((a - b) ** 2) @ vol)
        if not np.all(np.isfinite(d)):
            return math.inf
        worst = max(worst, float(d.max()))
    return worst


def stability_threshold(ladder: "DiscretizationLadder") -> float:
    """``dx_coarsest + dt_coarsest`` taken as plain numbers (m and s)."""
    return ladder.meshes[-1].dx + ladder.dts[-1]


# ---------------------------------------------------------------- Nelder-Mead

@dataclass
class NelderMeadResult:
    p_g: float
    u: float
    value: float
    n_evals: int
    at_boundary: bool
    history: list = field(default_factory=list)  # (u, f) in evaluation order


def nelder_mead_min(f, p_g_start: float, box=LOG10_PG_BOX, step: float = 1.0, xtol: float = 0.05,
                    max_evals: int = 50, boundary_tol: float = 1e-9) -> NelderMeadResult:
    """Minimize ``f(p_g)`` with a two-vertex simplex in ``u = log10(p_g)``.

    Reflection 1, expansion 2, contraction 0.5, shrink 0.5.  Trial points
    are clipped to ``box``.  Non-finite values rank as ``+inf``.
    """
    if not p_g_start > 0:
        raise InvalidArgument(f"p_g start must be > 0, got {p_g_start}")
    lo, hi = box
    cache: dict[float, float] = {}
    history = []

    def F(u):
        u = float(min(max(u, lo), hi))
        if u not in cache:
            if len(cache) >= max_evals:
                return math.inf
            v = float(f(10.0 ** u))
            v = v if math.isfinite(v) else math.inf
            cache[u] = v
            history.append((u, v))
        return cache[u]

    def clip(u):
        return float(min(max(u, lo), hi))

    u0 = clip(math.log10(p_g_start))
    u1 = clip(u0 + step) if u0 + step <= hi else clip(u0 - step)
    simplex = [(u0, F(u0)), (u1, F(u1))]
    while True:
        simplex.sort(key=lambda p: p[1])  # stable: ties keep the earlier vertex first
        (ub, fb), (uw, fw) = simplex
        if abs(uw - ub) < xtol or len(cache) >= max_evals:
            break
        ur = clip(2 * ub - uw)
        fr = F(ur)
        if fr < fb:
            ue = clip(3 * ub - 2 * uw)
            fe = F(ue)
            simplex = [(ub, fb), (ue, fe) if fe < fr else (ur, fr)]
            continue
        if fr < fw:
            uc = clip(ub + 0.5 * (ur - ub))
            fc = F(uc)
            if fc <= fr:
                simplex = [(ub, fb), (uc, fc)]
                continue
        else:
            uc = clip(ub + 0.5 * (uw - ub))
            fc = F(uc)
            if fc < fw:
                simplex = [(ub, fb), (uc, fc)]
                continue
        us = clip(ub + 0.5 * (uw - ub))
        simplex = [(ub, fb), (us, F(us))]
    if all(math.isinf(v) for _, v in history):
        raise OptimizationFailure("every evaluation of the objective was non-finite")
    ub, fb = min(simplex, key=lambda p: p[1])
    at_boundary = (ub - lo) < boundary_tol or (hi - ub) < boundary_tol
    return NelderMeadResult(10.0 ** ub, ub, fb, len(cache), at_boundary, history)


# ---------------------------------------------------------------- ladder and evaluator

@dataclass(frozen=True)
class DiscretizationLadder:
    """Meshes and timesteps, each ordered from finest to coarsest."""

    meshes: tuple
    dts: tuple

    def __post_init__(self):
        if not self.meshes or not self.dts:
            raise InvalidArgument("ladder needs at least one mesh and one timestep")
        dx = [m.dx for m in self.meshes]
        if any(b <= a for a, b in zip(dx, dx[1:])):
            raise InvalidArgument(f"meshes must be strictly ordered by increasing size, got dx={dx}")
        if any(b <= a for a, b in zip(self.dts, self.dts[1:])):
            raise InvalidArgument(f"timesteps must be strictly increasing, got {self.dts}")

    def setups(self):
        return [(i, j) for i in range(len(self.meshes)) for j in range(len(self.dts))]

    def label(self, i, j) -> tuple:
        return (self.meshes[i].name or f"mesh[{i}]", self.dts[j])


@dataclass
class Evaluation:
    mS: float
    fields: np.ndarray | None  # (K, n_comparison_cells) or None if not requested


class InversionEvaluator:
    """Scores a discretization by running the sequential inversion on training data.

    Offline data and step solvers are built once per discretization and
    reused; scores are memoized by ``(i, j, p_g)``.  Reconstructed fields
    are sampled onto the cell centers of the coarsest mesh.
    """

    def __init__(self, ladder: DiscretizationLadder, params: PhysicalParams, training: MeasurementSeries,
                 eta: float | None = None, time_basis: str = LINEAR, regularizer: str = LU,
                 alpha: int | None = None, t_f: float | None = None, f_samp: float = 1.0,
                 probe_mode: str = DEFAULT_PROBE_MODE, cache_dir=None):
        self.ladder = ladder
        self.params = params
        self.training = training
        self.eta = eta
        self.time_basis = time_basis
        self.regularizer = regularizer
        self.alpha = alpha
        self.t_f = float(training.times[-1]) if t_f is None else t_f
        self.f_samp = f_samp
        self.probe_mode = probe_mode
        self.cache_dir = cache_dir
        coarse = ladder.meshes[-1]
        self.comparison_volumes = coarse.volumes
        self._sample = [m.locate_cells(coarse.cell_centers) for m in ladder.meshes]
        self._setup: dict = {}
        self._memo: dict = {}
        self.n_solves = 0

    def _prepare(self, i, j):
        if (i, j) not in self._setup:
            mesh = self.ladder.meshes[i]
            tg = TimeGrid(t_f=self.t_f, dt=self.ladder.dts[j], f_samp=self.f_samp)
            op = assemble_operators(mesh, self.params)
            solver = StepSolver(op, tg.dt)
            basis = RbfBasis.from_sensors(self.training.sensors, mesh, self.eta)
            off = build_offline(mesh, self.params, tg, basis, self.training.sensors, solver=solver, op=op,
                                cache_dir=self.cache_dir, probe_mode=self.probe_mode)
            series = self.training.restrict(tg.measurement_times[1:])
            self._setup[(i, j)] = (mesh, tg, op, solver, basis, off, series)
        return self._setup[(i, j)]

    def __call__(self, i: int, j: int, p_g: float, with_fields: bool = False) -> Evaluation:
        key = (i, j, float(p_g))
        hit = self._memo.get(key)
        if hit is not None and (hit.fields is not None or not with_fields):
            return hit
        mesh, tg, op, solver, basis, off, series = self._prepare(i, j)
        cfg = InverseConfig(time_basis=self.time_basis, p_g=float(p_g), regularizer=self.regularizer,
                            alpha=self.alpha, on_ill_conditioned="ignore")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", IllConditionedWarning)
            with np.errstate(over="ignore", invalid="ignore"):
                sol = run_sequential_inversion(mesh, self.params, tg, basis, cfg, series, offline=off,
                                               solver=solver, op=op, keep_fields=with_fields)
        self.n_solves += 1
        if sol.ok and sol.completed == series.n_times:
            mS = compute_mS(sol.S1)
            mS = mS if math.isfinite(mS) else math.inf
        else:
            mS = math.inf
        fields = None
        if with_fields:
            fields = np.array([T[self._sample[i]] for T in sol.fields]) if sol.fields \
                else np.empty((0, self.comparison_volumes.size))
        ev = Evaluation(mS, fields)
        self._memo[key] = ev
        log.debug("m_S[%s, %s, %.3e] = %.6e", *self.ladder.label(i, j), p_g, mS)
        return ev


# ---------------------------------------------------------------- selection

@dataclass
class TraceRow:
    iteration: int
    mesh: str
    dt: float
    p_g: float
    mS: float


@dataclass
class SelectionResult:
    mesh_index: int
    dt_index: int
    mesh: str
    dt: float
    p_g: float
    mS: float
    trace: list            # TraceRow per iteration: the pick, its p_g and m_S (row 0 closes phase 1)
    table: list            # (iteration, mesh, dt, p_g, m_S) for every scored setup
    stability: list        # (p_g0, Delta T, threshold) per phase-1 pass
    optimizations: list    # NelderMeadResult per phase-2 iteration

    def write_trace_csv(self, path, header: str | None = None) -> None:
        rows = [(r.iteration, r.mesh, r.dt, r.p_g, r.mS) for r in self.trace]
        _write_csv(path, ["iteration", "mesh", "dt_s", "p_g_K2_per_W2", "mean_S1_K2"], rows, header)

    def write_table_csv(self, path, header: str | None = None) -> None:
        _write_csv(path, ["iteration", "mesh", "dt_s", "p_g_K2_per_W2", "mean_S1_K2"], self.table, header)

    def write_stability_csv(self, path, header: str | None = None) -> None:
        # Delta T is an L2(volume) norm of K; the threshold adds m and s as plain numbers
        _write_csv(path, ["pass", "p_g0_K2_per_W2", "delta_T_K_m1.5", "threshold_m_plus_s"],
                   [(n, *row) for n, row in enumerate(self.stability)], header)


def _fmt(v):
    return f"{v:.17e}" if isinstance(v, float) else str(v)


def _write_csv(path, columns, rows, header):
    with open(path, "w", newline="") as fh:
        if header:
            for line in header.splitlines():
                fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def select_discretization(ladder: DiscretizationLadder, p_g0: float, evaluate, max_outer: int = 10,
                          max_stability: int = 30, nm_options: dict | None = None) -> SelectionResult:
    """Two-phase selection; ``evaluate(i, j, p_g, with_fields)`` returns an :class:`Evaluation`.

    Raises :class:`SelectionFailure` (with the partial trace) when the
    stability search or the outer loop does not settle.
    """
    if not p_g0 > 0:
        raise InvalidArgument(f"p_g0 must be > 0 so that scaling by 10 can grow it, got {p_g0}")
    setups = ladder.setups()
    nm_options = nm_options or {}
    trace, table, stability, optimizations = [], [], [], []

    def score_all(iteration, p_g, with_fields=False):
        evs = {}
        for i, j in setups:
            evs[(i, j)] = evaluate(i, j, p_g, with_fields)
            table.append((iteration, *ladder.label(i, j), float(p_g), evs[(i, j)].mS))
        return evs

    def pick(evs):
        # ties go to the first setup in ladder order
        return min(setups, key=lambda s: evs[s].mS)

    # phase 1: grow p_g0 until the reconstructions agree across discretizations
    threshold = stability_threshold(ladder)
    for npass in range(max_stability):
        evs = score_all(0, p_g0, with_fields=len(setups) > 1)
        dT = compute_deltaT([evs[s].fields for s in setups], evaluate.comparison_volumes) \
            if len(setups) > 1 else 0.0
        stability.append((float(p_g0), float(dT), float(threshold)))
        log.info("phase 1 pass %d: p_g0=%.3e Delta T=%.6e threshold=%.6e", npass, p_g0, dT, threshold)
        if dT <= threshold:
            break
        p_g0 = 10.0 * p_g0
    else:
        raise SelectionFailure(f"Delta T stayed above {threshold} for {max_stability} passes",
                               trace=stability)
    current = pick(evs)
    if not math.isfinite(evs[current].mS):
        raise SelectionFailure("no discretization produced a finite m_S in phase 1", trace=table)
    trace.append(TraceRow(0, *ladder.label(*current), float(p_g0), evs[current].mS))

    # phase 2: alternate p_g minimization and re-picking
    for it in range(1, max_outer + 1):
        i, j = current
        res = nelder_mead_min(lambda p: evaluate(i, j, p).mS, trace[-1].p_g, **nm_options)
        optimizations.append(res)
        evs = score_all(it, res.p_g)
        new = pick(evs)
        trace.append(TraceRow(it, *ladder.label(*new), res.p_g, evs[new].mS))
        log.info("phase 2 iteration %d: p_g=%.3e pick %s", it, res.p_g, ladder.label(*new))
        if new == current:
            return SelectionResult(i, j, *ladder.label(i, j), res.p_g, evs[current].mS,
                                   trace, table, stability, optimizations)
        current = new
    raise SelectionFailure(f"selection did not settle within {max_outer} outer iterations", trace=trace)


def select_for_training(meshes: list[Mesh], dts, params: PhysicalParams, training: MeasurementSeries,
                        p_g0: float = 1e-7, **kw) -> SelectionResult:
    """Convenience wrapper: order the ladder, build the evaluator, run the selection."""
    meshes = sorted(meshes, key=lambda m: m.dx)
    ladder = DiscretizationLadder(tuple(meshes), tuple(sorted(dts)))
    select_kw = {k: kw.pop(k) for k in ("max_outer", "max_stability", "nm_options") if k in kw}
    evaluator = InversionEvaluator(ladder, params, training, **kw)
    return select_discretization(ladder, p_g0, evaluator, **select_kw)
