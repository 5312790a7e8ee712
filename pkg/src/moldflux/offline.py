"""Offline phase: unit-flux responses and the k-independent system matrices.

For every basis function ``phi_i`` two auxiliary problems are marched over
the first measurement interval ``(tau^0, tau^1]`` from a zero initial state,
with the Robin term kept in the operator but without the ``h*T_f`` load:

* ``T_phi_i``: outward flux ``phi_i`` on the hot face;
* ``T_d_i``: no boundary flux, volumetric source ``-rho*C_p*T_phi_i``.

Because the discrete source enters each step with the ``T_phi`` value at the
start of the step, the response to a flux ramping linearly from 0 at
``tau^0`` is exactly ``s*T_phi(s) + T_d(s)`` at every step, which makes the
linear-in-time superposition exact at the discrete level.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import InvalidArgument, InvalidState
from .fvm import (DiscreteOperator, PhysicalParams, StepSolver, TimeGrid, assemble_operators,
                  DEFAULT_PROBE_MODE, hot_face_load_matrix, hot_face_quadrature,
                  probe_operator)
from .mesh import Mesh
from .rbf import RbfBasis, SensorArray, assemble_phi_matrix

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


def config_fingerprint(mesh: Mesh, params: PhysicalParams, time_grid: TimeGrid,
                       basis: RbfBasis, sensors: SensorArray, probe_mode: str = DEFAULT_PROBE_MODE) -> str:
    """Short hash of everything the offline data depends on."""
    g = mesh.geometry
    payload = {
        "v": FORMAT_VERSION,
        "geometry": [g.L, g.W, g.H],
        "cells": [mesh.nx, mesh.ny, mesh.nz],
        "params": [params.k_s, params.rho, params.C_p, params.h],
        "time": [time_grid.dt, time_grid.f_samp],
        "eta": basis.eta,
        "centers": basis.centers.tolist(),
        "sensors": sensors.points.tolist(),
        "probe": probe_mode,
    }
    text = json.dumps(payload, sort_keys=True, default=repr)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class BasisResponses:
    """Fields of a family of zero-IC problems at the inner steps of (tau^0, tau^1].

    ``fields[n]`` has shape (n_cells, P) and is the state after step ``n+1``;
    when only the end state is kept, ``fields`` has a single entry.
    """

    times: np.ndarray
    fields: np.ndarray

    @property
    def final(self) -> np.ndarray:
        return self.fields[-1]


def basis_face_values(basis: RbfBasis, mesh: Mesh) -> np.ndarray:
    """Basis functions sampled at hot-face centers, shape (n_hot_faces, P)."""
    _, centers, _, _ = hot_face_quadrature(mesh)
    return basis.values(centers)


def _responses(times, snaps) -> BasisResponses:
    return BasisResponses(np.array(times), np.array(snaps))


def solve_basis_problems(mesh: Mesh, params: PhysicalParams, time_grid: TimeGrid, basis: RbfBasis,
                         store_inner: bool = True, solver: StepSolver | None = None,
                         op: DiscreteOperator | None = None, face_values: np.ndarray | None = None
                         ) -> BasisResponses:
    """March all P unit-flux problems together over the first interval.

    ``face_values`` overrides the sampled basis (e.g. zeros as a test hook).
    """
    op = op or assemble_operators(mesh, params)
    solver = solver or StepSolver(op, time_grid.dt)
    F = basis_face_values(basis, mesh) if face_values is None else np.asarray(face_values, float)
    load = hot_face_load_matrix(mesh, F)
    T = np.zeros_like(load)
    nsteps = time_grid.steps_per_meas
    times, snaps = [], []
    for n in range(nsteps):
        T = solver.step(T, load)
        if store_inner or n == nsteps - 1:
            times.append(time_grid.step_time(n + 1))
            snaps.append(T)
    return _responses(times, snaps)


def solve_derivative_problems(mesh: Mesh, params: PhysicalParams, time_grid: TimeGrid,
                              T_phi: BasisResponses, solver: StepSolver | None = None,
                              op: DiscreteOperator | None = None,
                              store_inner: bool = True) -> BasisResponses:
    """March the P source-driven problems; needs ``T_phi`` at every inner step."""
    nsteps = time_grid.steps_per_meas
    if T_phi.fields.shape[0] != nsteps:
        raise InvalidState("T_phi inner-step snapshots are required for the derivative problems")
    op = op or assemble_operators(mesh, params)
    solver = solver or StepSolver(op, time_grid.dt)
    P = T_phi.fields.shape[2]
    T = np.zeros((mesh.n_cells, P))
    prev_phi = np.zeros_like(T)
    times, snaps = [], []
    for n in range(nsteps):
        # source -rho*C_p*T_phi taken at the start of the step
        T = solver.step(T, -params.rho_cp * op.M[:, None] * prev_phi)
        prev_phi = T_phi.fields[n]
        if store_inner or n == nsteps - 1:
            times.append(time_grid.step_time(n + 1))
            snaps.append(T)
    return _responses(times, snaps)


def _solve_both(mesh, params, time_grid, basis, solver, op, store_inner, face_values=None):
    """Joint march of both families so inner ``T_phi`` states need not be kept."""
    F = basis_face_values(basis, mesh) if face_values is None else face_values
    load = hot_face_load_matrix(mesh, F)
    nsteps = time_grid.steps_per_meas
    Tp = np.zeros_like(load)
    Td = np.zeros_like(load)
    mass = params.rho_cp * op.M[:, None]
    tp, sp_, sd = [], [], []
    for n in range(nsteps):
        Td_next = solver.step(Td, -mass * Tp)
        Tp = solver.step(Tp, load)
        Td = Td_next
        if store_inner or n == nsteps - 1:
            tp.append(time_grid.step_time(n + 1))
            sp_.append(Tp)
            sd.append(Td)
    return _responses(tp, sp_), _responses(tp, sd)


def assemble_offline_matrices(T_phi_end: np.ndarray, T_d_end: np.ndarray, probe, f_samp: float):
    """Theta, Theta_d = f_samp*T_d at the sensors, and Theta_tilde = Theta + Theta_d.

    ``probe`` is a sparse sampling operator or an array of cell indices.
    """
    sample = (lambda X: probe @ X) if sp.issparse(probe) else (lambda X: np.asarray(X)[probe])
    Theta = np.asarray(sample(np.asarray(T_phi_end)))
    Theta_d = f_samp * np.asarray(sample(np.asarray(T_d_end)))
    return Theta, Theta_d, Theta + Theta_d


@dataclass(eq=False)
class OfflineData:
    """Everything the online loop needs, valid for one fingerprint.

    ``phi_fields`` and ``d_fields`` are the (n_cells, P) states at tau^1.
    ``phi_inner``/``d_inner`` hold all inner steps when requested.
    """

    fingerprint: str
    f_samp: float
    probe: sp.csr_matrix
    phi_fields: np.ndarray
    d_fields: np.ndarray
    Theta: np.ndarray
    Theta_d: np.ndarray
    Theta_tilde: np.ndarray
    Phi: np.ndarray
    inner_times: np.ndarray | None = None
    phi_inner: np.ndarray | None = None
    d_inner: np.ndarray | None = None

    @property
    def P(self) -> int:
        return self.Theta.shape[1]

    def save(self, path) -> None:
        arrays = {k: v for k, v in self.__dict__.items() if isinstance(v, np.ndarray)}
        p = self.probe.tocsr()
        np.savez(path, fingerprint=np.array(self.fingerprint), f_samp=np.array(self.f_samp),
                 format_version=np.array(FORMAT_VERSION), probe_data=p.data, probe_indices=p.indices,
                 probe_indptr=p.indptr, probe_shape=np.array(p.shape), **arrays)

    @classmethod
    def load(cls, path) -> "OfflineData":
        with np.load(path, allow_pickle=False) as z:
            if int(z["format_version"]) != FORMAT_VERSION:
                raise InvalidState(f"offline archive {path} has an unsupported format")
            probe = sp.csr_matrix((z["probe_data"], z["probe_indices"], z["probe_indptr"]),
                                  shape=tuple(z["probe_shape"]))
            skip = {"fingerprint", "f_samp", "format_version", "probe_data", "probe_indices",
                    "probe_indptr", "probe_shape"}
            kw = {k: z[k] for k in z.files if k not in skip}
            return cls(fingerprint=str(z["fingerprint"]), f_samp=float(z["f_samp"]), probe=probe, **kw)

    def write_matrices_csv(self, path, header: str | None = None) -> None:
        with open(path, "w") as fh:
            if header:
                for line in header.splitlines():
                    fh.write(f"# {line}\n")
            fh.write("matrix,i,j,value\n")
            for name in ("Theta", "Theta_d", "Theta_tilde", "Phi"):
                M = getattr(self, name)
                for i in range(M.shape[0]):
                    for j in range(M.shape[1]):
                        fh.write(f"{name},{i + 1},{j + 1},{M[i, j]:.17e}\n")


def build_offline(mesh: Mesh, params: PhysicalParams, time_grid: TimeGrid, basis: RbfBasis,
                  sensors: SensorArray, store_inner: bool = False, solver: StepSolver | None = None,
                  op: DiscreteOperator | None = None, cache_dir=None,
                  face_values: np.ndarray | None = None, probe_mode: str = DEFAULT_PROBE_MODE) -> OfflineData:
    """Solve both auxiliary families and assemble the matrices.

    With ``cache_dir`` set, an archive named after the fingerprint is reused
    when present and written otherwise.
    """
    if basis.P != sensors.P:
        raise InvalidArgument("basis and sensor counts differ")
    fp = config_fingerprint(mesh, params, time_grid, basis, sensors, probe_mode)
    cache_path = None
    if cache_dir is not None and face_values is None:
        cache_path = Path(cache_dir) / f"offline_{fp}.npz"
        if cache_path.exists():
            data = OfflineData.load(cache_path)
            if data.fingerprint == fp and (data.phi_inner is not None or not store_inner):
                log.info("offline data loaded from %s", cache_path)
                return data
    op = op or assemble_operators(mesh, params)
    solver = solver or StepSolver(op, time_grid.dt)
    probe = probe_operator(mesh, sensors.points, probe_mode)
    T_phi, T_d = _solve_both(mesh, params, time_grid, basis, solver, op, store_inner,
                             None if face_values is None else np.asarray(face_values, float))
    Theta, Theta_d, Theta_tilde = assemble_offline_matrices(T_phi.final, T_d.final, probe,
                                                            time_grid.f_samp)
    data = OfflineData(
        fingerprint=fp, f_samp=time_grid.f_samp, probe=probe,
        phi_fields=T_phi.final, d_fields=T_d.final,
        Theta=Theta, Theta_d=Theta_d, Theta_tilde=Theta_tilde,
        Phi=assemble_phi_matrix(basis, mesh),
        inner_times=T_phi.times if store_inner else None,
        phi_inner=T_phi.fields if store_inner else None,
        d_inner=T_d.fields if store_inner else None,
    )
    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        data.save(cache_path)
    return data
