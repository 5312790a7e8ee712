"""Gaussian RBF parameterisation of the hot-face heat flux.

The flux on interval ``(tau^{k-1}, tau^k]`` is ``sum_i g_i^k(t) phi_i(x)``
with ``phi_j(x) = exp(-(eta*|x - xi_j|)^2)`` and ``xi_j`` the projection of
sensor ``j`` on the hot face.  Two time bases are supported: piecewise
constant (``g_i^k = w_i^k``) and continuous piecewise linear between
consecutive measurement instants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist

from .errors import InvalidArgument, OutOfRange
from .mesh import Mesh, Patch

CONSTANT = "constant"
LINEAR = "linear"
TIME_BASES = (CONSTANT, LINEAR)


@dataclass(frozen=True, eq=False)
class SensorArray:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if pts.shape[0] < 1:
            raise InvalidArgument("at least one sensor is required")
        object.__setattr__(self, "points", pts)

    @property
    def P(self) -> int:
        return self.points.shape[0]

    def check_inside(self, mesh: Mesh) -> None:
        mesh.locate_cells(self.points)


def uniform_sensor_grid(mesh_or_geometry, n_x: int = 10, n_z: int = 10, depth: float = 0.02) -> SensorArray:
    """``n_x * n_z`` sensors on the plane ``y = depth``, inset half a spacing from the edges."""
    g = getattr(mesh_or_geometry, "geometry", mesh_or_geometry)
    xs = (np.arange(n_x) + 0.5) * g.L / n_x
    zs = (np.arange(n_z) + 0.5) * g.H / n_z
    Z, X = np.meshgrid(zs, xs, indexing="ij")
    pts = np.column_stack([X.ravel(), np.full(X.size, depth), Z.ravel()])
    return SensorArray(pts)


def project_to_hot_face(sensors: SensorArray, mesh: Mesh) -> np.ndarray:
    """Nearest points on the plane y = 0 (the hot face)."""
    sensors.check_inside(mesh)
    c = sensors.points.copy()
    c[:, 1] = 0.0
    return c


def default_eta(centers: np.ndarray) -> float:
    """``2 / d_min`` with ``d_min`` the smallest center spacing."""
    if len(centers) < 2:
        return 1.0
    dmin = float(pdist(centers).min())
    if dmin <= 0:
        raise InvalidArgument("RBF centers must be distinct")
    return 2.0 / dmin


@dataclass(frozen=True, eq=False)
class RbfBasis:
    centers: np.ndarray
    eta: float

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "centers", c)
        if not self.eta > 0:
            raise InvalidArgument("eta must be > 0")

    @classmethod
    def from_sensors(cls, sensors: SensorArray, mesh: Mesh, eta: float | None = None) -> "RbfBasis":
        centers = project_to_hot_face(sensors, mesh)
        return cls(centers, default_eta(centers) if eta is None else float(eta))

    @property
    def P(self) -> int:
        return self.centers.shape[0]

    def values(self, x: np.ndarray) -> np.ndarray:
        """Matrix of basis values, shape (n_points, P)."""
        x = np.asarray(x, dtype=float).reshape(-1, 3)
        d2 = ((x[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=-1)
        return np.exp(-(self.eta ** 2) * d2)

    def describe(self) -> dict:
        return {"eta": self.eta, "P": self.P, "centers": self.centers.tolist()}


def eval_rbf(basis: RbfBasis, j: int, x) -> float:
    """Value of the ``j``-th basis function (1-based) at ``x``."""
    if not 1 <= j <= basis.P:
        raise InvalidArgument(f"basis index {j} outside 1..{basis.P}")
    r = np.linalg.norm(np.asarray(x, dtype=float) - basis.centers[j - 1])
    return float(np.exp(-(basis.eta * r) ** 2))


@dataclass(eq=False)
class WeightsTimeline:
    """Per-interval weight vectors ``w^1 .. w^{P_t}``.

    ``times`` holds tau^0..tau^{P_t}.  For the linear basis ``w0`` is the
    weight vector at tau^0.
    """

    times: np.ndarray
    P: int
    time_basis: str = CONSTANT
    w0: np.ndarray | None = None
    weights: np.ndarray = field(default=None)
    n_filled: int = 0

    def __post_init__(self):
        if self.time_basis not in TIME_BASES:
            raise InvalidArgument(f"time basis must be one of {TIME_BASES}")
        self.times = np.asarray(self.times, dtype=float)
        n = len(self.times) - 1
        if self.weights is None:
            self.weights = np.zeros((n, self.P))
        else:
            self.weights = np.asarray(self.weights, dtype=float).reshape(n, self.P)
            self.n_filled = n if self.n_filled == 0 else self.n_filled
        self.w0 = np.zeros(self.P) if self.w0 is None else np.asarray(self.w0, dtype=float)

    @property
    def n_intervals(self) -> int:
        return len(self.times) - 1

    def set(self, k: int, w: np.ndarray) -> None:
        if not 1 <= k <= self.n_intervals:
            raise OutOfRange(f"interval {k} outside 1..{self.n_intervals}")
        self.weights[k - 1] = w
        self.n_filled = max(self.n_filled, k)

    def w(self, k: int) -> np.ndarray:
        """Weight vector at tau^k (``w0`` for k = 0)."""
        if k == 0:
            return self.w0
        return self.weights[k - 1]

    def interval_of(self, t: float) -> int:
        f = (t - self.times[0]) / (self.times[1] - self.times[0])
        k = int(np.ceil(f - 1e-9))
        if k < 1 or k > self.n_filled:
            raise OutOfRange(f"t={t} is not covered by the populated intervals")
        return k

    def coefficients(self, t: float) -> np.ndarray:
        """Time coefficients ``g_i^k(t)`` for all i."""
        k = self.interval_of(t)
        if self.time_basis == CONSTANT:
            return self.weights[k - 1]
        t0, t1 = self.times[k - 1], self.times[k]
        wp, wk = self.w(k - 1), self.w(k)
        return wp + (t - t0) * (wk - wp) / (t1 - t0)

    def to_csv(self, path, header: str | None = None) -> None:
        with open(path, "w") as fh:
            if header:
                for line in header.splitlines():
                    fh.write(f"# {line}\n")
            fh.write("k,tau_s," + ",".join(f"w{i + 1}" for i in range(self.P)) + "\n")
            rows = [(0, self.w0)] if self.time_basis == LINEAR else []
            rows += [(k, self.weights[k - 1]) for k in range(1, self.n_filled + 1)]
            for k, w in rows:
                fh.write(f"{k},{self.times[k]:.17e}," + ",".join(f"{v:.17e}" for v in w) + "\n")


def eval_flux(basis: RbfBasis, timeline: WeightsTimeline, x, t: float):
    """Parameterised flux at point(s) ``x`` and time ``t``."""
    coeff = timeline.coefficients(t)
    x = np.asarray(x, dtype=float)
    vals = basis.values(x) @ coeff
    return float(vals[0]) if x.ndim == 1 else vals


def flux_function(basis: RbfBasis, timeline: WeightsTimeline):
    """Adapter usable as the ``g`` argument of the direct solver."""
    return lambda x, t: eval_flux(basis, timeline, x, t)


def assemble_phi_matrix(basis: RbfBasis, mesh: Mesh) -> np.ndarray:
    """Gram matrix of the basis over the hot face by face-midpoint quadrature."""
    faces = mesh.boundary_faces(Patch.HOT_FACE)
    V = basis.values(mesh.face_center[faces])
    Phi = (V * mesh.face_area[faces][:, None]).T @ V
    return 0.5 * (Phi + Phi.T)
