"""Structured hexahedral meshes of the box-shaped mold plate.

The plate occupies ``[0, L] x [0, W] x [0, H]``.  The hot face (in contact
with the solidifying steel) is the plane ``y = 0``, the water-cooled face is
``y = W`` and the remaining four sides are adiabatic.

Cells are numbered with ``x`` varying fastest::

    cell = i + nx * (j + ny * k)
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, OutOfDomain


class Patch(enum.IntEnum):
    HOT_FACE = 0
    EXTERIOR = 1
    WATER_FACE = 2


@dataclass(frozen=True)
class Geometry:
    L: float = 2.0
    W: float = 0.1
    H: float = 1.2

    def __post_init__(self):
        for name in ("L", "W", "H"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise InvalidArgument(f"geometry dimension {name} must be > 0, got {v}")

    @property
    def volume(self) -> float:
        return self.L * self.W * self.H

    @property
    def surface_area(self) -> float:
        return 2.0 * (self.L * self.W + self.L * self.H + self.W * self.H)


# Per-axis counts for the five named meshes; only the totals are prescribed
# (1.7e5, 4.5e4, 2.1e4, 7.5e3, 1.5e3 cells).
MESH_LADDER = {
    1: (125, 17, 80),
    2: (100, 9, 50),
    3: (70, 6, 50),
    4: (25, 6, 50),
    5: (25, 6, 10),
}

_PLANE_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Mesh:
    """Uniform orthogonal grid with face connectivity.

    Face arrays are indexed by face id.  Interior faces come first and have
    ``neighbor >= 0``; boundary faces have ``neighbor == -1`` and a patch
    label in ``patch`` (``-1`` for interior faces).
    """

    geometry: Geometry
    nx: int
    ny: int
    nz: int
    cell_centers: np.ndarray = field(repr=False)
    owner: np.ndarray = field(repr=False)
    neighbor: np.ndarray = field(repr=False)
    face_area: np.ndarray = field(repr=False)
    face_normal: np.ndarray = field(repr=False)
    face_center: np.ndarray = field(repr=False)
    patch: np.ndarray = field(repr=False)
    name: str = ""

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def spacing(self) -> tuple[float, float, float]:
        g = self.geometry
        return (g.L / self.nx, g.W / self.ny, g.H / self.nz)

    @property
    def dx(self) -> float:
        """Characteristic size: the longest cell edge."""
        return max(self.spacing)

    @property
    def cell_volume(self) -> float:
        hx, hy, hz = self.spacing
        return hx * hy * hz

    @property
    def volumes(self) -> np.ndarray:
        return np.full(self.n_cells, self.cell_volume)

    @property
    def n_interior_faces(self) -> int:
        return int(np.count_nonzero(self.neighbor >= 0))

    def boundary_faces(self, patch: Patch | None = None) -> np.ndarray:
        if patch is None:
            return np.flatnonzero(self.neighbor < 0)
        return np.flatnonzero(self.patch == int(patch))

    def patch_area(self, patch: Patch) -> float:
        return float(self.face_area[self.boundary_faces(patch)].sum())

    def cell_index(self, i, j, k):
        return i + self.nx * (j + self.ny * k)

    def locate_cell(self, p) -> int:
        """Index of the cell containing ``p``.

        Points lying on an internal grid plane go to the lower-index cell.
        """
        idx = self.locate_cells(np.atleast_2d(np.asarray(p, dtype=float)))
        return int(idx[0])

    def locate_cells(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        g = self.geometry
        ext = np.array([g.L, g.W, g.H])
        tol = _PLANE_TOL * ext
        if np.any(points < -tol) or np.any(points > ext + tol):
            bad = points[np.any((points < -tol) | (points > ext + tol), axis=1)][0]
            raise OutOfDomain(f"point {tuple(bad)} lies outside the box {tuple(ext)}")
        counts = np.array([self.nx, self.ny, self.nz])
        s = points / ext * counts
        # ceil - 1 sends a point on a plane to the lower cell; snap near-integers first
        r = np.round(s)
        s = np.where(np.abs(s - r) < _PLANE_TOL * np.maximum(counts, 1), r, s)
        ijk = np.ceil(s).astype(np.int64) - 1
        ijk = np.clip(ijk, 0, counts - 1)
        return self.cell_index(ijk[:, 0], ijk[:, 1], ijk[:, 2])

    def interpolation_matrix(self, points: np.ndarray):
        """Sparse (n_points, n_cells) trilinear interpolation of cell-centered values.

        Within half a cell of the boundary the nearest center value is used
        along that axis, so a single-cell mesh reproduces the cell value.
        """
        import scipy.sparse as sp

        points = np.asarray(points, dtype=float).reshape(-1, 3)
        self.locate_cells(points)  # domain check
        counts = np.array([self.nx, self.ny, self.nz])
        h = np.array(self.spacing)
        s = points / h - 0.5  # continuous center index
        lo = np.clip(np.floor(s).astype(np.int64), 0, np.maximum(counts - 2, 0))
        frac = np.clip(s - lo, 0.0, 1.0)
        frac[:, counts == 1] = 0.0
        rows, cols, vals = [], [], []
        n = points.shape[0]
        for corner in range(8):
            bits = np.array([(corner >> a) & 1 for a in range(3)])
            if np.any(bits[counts == 1]):
                continue
            wgt = np.prod(np.where(bits, frac, 1.0 - frac), axis=1)
            ijk = lo + bits
            rows.append(np.arange(n))
            cols.append(self.cell_index(ijk[:, 0], ijk[:, 1], ijk[:, 2]))
            vals.append(wgt)
        W = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n, self.n_cells))
        W.eliminate_zeros()
        return W

    def metadata(self) -> dict:
        return {
            "name": self.name,
            "nx": self.nx,
            "ny": self.ny,
            "nz": self.nz,
            "n_cells": self.n_cells,
            "dx": self.dx,
            "hot_face_area": self.patch_area(Patch.HOT_FACE),
            "water_face_area": self.patch_area(Patch.WATER_FACE),
            "exterior_area": self.patch_area(Patch.EXTERIOR),
        }


def build_structured_mesh(geometry: Geometry, nx: int, ny: int, nz: int, name: str = "") -> Mesh:
    for label, n in (("nx", nx), ("ny", ny), ("nz", nz)):
        if int(n) != n or n < 1:
            raise InvalidArgument(f"{label} must be a positive integer, got {n}")
    nx, ny, nz = int(nx), int(ny), int(nz)
    hx, hy, hz = geometry.L / nx, geometry.W / ny, geometry.H / nz

    k, j, i = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    i, j, k = i.ravel(), j.ravel(), k.ravel()
    centers = np.column_stack([(i + 0.5) * hx, (j + 0.5) * hy, (k + 0.5) * hz])

    def cid(a, b, c):
        return a + nx * (b + ny * c)

    owners, neighbors, areas, normals, fcenters, patches = [], [], [], [], [], []

    def add(own, nbr, area, normal, fc, patch):
        owners.append(own)
        neighbors.append(nbr)
        areas.append(np.full(own.size, area))
        normals.append(np.tile(normal, (own.size, 1)))
        fcenters.append(fc)
        patches.append(np.full(own.size, patch))

    axes = [
        (0, nx, hy * hz, np.array([1.0, 0.0, 0.0])),
        (1, ny, hx * hz, np.array([0.0, 1.0, 0.0])),
        (2, nz, hx * hy, np.array([0.0, 0.0, 1.0])),
    ]
    ijk = np.column_stack([i, j, k])
    h = np.array([hx, hy, hz])

    # interior faces
    for axis, n, area, normal in axes:
        sel = ijk[:, axis] < n - 1
        a = ijk[sel]
        b = a.copy()
        b[:, axis] += 1
        fc = centers[cid(a[:, 0], a[:, 1], a[:, 2])].copy()
        fc[:, axis] += 0.5 * h[axis]
        add(cid(*a.T), cid(*b.T), area, normal, fc, -1)

    # boundary faces
    side_patch = {
        (0, 0): Patch.EXTERIOR, (0, 1): Patch.EXTERIOR,
        (1, 0): Patch.HOT_FACE, (1, 1): Patch.WATER_FACE,
        (2, 0): Patch.EXTERIOR, (2, 1): Patch.EXTERIOR,
    }
    for axis, n, area, normal in axes:
        for side in (0, 1):
            sel = ijk[:, axis] == (0 if side == 0 else n - 1)
            a = ijk[sel]
            fc = centers[cid(*a.T)].copy()
            fc[:, axis] = 0.0 if side == 0 else [geometry.L, geometry.W, geometry.H][axis]
            sign = -1.0 if side == 0 else 1.0
            add(cid(*a.T), np.full(a.shape[0], -1), area, sign * normal, fc,
                int(side_patch[(axis, side)]))

    return Mesh(
        geometry=geometry,
        nx=nx,
        ny=ny,
        nz=nz,
        cell_centers=centers,
        owner=np.concatenate(owners).astype(np.int64),
        neighbor=np.concatenate(neighbors).astype(np.int64),
        face_area=np.concatenate(areas),
        face_normal=np.concatenate(normals),
        face_center=np.concatenate(fcenters),
        patch=np.concatenate(patches).astype(np.int64),
        name=name,
    )


def ladder_mesh(number: int, geometry: Geometry | None = None) -> Mesh:
    """One of the five named meshes (1 = finest, 5 = coarsest)."""
    if number not in MESH_LADDER:
        raise InvalidArgument(f"unknown mesh number {number}; choose from {sorted(MESH_LADDER)}")
    geometry = geometry or Geometry()
    return build_structured_mesh(geometry, *MESH_LADDER[number], name=f"mesh{number}")
