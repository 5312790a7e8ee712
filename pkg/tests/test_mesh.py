from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moldflux.errors import InvalidArgument, OutOfDomain
from moldflux.mesh import MESH_LADDER, Geometry, Patch, build_structured_mesh, ladder_mesh

TABLE_GEOMETRY = Geometry(2.0, 0.1, 1.2)


def test_unit_cube_single_cell():
    m = build_structured_mesh(Geometry(1, 1, 1), 1, 1, 1)
    assert m.n_cells == 1
    assert m.boundary_faces().size == 6
    assert m.face_area[m.boundary_faces()].sum() == pytest.approx(6.0)
    assert m.n_interior_faces == 0


def test_hot_face_area_100x5x30():
    m = build_structured_mesh(TABLE_GEOMETRY, 100, 5, 30)
    assert m.n_cells == 15000
    assert m.patch_area(Patch.HOT_FACE) == pytest.approx(2.4, rel=1e-12)


def test_two_cells_share_one_face():
    m = build_structured_mesh(TABLE_GEOMETRY, 2, 1, 1)
    inner = np.flatnonzero(m.neighbor >= 0)
    assert inner.size == 1
    assert m.face_area[inner[0]] == pytest.approx(0.1 * 1.2)
    assert (m.owner[inner[0]], m.neighbor[inner[0]]) == (0, 1)


@pytest.mark.parametrize("counts", [(1, 1, 1), (3, 2, 4), (25, 6, 10)])
def test_patches_partition_boundary(counts):
    m = build_structured_mesh(TABLE_GEOMETRY, *counts)
    b = m.boundary_faces()
    labels = m.patch[b]
    assert set(np.unique(labels)) <= {int(p) for p in Patch}
    parts = sum(m.boundary_faces(p).size for p in Patch)
    assert parts == b.size
    g = TABLE_GEOMETRY
    assert m.face_area[b].sum() == pytest.approx(2 * (g.L * g.W + g.L * g.H + g.W * g.H), rel=1e-12)
    hot = m.boundary_faces(Patch.HOT_FACE)
    assert np.all(m.face_center[hot, 1] == 0.0)
    water = m.boundary_faces(Patch.WATER_FACE)
    assert np.allclose(m.face_center[water, 1], g.W)
    assert m.patch_area(Patch.WATER_FACE) == pytest.approx(g.L * g.H)


def test_interior_faces_have_owner_and_neighbor():
    m = build_structured_mesh(TABLE_GEOMETRY, 4, 3, 2)
    inner = m.neighbor >= 0
    assert np.all(m.owner[inner] != m.neighbor[inner])
    assert np.all(m.patch[inner] == -1)
    # 3 internal planes in x, 2 in y, 1 in z
    assert inner.sum() == 3 * 3 * 2 + 4 * 2 * 2 + 4 * 3 * 1


@pytest.mark.parametrize("bad", [(0, 1, 1), (1, -2, 1), (1, 1, 1.5)])
def test_invalid_counts(bad):
    with pytest.raises(InvalidArgument):
        build_structured_mesh(TABLE_GEOMETRY, *bad)


def test_invalid_geometry():
    with pytest.raises(InvalidArgument):
        Geometry(0.0, 1.0, 1.0)


def test_locate_cell_center_and_tie_break():
    m = build_structured_mesh(TABLE_GEOMETRY, 2, 1, 1)
    assert m.locate_cell(m.cell_centers[0]) == 0
    assert m.locate_cell((1.0, 0.05, 0.6)) == 0  # on the shared x-plane


def _oracle_index(p, counts, ext):
    # exact rational arithmetic: cell index = ceil(s) - 1 clipped, s = p / spacing
    ijk = []
    for x, n, e in zip(p, counts, ext):
        s = Fraction(x) / (Fraction(e) / n)
        c = -(-s.numerator // s.denominator)  # ceil
        ijk.append(min(max(c - 1, 0), n - 1))
    i, j, k = ijk
    return i + counts[0] * (j + counts[1] * k)


def test_locate_thermocouple_on_100x5x30():
    m = build_structured_mesh(TABLE_GEOMETRY, 100, 5, 30)
    p = (0.2, 0.02, 0.1)
    counts = (100, 5, 30)
    ext = ("2", "0.1", "1.2")
    expected = _oracle_index([Fraction("0.2"), Fraction("0.02"), Fraction("0.1")], counts,
                             [Fraction(e) for e in ext])
    assert expected == 9 + 100 * (0 + 5 * 2)
    assert m.locate_cell(p) == expected


def test_locate_outside_raises():
    m = build_structured_mesh(TABLE_GEOMETRY, 2, 2, 2)
    with pytest.raises(OutOfDomain):
        m.locate_cell((2.5, 0.05, 0.5))
    with pytest.raises(OutOfDomain):
        m.locate_cell((1.0, -0.01, 0.5))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 5), st.integers(1, 8))
def test_locate_cell_inverts_centers(nx, ny, nz):
    m = build_structured_mesh(TABLE_GEOMETRY, nx, ny, nz)
    assert np.array_equal(m.locate_cells(m.cell_centers), np.arange(m.n_cells))


def test_ladder_totals_and_order():
    totals = {1: 170000, 2: 45000, 3: 21000, 4: 7500, 5: 1500}
    dx = []
    for n in sorted(MESH_LADDER):
        m = ladder_mesh(n)
        assert m.n_cells == totals[n]
        dx.append(m.dx)
    assert all(a < b for a, b in zip(dx, dx[1:]))
    with pytest.raises(InvalidArgument):
        ladder_mesh(6)


def test_metadata_fields(mesh5):
    md = mesh5.metadata()
    assert md["n_cells"] == 1500
    assert md["hot_face_area"] == pytest.approx(2.4)
    assert md["dx"] == pytest.approx(0.12)


def test_interpolation_reproduces_linear_fields():
    m = build_structured_mesh(TABLE_GEOMETRY, 6, 4, 5)
    c = m.cell_centers
    f = 1.0 + 2.0 * c[:, 0] - 3.0 * c[:, 1] + 0.5 * c[:, 2]
    lo, hi = c.min(axis=0), c.max(axis=0)
    pts = lo + np.random.default_rng(0).random((20, 3)) * (hi - lo)
    W = m.interpolation_matrix(pts)
    assert np.allclose(W.sum(axis=1), 1.0)
    exact = 1.0 + 2.0 * pts[:, 0] - 3.0 * pts[:, 1] + 0.5 * pts[:, 2]
    assert np.allclose(W @ f, exact, atol=1e-12)


def test_interpolation_single_cell_returns_cell_value(one_cell):
    W = one_cell.interpolation_matrix(np.array([[0.3, 0.01, 1.0]]))
    assert W.toarray() == pytest.approx(np.array([[1.0]]))
