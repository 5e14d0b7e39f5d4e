import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cda.mesh import (BOTTOM, LEFT, RIGHT, TOP, CoarseGrid, MeshError, OutOfDomainError, barycentric_refine,
                      build_structured, locate_cell)


def test_unit_square_single_split():
    m = build_structured((0, 1, 0, 1), 1)
    assert m.n_triangles == 2
    assert m.n_vertices == 4
    assert m.areas.sum() == pytest.approx(1.0, abs=1e-15)


def test_h_max_n2():
    m = build_structured((0, 1, 0, 1), 2)
    assert m.n_triangles == 8
    # brute force over every triangle edge
    longest = max(
        np.linalg.norm(m.vertices[a] - m.vertices[b])
        for tri in m.triangles
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0]))
    )
    assert m.h_max == pytest.approx(longest)
    assert m.h_max == pytest.approx(math.sqrt(2) / 2)


def test_tall_rectangle_tags():
    m = build_structured((0, 1, 0, 2), 4)
    assert m.n_triangles == 2 * 4 * 8
    x, y = m.vertices[:, 0], m.vertices[:, 1]
    for tag, coord, value, count in ((LEFT, x, 0.0, 8), (RIGHT, x, 1.0, 8), (BOTTOM, y, 0.0, 4), (TOP, y, 2.0, 4)):
        edges = m.boundary_edges[m.boundary_tags == tag]
        assert len(edges) == count
        assert np.allclose(coord[edges], value)
    m.validate()


@pytest.mark.parametrize("rect,n", [((0, 1, 0, 1), 0), ((0, 0, 0, 1), 2), ((0, 1, 1, 1), 2), ((0, 1, 0, 1), 1.5)])
def test_invalid_inputs(rect, n):
    with pytest.raises(MeshError):
        build_structured(rect, n)


@pytest.mark.parametrize("n", [1, 2, 3, 5])
def test_mesh_invariants(n):
    m = build_structured((0, 1, 0, 2), n)
    assert np.all(m.signed_areas > 0)
    counts = m.edge_counts
    assert set(np.unique(counts)) <= {1, 2}
    assert np.count_nonzero(counts == 1) == len(m.boundary_edges)
    # boundary edges form one closed loop: every boundary vertex has degree 2
    deg = np.bincount(m.boundary_edges.ravel(), minlength=m.n_vertices)
    assert set(deg[deg > 0]) == {2}
    assert m.h_max <= math.sqrt(2) / n + 1e-14


def test_barycentric_refine_two_triangles():
    m = build_structured((0, 1, 0, 1), 1)
    r = barycentric_refine(m)
    assert r.n_triangles == 6
    assert r.n_vertices == 6
    assert r.areas.sum() == pytest.approx(1.0, abs=1e-15)
    r.validate()


def test_barycentric_refine_counts_n2():
    m = build_structured((0, 1, 0, 1), 2)
    r = barycentric_refine(m)
    assert r.n_triangles == 24
    assert r.n_vertices == m.n_vertices + m.n_triangles == 17


@pytest.mark.parametrize("n", [1, 2, 4])
def test_refinement_preserves_parent_areas(n):
    m = build_structured((0, 1, 0, 2), n)
    r = barycentric_refine(m)
    child = r.areas.reshape(-1, 3).sum(axis=1)
    assert np.allclose(child, m.areas, rtol=1e-14, atol=0)
    assert np.all(r.signed_areas > 0)
    assert math.isclose(r.areas.sum(), m.areas.sum(), rel_tol=1e-14)


def test_locate_cell_examples():
    m = build_structured((0, 1, 0, 1), 4)
    g = CoarseGrid.covering(m, 0.5)
    assert locate_cell(g, (0.3, 0.7)) == (0, 1)
    assert locate_cell(g, (1.0, 1.0)) == (1, 1)
    assert locate_cell(g, (0.5, 0.25)) == (1, 0)
    with pytest.raises(OutOfDomainError):
        locate_cell(g, (1.1, 0.2))


def test_coarse_grid_tiles_box():
    m = build_structured((0, 1, 0, 2), 4)
    g = CoarseGrid.covering(m, 0.25)
    assert g.counts == (4, 8)
    assert g.cell_measures.sum() == pytest.approx(2.0)


def _brute_force_cell(g, p):
    nx, ny = g.counts
    for j in range(ny):
        for i in range(nx):
            x0 = g.origin[0] + i * g.cell_size[0]
            y0 = g.origin[1] + j * g.cell_size[1]
            in_x = x0 <= p[0] < x0 + g.cell_size[0] or (i == nx - 1 and p[0] == x0 + g.cell_size[0])
            in_y = y0 <= p[1] < y0 + g.cell_size[1] or (j == ny - 1 and p[1] == y0 + g.cell_size[1])
            if in_x and in_y:
                return j * nx + i
    raise AssertionError("no cell")


def test_locate_matches_box_scan_random():
    rng = np.random.default_rng(0)
    m = build_structured((0, 1, 0, 2), 4)
    g = CoarseGrid.covering(m, 0.25)
    pts = rng.uniform([0, 0], [1, 2], size=(10_000, 2))
    found = g.locate(pts)
    expected = np.array([_brute_force_cell(g, p) for p in pts[:2000]])
    assert np.array_equal(found[:2000], expected)
    assert found.min() >= 0 and found.max() < g.n_cells


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.floats(0, 2))
def test_locate_is_partition(x, y):
    m = build_structured((0, 1, 0, 2), 2)
    g = CoarseGrid.covering(m, 0.5)
    assert g.locate(np.array([[x, y]]))[0] == _brute_force_cell(g, (x, y))
