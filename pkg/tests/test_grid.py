import numpy as np
import pytest

from milltopo.grid import StructuredGrid, build_grid, neighbors_within_radius


def test_build_grid_2d_centers_x_fastest():
    g = build_grid((2, 2))
    assert g.num_elements == 4
    assert g.ndim == 2
    expected = np.array(
        [[0.5, 0.5, 0.0], [1.5, 0.5, 0.0], [0.5, 1.5, 0.0], [1.5, 1.5, 0.0]]
    )
    assert np.array_equal(g.centers, expected)


def test_build_grid_3d_center_of_last_element():
    g = build_grid((3, 2, 2))
    assert g.num_elements == 12
    assert np.array_equal(g.centers[-1], [2.5, 1.5, 1.5])
    # x-fastest: element 4 is (1, 1, 0)
    assert np.array_equal(g.centers[4], [1.5, 1.5, 0.5])


@pytest.mark.parametrize("extents", [(0, 3), (3, -1), (2,), (2, 2, 2, 2)])
def test_build_grid_rejects_bad_extents(extents):
    with pytest.raises(ValueError):
        build_grid(extents)


def test_element_index_roundtrip():
    g = build_grid((4, 3, 5))
    for e in range(g.num_elements):
        assert g.element_index(g.element_coords(e)) == e
    assert g.element_index((1, 0, 0)) == 1
    assert g.element_index((0, 1, 0)) == 4
    assert g.element_index((0, 0, 1)) == 12


def test_element_index_bounds():
    g = build_grid((2, 2))
    with pytest.raises(ValueError):
        g.element_index((2, 0))
    with pytest.raises(ValueError):
        g.element_coords(4)
    with pytest.raises(ValueError):
        g.element_index((0, 0, 0))


def test_neighbors_center_of_3x3():
    g = build_grid((3, 3))
    center = g.element_index((1, 1))
    n15 = neighbors_within_radius(g, center, 1.5)
    assert len(n15) == 9  # self + 4 edges + 4 diagonals (sqrt(2) < 1.5)
    # strict inequality: the 4 edge neighbors at distance exactly 1.0 drop out
    n10 = neighbors_within_radius(g, center, 1.0)
    assert n10 == [(center, 0.0)]
    assert neighbors_within_radius(g, center, 0.5) == [(center, 0.0)]


def test_neighbors_interior_count_at_radius_4():
    g = build_grid((100, 100))
    e = g.element_index((50, 50))
    assert len(neighbors_within_radius(g, e, 4.0)) == 45


def test_neighbors_corner_is_clipped():
    g = build_grid((100, 100))
    corner = g.element_index((0, 0))
    interior = g.element_index((50, 50))
    n_corner = neighbors_within_radius(g, corner, 4.0)
    assert len(n_corner) < len(neighbors_within_radius(g, interior, 4.0))
    # quadrant of the interior stencil: offsets with both coords >= 0
    assert len(n_corner) == 15


def test_neighbors_symmetry():
    g = build_grid((4, 5, 3))
    radius = 2.2
    sets = [dict(neighbors_within_radius(g, e, radius)) for e in range(g.num_elements)]
    for i in range(g.num_elements):
        for j, dij in sets[i].items():
            assert i in sets[j]
            assert sets[j][i] == dij


def test_neighbors_match_direct_scan():
    g = build_grid((5, 4, 3))
    radius = 1.8
    for e in [0, 7, 31, g.num_elements - 1]:
        got = neighbors_within_radius(g, e, radius)
        want = []
        for j in range(g.num_elements):
            d = float(np.linalg.norm(g.centers[j] - g.centers[e]))
            if d < radius:
                want.append((j, d))
        assert [i for i, _ in got] == [i for i, _ in want]
        assert np.allclose([d for _, d in got], [d for _, d in want])


def test_neighbors_rejects_bad_radius():
    g = build_grid((2, 2))
    with pytest.raises(ValueError):
        neighbors_within_radius(g, 0, 0.0)


def test_grid_is_frozen():
    g = build_grid((2, 2))
    with pytest.raises(AttributeError):
        g.dims = (3, 3)
    assert isinstance(g, StructuredGrid)
