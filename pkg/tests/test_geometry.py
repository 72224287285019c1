import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eitmono.errors import FormatError, ParameterError
from eitmono.geometry import (BetaBounds, Disk, Phantom, PixelGrid, PixelSet, Polygon,
                              build_grid, complement_connected, dilate, frontier, inside_set,
                              outer_support, pixels_from_ixiy, rasterize, read_pixel_csv,
                              regular_polygon, shape_from_dict, write_pixel_csv)


def square_grid(n):
    return PixelGrid((0.0, 0.0), 1.0, n, n, np.ones((n, n), dtype=bool))


def from_rows(rows):
    """PixelSet on a square grid from strings, top row first ('#' = member)."""
    n = len(rows)
    mask = np.array([[ch == "#" for ch in row] for row in rows[::-1]])
    return PixelSet.from_mask(mask), square_grid(n)


# -- grid construction -------------------------------------------------------

def test_half_side_grid_has_twelve_inside_pixels():
    # centroids at +-0.25, +-0.75: the four corners (0.75, 0.75) fall outside
    g = build_grid(1.0, 0.5)
    assert (g.nx, g.ny) == (4, 4)
    assert g.n_inside == 12
    assert not g.inside_mask[0, 0] and g.inside_mask[0, 1]


def test_fine_grid_pixel_count():
    g = build_grid(1.0, 1 / 35)
    assert g.nx == 70
    # brute-force count of centroids strictly inside the unit circle
    c = (np.arange(70) + 0.5) / 35 - 1
    assert g.n_inside == int(((c[None, :] ** 2 + c[:, None] ** 2) < 1).sum()) == 3852
    assert g.n_inside * g.pixel_area == pytest.approx(math.pi, rel=5e-3)


def test_grid_rejects_bad_side():
    with pytest.raises(ParameterError):
        build_grid(1.0, 0.0)
    with pytest.raises(ParameterError):
        build_grid(1.0, 2.0)


def test_locate_and_centroids_agree():
    g = build_grid(1.0, 0.1)
    idx = np.arange(g.n_pixels)
    assert np.array_equal(g.locate(g.centroids(idx)), idx)
    assert g.locate([[5.0, 5.0]])[0] == -1


def test_neighbour_order_is_east_west_north_south():
    g = square_grid(3)
    assert g.neighbours(4) == [5, 3, 7, 1]
    assert g.neighbours(0) == [1, 3]


# -- pixel sets ----------------------------------------------------------------

@given(st.lists(st.integers(0, 99)), st.lists(st.integers(0, 99)))
def test_pixelset_algebra_matches_python_sets(a, b):
    A, B = PixelSet(a), PixelSet(b)
    assert set(A | B) == set(a) | set(b)
    assert set(A & B) == set(a) & set(b)
    assert set(A - B) == set(a) - set(b)
    assert (A <= A | B) and (A | B >= B)
    assert list(A) == sorted(set(a))


def test_pixelset_check_within_rejects_outside_pixels():
    g = build_grid(1.0, 0.5)
    with pytest.raises(ParameterError):
        PixelSet([0]).check_within(g)  # a corner pixel
    with pytest.raises(ParameterError):
        PixelSet([99]).check_within(g)


# -- connectivity --------------------------------------------------------------

def test_ring_has_disconnected_complement():
    S, g = from_rows(["#####",
                      "#...#",
                      "#...#",
                      "#...#",
                      "#####"])
    assert not complement_connected(S, g)
    # one missing ring pixel opens the hole to the exterior
    assert complement_connected(S - PixelSet([2]), g)


def test_diagonal_gap_does_not_connect_a_hole():
    # 4-adjacency: the hole touches the outside only through a corner
    S, g = from_rows([".###.",
                      "##.##",
                      "#...#",
                      "##.##",
                      ".###."])
    assert not complement_connected(S, g)


def test_outer_support_fills_holes():
    S, g = from_rows(["#####",
                      "#...#",
                      "#.#.#",
                      "#...#",
                      "#####"])
    assert outer_support(S, g) == inside_set(g)
    assert complement_connected(outer_support(S, g), g)


def test_empty_and_full_sets_are_admissible():
    g = build_grid(1.0, 0.2)
    assert complement_connected(PixelSet(), g)
    assert complement_connected(inside_set(g), g)


def _bfs_enclosed(members, n):
    """Pixels of an all-inside n x n grid not 4-reachable from the border avoiding members."""
    free = {(i, j) for i in range(n) for j in range(n)} - {divmod(m, n) for m in members}
    seen = {p for p in free if 0 in p or n - 1 in p}
    stack = list(seen)
    while stack:
        i, j = stack.pop()
        for q in ((i + 1, j), (i - 1, j), (i, j + 1), (i, j - 1)):
            if q in free and q not in seen:
                seen.add(q)
                stack.append(q)
    return {i * n + j for i in range(n) for j in range(n)} - {i * n + j for i, j in seen}


@settings(max_examples=80, deadline=None)
@given(st.lists(st.integers(0, 35), max_size=36))
def test_outer_support_matches_flood_fill(members):
    g = square_grid(6)
    S = PixelSet(members)
    T = outer_support(S, g)
    assert set(T) == _bfs_enclosed(members, 6)
    assert S <= T and complement_connected(T, g)
    assert outer_support(T, g) == T
    assert complement_connected(S, g) == (T == S)


def test_frontier_of_block():
    S, g = from_rows(["....",
                      ".##.",
                      ".##.",
                      "...."])
    assert frontier(S, g) == S
    S, g = from_rows(["###",
                      "###",
                      "###"])
    assert frontier(S, g) == S - PixelSet([4])


def test_dilate_uses_eight_neighbourhood():
    g = square_grid(5)
    assert len(dilate(PixelSet([12]), g)) == 9
    assert len(dilate(PixelSet([12]), g, steps=2)) == 25


# -- shapes and phantoms -------------------------------------------------------

def test_polygon_validation():
    with pytest.raises(ParameterError):
        Polygon(((0, 0), (1, 1), (1, 0), (0, 1)))  # self-intersecting
    with pytest.raises(ParameterError):
        Polygon(((0, 0), (0, 1), (1, 1), (1, 0)))  # clockwise
    with pytest.raises(ParameterError):
        Disk((0, 0), -1.0)


def test_rasterize_uses_centroid_rule():
    g = build_grid(1.0, 0.5)
    sq = Polygon(((0.0, 0.0), (0.5, 0.0), (0.5, 0.5), (0.0, 0.5)))
    # exactly the pixel whose centroid (0.25, 0.25) is inside
    assert list(rasterize(sq, g)) == [int(g.locate([[0.25, 0.25]])[0])]


def test_shape_round_trip_through_dicts():
    for shape in (Disk((0.1, -0.2), 0.3), regular_polygon((0.2, 0.1), 0.3, 5, 0.5)):
        assert shape_from_dict(shape.to_dict()) == shape
    with pytest.raises(ParameterError):
        shape_from_dict({"shape": "star"})


def test_phantom_conductivity_and_round_trip(simple_phantom):
    vals = simple_phantom.conductivity([[0.35, 0.2], [-0.4, -0.2], [0.9, 0.0]])
    assert np.allclose(vals, [5.0, 0.2, 1.0])
    assert Phantom.from_dict(simple_phantom.to_dict()) == simple_phantom
    g = build_grid(1.0, 0.05)
    pos, neg = simple_phantom.rasterize(g)
    assert len(pos) > 0 and len(neg) > 0 and len(pos & neg) == 0


def test_phantom_rejects_nonpositive_conductivity():
    with pytest.raises(ParameterError):
        Phantom(1.0, (), ((Disk((0, 0), 0.2), 1.0),))
    with pytest.raises(ParameterError):
        Phantom(1.0, ((Disk((0, 0), 0.2), -1.0),))


def test_overlapping_shapes_are_reported():
    ph = Phantom(1.0, ((Disk((0, 0), 0.3), 1.0),), ((Disk((0.1, 0), 0.3), 0.5),))
    with pytest.raises(ParameterError):
        ph.check_disjoint(build_grid(1.0, 0.1))


def test_beta_bounds():
    b = BetaBounds(4.0, 1.0, 1.0)
    assert b.negative_contrast == pytest.approx(0.8)
    with pytest.raises(ParameterError):
        BetaBounds(4.0, 2.0, 1.0)


# -- csv -----------------------------------------------------------------------

def test_pixel_csv_round_trip(tmp_path):
    g = build_grid(1.0, 0.1)
    S = PixelSet(g.inside_indices[::7])
    write_pixel_csv(tmp_path / "s.csv", S, g)
    assert read_pixel_csv(tmp_path / "s.csv", g) == S
    assert pixels_from_ixiy(g, list(zip(*(v.tolist() for v in g.ixiy(S.indices))))) == S


def test_pixel_csv_errors_name_the_line(tmp_path):
    g = build_grid(1.0, 0.1)
    p = tmp_path / "bad.csv"
    p.write_text("ix,iy\n10,10\n3,x\n")
    with pytest.raises(FormatError, match="line 3"):
        read_pixel_csv(p, g)
