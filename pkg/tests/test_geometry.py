import numpy as np
import pytest

from geoblocks.cellgrid import (
    ROOT_CELL,
    Domain,
    cell_diagonal_m,
    cell_from_path,
    cell_range,
    cell_rect,
    level,
)
from geoblocks.errors import InvalidPolygon
from geoblocks.geometry import (
    CellRelation,
    Covering,
    Polygon,
    classify_cell,
    cover_polygon,
    distance_to_polygon_m,
    distances_to_polygon_m,
    point_in_polygon,
    points_in_polygon,
    polygon_from_geojson,
)

NYC = Domain(-74.3, 40.4, -73.6, 41.0)
UNIT = Domain(0.0, 0.0, 1.0, 1.0)

DIAMOND = Polygon([[(0.0, 0.0), (1.0, 1.0), (2.0, 0.0), (1.0, -1.0)]])


def sample_inside(rng, poly, n):
    x0, y0, x1, y1 = poly.bbox()
    out_x, out_y = [], []
    while sum(len(a) for a in out_x) < n:
        xs = rng.uniform(x0, x1, 4 * n)
        ys = rng.uniform(y0, y1, 4 * n)
        keep = points_in_polygon(xs, ys, poly)
        out_x.append(xs[keep])
        out_y.append(ys[keep])
    return np.concatenate(out_x)[:n], np.concatenate(out_y)[:n]


def covered_mask(xs, ys, covering, d):
    hit = np.zeros(len(xs), dtype=bool)
    for c in covering.cells:
        lon0, lat0, lon1, lat1 = cell_rect(c, d)
        hit |= (xs >= lon0) & (xs <= lon1) & (ys >= lat0) & (ys <= lat1)
    return hit


class TestPointInPolygon:
    def test_interior_and_exterior(self):
        assert point_in_polygon(1.0, 0.0, DIAMOND)
        assert not point_in_polygon(-0.5, 0.0, DIAMOND)
        assert not point_in_polygon(0.2, 0.9, DIAMOND)

    def test_boundary_counts_as_inside(self):
        assert point_in_polygon(0.0, 0.0, DIAMOND)  # vertex
        assert point_in_polygon(0.5, 0.5, DIAMOND)  # edge midpoint

    def test_ray_through_vertex_is_consistent(self):
        # The +x ray from both points passes exactly through two vertices.
        assert not point_in_polygon(-0.5, 0.0, DIAMOND)
        assert point_in_polygon(0.5, 0.0, DIAMOND)

    def test_hole_excludes(self):
        poly = Polygon(
            [
                [(0.0, 0.0), (4.0, 0.0), (4.0, 4.0), (0.0, 4.0)],
                [(1.0, 1.0), (3.0, 1.0), (3.0, 3.0), (1.0, 3.0)],
            ]
        )
        assert point_in_polygon(0.5, 0.5, poly)
        assert not point_in_polygon(2.0, 2.0, poly)
        assert point_in_polygon(1.0, 2.0, poly)  # hole boundary is polygon boundary

    def test_vector_matches_scalar(self):
        rng = np.random.default_rng(5)
        xs = rng.uniform(-0.5, 2.5, 400)
        ys = rng.uniform(-1.5, 1.5, 400)
        got = points_in_polygon(xs, ys, DIAMOND)
        want = [point_in_polygon(float(x), float(y), DIAMOND) for x, y in zip(xs, ys)]
        assert got.tolist() == want


class TestPolygonValidation:
    def test_too_few_vertices(self):
        with pytest.raises(InvalidPolygon):
            Polygon([[(0, 0), (1, 1)]])

    def test_bowtie_rejected(self):
        with pytest.raises(InvalidPolygon):
            Polygon([[(0, 0), (1, 1), (1, 0), (0, 1)]])

    def test_nonfinite_rejected(self):
        with pytest.raises(InvalidPolygon):
            Polygon([[(0, 0), (float("nan"), 1), (1, 0)]])

    def test_closing_vertex_stripped(self):
        p = Polygon([[(0, 0), (1, 0), (1, 1), (0, 0)]])
        assert len(p.rings[0]) == 3

    def test_geojson_roundtrip(self):
        p = Polygon([[(0.0, 0.0), (2.0, 0.0), (1.0, 2.0)]])
        q = polygon_from_geojson(p.to_geojson())
        assert q.rings == p.rings

    def test_geojson_feature_unwrapped(self):
        g = {"type": "Feature", "properties": {}, "geometry": DIAMOND.to_geojson()}
        assert polygon_from_geojson(g).rings == DIAMOND.rings

    def test_geojson_bad_type(self):
        with pytest.raises(InvalidPolygon):
            polygon_from_geojson({"type": "MultiPolygon", "coordinates": []})


class TestClassify:
    def test_unit_square_contains_root(self):
        poly = Polygon.rect(0.0, 0.0, 1.0, 1.0)
        assert classify_cell(ROOT_CELL, poly, UNIT) == CellRelation.CONTAINED

    def test_far_quadrant_disjoint(self):
        # Polygon tucked inside quadrant 0 never touches quadrant 3.
        poly = Polygon.rect(0.1, 0.1, 0.2, 0.2)
        assert classify_cell(cell_from_path([3]), poly, UNIT) == CellRelation.DISJOINT
        assert classify_cell(cell_from_path([0]), poly, UNIT) == CellRelation.INTERSECTS

    def test_triangle_cutting_corner(self):
        poly = Polygon([[(0.4, 0.0), (1.0, 0.6), (1.0, 0.0)]])
        assert classify_cell(cell_from_path([1]), poly, UNIT) == CellRelation.INTERSECTS

    def test_touching_neighbor_is_disjoint(self):
        # Exact quadrant polygons only touch their neighbors along an edge.
        poly = Polygon.rect(*_quadrant_rect(2))
        assert classify_cell(cell_from_path([2]), poly, UNIT) == CellRelation.CONTAINED
        for q in (0, 1, 3):
            assert classify_cell(cell_from_path([q]), poly, UNIT) == CellRelation.DISJOINT

    def test_cell_inside_hole_is_disjoint(self):
        poly = Polygon(
            [
                [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)],
                [(0.4, 0.4), (0.6, 0.4), (0.6, 0.6), (0.4, 0.6)],
            ]
        )
        inner = cell_from_path([3, 0, 0, 0])  # rect (0.5,0.5)..(0.5625,..)
        assert classify_cell(inner, poly, UNIT) == CellRelation.DISJOINT


def _quadrant_rect(digit):
    return cell_rect(cell_from_path([digit]), UNIT)


class TestCovering:
    def test_exact_quadrant_covering(self):
        poly = Polygon.rect(*_quadrant_rect(2))
        cov = cover_polygon(poly, max_level=8, d=UNIT)
        assert cov.cells == (cell_from_path([2]),)
        assert cov.epsilon_m == cell_diagonal_m(cell_from_path([2]), UNIT)

    def test_full_domain_covering_is_root(self):
        poly = Polygon.rect(NYC.min_lon, NYC.min_lat, NYC.max_lon, NYC.max_lat)
        cov = cover_polygon(poly, max_level=10, d=NYC)
        assert cov.cells == (ROOT_CELL,)

    def test_polygon_outside_domain_empty(self):
        poly = Polygon.rect(10.0, 10.0, 11.0, 11.0)
        cov = cover_polygon(poly, max_level=8, d=NYC)
        assert cov.cells == ()
        assert cov.epsilon_m == 0.0

    def test_invariants_random_polygons(self):
        rng = np.random.default_rng(17)
        for _ in range(25):
            poly = _random_polygon(rng, NYC)
            cov = cover_polygon(poly, max_level=10, max_cells=256, d=NYC)
            assert len(cov.cells) <= 256
            assert list(cov.cells) == sorted(cov.cells)
            ranges = [cell_range(c) for c in cov.cells]
            for (_, hi), (lo, _) in zip(ranges, ranges[1:]):
                assert hi < lo, "covering cells overlap"
            assert all(level(c) <= 10 for c in cov.cells)
            assert cov.epsilon_m == max(cell_diagonal_m(c, NYC) for c in cov.cells)

    def test_monte_carlo_soundness(self):
        rng = np.random.default_rng(19)
        poly = _random_polygon(rng, NYC, n_vertices=9)
        cov = cover_polygon(poly, max_level=11, d=NYC)
        xs, ys = sample_inside(rng, poly, 10_000)
        assert covered_mask(xs, ys, cov, NYC).all()

    def test_tightness_of_emitted_cells(self):
        rng = np.random.default_rng(23)
        poly = _random_polygon(rng, NYC)
        cov = cover_polygon(poly, max_level=9, max_cells=100_000, d=NYC)
        for c in cov.cells:
            assert classify_cell(c, poly, NYC) != CellRelation.DISJOINT

    def test_budget_merges_but_stays_sound(self):
        rng = np.random.default_rng(29)
        poly = _random_polygon(rng, NYC, n_vertices=12)
        tight = cover_polygon(poly, max_level=11, max_cells=4096, d=NYC)
        small = cover_polygon(poly, max_level=11, max_cells=16, d=NYC)
        assert len(small.cells) <= 16
        assert small.epsilon_m >= tight.epsilon_m
        xs, ys = sample_inside(rng, poly, 5_000)
        assert covered_mask(xs, ys, small, NYC).all()

    def test_error_bound_monte_carlo(self):
        rng = np.random.default_rng(31)
        poly = _random_polygon(rng, NYC, n_vertices=7, radius_frac=0.08)
        cov = cover_polygon(poly, max_level=10, d=NYC)
        xs, ys = [], []
        for c in cov.cells:
            lon0, lat0, lon1, lat1 = cell_rect(c, NYC)
            xs.append(rng.uniform(lon0, lon1, 200))
            ys.append(rng.uniform(lat0, lat1, 200))
        xs, ys = np.concatenate(xs), np.concatenate(ys)
        outside = ~points_in_polygon(xs, ys, poly)
        dist = distances_to_polygon_m(xs[outside], ys[outside], poly)
        assert (dist <= cov.epsilon_m).all()

    def test_deterministic(self):
        rng = np.random.default_rng(37)
        poly = _random_polygon(rng, NYC)
        a = cover_polygon(poly, max_level=10, max_cells=64, d=NYC)
        b = cover_polygon(poly, max_level=10, max_cells=64, d=NYC)
        assert a == b


def _random_polygon(rng, d, n_vertices=None, radius_frac=None):
    """Star-shaped simple polygon around a random center."""
    n = n_vertices or int(rng.integers(3, 11))
    rf = radius_frac or float(rng.uniform(0.03, 0.2))
    cx = rng.uniform(d.min_lon + 0.25 * d.width, d.max_lon - 0.25 * d.width)
    cy = rng.uniform(d.min_lat + 0.25 * d.height, d.max_lat - 0.25 * d.height)
    angles = np.sort(rng.uniform(0, 2 * np.pi, n))
    radii = rng.uniform(0.4, 1.0, n) * rf
    xs = cx + np.cos(angles) * radii * d.width
    ys = cy + np.sin(angles) * radii * d.height
    return Polygon([list(zip(xs.tolist(), ys.tolist()))])


class TestDistance:
    RECT = Polygon.rect(-74.0, 40.6, -73.9, 40.7)

    def test_inside_and_boundary_zero(self):
        assert distance_to_polygon_m(-73.95, 40.65, self.RECT) == 0.0
        assert distance_to_polygon_m(-74.0, 40.6, self.RECT) == 0.0

    def test_eastward_offset(self):
        got = distance_to_polygon_m(-73.8, 40.65, self.RECT)
        want = 0.1 * 111320.0 * np.cos(np.radians(40.65))
        assert abs(got - want) / want < 0.005

    def test_northward_offset(self):
        got = distance_to_polygon_m(-73.95, 40.8, self.RECT)
        want = 0.1 * 110574.0
        assert abs(got - want) / want < 0.005

    def test_diagonal_to_corner(self):
        lat = 40.75
        got = distance_to_polygon_m(-73.85, lat, self.RECT)
        dx = 0.05 * 111320.0 * np.cos(np.radians(lat))
        dy = 0.05 * 110574.0
        want = float(np.hypot(dx, dy))
        assert abs(got - want) / want < 0.005

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(41)
        xs = rng.uniform(-74.3, -73.6, 100)
        ys = rng.uniform(40.4, 41.0, 100)
        got = distances_to_polygon_m(xs, ys, self.RECT)
        want = [distance_to_polygon_m(float(x), float(y), self.RECT) for x, y in zip(xs, ys)]
        assert np.allclose(got, want, rtol=0, atol=1e-9)


def test_covering_is_frozen():
    cov = Covering(cells=(ROOT_CELL,), max_level=0, epsilon_m=1.0)
    with pytest.raises(AttributeError):
        cov.cells = ()
