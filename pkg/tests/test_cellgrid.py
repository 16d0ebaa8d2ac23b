import math

import numpy as np
import pytest

from geoblocks.cellgrid import (
    MAX_LEVEL,
    ROOT_CELL,
    Domain,
    cell_coords,
    cell_diagonal_m,
    cell_from_path,
    cell_of_point,
    cell_range,
    cell_rect,
    cells_of_points,
    children,
    children_at_level,
    contains,
    diagonal_m_for_level,
    level,
    level_for_error,
    parent,
    path_of,
    truncate_cells,
)
from geoblocks.errors import (
    InvalidCellId,
    LevelOutOfRange,
    OutOfDomain,
    PathTooDeep,
    Unsatisfiable,
)

NYC = Domain(-74.3, 40.4, -73.6, 41.0)
UNIT = Domain(0.0, 0.0, 1.0, 1.0)


def haversine_m(lon1, lat1, lon2, lat2, r=6371000.0):
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * r * math.asin(math.sqrt(a))


class TestEncoding:
    def test_frozen_path_values(self):
        # Hand-derived bit layouts: path digits then a sentinel 1-bit.
        assert cell_from_path([]) == 0x8000000000000000
        assert cell_from_path([3]) == 0xE000000000000000
        assert cell_from_path([1, 2]) == 0x6800000000000000

    def test_levels_of_frozen_values(self):
        assert level(0x8000000000000000) == 0
        assert level(0xE000000000000000) == 1
        assert level(0x6800000000000000) == 2

    def test_frozen_coords(self):
        # digit 1 = (y0,x1), digit 2 = (y1,x0) so xi=0b10, yi=0b01
        assert cell_coords(0x6800000000000000) == (2, 1, 2)
        assert cell_rect(0x6800000000000000, UNIT) == (0.5, 0.25, 0.75, 0.5)

    def test_path_roundtrip_random(self):
        rng = np.random.default_rng(7)
        for _ in range(300):
            depth = int(rng.integers(0, MAX_LEVEL + 1))
            path = [int(d) for d in rng.integers(0, 4, depth)]
            cid = cell_from_path(path)
            assert path_of(cid) == path
            assert level(cid) == depth

    def test_rejects_bad_input(self):
        with pytest.raises(PathTooDeep):
            cell_from_path([0] * 32)
        with pytest.raises(InvalidCellId):
            cell_from_path([4])
        for bad in (0, 1, 1 << 62, (1 << 63) | 1):
            with pytest.raises(InvalidCellId):
                level(bad)

    def test_deepest_level_has_no_children(self):
        leaf = cell_from_path([0] * MAX_LEVEL)
        assert level(leaf) == MAX_LEVEL
        with pytest.raises(LevelOutOfRange):
            children(leaf)


class TestContainment:
    def test_root_range_spans_everything(self):
        assert cell_range(ROOT_CELL) == (1, (1 << 64) - 1)

    def test_frozen_range(self):
        lo, hi = cell_range(0xE000000000000000)
        assert lo == 0xC000000000000001
        assert hi == 0xFFFFFFFFFFFFFFFF

    def test_contains_matches_prefix_oracle(self):
        # Enumerate every cell at levels <= 5 and compare the range test
        # against literal path-prefix containment.
        ids, paths = [], []

        def walk(path):
            ids.append(cell_from_path(path))
            paths.append(tuple(path))
            if len(path) < 5:
                for d in range(4):
                    walk(path + [d])

        walk([])
        arr = np.array(ids, dtype=np.uint64)
        lvls = np.array([len(p) for p in paths])
        for i, (a, pa) in enumerate(zip(ids, paths)):
            lo, hi = cell_range(a)
            got = (arr >= np.uint64(lo)) & (arr <= np.uint64(hi))
            want = (lvls >= len(pa)) & (truncate_cells(arr, len(pa)) == np.uint64(a))
            assert np.array_equal(got, want), f"mismatch for {pa}"

    def test_parent_child_roundtrip(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            depth = int(rng.integers(0, MAX_LEVEL))
            cid = cell_from_path([int(d) for d in rng.integers(0, 4, depth)])
            kids = children(cid)
            assert list(kids) == sorted(kids)
            for k in kids:
                assert parent(k) == cid
                assert contains(cid, k)
            assert parent(kids[2], depth) == cid

    def test_children_at_level_endpoints(self):
        cid = cell_from_path([1])
        assert children_at_level(cid, 1) == (cid, cid)
        kids = children(cid)
        assert children_at_level(cid, 2) == (kids[0], kids[3])
        first, last = children_at_level(cid, 7)
        assert level(first) == 7 and level(last) == 7
        assert path_of(first) == [1, 0, 0, 0, 0, 0, 0]
        assert path_of(last) == [1, 3, 3, 3, 3, 3, 3]

    def test_descendant_count_quadruples_per_level(self):
        for lvl in range(1, 9):
            first, last = children_at_level(ROOT_CELL, lvl)
            step = 1 << (64 - 2 * lvl)
            assert (last - first) // step + 1 == 4**lvl

    def test_sibling_ranges_disjoint(self):
        kids = children(cell_from_path([2, 0]))
        ranges = [cell_range(k) for k in kids]
        for (_, hi), (lo, _) in zip(ranges, ranges[1:]):
            assert hi < lo

    def test_truncate_matches_parent(self):
        rng = np.random.default_rng(3)
        cells = [
            cell_from_path([int(d) for d in rng.integers(0, 4, int(rng.integers(4, 20)))])
            for _ in range(100)
        ]
        arr = np.array(cells, dtype=np.uint64)
        for lvl in (0, 2, 4):
            got = truncate_cells(arr, lvl)
            want = np.array([parent(c, lvl) for c in cells], dtype=np.uint64)
            assert np.array_equal(got, want)


class TestPointMapping:
    def test_center_point_lands_in_quadrant_three(self):
        lon = (NYC.min_lon + NYC.max_lon) / 2
        lat = (NYC.min_lat + NYC.max_lat) / 2
        assert cell_of_point(lon, lat, 1, NYC) == cell_from_path([3])

    def test_max_corner_clamps_to_last_cell(self):
        cid = cell_of_point(NYC.max_lon, NYC.max_lat, 4, NYC)
        assert path_of(cid) == [3, 3, 3, 3]

    def test_out_of_domain_raises(self):
        with pytest.raises(OutOfDomain):
            cell_of_point(0.0, 0.0, 5, NYC)
        with pytest.raises(OutOfDomain):
            cell_of_point(-74.0, 91.0, 5, NYC)

    def test_rect_contains_point(self):
        rng = np.random.default_rng(23)
        for _ in range(200):
            lon = float(rng.uniform(NYC.min_lon, NYC.max_lon))
            lat = float(rng.uniform(NYC.min_lat, NYC.max_lat))
            lvl = int(rng.integers(0, 13))
            lon0, lat0, lon1, lat1 = cell_rect(cell_of_point(lon, lat, lvl, NYC), NYC)
            assert lon0 <= lon <= lon1
            assert lat0 <= lat <= lat1

    def test_leaf_level_roundtrip(self):
        rng = np.random.default_rng(29)
        for _ in range(50):
            lon = float(rng.uniform(NYC.min_lon, NYC.max_lon))
            lat = float(rng.uniform(NYC.min_lat, NYC.max_lat))
            cid = cell_of_point(lon, lat, MAX_LEVEL, NYC)
            lon0, lat0, lon1, lat1 = cell_rect(cid, NYC)
            assert lon0 <= lon <= lon1 and lat0 <= lat <= lat1

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(31)
        lons = rng.uniform(NYC.min_lon, NYC.max_lon, 500)
        lats = rng.uniform(NYC.min_lat, NYC.max_lat, 500)
        lons[0], lats[0] = NYC.max_lon, NYC.max_lat
        lons[1], lats[1] = NYC.min_lon, NYC.min_lat
        for lvl in (0, 1, 9, MAX_LEVEL):
            got = cells_of_points(lons, lats, lvl, NYC)
            want = np.array(
                [cell_of_point(float(x), float(y), lvl, NYC) for x, y in zip(lons, lats)],
                dtype=np.uint64,
            )
            assert np.array_equal(got, want)


class TestMeters:
    def test_diagonal_close_to_haversine(self):
        rng = np.random.default_rng(37)
        for _ in range(100):
            lvl = int(rng.integers(6, 17))
            lon = float(rng.uniform(NYC.min_lon, NYC.max_lon))
            lat = float(rng.uniform(NYC.min_lat, NYC.max_lat))
            cid = cell_of_point(lon, lat, lvl, NYC)
            lon0, lat0, lon1, lat1 = cell_rect(cid, NYC)
            want = haversine_m(lon0, lat0, lon1, lat1)
            got = cell_diagonal_m(cid, NYC)
            assert abs(got - want) / want < 0.01

    def test_halving_rule(self):
        for lvl in range(0, 30):
            a = diagonal_m_for_level(lvl, 40.7, NYC)
            b = diagonal_m_for_level(lvl + 1, 40.7, NYC)
            assert abs(b - a / 2) <= 1e-9 * a

    def test_level_for_error_monotone(self):
        eps = [50000.0, 5000.0, 500.0, 50.0, 5.0]
        lvls = [level_for_error(e, NYC) for e in eps]
        assert lvls == sorted(lvls)
        for e, lvl in zip(eps, lvls):
            assert diagonal_m_for_level(lvl, 41.0, NYC) <= e

    def test_level_for_error_edge(self):
        lvl = 9
        diag = diagonal_m_for_level(lvl, 0.0, UNIT)
        assert level_for_error(diag, UNIT) == lvl
        assert level_for_error(diag * 0.999, UNIT) == lvl + 1

    def test_level_for_error_unsatisfiable(self):
        with pytest.raises(Unsatisfiable):
            level_for_error(1e-9, NYC)
        with pytest.raises(Unsatisfiable):
            level_for_error(0.0, NYC)
