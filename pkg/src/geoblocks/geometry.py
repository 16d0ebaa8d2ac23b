"""Polygon geometry: containment tests, cell classification, coverings.

Classification works on interior overlap. A cell that only touches a polygon
along an edge or corner is Disjoint, which keeps coverings of axis-aligned
polygons exact; points on the shared line stay covered because the polygon
side of the line belongs to an emitted neighbor cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .cellgrid import (
    M_PER_DEG_LAT,
    M_PER_DEG_LON_EQUATOR,
    MAX_LEVEL,
    ROOT_CELL,
    Domain,
    cell_diagonal_m,
    cell_rect,
    children,
    level,
    parent,
)
from .errors import InvalidPolygon, LevelOutOfRange


class CellRelation(IntEnum):
    DISJOINT = 0
    INTERSECTS = 1
    CONTAINED = 2


class Polygon:
    """Simple polygon in lon/lat, first ring outer, further rings holes.

    Rings are stored without the repeated closing vertex. Inside/outside is
    decided by even-odd parity over all rings, so ring orientation does not
    matter. Boundary points count as inside.
    """

    __slots__ = ("rings", "_ex1", "_ey1", "_ex2", "_ey2", "_vx", "_vy")

    def __init__(self, rings):
        norm = []
        for ring in rings:
            pts = [(float(x), float(y)) for x, y in ring]
            if pts and pts[0] == pts[-1]:
                pts = pts[:-1]
            deduped = [p for i, p in enumerate(pts) if p != pts[i - 1] or len(pts) == 1]
            if len(deduped) < 3:
                raise InvalidPolygon("ring needs at least 3 distinct vertices")
            if not all(math.isfinite(x) and math.isfinite(y) for x, y in deduped):
                raise InvalidPolygon("ring has non-finite coordinates")
            norm.append(tuple(deduped))
        if not norm:
            raise InvalidPolygon("polygon needs at least one ring")
        self.rings = tuple(norm)
        e1, e2, owners = [], [], []
        for ri, ring in enumerate(self.rings):
            for i, p in enumerate(ring):
                e1.append(p)
                e2.append(ring[(i + 1) % len(ring)])
                owners.append((ri, i, len(ring)))
        self._check_simple(e1, e2, owners)
        arr1 = np.array(e1, dtype=np.float64)
        arr2 = np.array(e2, dtype=np.float64)
        self._ex1, self._ey1 = arr1[:, 0].copy(), arr1[:, 1].copy()
        self._ex2, self._ey2 = arr2[:, 0].copy(), arr2[:, 1].copy()
        verts = np.array([p for ring in self.rings for p in ring], dtype=np.float64)
        self._vx, self._vy = verts[:, 0].copy(), verts[:, 1].copy()

    @staticmethod
    def _check_simple(e1, e2, owners):
        n = len(e1)
        for i in range(n):
            for j in range(i + 1, n):
                ri, ii, ni = owners[i]
                rj, jj, nj = owners[j]
                adjacent = ri == rj and (jj == (ii + 1) % ni or ii == (jj + 1) % nj)
                if adjacent:
                    continue
                if _segments_intersect(e1[i], e2[i], e1[j], e2[j]):
                    raise InvalidPolygon("rings may not self-intersect or touch")

    @classmethod
    def rect(cls, lon0: float, lat0: float, lon1: float, lat1: float) -> "Polygon":
        return cls([[(lon0, lat0), (lon1, lat0), (lon1, lat1), (lon0, lat1)]])

    def bbox(self) -> tuple[float, float, float, float]:
        return (
            float(self._vx.min()),
            float(self._vy.min()),
            float(self._vx.max()),
            float(self._vy.max()),
        )

    def to_geojson(self) -> dict:
        return {
            "type": "Polygon",
            "coordinates": [[list(p) for p in ring] + [list(ring[0])] for ring in self.rings],
        }


def polygon_from_geojson(obj) -> Polygon:
    if not isinstance(obj, dict):
        raise InvalidPolygon("GeoJSON polygon must be an object")
    if obj.get("type") == "Feature":
        obj = obj.get("geometry") or {}
    if obj.get("type") != "Polygon":
        raise InvalidPolygon(f"unsupported geometry type {obj.get('type')!r}")
    coords = obj.get("coordinates")
    if not coords:
        raise InvalidPolygon("polygon has no coordinates")
    return Polygon(coords)


def _orient(ax, ay, bx, by, cx, cy):
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)


def _on_segment(ax, ay, bx, by, px, py):
    return min(ax, bx) <= px <= max(ax, bx) and min(ay, by) <= py <= max(ay, by)


def _segments_intersect(p1, p2, p3, p4) -> bool:
    d1 = _orient(*p3, *p4, *p1)
    d2 = _orient(*p3, *p4, *p2)
    d3 = _orient(*p1, *p2, *p3)
    d4 = _orient(*p1, *p2, *p4)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and 0 not in (d1, d2, d3, d4):
        return True
    if d1 == 0 and _on_segment(*p3, *p4, *p1):
        return True
    if d2 == 0 and _on_segment(*p3, *p4, *p2):
        return True
    if d3 == 0 and _on_segment(*p1, *p2, *p3):
        return True
    if d4 == 0 and _on_segment(*p1, *p2, *p4):
        return True
    return False


def _pip_masks(pxs: np.ndarray, pys: np.ndarray, poly: Polygon):
    """Even-odd parity and on-boundary masks for arrays of points.

    Vertices lying exactly on the test ray count as above it, so crossing
    edges are exactly those with one endpoint at y >= py and one below.
    """
    parity = np.zeros(len(pxs), dtype=bool)
    on = np.zeros(len(pxs), dtype=bool)
    edges = zip(poly._ex1, poly._ey1, poly._ex2, poly._ey2)
    for x1, y1, x2, y2 in edges:
        cross = (x2 - x1) * (pys - y1) - (y2 - y1) * (pxs - x1)
        within = (
            (pxs >= min(x1, x2))
            & (pxs <= max(x1, x2))
            & (pys >= min(y1, y2))
            & (pys <= max(y1, y2))
        )
        on |= (cross == 0.0) & within
        if y1 != y2:
            straddles = (y1 >= pys) != (y2 >= pys)
            xint = x1 + (pys - y1) * (x2 - x1) / (y2 - y1)
            parity ^= straddles & (xint > pxs)
    return parity, on


def points_in_polygon(lons: np.ndarray, lats: np.ndarray, poly: Polygon) -> np.ndarray:
    """Closed containment (boundary counts as inside) for point arrays."""
    lons = np.asarray(lons, dtype=np.float64)
    lats = np.asarray(lats, dtype=np.float64)
    parity, on = _pip_masks(lons, lats, poly)
    return parity | on


def point_in_polygon(lon: float, lat: float, poly: Polygon) -> bool:
    return bool(points_in_polygon(np.array([lon]), np.array([lat]), poly)[0])


def _edge_through_open_rects(x1, y1, x2, y2, rx0, ry0, rx1, ry1):
    """True per rect when the segment spends positive length strictly inside."""
    dx, dy = x2 - x1, y2 - y1
    if dx == 0.0:
        lo_x = np.where((rx0 < x1) & (x1 < rx1), 0.0, np.inf)
        hi_x = np.where((rx0 < x1) & (x1 < rx1), 1.0, -np.inf)
    else:
        ta = (rx0 - x1) / dx
        tb = (rx1 - x1) / dx
        lo_x, hi_x = np.minimum(ta, tb), np.maximum(ta, tb)
    if dy == 0.0:
        lo_y = np.where((ry0 < y1) & (y1 < ry1), 0.0, np.inf)
        hi_y = np.where((ry0 < y1) & (y1 < ry1), 1.0, -np.inf)
    else:
        ta = (ry0 - y1) / dy
        tb = (ry1 - y1) / dy
        lo_y, hi_y = np.minimum(ta, tb), np.maximum(ta, tb)
    lo = np.maximum(np.maximum(lo_x, lo_y), 0.0)
    hi = np.minimum(np.minimum(hi_x, hi_y), 1.0)
    return lo < hi


def classify_rects(rx0, ry0, rx1, ry1, poly: Polygon) -> np.ndarray:
    """CellRelation value per rect, vectorized over rect arrays."""
    n = len(rx0)
    corner_x = np.concatenate([rx0, rx1, rx0, rx1])
    corner_y = np.concatenate([ry0, ry0, ry1, ry1])
    parity, on = _pip_masks(corner_x, corner_y, poly)
    closed = (parity | on).reshape(4, n)
    strict = (parity & ~on).reshape(4, n)
    corners_all_closed = closed.all(axis=0)
    corners_any_strict = strict.any(axis=0)

    cpar, con = _pip_masks((rx0 + rx1) / 2, (ry0 + ry1) / 2, poly)
    center_closed = cpar | con
    center_strict = cpar & ~con

    vert_strict_in = np.zeros(n, dtype=bool)
    for vx, vy in zip(poly._vx, poly._vy):
        vert_strict_in |= (rx0 < vx) & (vx < rx1) & (ry0 < vy) & (vy < ry1)

    edge_through = np.zeros(n, dtype=bool)
    for x1, y1, x2, y2 in zip(poly._ex1, poly._ey1, poly._ex2, poly._ey2):
        edge_through |= _edge_through_open_rects(x1, y1, x2, y2, rx0, ry0, rx1, ry1)

    boundary_free = ~edge_through & ~vert_strict_in
    contained = corners_all_closed & center_closed & boundary_free
    disjoint = ~corners_any_strict & ~center_strict & boundary_free & ~contained

    out = np.full(n, CellRelation.INTERSECTS, dtype=np.int8)
    out[contained] = CellRelation.CONTAINED
    out[disjoint] = CellRelation.DISJOINT
    return out


def cells_rects(cells: np.ndarray, lvl: int, d: Domain):
    """Rect bound arrays for same-level cells (vectorized cell_rect)."""
    if lvl:
        morton = cells >> np.uint64(64 - 2 * lvl)
    else:
        morton = np.zeros(len(cells), dtype=np.uint64)
    xi = _compact_np(morton)
    yi = _compact_np(morton >> np.uint64(1))
    n = float(1 << lvl)
    lon0 = d.min_lon + d.width * (xi / n)
    lat0 = d.min_lat + d.height * (yi / n)
    return lon0, lat0, lon0 + d.width / n, lat0 + d.height / n


def _compact_np(v: np.ndarray) -> np.ndarray:
    v = v & np.uint64(0x5555555555555555)
    v = (v | (v >> np.uint64(1))) & np.uint64(0x3333333333333333)
    v = (v | (v >> np.uint64(2))) & np.uint64(0x0F0F0F0F0F0F0F0F)
    v = (v | (v >> np.uint64(4))) & np.uint64(0x00FF00FF00FF00FF)
    v = (v | (v >> np.uint64(8))) & np.uint64(0x0000FFFF0000FFFF)
    v = (v | (v >> np.uint64(16))) & np.uint64(0x00000000FFFFFFFF)
    return v.astype(np.float64)


def classify_cell(cid: int, poly: Polygon, d: Domain) -> CellRelation:
    lon0, lat0, lon1, lat1 = cell_rect(cid, d)
    rel = classify_rects(
        np.array([lon0]), np.array([lat0]), np.array([lon1]), np.array([lat1]), poly
    )
    return CellRelation(int(rel[0]))


@dataclass(frozen=True)
class Covering:
    """Disjoint cells whose union contains the polygon clipped to the domain."""

    cells: tuple[int, ...]
    max_level: int
    epsilon_m: float


def cover_polygon(poly: Polygon, max_level: int, max_cells: int = 256, d: Domain = None) -> Covering:
    """Cover a polygon with at most max_cells quadtree cells.

    Descends the tree level by level, keeping fully contained cells at their
    natural size and boundary cells at max_level. When the budget would be
    blown, the deepest cells are merged back into their parents, biggest
    sibling groups first, which only loosens the covering. Descent stops early
    once further refinement could not fit the budget anyway.
    """
    if d is None:
        raise ValueError("domain required")
    if not 0 <= max_level <= MAX_LEVEL:
        raise LevelOutOfRange(f"max_level {max_level} not in [0, {MAX_LEVEL}]")
    if max_cells < 4:
        raise ValueError("max_cells must be at least 4")

    expand_limit = max(4 * max_cells, 4096)
    emitted: list[int] = []
    frontier = np.array([ROOT_CELL], dtype=np.uint64)
    lvl = 0
    while len(frontier):
        rel = classify_rects(*cells_rects(frontier, lvl, d), poly)
        emitted.extend(int(c) for c in frontier[rel == CellRelation.CONTAINED])
        inter = frontier[rel == CellRelation.INTERSECTS]
        if len(inter) == 0:
            break
        if lvl == max_level or len(emitted) + 4 * len(inter) > expand_limit:
            emitted.extend(int(c) for c in inter)
            break
        sent = np.uint64(1 << (63 - 2 * lvl))
        base = (inter - sent) | (sent >> np.uint64(2))
        step = sent >> np.uint64(1)
        steps = np.arange(4, dtype=np.uint64) * step
        frontier = (base[:, None] + steps[None, :]).ravel()
        lvl += 1

    cells = _merge_to_budget(emitted, max_cells)
    eps = max((cell_diagonal_m(c, d) for c in cells), default=0.0)
    return Covering(cells=tuple(cells), max_level=max_level, epsilon_m=eps)


def _merge_to_budget(cells: list[int], max_cells: int) -> list[int]:
    out = sorted(cells)
    while len(out) > max_cells:
        lvls = {c: level(c) for c in out}
        deepest = max(lvls.values())
        groups: dict[int, list[int]] = {}
        for c in out:
            if lvls[c] == deepest:
                groups.setdefault(parent(c), []).append(c)
        keep = set(out)
        for p, members in sorted(groups.items(), key=lambda kv: (-len(kv[1]), kv[0])):
            keep.difference_update(members)
            keep.add(p)
            if len(keep) <= max_cells:
                break
        out = sorted(keep)
    return out


def distance_to_polygon_m(lon: float, lat: float, poly: Polygon) -> float:
    """Meters from a point to the polygon; zero anywhere inside or on it."""
    if point_in_polygon(lon, lat, poly):
        return 0.0
    return float(
        distances_to_polygon_m(np.array([lon]), np.array([lat]), poly, skip_inside=True)[0]
    )


def distances_to_polygon_m(
    lons: np.ndarray, lats: np.ndarray, poly: Polygon, skip_inside: bool = False
) -> np.ndarray:
    """Vectorized distance_to_polygon_m over point arrays."""
    lons = np.asarray(lons, dtype=np.float64)
    lats = np.asarray(lats, dtype=np.float64)
    kx = M_PER_DEG_LON_EQUATOR * np.cos(np.radians(lats))
    ky = M_PER_DEG_LAT
    best = np.full(len(lons), np.inf)
    for x1, y1, x2, y2 in zip(poly._ex1, poly._ey1, poly._ex2, poly._ey2):
        ax = (x1 - lons) * kx
        ay = (y1 - lats) * ky
        bx = (x2 - lons) * kx
        by = (y2 - lats) * ky
        dx, dy = bx - ax, by - ay
        denom = dx * dx + dy * dy
        t = np.clip(-(ax * dx + ay * dy) / np.where(denom == 0.0, 1.0, denom), 0.0, 1.0)
        px, py = ax + t * dx, ay + t * dy
        np.minimum(best, np.hypot(px, py), out=best)
    if not skip_inside:
        best[points_in_polygon(lons, lats, poly)] = 0.0
    return best
