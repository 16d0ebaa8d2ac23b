"""Quadtree cell ids on a space-filling curve plus domain geometry.

A cell id is a single uint64. The top ``2*level`` bits hold the subdivision
path, two bits per level with the y bit above the x bit, followed by one
sentinel 1-bit and zeros. Deeper cells therefore sort between the bounds of
their ancestors, which makes containment a pair of integer comparisons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    InvalidCellId,
    LevelOutOfRange,
    OutOfDomain,
    PathTooDeep,
    Unsatisfiable,
)

MAX_LEVEL = 31

# Equirectangular meter scaling. Longitude meters shrink with cos(latitude).
M_PER_DEG_LAT = 110574.0
M_PER_DEG_LON_EQUATOR = 111320.0

ROOT_CELL = 1 << 63

_FULL = (1 << 64) - 1


@dataclass(frozen=True)
class Domain:
    """Axis-aligned lon/lat rectangle the grid subdivides."""

    min_lon: float
    min_lat: float
    max_lon: float
    max_lat: float

    def __post_init__(self):
        vals = (self.min_lon, self.min_lat, self.max_lon, self.max_lat)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("domain bounds must be finite")
        if not (self.min_lon < self.max_lon and self.min_lat < self.max_lat):
            raise ValueError("domain must have positive width and height")

    @property
    def width(self) -> float:
        return self.max_lon - self.min_lon

    @property
    def height(self) -> float:
        return self.max_lat - self.min_lat

    def contains(self, lon: float, lat: float) -> bool:
        return (
            self.min_lon <= lon <= self.max_lon
            and self.min_lat <= lat <= self.max_lat
        )


def cell_from_path(digits) -> int:
    """Build a cell id from subdivision digits, most significant first."""
    if len(digits) > MAX_LEVEL:
        raise PathTooDeep(f"path of {len(digits)} digits exceeds {MAX_LEVEL}")
    cid = 0
    for i, d in enumerate(digits):
        d = int(d)
        if not 0 <= d <= 3:
            raise InvalidCellId(f"path digit {d!r} not in 0..3")
        cid |= d << (62 - 2 * i)
    return cid | (1 << (63 - 2 * len(digits)))


def level(cid: int) -> int:
    """Level encoded in the sentinel position; raises on malformed ids."""
    if not 0 < cid <= _FULL:
        raise InvalidCellId(f"{cid:#x} is not a cell id")
    low = (cid & -cid).bit_length() - 1
    if low & 1 == 0 and low != 63:
        raise InvalidCellId(f"{cid:#x} has sentinel at even bit {low}")
    lvl = (63 - low) // 2
    if lvl > MAX_LEVEL:
        raise InvalidCellId(f"{cid:#x} encodes level {lvl}")
    return lvl


def path_of(cid: int) -> list[int]:
    lvl = level(cid)
    return [(cid >> (62 - 2 * i)) & 3 for i in range(lvl)]


def cell_range(cid: int) -> tuple[int, int]:
    """Inclusive id interval spanned by a cell and all its descendants."""
    level(cid)
    lsb = cid & -cid
    return cid - (lsb - 1), cid + (lsb - 1)


def contains(a: int, b: int) -> bool:
    """True when cell b lies in a's subtree (b may equal a)."""
    lo, hi = cell_range(a)
    level(b)
    return lo <= b <= hi


def parent(cid: int, target_level: int | None = None) -> int:
    """Ancestor at ``target_level`` (direct parent when omitted)."""
    lvl = level(cid)
    if target_level is None:
        target_level = lvl - 1
    if not 0 <= target_level <= lvl:
        raise LevelOutOfRange(f"target level {target_level} not in [0, {lvl}]")
    keep = ((1 << (2 * target_level)) - 1) << (64 - 2 * target_level) if target_level else 0
    return (cid & keep) | (1 << (63 - 2 * target_level))


def children(cid: int) -> tuple[int, int, int, int]:
    lvl = level(cid)
    if lvl >= MAX_LEVEL:
        raise LevelOutOfRange(f"cells at level {MAX_LEVEL} have no children")
    sent = 1 << (63 - 2 * lvl)
    base = (cid - sent) | (sent >> 2)
    step = sent >> 1
    return (base, base + step, base + 2 * step, base + 3 * step)


def children_at_level(cid: int, target_level: int) -> tuple[int, int]:
    """Endpoints of the contiguous id interval of descendants at a level.

    The ids in between step by ``2 ** (64 - 2 * target_level)``; callers never
    need the materialized list.
    """
    lvl = level(cid)
    if not lvl <= target_level <= MAX_LEVEL:
        raise LevelOutOfRange(f"target level {target_level} not in [{lvl}, {MAX_LEVEL}]")
    lo, hi = cell_range(cid)
    sent = 1 << (63 - 2 * target_level)
    return lo + sent - 1, hi - sent + 1


def _spread_bits(v):
    """Interleave zeros between the low 32 bits; works on ints and uint64 arrays."""
    v = v & 0xFFFFFFFF
    v = (v | (v << 16)) & 0x0000FFFF0000FFFF
    v = (v | (v << 8)) & 0x00FF00FF00FF00FF
    v = (v | (v << 4)) & 0x0F0F0F0F0F0F0F0F
    v = (v | (v << 2)) & 0x3333333333333333
    v = (v | (v << 1)) & 0x5555555555555555
    return v


def _compact_bits(v: int) -> int:
    v &= 0x5555555555555555
    v = (v | (v >> 1)) & 0x3333333333333333
    v = (v | (v >> 2)) & 0x0F0F0F0F0F0F0F0F
    v = (v | (v >> 4)) & 0x00FF00FF00FF00FF
    v = (v | (v >> 8)) & 0x0000FFFF0000FFFF
    v = (v | (v >> 16)) & 0x00000000FFFFFFFF
    return v


def _check_level(lvl: int):
    if not 0 <= lvl <= MAX_LEVEL:
        raise LevelOutOfRange(f"level {lvl} not in [0, {MAX_LEVEL}]")


def cell_of_point(lon: float, lat: float, lvl: int, d: Domain) -> int:
    """Cell at ``lvl`` containing the point; domain edges belong to the grid."""
    _check_level(lvl)
    if not d.contains(lon, lat):
        raise OutOfDomain(f"({lon}, {lat}) outside {d}")
    n = 1 << lvl
    xi = min(int((lon - d.min_lon) / d.width * n), n - 1)
    yi = min(int((lat - d.min_lat) / d.height * n), n - 1)
    morton = (_spread_bits(yi) << 1) | _spread_bits(xi)
    return (morton << (64 - 2 * lvl)) | (1 << (63 - 2 * lvl)) if lvl else ROOT_CELL


def cells_of_points(lons: np.ndarray, lats: np.ndarray, lvl: int, d: Domain) -> np.ndarray:
    """Vectorized cell_of_point for arrays already known to be in the domain."""
    _check_level(lvl)
    n = 1 << lvl
    xi = ((lons - d.min_lon) / d.width * n).astype(np.uint64)
    yi = ((lats - d.min_lat) / d.height * n).astype(np.uint64)
    np.minimum(xi, np.uint64(n - 1), out=xi)
    np.minimum(yi, np.uint64(n - 1), out=yi)
    morton = (_spread_bits(yi) << np.uint64(1)) | _spread_bits(xi)
    if lvl == 0:
        return np.full(len(lons), np.uint64(ROOT_CELL))
    return (morton << np.uint64(64 - 2 * lvl)) | np.uint64(1 << (63 - 2 * lvl))


def truncate_cells(keys: np.ndarray, lvl: int) -> np.ndarray:
    """Vectorized ancestor-at-level for an array of cell ids."""
    _check_level(lvl)
    keep = ((1 << (2 * lvl)) - 1) << (64 - 2 * lvl) if lvl else 0
    return (keys & np.uint64(keep)) | np.uint64(1 << (63 - 2 * lvl))


def cell_coords(cid: int) -> tuple[int, int, int]:
    """(xi, yi, level) grid coordinates encoded by a cell id."""
    lvl = level(cid)
    morton = cid >> (64 - 2 * lvl) if lvl else 0
    return _compact_bits(morton), _compact_bits(morton >> 1), lvl


def cell_rect(cid: int, d: Domain) -> tuple[float, float, float, float]:
    """(lon0, lat0, lon1, lat1) bounds of a cell in domain coordinates."""
    xi, yi, lvl = cell_coords(cid)
    n = 1 << lvl
    return (
        d.min_lon + d.width * xi / n,
        d.min_lat + d.height * yi / n,
        d.min_lon + d.width * (xi + 1) / n,
        d.min_lat + d.height * (yi + 1) / n,
    )


def diagonal_m_for_level(lvl: int, lat_center: float, d: Domain) -> float:
    """Cell diagonal in meters at a given level and center latitude."""
    _check_level(lvl)
    n = 1 << lvl
    dx = d.width / n * M_PER_DEG_LON_EQUATOR * math.cos(math.radians(lat_center))
    dy = d.height / n * M_PER_DEG_LAT
    return math.hypot(dx, dy)


def cell_diagonal_m(cid: int, d: Domain) -> float:
    lon0, lat0, lon1, lat1 = cell_rect(cid, d)
    return diagonal_m_for_level(level(cid), (lat0 + lat1) / 2, d)


def level_for_error(epsilon_m: float, d: Domain) -> int:
    """Smallest level whose worst-case cell diagonal is within epsilon_m."""
    if not (math.isfinite(epsilon_m) and epsilon_m > 0):
        raise Unsatisfiable(f"epsilon {epsilon_m!r} must be positive")
    if d.min_lat <= 0 <= d.max_lat:
        widest_lat = 0.0
    else:
        widest_lat = min(abs(d.min_lat), abs(d.max_lat))
    for lvl in range(MAX_LEVEL + 1):
        if diagonal_m_for_level(lvl, widest_lat, d) <= epsilon_m:
            return lvl
    raise Unsatisfiable(f"no level within {MAX_LEVEL} reaches {epsilon_m} m")
