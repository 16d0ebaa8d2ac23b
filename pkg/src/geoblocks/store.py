"""Columnar point store: CSV extraction, filters, binary files, synthesis.

Rows are keyed by their level-31 cell id and kept key-sorted, so every
coarser grouping is a contiguous run. Value columns are float64 (numeric)
or int64 (temporal, epoch seconds).
"""

from __future__ import annotations

import csv
import io
import math
import operator
import re
import time
from dataclasses import dataclass, field

import numpy as np

from . import _binio
from .cellgrid import MAX_LEVEL, Domain, cells_of_points
from .errors import MissingColumn, OutOfDomain
from .store_report import ExtractReport

NUMERIC = "numeric"
TEMPORAL = "temporal"

_KIND_CODE = {NUMERIC: 0, TEMPORAL: 1}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}
_KIND_DTYPE = {NUMERIC: np.float64, TEMPORAL: np.int64}

TABLE_MAGIC = b"GBPT"
TABLE_VERSION = 1


@dataclass(frozen=True)
class Schema:
    """Ordered value columns as (name, kind) pairs."""

    columns: tuple[tuple[str, str], ...]

    def __post_init__(self):
        seen = set()
        for name, kind in self.columns:
            if kind not in _KIND_CODE:
                raise ValueError(f"unknown column kind {kind!r}")
            if not name or name in seen:
                raise ValueError(f"bad or duplicate column name {name!r}")
            seen.add(name)

    @classmethod
    def parse(cls, text: str) -> "Schema":
        cols = []
        for part in text.split(","):
            name, _, kind = part.strip().partition(":")
            cols.append((name.strip(), kind.strip() or NUMERIC))
        return cls(tuple(cols))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.columns)

    def kind(self, name: str) -> str:
        for n, k in self.columns:
            if n == name:
                return k
        raise MissingColumn(f"schema has no column {name!r}")

    def dtype(self, name: str):
        return _KIND_DTYPE[self.kind(name)]

    def describe(self) -> str:
        return ",".join(f"{n}:{k}" for n, k in self.columns)


_OPS = {
    "<": operator.lt,
    "<=": operator.le,
    "=": operator.eq,
    ">=": operator.ge,
    ">": operator.gt,
    "!=": operator.ne,
}

_COND_RE = re.compile(r"^\s*([A-Za-z_]\w*)\s*(<=|>=|!=|<|>|=)\s*(-?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)\s*$")


@dataclass(frozen=True)
class FilterPredicate:
    """Conjunction of per-column comparisons against constants."""

    conjuncts: tuple[tuple[str, str, float], ...] = ()

    @classmethod
    def parse(cls, text: str | None) -> "FilterPredicate":
        if not text or not text.strip():
            return cls(())
        conds = []
        for part in re.split(r"\s+and\s+|&&", text):
            m = _COND_RE.match(part)
            if not m:
                raise ValueError(f"cannot parse filter condition {part!r}")
            conds.append((m.group(1), m.group(2), float(m.group(3))))
        return cls(tuple(conds))

    def describe(self) -> str:
        return " and ".join(f"{c}{op}{v:g}" for c, op, v in self.conjuncts)

    def __bool__(self) -> bool:
        return bool(self.conjuncts)


def apply_filter(t: "PointTable", f: FilterPredicate) -> np.ndarray:
    """Boolean row mask; conjuncts combine with logical and."""
    mask = np.ones(t.n, dtype=bool)
    for name, op, value in f.conjuncts:
        if name not in t.columns:
            raise MissingColumn(f"filter references unknown column {name!r}")
        mask &= _OPS[op](t.columns[name], value)
    return mask


class PointTable:
    """Immutable key-sorted point data over a fixed domain."""

    def __init__(self, domain, schema, keys, columns, coords=None, key_level=MAX_LEVEL):
        self.domain = domain
        self.schema = schema
        self.key_level = key_level
        self.keys = _frozen(np.asarray(keys, dtype=np.uint64))
        self.columns = {n: _frozen(np.asarray(columns[n], dtype=schema.dtype(n))) for n in schema.names}
        if coords is not None:
            lons, lats = coords
            self.coords = (_frozen(np.asarray(lons, np.float64)), _frozen(np.asarray(lats, np.float64)))
        else:
            self.coords = None
        self.extract_report: ExtractReport | None = None
        if len(self.keys) and np.any(self.keys[1:] < self.keys[:-1]):
            raise ValueError("keys must be sorted ascending")
        for n, arr in self.columns.items():
            if len(arr) != len(self.keys):
                raise ValueError(f"column {n!r} length mismatch")

    @property
    def n(self) -> int:
        return len(self.keys)

    @classmethod
    def from_arrays(cls, domain, schema, lons, lats, columns, keep_coords=False, key_level=MAX_LEVEL):
        """Build a table from unsorted position and value arrays."""
        lons = np.asarray(lons, dtype=np.float64)
        lats = np.asarray(lats, dtype=np.float64)
        inside = (
            (lons >= domain.min_lon)
            & (lons <= domain.max_lon)
            & (lats >= domain.min_lat)
            & (lats <= domain.max_lat)
        )
        if not inside.all():
            raise OutOfDomain(f"{int((~inside).sum())} points outside {domain}")
        keys = cells_of_points(lons, lats, key_level, domain)
        order = np.argsort(keys, kind="stable")
        cols = {n: np.asarray(columns[n], dtype=schema.dtype(n))[order] for n in schema.names}
        coords = (lons[order], lats[order]) if keep_coords else None
        return cls(domain, schema, keys[order], cols, coords=coords, key_level=key_level)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = arr.copy() if not arr.flags.owndata else arr
    arr.flags.writeable = False
    return arr


def extract(
    csv_source,
    schema: Schema,
    d: Domain,
    lon_col: str,
    lat_col: str,
    outlier_policy: str = "drop",
    keep_coords: bool = False,
) -> tuple[PointTable, ExtractReport]:
    """Parse a CSV with a header row into a key-sorted PointTable.

    Rows with unparseable or empty fields, non-finite values, or positions
    outside the domain are dropped and counted, never fatal.
    """
    if outlier_policy != "drop":
        raise ValueError(f"unsupported outlier policy {outlier_policy!r}")
    t0 = time.perf_counter()
    close_me = None
    if hasattr(csv_source, "read"):
        fh = csv_source
    else:
        fh = close_me = open(csv_source, "r", newline="")
    try:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError("CSV input is empty, header row required")
        try:
            idx = [header.index(lon_col), header.index(lat_col)]
            idx += [header.index(n) for n in schema.names]
        except ValueError as e:
            raise MissingColumn(f"CSV header {header!r} lacks a required column") from e

        rows_in = 0
        unparseable = nonfinite = out_of_domain = 0
        kept: list[list[float]] = [[] for _ in idx]
        ncols = len(idx)
        for row in reader:
            rows_in += 1
            try:
                vals = [float(row[i]) for i in idx]
            except (ValueError, IndexError):
                unparseable += 1
                continue
            if not all(math.isfinite(v) for v in vals):
                nonfinite += 1
                continue
            if not d.contains(vals[0], vals[1]):
                out_of_domain += 1
                continue
            for j in range(ncols):
                kept[j].append(vals[j])
    finally:
        if close_me is not None:
            close_me.close()

    lons = np.array(kept[0], dtype=np.float64)
    lats = np.array(kept[1], dtype=np.float64)
    columns = {n: np.array(kept[2 + i]) for i, n in enumerate(schema.names)}
    clean_seconds = time.perf_counter() - t0

    t1 = time.perf_counter()
    table = PointTable.from_arrays(d, schema, lons, lats, columns, keep_coords=keep_coords)
    sort_seconds = time.perf_counter() - t1

    report = ExtractReport(
        rows_in=rows_in,
        rows_kept=table.n,
        dropped_unparseable=unparseable,
        dropped_nonfinite=nonfinite,
        dropped_out_of_domain=out_of_domain,
        clean_seconds=clean_seconds,
        sort_seconds=sort_seconds,
    )
    table.extract_report = report
    return table, report


def save_table(t: PointTable, path):
    w = _binio.Writer()
    for v in (t.domain.min_lon, t.domain.min_lat, t.domain.max_lon, t.domain.max_lat):
        w.f64(v)
    w.u8(t.key_level)
    w.u8(1 if t.coords is not None else 0)
    w.u64(t.n)
    w.u16(len(t.schema.columns))
    for name, kind in t.schema.columns:
        w.text(name)
        w.u8(_KIND_CODE[kind])
    w.array(t.keys)
    for name in t.schema.names:
        w.array(t.columns[name])
    if t.coords is not None:
        w.array(t.coords[0])
        w.array(t.coords[1])
    _binio.write_file(path, TABLE_MAGIC, TABLE_VERSION, w)


def load_table(path) -> PointTable:
    r = _binio.read_file(path, TABLE_MAGIC, TABLE_VERSION)
    domain = Domain(r.f64(), r.f64(), r.f64(), r.f64())
    key_level = r.u8()
    has_coords = r.u8()
    n = r.u64()
    ncols = r.u16()
    cols = tuple((r.text(), _CODE_KIND[r.u8()]) for _ in range(ncols))
    schema = Schema(cols)
    keys = r.array(np.uint64, n)
    columns = {name: r.array(_KIND_DTYPE[kind], n) for name, kind in cols}
    coords = (r.array(np.float64, n), r.array(np.float64, n)) if has_coords else None
    return PointTable(domain, schema, keys, columns, coords=coords, key_level=key_level)


DEFAULT_DOMAIN = Domain(-74.3, 40.4, -73.6, 41.0)

SYNTH_SCHEMA = Schema((("fare", NUMERIC), ("tip", NUMERIC), ("ts", TEMPORAL)))

_DIST_RE = re.compile(r"^clustered:(\d+):(\d*\.?\d+)$")


def _parse_distribution(dist: str):
    if dist == "uniform":
        return "uniform", 0, 0.0
    m = _DIST_RE.match(dist)
    if not m:
        raise ValueError(f"distribution {dist!r}, expected 'uniform' or 'clustered:K:SPREAD'")
    return "clustered", int(m.group(1)), float(m.group(2))


def synth_hotspot_rects(dist: str, seed: int, d: Domain = DEFAULT_DOMAIN):
    """Hotspot rectangles (center +- 2 sigma) the generator will use."""
    kind, k, spread = _parse_distribution(dist)
    if kind != "clustered":
        return []
    cx, cy = _hotspot_centers(np.random.default_rng(seed), k, d)
    w, h = 2 * spread * d.width, 2 * spread * d.height
    return [(x - w, y - h, x + w, y + h) for x, y in zip(cx.tolist(), cy.tolist())]


def _hotspot_centers(rng, k, d):
    cx = rng.uniform(d.min_lon + 0.2 * d.width, d.max_lon - 0.2 * d.width, k)
    cy = rng.uniform(d.min_lat + 0.2 * d.height, d.max_lat - 0.2 * d.height, k)
    return cx, cy


def synth_points(n: int, dist: str, seed: int, d: Domain = DEFAULT_DOMAIN):
    """Deterministic point and value arrays behind synth_generate."""
    kind, k, spread = _parse_distribution(dist)
    rng = np.random.default_rng(seed)
    if kind == "uniform":
        lons = rng.uniform(d.min_lon, d.max_lon, n)
        lats = rng.uniform(d.min_lat, d.max_lat, n)
    else:
        cx, cy = _hotspot_centers(rng, k, d)
        which = rng.integers(0, k, n)
        lons = cx[which] + rng.normal(0.0, spread * d.width, n)
        lats = cy[which] + rng.normal(0.0, spread * d.height, n)
        for _ in range(64):
            bad = ~(
                (lons >= d.min_lon) & (lons <= d.max_lon) & (lats >= d.min_lat) & (lats <= d.max_lat)
            )
            if not bad.any():
                break
            m = int(bad.sum())
            w = rng.integers(0, k, m)
            lons[bad] = cx[w] + rng.normal(0.0, spread * d.width, m)
            lats[bad] = cy[w] + rng.normal(0.0, spread * d.height, m)
    fare = np.round(rng.lognormal(2.3, 0.55, n), 2)
    tip = np.round(rng.uniform(0.0, 12.0, n), 2)
    ts = rng.integers(1_690_000_000, 1_721_500_000, n, dtype=np.int64)
    return lons, lats, fare, tip, ts


def synth_generate(n: int, dist: str, seed: int, d: Domain = DEFAULT_DOMAIN, out=None) -> str | None:
    """Write a raw trip CSV; identical seeds give identical bytes."""
    lons, lats, fare, tip, ts = synth_points(n, dist, seed, d)
    sink = io.StringIO() if out is None else open(out, "w", newline="")
    try:
        writer = csv.writer(sink)
        writer.writerow(["lon", "lat", "fare", "tip", "ts"])
        for i in range(n):
            writer.writerow(
                [repr(float(lons[i])), repr(float(lats[i])), f"{fare[i]:.2f}", f"{tip[i]:.2f}", int(ts[i])]
            )
        if out is None:
            return sink.getvalue()
        return None
    finally:
        if out is not None:
            sink.close()
