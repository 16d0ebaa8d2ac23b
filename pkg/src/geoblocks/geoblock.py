"""Pre-aggregated blocks over the cell grid and the queries that use them.

A block holds one fixed-size cell aggregate per occupied cell at its build
level, sorted by cell id. Polygon queries turn a covering into id intervals
and combine whole aggregates, never raw rows, so work scales with occupied
cells instead of points.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import _binio
from .cellgrid import MAX_LEVEL, Domain, truncate_cells
from .errors import (
    FilterViolation,
    LevelOutOfRange,
    RequiresRebuild,
    UnknownColumn,
)
from .geometry import Covering, Polygon, cover_polygon
from .store import (
    _CODE_KIND,
    _KIND_CODE,
    _KIND_DTYPE,
    NUMERIC,
    TEMPORAL,
    FilterPredicate,
    PointTable,
    Schema,
    apply_filter,
)
from .store_report import BuildReport

BLOCK_MAGIC = b"GBLK"
BLOCK_VERSION = 1

AGG_FUNCTIONS = ("count", "sum", "min", "max", "avg")

_I64_MAX = np.iinfo(np.int64).max
_I64_MIN = np.iinfo(np.int64).min

_FILTER_OPS = ("<", "<=", "=", ">=", ">", "!=")


@dataclass(frozen=True)
class AggSpec:
    """Requested aggregates as (function, column) pairs; count has no column."""

    entries: tuple[tuple[str, str | None], ...]

    @classmethod
    def parse(cls, text: str) -> "AggSpec":
        entries = []
        for part in text.split(","):
            fn, _, col = part.strip().partition(":")
            entries.append((fn.strip(), col.strip() or None))
        return cls(tuple(entries))

    def validate(self, schema: Schema):
        for fn, col in self.entries:
            if fn not in AGG_FUNCTIONS:
                raise ValueError(f"unknown aggregate function {fn!r}")
            if fn == "count":
                if col is not None:
                    raise ValueError("count takes no column")
            else:
                if col is None:
                    raise ValueError(f"{fn} needs a column")
                if col not in schema.names:
                    raise UnknownColumn(f"no column {col!r} in block schema")

    def columns(self) -> dict[str, set]:
        """Requested per-column function sets, in spec order."""
        out: dict[str, set] = {}
        for fn, col in self.entries:
            if col is not None:
                out.setdefault(col, set()).add(fn)
        return out

    def describe(self) -> str:
        return ",".join(fn if col is None else f"{fn}:{col}" for fn, col in self.entries)


@dataclass
class QueryResult:
    count: int
    columns: dict[str, dict]
    cells_visited: int
    cache_hits: int = 0
    cache_probes: int = 0
    epsilon_m: float = 0.0

    def to_dict(self) -> dict:
        cols = {
            name: {fn: v for fn, v in stats.items() if v is not None}
            for name, stats in self.columns.items()
        }
        return {
            "count": self.count,
            "columns": cols,
            "cells_visited": self.cells_visited,
            "cache_hits": self.cache_hits,
            "cache_probes": self.cache_probes,
            "epsilon_m": self.epsilon_m,
        }


@dataclass
class GlobalHeader:
    block_level: int
    key_level: int
    domain: Domain
    schema: Schema
    filter: FilterPredicate
    min_cell: int
    max_cell: int
    total_count: int
    totals: dict
    aggregate_count: int
    prefix_valid: bool = True


class GeoBlock:
    """Immutable cell aggregates; mutation APIs return a new block."""

    def __init__(self, header, cells, offsets, counts, min_keys, max_keys,
                 col_mins, col_maxs, col_sums, base=None, cache=None):
        self.header = header
        self.cells = cells
        self.offsets = offsets
        self.counts = counts
        self.min_keys = min_keys
        self.max_keys = max_keys
        self.col_mins = col_mins
        self.col_maxs = col_maxs
        self.col_sums = col_sums
        self.base = base
        self.cache = cache
        self.build_report: BuildReport | None = None

    def aggregate_array_bytes(self) -> int:
        """Bytes of the per-cell aggregate arrays, the cache budget baseline."""
        ncols = len(self.header.schema.columns)
        return int(self.header.aggregate_count) * (40 + 24 * ncols)


def _column_totals(schema, col_mins, col_maxs, col_sums):
    totals = {}
    for name, kind in schema.columns:
        if len(col_sums[name]) == 0:
            lo, hi = (np.inf, -np.inf) if kind == NUMERIC else (_I64_MAX, _I64_MIN)
            totals[name] = {"min": lo, "max": hi, "sum": 0.0}
        else:
            totals[name] = {
                "min": col_mins[name].min().item(),
                "max": col_maxs[name].max().item(),
                "sum": float(col_sums[name].sum()),
            }
    return totals


def build(t: PointTable, f: FilterPredicate, block_level: int) -> GeoBlock:
    """Aggregate the filtered rows of a key-sorted table at block_level."""
    if not 0 <= block_level <= t.key_level:
        raise LevelOutOfRange(f"block level {block_level} not in [0, {t.key_level}]")
    t0 = time.perf_counter()
    mask = apply_filter(t, f)
    keys_f = t.keys[mask]
    filter_seconds = time.perf_counter() - t0

    t1 = time.perf_counter()
    trunc = truncate_cells(keys_f, block_level)
    if len(trunc):
        starts = np.concatenate([[0], np.flatnonzero(trunc[1:] != trunc[:-1]) + 1])
    else:
        starts = np.empty(0, dtype=np.int64)
    cells = trunc[starts] if len(trunc) else np.empty(0, dtype=np.uint64)
    offsets = starts.astype(np.uint64)
    bounds = np.append(starts, len(trunc))
    counts = np.diff(bounds).astype(np.uint64)
    min_keys = keys_f[starts] if len(trunc) else np.empty(0, dtype=np.uint64)
    max_keys = keys_f[bounds[1:] - 1] if len(trunc) else np.empty(0, dtype=np.uint64)

    col_mins, col_maxs, col_sums = {}, {}, {}
    for name, kind in t.schema.columns:
        vals = t.columns[name][mask]
        if len(vals):
            col_mins[name] = np.minimum.reduceat(vals, starts)
            col_maxs[name] = np.maximum.reduceat(vals, starts)
            col_sums[name] = np.add.reduceat(vals.astype(np.float64), starts)
        else:
            col_mins[name] = np.empty(0, dtype=vals.dtype)
            col_maxs[name] = np.empty(0, dtype=vals.dtype)
            col_sums[name] = np.empty(0, dtype=np.float64)
    aggregate_seconds = time.perf_counter() - t1

    header = GlobalHeader(
        block_level=block_level,
        key_level=t.key_level,
        domain=t.domain,
        schema=t.schema,
        filter=f,
        min_cell=int(cells[0]) if len(cells) else 0,
        max_cell=int(cells[-1]) if len(cells) else 0,
        total_count=int(len(keys_f)),
        totals=_column_totals(t.schema, col_mins, col_maxs, col_sums),
        aggregate_count=len(cells),
    )
    b = GeoBlock(header, cells, offsets, counts, min_keys, max_keys,
                 col_mins, col_maxs, col_sums, base=t)
    b.build_report = BuildReport(
        rows_in=t.n,
        rows_kept=int(len(keys_f)),
        selectivity=float(len(keys_f) / t.n) if t.n else 0.0,
        aggregate_count=len(cells),
        filter_seconds=filter_seconds,
        aggregate_seconds=aggregate_seconds,
    )
    return b


def covering_intervals(b: GeoBlock, covering: Covering):
    """Covering cells that survive the header range check, with the
    block-level id interval each one spans.

    Interval endpoints only; the cells in between are never materialized.
    """
    if b.header.aggregate_count == 0 or not covering.cells:
        e = np.empty(0, dtype=np.uint64)
        return e, e, e
    cells = np.array(covering.cells, dtype=np.uint64)
    lsb = cells & (~cells + np.uint64(1))
    lo = cells - (lsb - np.uint64(1))
    hi = cells + (lsb - np.uint64(1))
    sent = np.uint64(1 << (63 - 2 * b.header.block_level))
    firsts = lo + sent - np.uint64(1)
    lasts = hi - sent + np.uint64(1)
    keep = (lasts >= np.uint64(b.header.min_cell)) & (firsts <= np.uint64(b.header.max_cell))
    return cells[keep], firsts[keep], lasts[keep]


def _segmented(values: np.ndarray, i0: np.ndarray, i1: np.ndarray, ufunc, neutral):
    """ufunc.reduceat over [i0, i1) segments; only non-empty segments returned."""
    keep = i1 > i0
    if not keep.any():
        return np.empty(0, dtype=values.dtype)
    pairs = np.empty(2 * int(keep.sum()), dtype=np.int64)
    pairs[0::2] = i0[keep]
    pairs[1::2] = i1[keep]
    ext = np.append(values, values.dtype.type(neutral))
    return ufunc.reduceat(ext, pairs)[0::2]


def _fold_intervals(b: GeoBlock, firsts, lasts, wanted_columns):
    """Combine whole aggregates over sorted id intervals.

    Returns (count, cells_visited, per-column {min,max,sum}).
    """
    if len(firsts) == 0:
        return 0, 0, {name: None for name in wanted_columns}
    i0 = np.searchsorted(b.cells, firsts, side="left")
    i1 = np.searchsorted(b.cells, lasts, side="right")
    visited = int((i1 - i0).sum())
    count = int(_segmented(b.counts, i0, i1, np.add, 0).sum()) if visited else 0
    stats = {}
    for name in wanted_columns:
        if count == 0:
            stats[name] = None
            continue
        kind = b.header.schema.kind(name)
        neutral_hi = np.inf if kind == NUMERIC else _I64_MAX
        neutral_lo = -np.inf if kind == NUMERIC else _I64_MIN
        mins = _segmented(b.col_mins[name], i0, i1, np.minimum, neutral_hi)
        maxs = _segmented(b.col_maxs[name], i0, i1, np.maximum, neutral_lo)
        sums = _segmented(b.col_sums[name], i0, i1, np.add, 0.0)
        stats[name] = {
            "min": mins.min().item(),
            "max": maxs.max().item(),
            "sum": float(sums.sum()),
        }
    return count, visited, stats


def _assemble_result(spec: AggSpec, count, stats, visited, epsilon_m,
                     cache_hits=0, cache_probes=0) -> QueryResult:
    columns = {}
    for name, fns in spec.columns().items():
        st = stats.get(name)
        entry = {}
        if "min" in fns:
            entry["min"] = st["min"] if st else None
        if "max" in fns:
            entry["max"] = st["max"] if st else None
        if "sum" in fns:
            entry["sum"] = st["sum"] if st else 0.0
        if "avg" in fns:
            entry["avg"] = (st["sum"] / count) if (st and count > 0) else None
        columns[name] = entry
    return QueryResult(
        count=count,
        columns=columns,
        cells_visited=visited,
        cache_hits=cache_hits,
        cache_probes=cache_probes,
        epsilon_m=epsilon_m,
    )


def select_with_covering(b: GeoBlock, covering: Covering, spec: AggSpec) -> QueryResult:
    spec.validate(b.header.schema)
    _, firsts, lasts = covering_intervals(b, covering)
    count, visited, stats = _fold_intervals(b, firsts, lasts, spec.columns().keys())
    return _assemble_result(spec, count, stats, visited, covering.epsilon_m)


def select_query(b: GeoBlock, poly: Polygon, spec: AggSpec, max_cells: int = 256) -> QueryResult:
    """Aggregate everything inside an error-bounded covering of the polygon."""
    covering = cover_polygon(poly, b.header.block_level, max_cells, b.header.domain)
    return select_with_covering(b, covering, spec)


def count_with_covering(b: GeoBlock, covering: Covering) -> int:
    _, firsts, lasts = covering_intervals(b, covering)
    if len(firsts) == 0:
        return 0
    i0 = np.searchsorted(b.cells, firsts, side="left")
    i1 = np.searchsorted(b.cells, lasts, side="right")
    keep = i1 > i0
    if not keep.any():
        return 0
    if not b.header.prefix_valid:
        return int(_segmented(b.counts, i0, i1, np.add, 0).sum())
    last_idx = i1[keep] - 1
    first_idx = i0[keep]
    spans = b.offsets[last_idx] + b.counts[last_idx] - b.offsets[first_idx]
    return int(spans.sum())


def count_query(b: GeoBlock, poly: Polygon, max_cells: int = 256) -> int:
    """Tuple count over the covering via the offset prefix sums.

    Needs one binary search pair per covering cell and no aggregate scan.
    Falls back to summing per-cell counts while offsets are stale after
    appends. Never consults the cache.
    """
    covering = cover_polygon(poly, b.header.block_level, max_cells, b.header.domain)
    return count_with_covering(b, covering)


def coarsen(b: GeoBlock, new_level: int) -> GeoBlock:
    """Merge aggregate runs to a shallower level without touching base rows."""
    if not 0 <= new_level <= b.header.block_level:
        raise LevelOutOfRange(f"new level {new_level} not in [0, {b.header.block_level}]")
    trunc = truncate_cells(b.cells, new_level)
    if len(trunc):
        starts = np.concatenate([[0], np.flatnonzero(trunc[1:] != trunc[:-1]) + 1])
    else:
        starts = np.empty(0, dtype=np.int64)
    bounds = np.append(starts, len(trunc))
    cells = trunc[starts] if len(trunc) else np.empty(0, dtype=np.uint64)
    offsets = b.offsets[starts] if len(trunc) else np.empty(0, dtype=np.uint64)
    counts = (
        np.add.reduceat(b.counts, starts) if len(trunc) else np.empty(0, dtype=np.uint64)
    )
    min_keys = b.min_keys[starts] if len(trunc) else np.empty(0, dtype=np.uint64)
    max_keys = b.max_keys[bounds[1:] - 1] if len(trunc) else np.empty(0, dtype=np.uint64)
    col_mins, col_maxs, col_sums = {}, {}, {}
    for name, _ in b.header.schema.columns:
        if len(trunc):
            col_mins[name] = np.minimum.reduceat(b.col_mins[name], starts)
            col_maxs[name] = np.maximum.reduceat(b.col_maxs[name], starts)
            col_sums[name] = np.add.reduceat(b.col_sums[name], starts)
        else:
            col_mins[name] = b.col_mins[name].copy()
            col_maxs[name] = b.col_maxs[name].copy()
            col_sums[name] = b.col_sums[name].copy()

    header = GlobalHeader(
        block_level=new_level,
        key_level=b.header.key_level,
        domain=b.header.domain,
        schema=b.header.schema,
        filter=b.header.filter,
        min_cell=int(cells[0]) if len(cells) else 0,
        max_cell=int(cells[-1]) if len(cells) else 0,
        total_count=b.header.total_count,
        totals=_column_totals(b.header.schema, col_mins, col_maxs, col_sums),
        aggregate_count=len(cells),
        prefix_valid=b.header.prefix_valid,
    )
    return GeoBlock(header, cells, offsets, counts, min_keys, max_keys,
                    col_mins, col_maxs, col_sums, base=b.base)


def append_batch(b: GeoBlock, rows: PointTable) -> GeoBlock:
    """Fold new rows into existing cell aggregates, leaving offsets stale.

    Rows landing in cells the block has never seen raise RequiresRebuild with
    the offending cell set; nothing is applied partially. Any successful
    append drops the cache region.
    """
    if rows.schema.describe() != b.header.schema.describe():
        raise ValueError("appended rows use a different schema")
    if rows.domain != b.header.domain:
        raise ValueError("appended rows use a different domain")
    mask = apply_filter(rows, b.header.filter)
    if not mask.all():
        raise FilterViolation(f"{int((~mask).sum())} appended rows fail {b.header.filter.describe()!r}")
    if rows.n == 0:
        return b

    trunc = truncate_cells(rows.keys, b.header.block_level)
    starts = np.concatenate([[0], np.flatnonzero(trunc[1:] != trunc[:-1]) + 1])
    bounds = np.append(starts, len(trunc))
    run_cells = trunc[starts]
    if len(b.cells) == 0:
        raise RequiresRebuild(int(c) for c in run_cells)
    idx = np.searchsorted(b.cells, run_cells, side="left")
    present = (idx < len(b.cells)) & (b.cells[idx.clip(max=len(b.cells) - 1)] == run_cells)
    if not present.all():
        raise RequiresRebuild(int(c) for c in run_cells[~present])

    counts = b.counts.copy()
    min_keys = b.min_keys.copy()
    max_keys = b.max_keys.copy()
    run_counts = np.diff(bounds).astype(np.uint64)
    counts[idx] += run_counts
    min_keys[idx] = np.minimum(min_keys[idx], rows.keys[starts])
    max_keys[idx] = np.maximum(max_keys[idx], rows.keys[bounds[1:] - 1])

    col_mins, col_maxs, col_sums = {}, {}, {}
    for name, _ in b.header.schema.columns:
        vals = rows.columns[name]
        mins = b.col_mins[name].copy()
        maxs = b.col_maxs[name].copy()
        sums = b.col_sums[name].copy()
        mins[idx] = np.minimum(mins[idx], np.minimum.reduceat(vals, starts))
        maxs[idx] = np.maximum(maxs[idx], np.maximum.reduceat(vals, starts))
        sums[idx] += np.add.reduceat(vals.astype(np.float64), starts)
        col_mins[name], col_maxs[name], col_sums[name] = mins, maxs, sums

    header = GlobalHeader(
        block_level=b.header.block_level,
        key_level=b.header.key_level,
        domain=b.header.domain,
        schema=b.header.schema,
        filter=b.header.filter,
        min_cell=b.header.min_cell,
        max_cell=b.header.max_cell,
        total_count=b.header.total_count + rows.n,
        totals=_column_totals(b.header.schema, col_mins, col_maxs, col_sums),
        aggregate_count=b.header.aggregate_count,
        prefix_valid=False,
    )
    return GeoBlock(header, b.cells, b.offsets, counts, min_keys, max_keys,
                    col_mins, col_maxs, col_sums, base=b.base)


def save_block(b: GeoBlock, path):
    w = _binio.Writer()
    h = b.header
    w.u8(h.block_level)
    w.u8(1 if h.prefix_valid else 0)
    w.u8(h.key_level)
    for v in (h.domain.min_lon, h.domain.min_lat, h.domain.max_lon, h.domain.max_lat):
        w.f64(v)
    w.u16(len(h.schema.columns))
    for name, kind in h.schema.columns:
        w.text(name)
        w.u8(_KIND_CODE[kind])
    w.u16(len(h.filter.conjuncts))
    for col, op, value in h.filter.conjuncts:
        w.text(col)
        w.u8(_FILTER_OPS.index(op))
        w.f64(value)
    w.u64(h.min_cell)
    w.u64(h.max_cell)
    w.u64(h.total_count)
    w.u64(h.aggregate_count)
    for name, kind in h.schema.columns:
        tot = h.totals[name]
        if kind == TEMPORAL:
            w.i64(int(tot["min"]))
            w.i64(int(tot["max"]))
        else:
            w.f64(float(tot["min"]))
            w.f64(float(tot["max"]))
        w.f64(float(tot["sum"]))
    for arr in (b.cells, b.offsets, b.counts, b.min_keys, b.max_keys):
        w.array(arr)
    for name, _ in h.schema.columns:
        w.array(b.col_mins[name])
        w.array(b.col_maxs[name])
        w.array(b.col_sums[name])
    if b.cache is not None:
        w.u8(1)
        w.u64(b.cache.root_cell)
        w.u64(b.cache.budget_bytes)
        w.u32(len(b.cache.region))
        w.raw(b.cache.region)
    else:
        w.u8(0)
    _binio.write_file(path, BLOCK_MAGIC, BLOCK_VERSION, w)


def load_block(path) -> GeoBlock:
    r = _binio.read_file(path, BLOCK_MAGIC, BLOCK_VERSION)
    block_level = r.u8()
    prefix_valid = bool(r.u8())
    key_level = r.u8()
    domain = Domain(r.f64(), r.f64(), r.f64(), r.f64())
    schema = Schema(tuple((r.text(), _CODE_KIND[r.u8()]) for _ in range(r.u16())))
    conjuncts = tuple((r.text(), _FILTER_OPS[r.u8()], r.f64()) for _ in range(r.u16()))
    filt = FilterPredicate(conjuncts)
    min_cell, max_cell = r.u64(), r.u64()
    total_count, agg_count = r.u64(), r.u64()
    totals = {}
    for name, kind in schema.columns:
        if kind == TEMPORAL:
            lo, hi = r.i64(), r.i64()
        else:
            lo, hi = r.f64(), r.f64()
        totals[name] = {"min": lo, "max": hi, "sum": r.f64()}
    cells = r.array(np.uint64, agg_count)
    offsets = r.array(np.uint64, agg_count)
    counts = r.array(np.uint64, agg_count)
    min_keys = r.array(np.uint64, agg_count)
    max_keys = r.array(np.uint64, agg_count)
    col_mins, col_maxs, col_sums = {}, {}, {}
    for name, kind in schema.columns:
        col_mins[name] = r.array(_KIND_DTYPE[kind], agg_count)
        col_maxs[name] = r.array(_KIND_DTYPE[kind], agg_count)
        col_sums[name] = r.array(np.float64, agg_count)
    cache = None
    if r.u8():
        from .aggtrie import AggregateTrie

        root_cell = r.u64()
        budget = r.u64()
        region = r.raw(r.u32())
        cache = AggregateTrie(region=region, root_cell=root_cell, budget_bytes=budget, schema=schema)

    header = GlobalHeader(
        block_level=block_level,
        key_level=key_level,
        domain=domain,
        schema=schema,
        filter=filt,
        min_cell=min_cell,
        max_cell=max_cell,
        total_count=total_count,
        totals=totals,
        aggregate_count=int(agg_count),
        prefix_valid=prefix_valid,
    )
    return GeoBlock(header, cells, offsets, counts, min_keys, max_keys,
                    col_mins, col_maxs, col_sums, cache=cache)
