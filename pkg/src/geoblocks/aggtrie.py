"""Query-driven aggregate cache.

Hot covering cells, scored from past queries, get their fold result
materialized into a compact trie region. Nodes are two u32 byte offsets
(first child block, aggregate record), children sit in blocks of four
contiguous nodes, and records follow the node area. Probing walks one
child step per path digit, so a cached cell costs a handful of loads
instead of a binary search plus an aggregate scan.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import _binio
from .cellgrid import ROOT_CELL, cell_range, children, contains, level, parent, truncate_cells
from .errors import BudgetTooSmall, CorruptRegion
from .geoblock import (
    AggSpec,
    GeoBlock,
    QueryResult,
    _assemble_result,
    _segmented,
    covering_intervals,
)
from .geometry import Covering, Polygon, cover_polygon
from .store import NUMERIC, Schema

NODE_BYTES = 8
CHILD_BLOCK_BYTES = 32

MISS = "miss"
NODE_NO_AGG = "node_no_agg"
HIT = "hit"

STATS_MAGIC = b"GBST"
STATS_VERSION = 1

_I64_MAX = np.iinfo(np.int64).max
_I64_MIN = np.iinfo(np.int64).min


class StatsTrie:
    """Hit counts per covering cell, the input to cache selection."""

    def __init__(self, hits: dict | None = None):
        self.hits: dict[int, int] = dict(hits) if hits else {}

    def record(self, cells):
        for c in cells:
            c = int(c)
            self.hits[c] = self.hits.get(c, 0) + 1

    def total(self) -> int:
        return sum(self.hits.values())


def record_hits(st: StatsTrie, covering: Covering, b: GeoBlock):
    """Count one hit per covering cell that survives the header check."""
    kept, _, _ = covering_intervals(b, covering)
    st.record(kept)


def save_stats(st: StatsTrie, path):
    w = _binio.Writer()
    w.u32(len(st.hits))
    for cell in sorted(st.hits):
        w.u64(cell)
        w.u64(st.hits[cell])
    _binio.write_file(path, STATS_MAGIC, STATS_VERSION, w)


def load_stats(path) -> StatsTrie:
    r = _binio.read_file(path, STATS_MAGIC, STATS_VERSION)
    return StatsTrie({r.u64(): r.u64() for _ in range(r.u32())})


@dataclass(frozen=True)
class CellScore:
    cell: int
    score: int
    level: int


def rank_cells(st: StatsTrie) -> list[CellScore]:
    """Cells by descending own-plus-parent hits; shallow then id breaks ties."""
    scored = []
    for cell, n in st.hits.items():
        lvl = level(cell)
        score = n + (st.hits.get(parent(cell), 0) if lvl > 0 else 0)
        scored.append(CellScore(cell, score, lvl))
    scored.sort(key=lambda cs: (-cs.score, cs.level, cs.cell))
    return scored


class _Node:
    __slots__ = ("kids", "agg_cell")

    def __init__(self):
        self.kids = [None, None, None, None]
        self.agg_cell = None

    def has_block(self) -> bool:
        return any(k is not None for k in self.kids)


def _record_size(schema: Schema) -> int:
    return 8 + 24 * len(schema.columns)


def _enclosing_cell(b: GeoBlock) -> int:
    """Deepest single cell holding every occupied cell of the block."""
    if b.header.aggregate_count == 0:
        return ROOT_CELL
    lo = np.array([b.header.min_cell], dtype=np.uint64)
    hi = np.array([b.header.max_cell], dtype=np.uint64)
    for lvl in range(b.header.block_level, -1, -1):
        a = truncate_cells(lo, lvl)[0]
        if a == truncate_cells(hi, lvl)[0]:
            return int(a)
    return ROOT_CELL


def _path_digits(cell: int, root_level: int, cell_level: int):
    return [(cell >> (62 - 2 * lvl)) & 3 for lvl in range(root_level, cell_level)]


class AggregateTrie:
    """Immutable encoded cache region plus probe bookkeeping."""

    def __init__(self, region: bytes, root_cell: int, budget_bytes: int,
                 schema: Schema, window: int = 1024):
        self.region = region
        self.root_cell = root_cell
        self.budget_bytes = int(budget_bytes)
        self.schema = schema
        self.root_level = level(root_cell)
        self.record_size = _record_size(schema)
        self.window: deque = deque(maxlen=window)
        self._u32 = np.frombuffer(region, dtype="<u4")
        self._u64 = np.frombuffer(region, dtype="<u8")
        self._i64 = np.frombuffer(region, dtype="<i8")
        self._f64 = np.frombuffer(region, dtype="<f8")
        lo, hi = cell_range(root_cell)
        self._root_lo = np.uint64(lo)
        self._root_hi = np.uint64(hi)
        self._index: tuple[np.ndarray, np.ndarray] | None = None

    def decode_record(self, off: int) -> dict:
        if off + self.record_size > len(self.region):
            raise CorruptRegion(f"aggregate offset {off} exceeds region")
        count = int(self._u64[off >> 3])
        cols = {}
        for j, (name, kind) in enumerate(self.schema.columns):
            base = off + 8 + 24 * j
            if kind == NUMERIC:
                lo, hi = self._f64[base >> 3], self._f64[(base + 8) >> 3]
            else:
                lo, hi = self._i64[base >> 3], self._i64[(base + 8) >> 3]
            cols[name] = {
                "min": lo.item(),
                "max": hi.item(),
                "sum": float(self._f64[(base + 16) >> 3]),
            }
        return {"count": count, "columns": cols}

    def walk(self):
        """Yield (node byte offset, cell id); validates bounds and acyclicity."""
        seen = set()
        stack = [(0, self.root_cell)]
        while stack:
            off, cell = stack.pop()
            if off in seen:
                raise CorruptRegion(f"node {off} reached twice")
            seen.add(off)
            yield off, cell
            fc = int(self._u32[off >> 2])
            if fc:
                if fc + CHILD_BLOCK_BYTES > len(self.region):
                    raise CorruptRegion(f"child block {fc} exceeds region")
                kid_cells = children(cell)
                for d in range(4):
                    kid_off = fc + NODE_BYTES * d
                    pair = self._u32[kid_off >> 2 : (kid_off >> 2) + 2]
                    if pair[0] or pair[1]:
                        stack.append((kid_off, kid_cells[d]))

    def cached_cells(self) -> int:
        return sum(1 for off, _ in self.walk() if self._u32[(off >> 2) + 1])

    def probe_index(self) -> tuple[np.ndarray, np.ndarray]:
        """Node cell ids sorted ascending plus their record offsets (0 = none).

        Decoded from the region on first use. Probing against this index is
        equivalent to walking the encoded trie: ids absent from it are
        misses, including unoccupied sibling slots inside materialized
        child blocks.
        """
        if self._index is None:
            ids, aggs = [], []
            for off, cell in self.walk():
                ag = int(self._u32[(off >> 2) + 1])
                if ag and ag + self.record_size > len(self.region):
                    raise CorruptRegion(f"aggregate offset {ag} exceeds region")
                ids.append(cell)
                aggs.append(ag)
            ids = np.array(ids, dtype=np.uint64)
            aggs = np.array(aggs, dtype=np.int64)
            order = np.argsort(ids)
            self._index = (ids[order], aggs[order])
        return self._index


def cache_stats(tr: AggregateTrie) -> dict:
    return {
        "cached_cells": tr.cached_cells(),
        "bytes_used": len(tr.region),
        "budget_bytes": tr.budget_bytes,
    }


def hit_rate(tr: AggregateTrie) -> float:
    if not tr.window:
        return 0.0
    return sum(tr.window) / len(tr.window)


def _cell_records(b: GeoBlock, cells: list[int]) -> list[bytes]:
    """Encoded select-equivalent aggregate record per cell."""
    if not cells:
        return []
    arr = np.array(cells, dtype=np.uint64)
    lsb = arr & (~arr + np.uint64(1))
    lo = arr - (lsb - np.uint64(1))
    hi = arr + (lsb - np.uint64(1))
    i0 = np.searchsorted(b.cells, lo, side="left")
    i1 = np.searchsorted(b.cells, hi, side="right")
    nonempty = i1 > i0
    counts = np.zeros(len(arr), dtype=np.uint64)
    if nonempty.any():
        counts[nonempty] = _segmented(b.counts, i0, i1, np.add, 0)
    per_col = {}
    for name, kind in b.header.schema.columns:
        neutral_hi = np.inf if kind == NUMERIC else _I64_MAX
        neutral_lo = -np.inf if kind == NUMERIC else _I64_MIN
        mins = np.full(len(arr), neutral_hi, dtype=b.col_mins[name].dtype)
        maxs = np.full(len(arr), neutral_lo, dtype=b.col_maxs[name].dtype)
        sums = np.zeros(len(arr), dtype=np.float64)
        if nonempty.any():
            mins[nonempty] = _segmented(b.col_mins[name], i0, i1, np.minimum, neutral_hi)
            maxs[nonempty] = _segmented(b.col_maxs[name], i0, i1, np.maximum, neutral_lo)
            sums[nonempty] = _segmented(b.col_sums[name], i0, i1, np.add, 0.0)
        per_col[name] = (mins, maxs, sums)
    records = []
    for i in range(len(arr)):
        parts = [struct.pack("<Q", int(counts[i]))]
        for name, kind in b.header.schema.columns:
            mins, maxs, sums = per_col[name]
            fmt = "<d" if kind == NUMERIC else "<q"
            parts.append(struct.pack(fmt, mins[i].item()))
            parts.append(struct.pack(fmt, maxs[i].item()))
            parts.append(struct.pack("<d", float(sums[i])))
        records.append(b"".join(parts))
    return records


def build_cache(b: GeoBlock, st: StatsTrie, budget_bytes: int) -> AggregateTrie:
    """Admit ranked cells into a fresh region until the budget stops fitting.

    A candidate pays for the missing child blocks on its path plus one
    aggregate record. Selection stops once 10 candidates in a row fail to
    fit. Cells deeper than the block level, outside the trie root, or
    already admitted are skipped without counting toward the stop.
    """
    budget_bytes = int(budget_bytes)
    if budget_bytes < CHILD_BLOCK_BYTES:
        raise BudgetTooSmall(f"budget {budget_bytes} below one child block ({CHILD_BLOCK_BYTES})")
    root_cell = _enclosing_cell(b)
    root_level = level(root_cell)
    rec_size = _record_size(b.header.schema)
    root = _Node()
    used = NODE_BYTES
    misses = 0
    for cs in rank_cells(st):
        if cs.level > b.header.block_level or cs.level < root_level:
            continue
        if not contains(root_cell, cs.cell):
            continue
        digits = _path_digits(cs.cell, root_level, cs.level)

        node = root
        new_blocks = 0
        for i, d in enumerate(digits):
            if node.kids[d] is None:
                remaining = len(digits) - i
                new_blocks = (0 if node.has_block() else 1) + (remaining - 1)
                node = None
                break
            node = node.kids[d]
        if node is not None and node.agg_cell is not None:
            continue
        cost = new_blocks * CHILD_BLOCK_BYTES + rec_size
        if used + cost > budget_bytes:
            misses += 1
            if misses >= 10:
                break
            continue

        node = root
        for d in digits:
            if node.kids[d] is None:
                node.kids[d] = _Node()
            node = node.kids[d]
        node.agg_cell = cs.cell
        used += cost
        misses = 0

    region = _encode(root, root_cell, b, rec_size)
    assert len(region) == used
    return AggregateTrie(region, root_cell, budget_bytes, b.header.schema)


def _encode(root: _Node, root_cell: int, b: GeoBlock, rec_size: int) -> bytes:
    """Lay out nodes (preorder child blocks) then aggregate records."""
    placed: list[tuple[_Node, int]] = []
    agg_nodes: list[_Node] = []
    block_offs: dict[int, int] = {}
    next_off = NODE_BYTES

    def visit(node: _Node, off: int):
        nonlocal next_off
        placed.append((node, off))
        if node.agg_cell is not None:
            agg_nodes.append(node)
        if node.has_block():
            block = next_off
            block_offs[id(node)] = block
            next_off += CHILD_BLOCK_BYTES
            for slot in range(4):
                kid = node.kids[slot]
                if kid is not None:
                    visit(kid, block + NODE_BYTES * slot)

    visit(root, 0)
    nodes_bytes = next_off
    agg_offs = {id(n): nodes_bytes + i * rec_size for i, n in enumerate(agg_nodes)}
    records = _cell_records(b, [n.agg_cell for n in agg_nodes])

    out = bytearray(nodes_bytes + len(records) * rec_size)
    for node, off in placed:
        struct.pack_into("<II", out, off, block_offs.get(id(node), 0), agg_offs.get(id(node), 0))
    for n, rec in zip(agg_nodes, records):
        off = agg_offs[id(n)]
        out[off : off + rec_size] = rec
    return bytes(out)


def probe(tr: AggregateTrie, cell: int):
    """Walk one child step per digit: (outcome, payload)."""
    lvl = level(cell)
    if lvl < tr.root_level or not contains(tr.root_cell, cell):
        tr.window.append(0)
        return MISS, None
    off = 0
    for d in _path_digits(cell, tr.root_level, lvl):
        fc = int(tr._u32[off >> 2])
        if fc == 0:
            tr.window.append(0)
            return MISS, None
        if fc + CHILD_BLOCK_BYTES > len(tr.region):
            raise CorruptRegion(f"child block {fc} exceeds region")
        off = fc + NODE_BYTES * d
    agg = int(tr._u32[(off >> 2) + 1])
    if agg:
        tr.window.append(1)
        return HIT, tr.decode_record(agg)
    tr.window.append(0)
    # An all-zero pair is an unoccupied sibling slot, not a node. The root
    # is the one node that exists regardless.
    if off == 0 or tr._u32[off >> 2]:
        return NODE_NO_AGG, off
    return MISS, None


def _cell_levels(cells: np.ndarray) -> np.ndarray:
    lsb = cells & (~cells + np.uint64(1))
    low = np.log2(lsb.astype(np.float64)).astype(np.int64)
    return (63 - low) >> 1


def batch_probe(tr: AggregateTrie, cells: np.ndarray):
    """Vectorized probe: outcome codes (0 miss, 1 node-no-agg, 2 hit) and
    the record byte offset for each hit.

    One searchsorted against the decoded node index instead of a per-level
    walk; probing is on the hot query path and the walk cost dominated
    small coverings."""
    n = len(cells)
    if n == 0:
        return np.zeros(0, dtype=np.uint8), np.zeros(0, dtype=np.int64)
    node_ids, node_aggs = tr.probe_index()
    pos = np.searchsorted(node_ids, cells).clip(max=len(node_ids) - 1)
    found = node_ids[pos] == cells
    ag = np.where(found, node_aggs[pos], 0)
    out = np.where(ag != 0, 2, np.where(found, 1, 0)).astype(np.uint8)
    agg_offs = np.where(ag != 0, ag, 0)
    tr.window.extend((out == 2).view(np.int8).tolist())
    return out, agg_offs


def _fold_records(tr: AggregateTrie, offs: np.ndarray, names):
    """Combine cached records: total count plus per-column min/max/sum."""
    counts = tr._u64[offs >> 3].astype(np.int64)
    total = int(counts.sum())
    used = counts > 0
    stats = {}
    for name in names:
        j = tr.schema.names.index(name)
        kind = tr.schema.kind(name)
        base = offs + 8 + 24 * j
        view = tr._f64 if kind == NUMERIC else tr._i64
        mins = view[base >> 3][used]
        maxs = view[(base + 8) >> 3][used]
        sums = tr._f64[(base + 16) >> 3]
        if total == 0:
            stats[name] = None
        else:
            stats[name] = {
                "min": mins.min().item(),
                "max": maxs.max().item(),
                "sum": float(sums.sum()),
            }
    return total, stats


def _children_of(cells: np.ndarray) -> np.ndarray:
    """Four direct children per input cell, concatenated in slot order."""
    lsb = cells & (~cells + np.uint64(1))
    base = (cells - lsb) | (lsb >> np.uint64(2))
    step = lsb >> np.uint64(1)
    return (base[:, None] + np.arange(4, dtype=np.uint64)[None, :] * step[:, None]).ravel()


def adapted_select_with_covering(
    b: GeoBlock,
    tr: AggregateTrie,
    covering: Covering,
    spec: AggSpec,
    st: StatsTrie | None = None,
) -> QueryResult:
    spec.validate(b.header.schema)
    kept, _, _ = covering_intervals(b, covering)
    if st is not None:
        st.record(kept)
    names = list(spec.columns().keys())

    outcomes, agg_offs = batch_probe(tr, kept)
    probes = len(kept)
    levels = _cell_levels(kept) if len(kept) else np.empty(0, dtype=np.int64)

    hit_offs = [agg_offs[outcomes == 2]]
    scan_cells = [kept[outcomes == 0]]

    nn = (outcomes == 1) & (levels < b.header.block_level)
    scan_cells.append(kept[(outcomes == 1) & ~nn])
    if nn.any():
        kids = _children_of(kept[nn])
        k_out, k_offs = batch_probe(tr, kids)
        probes += len(kids)
        hit_offs.append(k_offs[k_out == 2])
        scan_cells.append(kids[k_out != 2])

    offs = np.concatenate(hit_offs) if hit_offs else np.empty(0, dtype=np.int64)
    hits = len(offs)
    cached_count, cached_stats = (0, {n: None for n in names})
    if hits:
        cached_count, cached_stats = _fold_records(tr, offs, names)

    scan = np.concatenate(scan_cells) if scan_cells else np.empty(0, dtype=np.uint64)
    scan_count, visited, scan_stats = 0, 0, {n: None for n in names}
    if len(scan):
        lsb = scan & (~scan + np.uint64(1))
        los = scan - (lsb - np.uint64(1))
        his = scan + (lsb - np.uint64(1))
        from .geoblock import _fold_intervals

        scan_count, visited, scan_stats = _fold_intervals(b, los, his, names)

    count = cached_count + scan_count
    stats = {}
    for name in names:
        parts = [s for s in (cached_stats.get(name), scan_stats.get(name)) if s]
        if count == 0 or not parts:
            stats[name] = None
        else:
            stats[name] = {
                "min": min(p["min"] for p in parts),
                "max": max(p["max"] for p in parts),
                "sum": sum(p["sum"] for p in parts),
            }
    return _assemble_result(
        spec, count, stats, visited, covering.epsilon_m,
        cache_hits=hits, cache_probes=probes,
    )


def adapted_select(
    b: GeoBlock,
    tr: AggregateTrie,
    poly: Polygon,
    spec: AggSpec,
    max_cells: int = 256,
    st: StatsTrie | None = None,
) -> QueryResult:
    """Covering-equivalent of the plain select, served from cache where
    possible: hits fold a stored record, a node without a record tries its
    four direct children, anything else falls back to the aggregate scan."""
    covering = cover_polygon(poly, b.header.block_level, max_cells, b.header.domain)
    return adapted_select_with_covering(b, tr, covering, spec, st=st)
