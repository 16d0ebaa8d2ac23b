"""HTTP query service over loaded blocks.

One process serves any number of named blocks. Queries run concurrently;
cache refreshes take a per-block admin lock and swap the finished trie in
atomically, so readers never see a half-built cache.
"""

from __future__ import annotations

import logging
import os
import threading
import time

from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel

from .aggtrie import (
    BudgetTooSmall,
    StatsTrie,
    adapted_select_with_covering,
    build_cache,
    cache_stats,
    hit_rate,
    record_hits,
)
from .cellgrid import cell_rect
from .geoblock import (
    AggSpec,
    GeoBlock,
    count_with_covering,
    load_block,
    select_with_covering,
)
from .errors import InvalidPolygon, UnknownColumn
from .geometry import cover_polygon, polygon_from_geojson

log = logging.getLogger("geoblocks.service")

MAX_COVER_CELLS = 65536


class BlockState:
    """A served block plus its runtime bookkeeping."""

    def __init__(self, name: str, block: GeoBlock):
        self.name = name
        self.block = block
        self.stats = StatsTrie()
        self.admin = threading.Lock()
        self.query_count = 0


class QueryBody(BaseModel):
    block: str
    polygon: dict
    aggs: str = "count"
    count_only: bool = False
    use_cache: bool = True
    max_cells: int = 256
    debug_covering: bool = False


class RefreshBody(BaseModel):
    block: str
    budget_pct: float


def _totals_json(header) -> dict:
    """Header totals with empty-block sentinels replaced by null."""
    out = {}
    empty = header.total_count == 0
    for name, stats in header.totals.items():
        out[name] = {
            "min": None if empty else stats["min"],
            "max": None if empty else stats["max"],
            "sum": stats["sum"],
        }
    return out


def create_app(blocks: dict[str, GeoBlock | str]) -> FastAPI:
    """Build the API over the given blocks (values are blocks or file paths)."""
    level = os.environ.get("GEOBLOCKS_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))

    states: dict[str, BlockState] = {}
    for name, src in blocks.items():
        blk = src if isinstance(src, GeoBlock) else load_block(src)
        states[name] = BlockState(name, blk)
        log.info("serving block %s: level=%d aggregates=%d rows=%d", name,
                 blk.header.block_level, blk.header.aggregate_count,
                 blk.header.total_count)

    app = FastAPI(title="geoblocks")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )
    app.state.blocks = states

    def _state(name: str) -> BlockState:
        bs = states.get(name)
        if bs is None:
            raise HTTPException(status_code=404, detail=f"unknown block {name!r}")
        return bs

    @app.get("/blocks")
    def list_blocks():
        out = []
        for name, bs in states.items():
            h = bs.block.header
            out.append({
                "name": name,
                "block_level": h.block_level,
                "key_level": h.key_level,
                "domain": [h.domain.min_lon, h.domain.min_lat,
                           h.domain.max_lon, h.domain.max_lat],
                "filter": h.filter.describe(),
                "columns": [{"name": n, "kind": k} for n, k in h.schema.columns],
                "total_count": h.total_count,
                "aggregate_count": h.aggregate_count,
                "totals": _totals_json(h),
                "cached": bs.block.cache is not None,
            })
        return {"blocks": out}

    @app.post("/query")
    def query(body: QueryBody):
        bs = _state(body.block)
        t0 = time.monotonic_ns()
        try:
            poly = polygon_from_geojson(body.polygon)
            spec = AggSpec.parse(body.aggs)
            spec.validate(bs.block.header.schema)
        except (InvalidPolygon, UnknownColumn, ValueError) as e:
            raise HTTPException(status_code=400, detail=str(e))

        h = bs.block.header
        max_cells = max(4, min(int(body.max_cells), MAX_COVER_CELLS))
        covering = cover_polygon(poly, h.block_level, max_cells=max_cells, d=h.domain)

        if body.count_only:
            n = count_with_covering(bs.block, covering)
            out = {
                "count": n,
                "columns": {},
                "cells_visited": 0,
                "cache_hits": 0,
                "cache_probes": 0,
                "epsilon_m": covering.epsilon_m,
            }
        else:
            trie = bs.block.cache
            if body.use_cache and trie is not None:
                res = adapted_select_with_covering(bs.block, trie, covering, spec,
                                                   st=bs.stats)
            else:
                res = select_with_covering(bs.block, covering, spec)
                record_hits(bs.stats, covering, bs.block)
            out = res.to_dict()

        bs.query_count += 1
        out["block"] = body.block
        out["latency_us"] = (time.monotonic_ns() - t0) // 1000
        if body.debug_covering:
            out["covering"] = {
                "max_level": covering.max_level,
                "epsilon_m": covering.epsilon_m,
                "cells": [f"{c:016x}" for c in covering.cells],
                "rects": [list(cell_rect(c, h.domain)) for c in covering.cells],
            }
        return out

    @app.post("/admin/refresh-cache")
    def refresh_cache(body: RefreshBody):
        bs = _state(body.block)
        if body.budget_pct <= 0:
            raise HTTPException(status_code=400, detail="budget_pct must be positive")
        if not bs.admin.acquire(blocking=False):
            raise HTTPException(
                status_code=409,
                detail=f"a refresh is already running for block {body.block!r}")
        try:
            budget = int(bs.block.aggregate_array_bytes() * body.budget_pct / 100.0)
            try:
                trie = build_cache(bs.block, bs.stats, budget)
            except BudgetTooSmall as e:
                raise HTTPException(status_code=400, detail=str(e))
            bs.block.cache = trie
            log.info("refreshed cache for %s: budget=%d used=%d cells=%d",
                     body.block, budget, len(trie.region), trie.cached_cells())
            return {"block": body.block, "budget_bytes": budget, **cache_stats(trie)}
        finally:
            bs.admin.release()

    @app.get("/stats/{name}")
    def block_stats(name: str):
        bs = _state(name)
        trie = bs.block.cache
        out = {
            "block": name,
            "query_count": bs.query_count,
            "recorded_cells": len(bs.stats.hits),
            "recorded_hits": bs.stats.total(),
            "cached": trie is not None,
        }
        if trie is not None:
            out.update(cache_stats(trie))
            out["hit_rate"] = hit_rate(trie)
        return out

    return app
