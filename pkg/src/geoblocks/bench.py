"""Workload replay and build-amortization benchmarks.

replay() runs a named polygon workload against one block in cached or
uncached mode and reports walls, hit rates and optional error statistics.
amortization_bench() measures when sorting the raw rows once pays for
itself across repeated filtered builds.
"""

from __future__ import annotations

import json
import math
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .aggtrie import StatsTrie, adapted_select_with_covering, build_cache, record_hits
from .baseline import binsearch_with_covering, brute_exact
from .geoblock import AggSpec, GeoBlock, build, select_with_covering
from .geometry import cover_polygon, polygon_from_geojson
from .store import _OPS, FilterPredicate, PointTable

REPLAY_MODES = ("cached", "uncached")


@dataclass
class WorkloadSpec:
    """Named query polygons plus the order and repetition to run them in."""

    polygons: dict[str, dict]
    sequence: list[tuple[str, int]]
    aggs: str = "count"
    seed: int = 0
    skewed: tuple[str, ...] = ()

    def __post_init__(self):
        known = set(self.polygons)
        for name, rep in self.sequence:
            if name not in known:
                raise ValueError(f"sequence references unknown polygon {name!r}")
            if rep < 1:
                raise ValueError(f"repeat for {name!r} must be at least 1")
        for name in self.skewed:
            if name not in known:
                raise ValueError(f"skewed set references unknown polygon {name!r}")

    def to_json(self) -> str:
        return json.dumps({
            "polygons": self.polygons,
            "sequence": [[n, r] for n, r in self.sequence],
            "aggs": self.aggs,
            "seed": self.seed,
            "skewed": list(self.skewed),
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "WorkloadSpec":
        raw = json.loads(text)
        return cls(
            polygons=dict(raw["polygons"]),
            sequence=[(n, int(r)) for n, r in raw["sequence"]],
            aggs=raw.get("aggs", "count"),
            seed=int(raw.get("seed", 0)),
            skewed=tuple(raw.get("skewed", ())),
        )

    def query_count(self) -> int:
        return sum(r for _, r in self.sequence)


def make_skewed_workload(
    polygons: dict[str, dict],
    aggs: str = "count",
    seed: int = 0,
    repeats: int = 8,
) -> WorkloadSpec:
    """One pass over every polygon, then repeated passes over a hot subset.

    The skewed subset is a seeded choice of ceil(10%) of the polygons. The
    sequence runs each polygon once in shuffled order, then `repeats` full
    passes over the skewed subset, so cache refreshes between passes see the
    hot cells with growing counts.
    """
    if not polygons:
        raise ValueError("workload needs at least one polygon")
    names = sorted(polygons)
    rng = np.random.default_rng(seed)
    k = math.ceil(len(names) / 10)
    picked = sorted(rng.choice(len(names), size=k, replace=False).tolist())
    skewed = tuple(names[i] for i in picked)
    order = [names[i] for i in rng.permutation(len(names))]
    sequence = [(n, 1) for n in order]
    for _ in range(repeats):
        sequence.extend((n, 1) for n in skewed)
    return WorkloadSpec(polygons=dict(polygons), sequence=sequence,
                        aggs=aggs, seed=seed, skewed=skewed)


@dataclass
class BenchReport:
    """Outcome of a replay or amortization run, JSON round-trippable."""

    kind: str
    mode: str = ""
    aggs: str = ""
    seed: int = 0
    wall_us: int = 0
    subset_wall_us: dict = field(default_factory=dict)
    hit_rates: dict = field(default_factory=dict)
    post_refresh_hit_rates: dict = field(default_factory=dict)
    queries: list = field(default_factory=list)
    refreshes: list = field(default_factory=list)
    error_stats: dict | None = None
    speedup: float | None = None
    sort_full_us: float | None = None
    phases: list = field(default_factory=list)
    crossover: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(dict(self.__dict__), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "BenchReport":
        return cls(**json.loads(text))


def _subset_of(name: str, w: WorkloadSpec) -> str:
    return "skewed" if name in w.skewed else "base"


def _rate(hits: int, probes: int):
    return hits / probes if probes else None


def replay(
    w: WorkloadSpec,
    b: GeoBlock,
    mode: str,
    refresh_every: int | None = None,
    budget_pct: float = 5.0,
    budget_bytes: int | None = None,
    base: PointTable | None = None,
    compare_baseline: bool = False,
    max_cells: int = 256,
    st: StatsTrie | None = None,
) -> BenchReport:
    """Run the workload against one block and time every query.

    Cached mode starts cold, rebuilds the cache from accumulated hit stats
    every `refresh_every` queries, and serves from it in between. Uncached
    mode always folds the aggregate arrays directly. Coverings are computed
    once per polygon up front; the timed region is the query execution,
    which is the part the two modes disagree on.

    With `base` (the raw table the block was built from) the report gains
    relative count errors against the exact polygon answer, and
    `compare_baseline` additionally times a binary-search fold over the raw
    rows for the same coverings.
    """
    if mode not in REPLAY_MODES:
        raise ValueError(f"mode must be one of {REPLAY_MODES}")
    spec = AggSpec.parse(w.aggs)
    spec.validate(b.header.schema)
    polys = {n: polygon_from_geojson(g) for n, g in w.polygons.items()}
    covs = {
        n: cover_polygon(p, b.header.block_level, max_cells, b.header.domain)
        for n, p in polys.items()
    }

    exact_counts = {}
    if base is not None:
        for name, poly in polys.items():
            exact_counts[name] = brute_exact(base, b.header.filter, poly, spec).count

    if budget_bytes is None:
        budget_bytes = int(b.aggregate_array_bytes() * budget_pct / 100.0)

    if st is None:
        st = StatsTrie()
    trie = None
    queries = []
    refreshes = []
    walls = {"base": 0, "skewed": 0}
    baseline_wall_ns = 0
    i = 0
    for name, rep in w.sequence:
        for _ in range(rep):
            cov = covs[name]
            t0 = time.perf_counter_ns()
            if mode == "cached" and trie is not None:
                res = adapted_select_with_covering(b, trie, cov, spec, st=st)
            else:
                res = select_with_covering(b, cov, spec)
                record_hits(st, cov, b)
            dt = time.perf_counter_ns() - t0

            subset = _subset_of(name, w)
            walls[subset] += dt
            rec = {
                "i": i,
                "name": name,
                "subset": subset,
                "latency_us": dt // 1000,
                "count": res.count,
                "columns": res.to_dict()["columns"],
                "cells_visited": res.cells_visited,
                "cache_hits": res.cache_hits,
                "cache_probes": res.cache_probes,
            }
            if name in exact_counts:
                exact = exact_counts[name]
                rec["exact_count"] = exact
                if exact > 0:
                    rec["rel_error"] = abs(res.count - exact) / exact
            if compare_baseline and base is not None:
                tb = time.perf_counter_ns()
                binsearch_with_covering(base, b.header.filter, cov, spec)
                dtb = time.perf_counter_ns() - tb
                baseline_wall_ns += dtb
                rec["baseline_latency_us"] = dtb // 1000
            queries.append(rec)
            i += 1

            if mode == "cached" and refresh_every and i % refresh_every == 0:
                trie = build_cache(b, st, budget_bytes)
                refreshes.append({
                    "after_query": i,
                    "budget_bytes": budget_bytes,
                    "bytes_used": len(trie.region),
                    "cached_cells": trie.cached_cells(),
                })

    def rates(records):
        out = {}
        for subset in ("base", "skewed"):
            sub = [r for r in records if r["subset"] == subset]
            out[subset] = _rate(sum(r["cache_hits"] for r in sub),
                                sum(r["cache_probes"] for r in sub))
        return out

    first_after = refreshes[0]["after_query"] if refreshes else None
    post = [] if first_after is None else [q for q in queries if q["i"] >= first_after]

    subset_wall_us = {k: v // 1000 for k, v in walls.items()}
    rep_out = BenchReport(
        kind="replay",
        mode=mode,
        aggs=w.aggs,
        seed=w.seed,
        wall_us=sum(subset_wall_us.values()),
        subset_wall_us=subset_wall_us,
        hit_rates=rates(queries),
        post_refresh_hit_rates=rates(post),
        queries=queries,
        refreshes=refreshes,
    )
    if base is not None:
        rels = [q["rel_error"] for q in queries if "rel_error" in q]
        zero = [q for q in queries if q.get("exact_count") == 0]
        rep_out.error_stats = {
            "n": len(rels),
            "mean_rel": statistics.fmean(rels) if rels else 0.0,
            "max_rel": max(rels) if rels else 0.0,
            "exact_zero": len(zero),
            "exact_zero_matched": sum(1 for q in zero if q["count"] == 0),
        }
    if compare_baseline and base is not None and rep_out.wall_us > 0:
        rep_out.speedup = (baseline_wall_ns / 1000) / rep_out.wall_us
    return rep_out


def _timed(fn):
    t0 = time.perf_counter_ns()
    out = fn()
    return out, (time.perf_counter_ns() - t0) / 1000.0


def _mask_on(pred: FilterPredicate, cols: dict, n: int) -> np.ndarray:
    """apply_filter against bare column arrays, no table required."""
    mask = np.ones(n, dtype=bool)
    for name, op, value in pred.conjuncts:
        mask &= _OPS[op](cols[name], value)
    return mask


def amortization_bench(
    base: PointTable,
    filters: list[FilterPredicate | str],
    levels: list[int],
    runs: int = 3,
    seed: int = 0,
) -> BenchReport:
    """Sort-once versus sort-per-build across repeated filtered builds.

    Starting from a seeded shuffle of the base rows, the isolated strategy
    pays filter-then-sort for every build, while the incremental strategy
    sorts the full table once and reuses the order for every filter. The
    crossover k* is the number of builds after which the up-front sort wins:
    ceil(sort_full / (isolated - incremental)) per filter and level. Phase
    times are medians over `runs` runs.
    """
    preds = [FilterPredicate.parse(f) if isinstance(f, str) else f for f in filters]
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(base.keys))
    u_keys = base.keys[perm]
    u_cols = {n: v[perm] for n, v in base.columns.items()}
    no_filter = FilterPredicate.parse("")

    def sort_full():
        order = np.argsort(u_keys, kind="stable")
        return u_keys[order], {n: v[order] for n, v in u_cols.items()}

    sort_samples = []
    phase_samples: dict[tuple[str, int], list[dict]] = {}
    for _ in range(runs):
        (s_keys, s_cols), t_sort_full = _timed(sort_full)
        sort_samples.append(t_sort_full)

        for pred in preds:
            mask_u, t_mask_u = _timed(lambda: _mask_on(pred, u_cols, len(u_keys)))
            (fu_keys, fu_cols), t_take_u = _timed(
                lambda: (u_keys[mask_u], {n: v[mask_u] for n, v in u_cols.items()}))

            mask_s, t_mask_s = _timed(lambda: _mask_on(pred, s_cols, len(s_keys)))
            (fi_keys, fi_cols), t_take_s = _timed(
                lambda: (s_keys[mask_s], {n: v[mask_s] for n, v in s_cols.items()}))

            def sort_filtered():
                order = np.argsort(fu_keys, kind="stable")
                return fu_keys[order], {n: v[order] for n, v in fu_cols.items()}

            (fs_keys, fs_cols), t_sort_f = _timed(sort_filtered)

            iso_t = PointTable(base.domain, base.schema, fs_keys, fs_cols,
                               key_level=base.key_level)
            inc_t = PointTable(base.domain, base.schema, fi_keys, fi_cols,
                               key_level=base.key_level)
            for lvl in levels:
                _, t_agg_iso = _timed(lambda: build(iso_t, no_filter, lvl))
                _, t_agg_inc = _timed(lambda: build(inc_t, no_filter, lvl))
                key = (pred.describe(), lvl)
                phase_samples.setdefault(key, []).append({
                    "filter_us": t_mask_u + t_take_u,
                    "sort_filtered_us": t_sort_f,
                    "filter_sorted_us": t_mask_s + t_take_s,
                    "aggregate_us": (t_agg_iso + t_agg_inc) / 2.0,
                    "selectivity": len(fs_keys) / max(len(u_keys), 1),
                })

    sort_full_us = statistics.median(sort_samples)
    phases = []
    crossover = {}
    for (desc, lvl), samples in phase_samples.items():
        med = {k: statistics.median(s[k] for s in samples)
               for k in samples[0] if k != "selectivity"}
        isolated = med["filter_us"] + med["sort_filtered_us"] + med["aggregate_us"]
        incremental = med["filter_sorted_us"] + med["aggregate_us"]
        delta = isolated - incremental
        kstar = math.ceil(sort_full_us / delta) if delta > 0 else None
        phases.append({
            "filter": desc,
            "level": lvl,
            "selectivity": samples[0]["selectivity"],
            "isolated_us": isolated,
            "incremental_us": incremental,
            "kstar": kstar,
            **med,
        })
        crossover[f"{desc}@{lvl}"] = kstar

    return BenchReport(
        kind="amortize",
        seed=seed,
        sort_full_us=sort_full_us,
        phases=phases,
        crossover=crossover,
    )
