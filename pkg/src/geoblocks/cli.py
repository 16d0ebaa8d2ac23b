"""Command line front end.

Every subcommand reads and writes the package's file formats; results and
reports go to stdout as JSON, progress notes to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .aggtrie import StatsTrie, adapted_select, build_cache, cache_stats, load_stats, save_stats
from .baseline import binsearch_covering, brute_exact
from .bench import WorkloadSpec, amortization_bench, replay
from .cellgrid import Domain
from .geoblock import (
    AggSpec,
    build,
    coarsen,
    count_query,
    load_block,
    save_block,
    select_query,
)
from .geometry import polygon_from_geojson
from .store import (
    DEFAULT_DOMAIN,
    SYNTH_SCHEMA,
    FilterPredicate,
    extract,
    load_table,
    save_table,
    synth_generate,
)

log = logging.getLogger("geoblocks.cli")


def _domain(text: str | None) -> Domain:
    if not text:
        return DEFAULT_DOMAIN
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 4:
        raise SystemExit("--domain wants min_lon,min_lat,max_lon,max_lat")
    return Domain(*parts)


def _load_polygon(path: str):
    with open(path) as fh:
        return polygon_from_geojson(json.load(fh))


def _emit(obj):
    json.dump(obj, sys.stdout, indent=2, default=str)
    sys.stdout.write("\n")


def cmd_synth(a):
    synth_generate(a.n, a.dist, a.seed, _domain(a.domain), out=a.out)
    print(f"wrote {a.n} rows to {a.out}", file=sys.stderr)


def cmd_extract(a):
    t, rep = extract(a.csv, SYNTH_SCHEMA, _domain(a.domain), a.lon_col, a.lat_col,
                     keep_coords=a.keep_coords)
    save_table(t, a.out)
    _emit(rep.__dict__)


def cmd_build(a):
    t = load_table(a.table)
    b = build(t, FilterPredicate.parse(a.filter), a.level)
    save_block(b, a.out)
    out = {
        "block_level": b.header.block_level,
        "rows": b.header.total_count,
        "aggregates": b.header.aggregate_count,
        "aggregate_array_bytes": b.aggregate_array_bytes(),
    }
    if b.build_report is not None:
        out["phases"] = b.build_report.__dict__
    _emit(out)


def cmd_query(a):
    b = load_block(a.block)
    poly = _load_polygon(a.polygon)
    if a.count_only:
        _emit({"count": count_query(b, poly, max_cells=a.max_cells)})
        return
    spec = AggSpec.parse(a.aggs)
    if b.cache is not None and not a.no_cache:
        res = adapted_select(b, b.cache, poly, spec, max_cells=a.max_cells)
    else:
        res = select_query(b, poly, spec, max_cells=a.max_cells)
    _emit(res.to_dict())


def cmd_coarsen(a):
    b = load_block(a.block)
    save_block(coarsen(b, a.level), a.out)
    print(f"coarsened to level {a.level}: {a.out}", file=sys.stderr)


def cmd_oracle(a):
    t = load_table(a.table)
    poly = _load_polygon(a.polygon)
    spec = AggSpec.parse(a.aggs)
    f = FilterPredicate.parse(a.filter)
    if a.method == "brute":
        res = brute_exact(t, f, poly, spec)
    else:
        res = binsearch_covering(t, f, poly, spec, a.level, max_cells=a.max_cells)
    _emit({**res.to_dict(), "method": res.method})


def cmd_refresh_cache(a):
    b = load_block(a.block)
    st = load_stats(a.stats)
    budget = int(b.aggregate_array_bytes() * a.budget_pct / 100.0)
    b.cache = build_cache(b, st, budget)
    save_block(b, a.out or a.block)
    _emit({"budget_bytes": budget, **cache_stats(b.cache)})


def cmd_cache_stats(a):
    b = load_block(a.block)
    if b.cache is None:
        _emit({"cached": False})
    else:
        _emit({"cached": True, **cache_stats(b.cache)})


def cmd_serve(a):
    from .service import create_app
    import uvicorn

    blocks = {}
    for pair in a.blocks.split(","):
        name, _, path = pair.partition("=")
        if not name or not path:
            raise SystemExit(f"--blocks entry {pair!r} must look like name=path")
        blocks[name] = path
    host, _, port = a.bind.rpartition(":")
    app = create_app(blocks)
    level = os.environ.get("GEOBLOCKS_LOG", "warning").lower()
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port), log_level=level)


def cmd_bench_replay(a):
    w = WorkloadSpec.from_json(open(a.workload).read())
    b = load_block(a.block)
    base = load_table(a.base) if a.base else None
    st = StatsTrie()
    rep = replay(w, b, a.mode, refresh_every=a.refresh_every,
                 budget_pct=a.budget_pct, base=base,
                 compare_baseline=a.compare_baseline, max_cells=a.max_cells,
                 st=st)
    with open(a.out, "w") as fh:
        fh.write(rep.to_json())
    if a.save_stats:
        save_stats(st, a.save_stats)
    print(f"replayed {w.query_count()} queries ({a.mode}) -> {a.out}",
          file=sys.stderr)


def cmd_bench_amortize(a):
    base = load_table(a.base)
    with open(a.filters) as fh:
        filters = json.load(fh)
    levels = [int(x) for x in a.levels.split(",")]
    rep = amortization_bench(base, filters, levels, runs=a.runs, seed=a.seed)
    with open(a.out, "w") as fh:
        fh.write(rep.to_json())
    print(f"amortization over {len(filters)} filters x {levels} -> {a.out}",
          file=sys.stderr)


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geoblocks")
    sub = p.add_subparsers(dest="cmd", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic trips CSV")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--dist", default="uniform",
                    help="uniform or clustered:K:SPREAD")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--domain")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("extract", help="CSV to key-sorted point table")
    sp.add_argument("--csv", required=True)
    sp.add_argument("--lon-col", default="lon")
    sp.add_argument("--lat-col", default="lat")
    sp.add_argument("--domain")
    sp.add_argument("--keep-coords", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_extract)

    sp = sub.add_parser("build", help="point table to aggregate block")
    sp.add_argument("--table", required=True)
    sp.add_argument("--level", type=int, required=True)
    sp.add_argument("--filter", default="")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_build)

    sp = sub.add_parser("query", help="polygon query against a block")
    sp.add_argument("--block", required=True)
    sp.add_argument("--polygon", required=True, help="GeoJSON file")
    sp.add_argument("--aggs", default="count")
    sp.add_argument("--count-only", action="store_true")
    sp.add_argument("--no-cache", action="store_true")
    sp.add_argument("--max-cells", type=int, default=256)
    sp.set_defaults(fn=cmd_query)

    sp = sub.add_parser("coarsen", help="re-aggregate a block at a lower level")
    sp.add_argument("--block", required=True)
    sp.add_argument("--level", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_coarsen)

    sp = sub.add_parser("oracle", help="reference answers from raw rows")
    sp.add_argument("--table", required=True)
    sp.add_argument("--polygon", required=True)
    sp.add_argument("--aggs", default="count")
    sp.add_argument("--filter", default="")
    sp.add_argument("--method", choices=("brute", "binsearch"), default="brute")
    sp.add_argument("--level", type=int, default=12,
                    help="covering level for the binsearch method")
    sp.add_argument("--max-cells", type=int, default=256)
    sp.set_defaults(fn=cmd_oracle)

    sp = sub.add_parser("refresh-cache", help="build a block's query cache")
    sp.add_argument("--block", required=True)
    sp.add_argument("--stats", required=True, help="hit statistics sidecar")
    sp.add_argument("--budget-pct", type=float, default=5.0)
    sp.add_argument("--out", help="default: rewrite the block in place")
    sp.set_defaults(fn=cmd_refresh_cache)

    sp = sub.add_parser("cache-stats", help="cache summary for a block file")
    sp.add_argument("--block", required=True)
    sp.set_defaults(fn=cmd_cache_stats)

    sp = sub.add_parser("serve", help="HTTP API over one or more blocks")
    sp.add_argument("--blocks", required=True, help="name=path[,name=path...]")
    sp.add_argument("--bind", default="127.0.0.1:8800")
    sp.set_defaults(fn=cmd_serve)

    bp = sub.add_parser("bench", help="benchmarks")
    bsub = bp.add_subparsers(dest="bench_cmd", required=True)

    sp = bsub.add_parser("replay", help="run a workload file against a block")
    sp.add_argument("--workload", required=True)
    sp.add_argument("--block", required=True)
    sp.add_argument("--mode", choices=("cached", "uncached"), required=True)
    sp.add_argument("--base", help="point table for exact-error statistics")
    sp.add_argument("--refresh-every", type=int)
    sp.add_argument("--budget-pct", type=float, default=5.0)
    sp.add_argument("--max-cells", type=int, default=256)
    sp.add_argument("--compare-baseline", action="store_true")
    sp.add_argument("--save-stats", help="write accumulated hit stats here")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_bench_replay)

    sp = bsub.add_parser("amortize", help="sort-once crossover measurement")
    sp.add_argument("--base", required=True)
    sp.add_argument("--filters", required=True, help="JSON list of filter strings")
    sp.add_argument("--levels", default="8,10,12")
    sp.add_argument("--runs", type=int, default=3)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_bench_amortize)

    return p


def main(argv=None) -> int:
    level = os.environ.get("GEOBLOCKS_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))
    args = make_parser().parse_args(argv)
    args.fn(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
