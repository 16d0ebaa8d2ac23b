import threading

import numpy as np
import pytest
from fastapi.testclient import TestClient

from geoblocks import (
    DEFAULT_DOMAIN,
    SYNTH_SCHEMA,
    AggSpec,
    FilterPredicate,
    Polygon,
    PointTable,
    build,
    cover_polygon,
    select_query,
    synth_points,
)
from geoblocks.service import create_app

AGGS = "count,sum:fare,avg:fare,min:ts,max:ts"


@pytest.fixture(scope="module")
def block():
    lons, lats, fare, tip, ts = synth_points(30_000, "clustered:3:0.05", 7)
    t = PointTable.from_arrays(
        DEFAULT_DOMAIN, SYNTH_SCHEMA, lons, lats,
        {"fare": fare, "tip": tip, "ts": ts},
    )
    return build(t, FilterPredicate.parse(""), 10)


@pytest.fixture()
def client(block):
    block.cache = None
    app = create_app({"city": block})
    return TestClient(app)


def rect_geojson(x0=-74.05, y0=40.6, x1=-73.85, y1=40.85):
    return Polygon.rect(x0, y0, x1, y1).to_geojson()


class TestBlocks:
    def test_listing_reflects_header(self, client, block):
        r = client.get("/blocks")
        assert r.status_code == 200
        rows = r.json()["blocks"]
        assert len(rows) == 1
        row = rows[0]
        h = block.header
        assert row["name"] == "city"
        assert row["block_level"] == h.block_level
        assert row["total_count"] == h.total_count
        assert row["aggregate_count"] == h.aggregate_count
        assert row["domain"] == [-74.3, 40.4, -73.6, 41.0]
        assert [c["name"] for c in row["columns"]] == ["fare", "tip", "ts"]
        assert row["cached"] is False
        assert row["totals"]["fare"]["sum"] == pytest.approx(h.totals["fare"]["sum"])

    def test_empty_block_totals_are_null(self, block):
        lons, lats, fare, tip, ts = synth_points(100, "uniform", 1)
        t = PointTable.from_arrays(DEFAULT_DOMAIN, SYNTH_SCHEMA, lons, lats,
                                   {"fare": fare, "tip": tip, "ts": ts})
        empty = build(t, FilterPredicate.parse("fare>=1e9"), 8)
        c = TestClient(create_app({"none": empty}))
        row = c.get("/blocks").json()["blocks"][0]
        assert row["total_count"] == 0
        assert row["totals"]["fare"]["min"] is None
        assert row["totals"]["ts"]["max"] is None


class TestQuery:
    def test_matches_direct_select(self, client, block):
        poly_json = rect_geojson()
        r = client.post("/query", json={"block": "city", "polygon": poly_json,
                                        "aggs": AGGS})
        assert r.status_code == 200
        got = r.json()
        want = select_query(block, Polygon.rect(-74.05, 40.6, -73.85, 40.85),
                            AggSpec.parse(AGGS))
        assert got["count"] == want.count
        assert got["columns"]["fare"]["sum"] == pytest.approx(
            want.columns["fare"]["sum"])
        assert got["columns"]["ts"]["min"] == want.columns["ts"]["min"]
        assert got["epsilon_m"] == pytest.approx(want.epsilon_m)
        assert got["latency_us"] >= 0
        assert got["block"] == "city"

    def test_count_only(self, client, block):
        r = client.post("/query", json={"block": "city", "polygon": rect_geojson(),
                                        "count_only": True})
        body = r.json()
        want = select_query(block, Polygon.rect(-74.05, 40.6, -73.85, 40.85),
                            AggSpec.parse("count"))
        assert body["count"] == want.count
        assert body["columns"] == {}
        assert body["epsilon_m"] > 0

    def test_debug_covering_payload(self, client, block):
        r = client.post("/query", json={"block": "city", "polygon": rect_geojson(),
                                        "debug_covering": True})
        cov = r.json()["covering"]
        ref = cover_polygon(Polygon.rect(-74.05, 40.6, -73.85, 40.85),
                            block.header.block_level, 256, block.header.domain)
        assert cov["cells"] == [f"{c:016x}" for c in ref.cells]
        assert len(cov["rects"]) == len(ref.cells)
        d = block.header.domain
        for x0, y0, x1, y1 in cov["rects"]:
            assert d.min_lon <= x0 < x1 <= d.max_lon
            assert d.min_lat <= y0 < y1 <= d.max_lat
        assert cov["epsilon_m"] == pytest.approx(ref.epsilon_m)

    def test_polygon_with_hole(self, client, block):
        outer = [[-74.1, 40.5], [-73.7, 40.5], [-73.7, 40.95], [-74.1, 40.95],
                 [-74.1, 40.5]]
        inner = [[-74.0, 40.6], [-73.8, 40.6], [-73.8, 40.85], [-74.0, 40.85],
                 [-74.0, 40.6]]
        r = client.post("/query", json={
            "block": "city",
            "polygon": {"type": "Polygon", "coordinates": [outer, inner]},
        })
        assert r.status_code == 200
        full = client.post("/query", json={
            "block": "city",
            "polygon": {"type": "Polygon", "coordinates": [outer]},
        })
        assert r.json()["count"] < full.json()["count"]

    def test_error_codes(self, client):
        ok_poly = rect_geojson()
        r = client.post("/query", json={"block": "nope", "polygon": ok_poly})
        assert r.status_code == 404
        r = client.post("/query", json={"block": "city",
                                        "polygon": {"type": "Point", "coordinates": [0, 0]}})
        assert r.status_code == 400
        r = client.post("/query", json={"block": "city", "polygon": ok_poly,
                                        "aggs": "sum:nope"})
        assert r.status_code == 400
        r = client.post("/query", json={"block": "city", "polygon": ok_poly,
                                        "aggs": "median:fare"})
        assert r.status_code == 400
        r = client.post("/query", json={"block": "city"})
        assert r.status_code == 422

    def test_query_count_increments(self, client):
        before = client.get("/stats/city").json()["query_count"]
        client.post("/query", json={"block": "city", "polygon": rect_geojson()})
        client.post("/query", json={"block": "city", "polygon": rect_geojson(),
                                    "count_only": True})
        after = client.get("/stats/city").json()["query_count"]
        assert after == before + 2


class TestCacheEndpoints:
    def test_refresh_then_cached_queries(self, client, block):
        poly_json = rect_geojson(-74.06, 40.62, -73.9, 40.8)
        plain = client.post("/query", json={"block": "city", "polygon": poly_json,
                                            "aggs": AGGS}).json()

        r = client.post("/admin/refresh-cache",
                        json={"block": "city", "budget_pct": 10})
        assert r.status_code == 200
        body = r.json()
        assert body["budget_bytes"] == int(block.aggregate_array_bytes() * 0.10)
        assert 0 < body["bytes_used"] <= body["budget_bytes"]
        assert body["cached_cells"] > 0

        cached = client.post("/query", json={"block": "city", "polygon": poly_json,
                                             "aggs": AGGS}).json()
        assert cached["cache_probes"] > 0
        assert cached["count"] == plain["count"]
        assert cached["columns"]["fare"]["sum"] == pytest.approx(
            plain["columns"]["fare"]["sum"], rel=1e-12)

        bypass = client.post("/query", json={"block": "city", "polygon": poly_json,
                                             "aggs": AGGS, "use_cache": False}).json()
        assert bypass["cache_probes"] == 0
        assert bypass["count"] == plain["count"]

        listing = client.get("/blocks").json()["blocks"][0]
        assert listing["cached"] is True
        stats = client.get("/stats/city").json()
        assert stats["cached"] is True
        assert stats["bytes_used"] == body["bytes_used"]
        assert 0.0 <= stats["hit_rate"] <= 1.0

    def test_count_only_ignores_cache_and_stats(self, client):
        client.post("/query", json={"block": "city", "polygon": rect_geojson()})
        client.post("/admin/refresh-cache", json={"block": "city", "budget_pct": 5})
        before = client.get("/stats/city").json()["recorded_hits"]
        r = client.post("/query", json={"block": "city", "polygon": rect_geojson(),
                                        "count_only": True})
        assert r.json()["cache_probes"] == 0
        assert client.get("/stats/city").json()["recorded_hits"] == before

    def test_refresh_errors(self, client):
        r = client.post("/admin/refresh-cache", json={"block": "ghost",
                                                      "budget_pct": 5})
        assert r.status_code == 404
        r = client.post("/admin/refresh-cache", json={"block": "city",
                                                      "budget_pct": 0})
        assert r.status_code == 400
        r = client.post("/admin/refresh-cache", json={"block": "city",
                                                      "budget_pct": 1e-7})
        assert r.status_code == 400  # under the smallest child block

    def test_concurrent_refresh_conflicts(self, client):
        state = client.app.state.blocks["city"]
        assert state.admin.acquire(blocking=False)
        try:
            r = client.post("/admin/refresh-cache", json={"block": "city",
                                                          "budget_pct": 5})
            assert r.status_code == 409
        finally:
            state.admin.release()
        r = client.post("/admin/refresh-cache", json={"block": "city",
                                                      "budget_pct": 5})
        assert r.status_code == 200

    def test_stats_uncached_shape(self, client):
        stats = client.get("/stats/city").json()
        assert stats["cached"] is False
        assert "hit_rate" not in stats
        assert stats["recorded_cells"] == 0
        assert client.get("/stats/ghost").status_code == 404


def test_create_app_accepts_paths(tmp_path, block):
    from geoblocks import save_block

    block.cache = None
    p = tmp_path / "city.gbk"
    save_block(block, p)
    app = create_app({"disk": str(p)})
    c = TestClient(app)
    assert c.get("/blocks").json()["blocks"][0]["total_count"] == \
        block.header.total_count


def test_log_env_is_tolerated(monkeypatch, block):
    monkeypatch.setenv("GEOBLOCKS_LOG", "debug")
    block.cache = None
    create_app({"city": block})
    monkeypatch.setenv("GEOBLOCKS_LOG", "not-a-level")
    create_app({"city": block})
