"""Error-bounded polygon aggregation over quadtree cell pre-aggregates."""

from .aggtrie import (
    AggregateTrie,
    StatsTrie,
    adapted_select,
    adapted_select_with_covering,
    build_cache,
    cache_stats,
    hit_rate,
    load_stats,
    rank_cells,
    record_hits,
    save_stats,
)
from .baseline import binsearch_covering, binsearch_with_covering, brute_exact
from .bench import (
    BenchReport,
    WorkloadSpec,
    amortization_bench,
    make_skewed_workload,
    replay,
)
from .cellgrid import (
    MAX_LEVEL,
    ROOT_CELL,
    Domain,
    cell_of_point,
    cell_range,
    cell_rect,
    cells_of_points,
    children,
    children_at_level,
    contains,
    level,
    parent,
    truncate_cells,
)
from .errors import (
    BudgetTooSmall,
    ChecksumMismatch,
    CorruptRegion,
    FilterViolation,
    FormatVersionMismatch,
    GeoBlocksError,
    InvalidPolygon,
    IoError,
    LevelOutOfRange,
    MissingColumn,
    OutOfDomain,
    RequiresRebuild,
    UnknownColumn,
)
from .geoblock import (
    AggSpec,
    GeoBlock,
    QueryResult,
    append_batch,
    build,
    coarsen,
    count_query,
    count_with_covering,
    load_block,
    save_block,
    select_query,
    select_with_covering,
)
from .geometry import (
    Covering,
    Polygon,
    cover_polygon,
    distances_to_polygon_m,
    point_in_polygon,
    points_in_polygon,
    polygon_from_geojson,
)
from .store import (
    DEFAULT_DOMAIN,
    SYNTH_SCHEMA,
    FilterPredicate,
    PointTable,
    Schema,
    apply_filter,
    extract,
    load_table,
    save_table,
    synth_generate,
    synth_points,
)

__version__ = "0.1.0"
