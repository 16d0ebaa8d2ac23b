"""Timing and accounting reports produced by extract and build."""

from __future__ import annotations

from dataclasses import asdict, dataclass


@dataclass
class ExtractReport:
    rows_in: int
    rows_kept: int
    dropped_unparseable: int
    dropped_nonfinite: int
    dropped_out_of_domain: int
    clean_seconds: float
    sort_seconds: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BuildReport:
    rows_in: int
    rows_kept: int
    selectivity: float
    aggregate_count: int
    filter_seconds: float
    aggregate_seconds: float

    def to_dict(self) -> dict:
        return asdict(self)
