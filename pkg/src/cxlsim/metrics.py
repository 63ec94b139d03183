"""Characterization outputs: run statistics snapshots, machine-readable
emission (JSON/CSV), and heatmap-ready sweep grids over
(footprint x interleave ratio).

Emission is byte-deterministic: field order is fixed, floats render with
repr, and identical runs produce identical files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import ceil

from .addrmap import Pool

SCHEMA_VERSION = 1

SWEEP_COLUMNS = [
    "footprint_x_l2",
    "interleave",
    "kernel",
    "iterations",
    "l1_accesses",
    "l2_accesses",
    "l2_misses",
    "l2_miss_rate",
    "bandwidth_gbps",
    "cxl_bandwidth_gbps",
    "mean_lat_ns",
    "dram_bytes",
    "cxl_bytes",
    "sim_ns",
]


def nearest_rank(sorted_values: list, pct: float) -> float:
    """Nearest-rank percentile over the full retained list; exact, not
    interpolated."""
    if not sorted_values:
        return 0.0
    k = max(1, ceil(pct / 100.0 * len(sorted_values)))
    return float(sorted_values[k - 1])


@dataclass
class RunStats:
    schema_version: int
    wall: dict
    caches: dict
    pools: dict
    channels: dict
    protocol: dict
    latency_hist: list

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "wall": self.wall,
            "caches": self.caches,
            "pools": self.pools,
            "channels": self.channels,
            "protocol": self.protocol,
            "latency_hist": self.latency_hist,
        }


def snapshot(system) -> RunStats:
    """Consistent point-in-time counters; never mutates them.

    Call between run windows only; the engine is single-threaded, so any
    moment outside dispatch is a consistent boundary.
    """
    sim_ticks = system.last_activity
    wall = {
        "sim_ticks": sim_ticks,
        "sim_ns": sim_ticks / 1000.0,
        "requests_retired": system.retired,
        "bytes_accessed": system.bytes_accessed,
        "mean_request_lat_ns": (
            system.lat_sum_ticks / system.retired / 1000.0 if system.retired else 0.0
        ),
    }
    caches = {name: st.as_dict() for name, st in system.hierarchy.stats.items()}
    pools = {}
    for pool in (Pool.DRAM, Pool.CXL):
        ctr = system.pool[pool]
        lats = sorted(ctr.latencies)
        n = len(lats)
        pools[pool.value] = {
            "reads": ctr.reads,
            "writes": ctr.writes,
            "bytes": 64 * (ctr.reads + ctr.writes),
            "mean_lat_ns": (sum(lats) / n / 1000.0) if n else 0.0,
            "median_lat_ns": nearest_rank(lats, 50.0) / 1000.0,
            "p99_lat_ns": nearest_rank(lats, 99.0) / 1000.0,
        }
    channels = {}
    for dev_id in sorted(system.links):
        link = system.links[dev_id]
        for kind, ch in link.channels.items():
            channels[f"{dev_id}.{kind.value}"] = {
                "flits": ch.flits,
                "mean_queue_depth": ch.mean_depth(sim_ticks),
                "max_queue_depth": ch.max_depth,
            }
    protocol = {
        "tags_allocated": system.outstanding.allocated_total,
        "tags_completed": system.outstanding.completed_total,
        "violations": system.violations,
    }
    hist = [[bound, count] for bound, count in sorted(system.lat_hist.items())]
    return RunStats(
        schema_version=SCHEMA_VERSION,
        wall=wall,
        caches=caches,
        pools=pools,
        channels=channels,
        protocol=protocol,
        latency_hist=hist,
    )


def _flatten(prefix: str, obj, out: list) -> None:
    if isinstance(obj, dict):
        for k, v in obj.items():
            _flatten(f"{prefix}.{k}" if prefix else str(k), v, out)
    elif isinstance(obj, list):
        out.append((prefix, json.dumps(obj)))
    else:
        out.append((prefix, obj))


def emit_stats(stats: RunStats, fmt: str = "json") -> str:
    if fmt == "json":
        return json.dumps(stats.to_dict(), indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        rows: list = []
        _flatten("", stats.to_dict(), rows)
        lines = ["metric,value"]
        for key, value in sorted(rows):
            text = value if isinstance(value, str) else repr(value)
            if "," in text or '"' in text:
                text = '"' + text.replace('"', '""') + '"'
            lines.append(f"{key},{text}")
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown format {fmt!r}")


@dataclass
class SweepGrid:
    footprints: list
    ratios: list[str]
    cells: dict = field(default_factory=dict)  # (footprint, ratio) -> row dict

    def add_cell(self, footprint, ratio: str, row: dict) -> None:
        key = (footprint, ratio)
        if key in self.cells:
            raise ValueError(f"duplicate sweep cell {key}")
        self.cells[key] = row

    def validate(self) -> None:
        for fp in self.footprints:
            for ratio in self.ratios:
                if (fp, ratio) not in self.cells:
                    raise ValueError(f"missing sweep cell ({fp}, {ratio})")


def emit_sweep(grid: SweepGrid, fmt: str = "csv") -> str:
    grid.validate()
    rows = []
    for fp in grid.footprints:
        for ratio in grid.ratios:
            rows.append(grid.cells[(fp, ratio)])
    if fmt == "csv":
        lines = [",".join(SWEEP_COLUMNS)]
        for row in rows:
            lines.append(
                ",".join(_csv_field(row.get(col, "")) for col in SWEEP_COLUMNS)
            )
        return "\n".join(lines) + "\n"
    if fmt == "json":
        return json.dumps(
            {"schema_version": SCHEMA_VERSION, "cells": rows}, indent=2, sort_keys=True
        ) + "\n"
    raise ValueError(f"unknown format {fmt!r}")


def _csv_field(value) -> str:
    text = value if isinstance(value, str) else repr(value)
    if "," in text or '"' in text:
        text = '"' + text.replace('"', '""') + '"'
    return text
