"""Experiment orchestration: single runs and (footprint x ratio) sweeps.

Each sweep cell is a fully isolated simulator instance run sequentially, so
cells never share mutable state and the grid is deterministic.
"""

from __future__ import annotations

import dataclasses

from .addrmap import Pool
from .config import RunConfig
from .metrics import RunStats, SweepGrid, snapshot
from .system import System
from .workloads import (
    PointerChase,
    StreamSpec,
    StreamWorkload,
    TraceWorkload,
    parse_trace,
)


def build_stream_spec(cfg: RunConfig) -> StreamSpec:
    wl = cfg.workload
    cores = tuple(range(cfg.core_count))
    if wl.array_elems is not None:
        return StreamSpec(wl.kernel, wl.array_elems, wl.iterations, cores, wl.scalar)
    return StreamSpec.from_footprint(
        wl.kernel, wl.footprint_x_l2, cfg.l2.size_bytes, wl.iterations, cores, wl.scalar
    )


def run_experiment(
    cfg: RunConfig, log_events: bool = False
) -> tuple[System, RunStats, dict]:
    """Run the configured workload to completion, flush, and snapshot.

    The returned info dict carries workload-level figures the sweep needs:
    bytes moved by the kernel and the completion time before the final
    cache flush.
    """
    system = System(cfg)
    if log_events:
        system.engine.enable_dispatch_log()
    wl = cfg.workload
    info: dict = {"type": wl.type}
    if wl.type == "stream":
        spec = build_stream_spec(cfg)
        workload = StreamWorkload(system, spec, cfg.policy())
        workload.run()
        info["workload_bytes"] = spec.bytes_per_iteration * spec.iterations
        info["kernel"] = spec.kernel
        info["iterations"] = spec.iterations
        info["array_elems"] = spec.array_elems
    elif wl.type == "pointer_chase":
        pool = Pool.CXL if wl.chase_pool == "cxl" else Pool.DRAM
        chase = PointerChase(system, wl.chase_elems, wl.chase_stride, pool)
        info["chase_latencies_ns"] = [t / 1000.0 for t in chase.run()]
        info["workload_bytes"] = 8 * wl.chase_elems
    elif wl.type == "trace":
        with open(wl.trace_path, "r", encoding="utf-8") as fh:
            records = parse_trace(fh)
        TraceWorkload(system, records, cfg.policy()).run()
        info["workload_bytes"] = sum(r.size for r in records)
    else:
        raise ValueError(f"unknown workload type {wl.type!r}")
    info["workload_done_ticks"] = system.last_activity
    system.flush_and_drain()
    return system, snapshot(system), info


def sweep_cell_row(
    footprint: float, ratio: str, stats: RunStats, info: dict
) -> dict:
    ns = info["workload_done_ticks"] / 1000.0
    l2 = stats.caches["l2"]
    l1_accesses = sum(
        c["accesses"] for name, c in stats.caches.items() if name.startswith("l1.")
    )
    bw = info["workload_bytes"] / ns if ns else 0.0
    cxl_bw = stats.pools["cxl"]["bytes"] / ns if ns else 0.0
    return {
        "footprint_x_l2": footprint,
        "interleave": ratio,
        "kernel": info.get("kernel", ""),
        "iterations": info.get("iterations", 0),
        "l1_accesses": l1_accesses,
        "l2_accesses": l2["accesses"],
        "l2_misses": l2["misses"],
        "l2_miss_rate": l2["miss_rate"],
        "bandwidth_gbps": bw,
        "cxl_bandwidth_gbps": cxl_bw,
        "mean_lat_ns": stats.wall["mean_request_lat_ns"],
        "dram_bytes": stats.pools["dram"]["bytes"],
        "cxl_bytes": stats.pools["cxl"]["bytes"],
        "sim_ns": ns,
    }


class SweepCellFailed(Exception):
    def __init__(self, footprint, ratio, cause: Exception):
        self.footprint = footprint
        self.ratio = ratio
        self.cause = cause
        super().__init__(f"sweep cell (footprint={footprint}, ratio={ratio}): {cause}")


def run_sweep(
    cfg: RunConfig, footprints: list[float], ratios: list[str]
) -> SweepGrid:
    """Cross product of footprints and interleave ratios, run sequentially."""
    grid = SweepGrid(footprints=list(footprints), ratios=list(ratios))
    for fp in footprints:
        for ratio in ratios:
            cell_cfg = dataclasses.replace(cfg)
            cell_cfg.workload = dataclasses.replace(
                cfg.workload, footprint_x_l2=fp, array_elems=None, interleave=ratio
            )
            try:
                _, stats, info = run_experiment(cell_cfg)
            except Exception as exc:
                raise SweepCellFailed(fp, ratio, exc) from exc
            grid.add_cell(fp, ratio, sweep_cell_row(fp, ratio, stats, info))
    return grid
