"""Command surface: validate configs, run experiments and sweeps, build and
parse firmware tables, and drive the emulated device-management operations.

Exit codes: 0 success, 1 semantic/simulation error, 2 usage or parse error.
All run outputs land under --out and nowhere else.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import struct
import sys
from pathlib import Path

import click

from . import firmware as fw
from .addrmap import NumaMode
from .config import ConfigParseError, RunConfig, load_config
from .device import CMD_IDENTIFY, IDENTIFY_FMT, DeviceModel
from .metrics import emit_stats, emit_sweep
from .protocol import ProtocolViolation
from .runner import SweepCellFailed, run_experiment, run_sweep
from .system import SimulationStalled, SimulationTimeout, System

log = logging.getLogger("cxlsim")

_SIZE_SUFFIXES = {
    "kib": 1024,
    "mib": 1024**2,
    "gib": 1024**3,
    "kb": 1000,
    "mb": 1000**2,
    "gb": 1000**3,
}


def parse_size(text: str) -> int:
    t = text.strip().lower().replace("_", "")
    for suffix, mult in _SIZE_SUFFIXES.items():
        if t.endswith(suffix):
            return int(float(t[: -len(suffix)]) * mult)
    return int(t, 0)


def _load(path: str) -> RunConfig:
    """Shared load-or-exit: parse failures exit 2, semantic failures exit 1."""
    try:
        cfg, problems = load_config(path)
    except ConfigParseError as exc:
        click.echo(f"parse error: {exc}", err=True)
        sys.exit(2)
    if problems:
        for p in problems:
            click.echo(f"invalid: {p}", err=True)
        sys.exit(1)
    return cfg


@click.group()
def main() -> None:
    """Discrete-event simulator of CXL type-3 memory expansion."""
    level = os.environ.get("CXLSIM_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))


@main.command()
@click.argument("config", type=click.Path())
def validate(config: str) -> None:
    """Check a run config file; lists every violation."""
    _load(config)
    click.echo("OK")


@main.command()
@click.argument("config", type=click.Path())
@click.option("--out", required=True, type=click.Path(), help="output directory")
@click.option("--log", "log_events", is_flag=True, help="also write the event log")
def run(config: str, out: str, log_events: bool) -> None:
    """Run one experiment; writes stats.json under --out."""
    cfg = _load(config)
    outdir = Path(out)
    outdir.mkdir(parents=True, exist_ok=True)
    try:
        system, stats, info = run_experiment(cfg, log_events=log_events)
    except (ProtocolViolation, SimulationStalled, SimulationTimeout) as exc:
        click.echo(f"run failed: {exc}", err=True)
        sys.exit(1)
    (outdir / "stats.json").write_text(emit_stats(stats, "json"))
    if log_events:
        (outdir / "events.log").write_text(
            "\n".join(system.engine.dispatch_log) + "\n"
        )
    if "chase_latencies_ns" in info:
        (outdir / "chase.json").write_text(
            json.dumps({"latencies_ns": info["chase_latencies_ns"]}, indent=2) + "\n"
        )
    click.echo(f"wrote {outdir / 'stats.json'}")


@main.command()
@click.argument("config", type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--footprints", default="2,4,6,8", show_default=True,
              help="comma-separated multiples of the L2 size")
@click.option("--ratios", default="1:0,3:1,1:1,1:3", show_default=True,
              help="comma-separated dram:cxl page interleave ratios")
def sweep(config: str, out: str, footprints: str, ratios: str) -> None:
    """Run the footprint x interleave cross product; writes sweep.csv."""
    cfg = _load(config)
    try:
        fps = [float(x) if "." in x else int(x) for x in footprints.split(",") if x]
        ratio_list = [r.strip() for r in ratios.split(",") if r.strip()]
    except ValueError as exc:
        raise click.UsageError(f"bad sweep axis: {exc}")
    outdir = Path(out)
    outdir.mkdir(parents=True, exist_ok=True)
    try:
        grid = run_sweep(cfg, fps, ratio_list)
    except SweepCellFailed as exc:
        click.echo(str(exc), err=True)
        sys.exit(1)
    (outdir / "sweep.csv").write_text(emit_sweep(grid, "csv"))
    click.echo(f"wrote {outdir / 'sweep.csv'}")


def _poll_mailbox(system: System, device: DeviceModel) -> bool:
    """Run the engine in small windows, polling the doorbell between them."""
    saw_doorbell = device.doorbell()
    step = max(1, device.mailbox_latency // 4)
    t = system.engine.clock
    for _ in range(64):
        from .device import MailboxPhase

        if device.phase is MailboxPhase.COMPLETE:
            return saw_doorbell
        t += step
        system.engine.run_until(t)
        saw_doorbell = saw_doorbell or device.doorbell()
    raise SimulationStalled("mailbox never completed")


@main.group()
def memdev() -> None:
    """Device management: the userspace tooling analogue."""


def _get_device(system: System, device_id: str | None) -> DeviceModel:
    if not system.devices:
        click.echo("no devices configured", err=True)
        sys.exit(1)
    if device_id is None:
        return next(iter(system.devices.values()))
    dev = system.devices.get(device_id)
    if dev is None:
        click.echo(f"device not found: {device_id}", err=True)
        sys.exit(1)
    return dev


@memdev.command("list")
@click.option("--config", "config_path", required=True, type=click.Path())
def memdev_list(config_path: str) -> None:
    system = System(_load(config_path))
    for dev_id in sorted(system.devices):
        dev = system.devices[dev_id]
        click.echo(
            f"{dev_id}  capacity={dev.state.capacity_bytes}  "
            f"online={dev.state.online_bytes}"
        )


@memdev.command("identify")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--device", "device_id", default=None)
def memdev_identify(config_path: str, device_id: str | None) -> None:
    """Issue the identify mailbox command through the doorbell path."""
    system = System(_load(config_path))
    dev = _get_device(system, device_id)
    try:
        dev.mailbox_submit(CMD_IDENTIFY)
        _poll_mailbox(system, dev)
        rc, payload = dev.mailbox_collect()
    except Exception as exc:
        click.echo(f"mailbox error: {exc}", err=True)
        sys.exit(1)
    capacity, online, slots, vendor = struct.unpack(
        IDENTIFY_FMT, payload[: struct.calcsize(IDENTIFY_FMT)]
    )
    click.echo(json.dumps({
        "device": dev.device_id,
        "return_code": rc,
        "capacity_bytes": capacity,
        "online_bytes": online,
        "decoder_slots": slots,
        "vendor_id": vendor,
    }, indent=2))


@memdev.command("online")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--device", "device_id", default=None)
@click.option("--size", required=True, help="bytes, with optional KiB/MiB/GiB suffix")
@click.option("--mode", type=click.Choice(["znuma", "flat"]), default="znuma",
              show_default=True)
def memdev_online(config_path: str, device_id: str | None, size: str, mode: str) -> None:
    """Online device memory to a NUMA node and print the topology."""
    system = System(_load(config_path))
    dev = _get_device(system, device_id)
    try:
        nbytes = parse_size(size)
    except ValueError as exc:
        raise click.UsageError(f"bad --size: {exc}")
    try:
        topology = dev.online_memory(nbytes, NumaMode(mode))
    except Exception as exc:
        click.echo(f"{type(exc).__name__}: {exc}", err=True)
        sys.exit(1)
    doc = {
        "mode": topology.mode.value,
        "nodes": [
            {
                "node_id": n.node_id,
                "has_cpus": n.has_cpus,
                "regions": [
                    {"base": r.base, "size": r.size, "kind": r.kind.value}
                    for r in n.regions
                ],
            }
            for n in topology.nodes
        ],
    }
    click.echo(json.dumps(doc, indent=2))


@memdev.command("registers")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--device", "device_id", default=None)
def memdev_registers(config_path: str, device_id: str | None) -> None:
    """Hex plus decoded dump of the device register file."""
    system = System(_load(config_path))
    dev = _get_device(system, device_id)
    click.echo(dev.dump_registers())


@main.group()
def tables() -> None:
    """Build or parse the firmware tables."""


@tables.command("build")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
def tables_build(config_path: str, out: str) -> None:
    """Write one binary file per table plus a hex dump and the topology sidecar."""
    cfg = _load(config_path)
    system = System(cfg)
    outdir = Path(out)
    outdir.mkdir(parents=True, exist_ok=True)
    try:
        tset = fw.build_tables(
            system.addr_map,
            cfg.core_count,
            {d.id: d.capacity_bytes for d in cfg.devices},
            cfg.firmware,
        )
    except fw.FirmwareError as exc:
        click.echo(f"{type(exc).__name__}: {exc}", err=True)
        sys.exit(1)
    for name, blob in tset.blobs().items():
        (outdir / f"{name}.bin").write_bytes(blob)
        hexdump = "\n".join(
            f"{i:06x}: " + " ".join(f"{b:02x}" for b in blob[i : i + 16])
            for i in range(0, len(blob), 16)
        )
        (outdir / f"{name}.hex").write_text(hexdump + "\n")
    (outdir / "dsdt_topology.json").write_text(tset.dsdt_sidecar)
    click.echo(f"wrote {len(tset.blobs()) + 1} files under {outdir}")


@tables.command("parse")
@click.argument("path", type=click.Path())
def tables_parse(path: str) -> None:
    """Decode one table blob and print its structure."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        click.echo(f"cannot read {path}: {exc}", err=True)
        sys.exit(2)
    try:
        table = fw.parse_table(blob)
    except fw.FirmwareError as exc:
        click.echo(f"{type(exc).__name__}: {exc}", err=True)
        sys.exit(1)
    click.echo(type(table).__name__)
    click.echo(json.dumps(dataclasses.asdict(table), indent=2, default=str))


if __name__ == "__main__":
    main()
