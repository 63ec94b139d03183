"""Run configuration: typed model, JSON loading, schema check, and whole-config
semantic validation that reports every violation with its config path.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources

import jsonschema

from .addrmap import (
    AddressMap,
    HdmDecoder,
    InterleavePolicy,
    NumaMode,
    PhysRegion,
    RegionKind,
)
from .cache import CacheConfig
from .firmware import FirmwareConfig
from .protocol import ChannelKind, LatencyConfig

CONFIG_VERSION = 1


class ConfigParseError(Exception):
    """The file is not readable JSON at all (CLI exit code 2)."""


class ConfigInvalid(Exception):
    """Semantic violations; carries the full list (CLI exit code 1)."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


@dataclass(frozen=True)
class DeviceConfig:
    id: str
    capacity_bytes: int
    mailbox_latency_ns: float = 1000.0


@dataclass
class WorkloadConfig:
    type: str = "stream"  # stream | trace | pointer_chase
    kernel: str = "triad"
    footprint_x_l2: float | None = 2.0
    array_elems: int | None = None
    iterations: int = 1
    interleave: str = "1:1"
    scalar: int = 3
    trace_path: str | None = None
    chase_elems: int = 64
    chase_stride: int = 64
    chase_pool: str = "cxl"


@dataclass
class RunConfig:
    regions: list[PhysRegion]
    decoders: list[HdmDecoder]
    devices: list[DeviceConfig]
    l1: CacheConfig
    l2: CacheConfig
    latency: LatencyConfig = field(default_factory=LatencyConfig)
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    numa_mode: NumaMode = NumaMode.ZNUMA
    page_size: int = 4096
    core_count: int = 1
    core_window: int = 1
    tag_window: int = 64
    seed: int = 0
    max_ticks: int = 10**15
    strict: bool = True
    audit: bool = False
    firmware: FirmwareConfig | None = None

    def policy(self) -> InterleavePolicy:
        return InterleavePolicy.parse(self.workload.interleave, self.page_size)


def _schema() -> dict:
    text = resources.files("cxlsim").joinpath("schema/runconfig.schema.json").read_text()
    return json.loads(text)


def _num(value) -> int:
    """Accept integers or hex/underscore strings for addresses and sizes."""
    if isinstance(value, int):
        return value
    return int(str(value), 0)


_REGION_KINDS = {k.value: k for k in RegionKind}


def parse_config(doc: dict) -> tuple[RunConfig | None, list[str]]:
    """Schema check then semantic validation; returns (config, problems).

    The config is None whenever problems is non-empty.
    """
    problems: list[str] = []
    validator = jsonschema.Draft202012Validator(_schema())
    for err in sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path)):
        path = ".".join(str(p) for p in err.absolute_path) or "<root>"
        problems.append(f"{path}: {err.message}")
    if problems:
        return None, problems

    topo = doc["topology"]
    page_size = _num(topo.get("page_size", 4096))
    regions = []
    for i, r in enumerate(topo["regions"]):
        kind = _REGION_KINDS[r["kind"]]
        node = r.get("numa_node")
        regions.append(PhysRegion(_num(r["base"]), _num(r["size"]), kind, node))
    decoders = []
    for i, d in enumerate(topo.get("decoders", [])):
        decoders.append(
            HdmDecoder(
                index=d.get("index", i),
                base=_num(d["base"]),
                size=_num(d["size"]),
                target_device=d["target_device"],
                enabled=d.get("enabled", True),
            )
        )
    devices = [
        DeviceConfig(
            id=d["id"],
            capacity_bytes=_num(d["capacity_bytes"]),
            mailbox_latency_ns=float(d.get("mailbox_latency_ns", 1000.0)),
        )
        for d in doc.get("devices", [])
    ]

    def cache_cfg(level: str) -> CacheConfig | None:
        c = doc["caches"][level]
        try:
            return CacheConfig(
                level=level,
                size_bytes=_num(c["size_bytes"]),
                associativity=int(c["associativity"]),
                line_bytes=_num(c.get("line_bytes", 64)),
                hit_latency_ns=float(c.get("hit_latency_ns", 1.0)),
            )
        except ValueError as exc:
            problems.append(f"caches.{level}: {exc}")
            return None

    l1, l2 = cache_cfg("l1"), cache_cfg("l2")

    lat_doc = doc.get("latency", {})
    svc = dict(LatencyConfig().service_interval_ns)
    svc.update(lat_doc.get("service_interval_ns", {}))
    latency = LatencyConfig(
        iobus_ns=float(lat_doc.get("iobus_ns", 10.0)),
        pack_ns=float(lat_doc.get("pack_ns", 5.0)),
        link_ns=float(lat_doc.get("link_ns", 20.0)),
        depack_ns=float(lat_doc.get("depack_ns", 5.0)),
        device_ctrl_ns=float(lat_doc.get("device_ctrl_ns", 15.0)),
        media_read_ns=float(lat_doc.get("media_read_ns", 50.0)),
        media_write_ns=float(lat_doc.get("media_write_ns", 60.0)),
        dram_read_ns=float(lat_doc.get("dram_read_ns", 40.0)),
        dram_write_ns=float(lat_doc.get("dram_write_ns", 40.0)),
        service_interval_ns=svc,
    )
    for f in dataclasses.fields(latency):
        if f.name != "service_interval_ns" and getattr(latency, f.name) < 0:
            problems.append(f"latency.{f.name}: must be >= 0")
    for key, value in latency.service_interval_ns.items():
        if key not in {k.value for k in ChannelKind}:
            problems.append(f"latency.service_interval_ns.{key}: unknown channel")
        elif float(value) < 0:
            problems.append(f"latency.service_interval_ns.{key}: must be >= 0")

    wl_doc = doc.get("workload", {})
    workload = WorkloadConfig(
        type=wl_doc.get("type", "stream"),
        kernel=wl_doc.get("kernel", "triad"),
        footprint_x_l2=wl_doc.get(
            "footprint_x_l2", None if "array_elems" in wl_doc else 2.0
        ),
        array_elems=(
            _num(wl_doc["array_elems"]) if "array_elems" in wl_doc else None
        ),
        iterations=int(wl_doc.get("iterations", 1)),
        interleave=wl_doc.get("interleave", "1:1"),
        scalar=int(wl_doc.get("scalar", 3)),
        trace_path=wl_doc.get("trace_path"),
        chase_elems=int(wl_doc.get("chase_elems", 64)),
        chase_stride=int(wl_doc.get("chase_stride", 64)),
        chase_pool=wl_doc.get("chase_pool", "cxl"),
    )
    if workload.type == "stream":
        if workload.footprint_x_l2 is None and workload.array_elems is None:
            problems.append("workload: stream needs footprint_x_l2 or array_elems")
        try:
            InterleavePolicy.parse(workload.interleave, page_size)
        except ValueError as exc:
            problems.append(f"workload.interleave: {exc}")
    if workload.type == "trace" and not workload.trace_path:
        problems.append("workload.trace_path: required for trace workloads")

    cores = doc.get("cores", {})
    core_count = int(cores.get("count", 1))
    core_window = int(cores.get("window", 1))
    if not 1 <= core_count <= 64:
        problems.append("cores.count: must be in [1, 64]")
    if core_window < 1:
        problems.append("cores.window: must be >= 1")

    fw = None
    if "firmware" in doc:
        f = doc["firmware"]
        fw = FirmwareConfig(
            ecam_base=_num(f["ecam_base"]),
            segment=int(f.get("segment", 0)),
            start_bus=int(f.get("start_bus", 0)),
            end_bus=int(f.get("end_bus", 15)),
            host_bridge_uid=int(f.get("host_bridge_uid", 0)),
            host_bridge_register_base=_num(f["host_bridge_register_base"]),
            host_bridge_register_size=_num(f.get("host_bridge_register_size", 0x10000)),
        )

    mode = NumaMode(topo.get("numa_mode", "znuma"))
    if page_size < 4096 or page_size & (page_size - 1):
        problems.append("topology.page_size: must be a power of two >= 4096")
        page_size = 4096

    amap = AddressMap(regions, decoders, mode, page_size)
    problems.extend(amap.validate({d.id: d.capacity_bytes for d in devices}))

    seen = set()
    for i, d in enumerate(devices):
        if d.id in seen:
            problems.append(f"devices[{i}]: duplicate id {d.id!r}")
        seen.add(d.id)
        if d.capacity_bytes <= 0:
            problems.append(f"devices[{i}]: capacity must be positive")
    for d in decoders:
        if d.target_device not in seen:
            problems.append(
                f"topology.decoders[{d.index}]: unknown device {d.target_device!r}"
            )

    if problems:
        return None, problems
    return (
        RunConfig(
            regions=regions,
            decoders=decoders,
            devices=devices,
            l1=l1,
            l2=l2,
            latency=latency,
            workload=workload,
            numa_mode=mode,
            page_size=page_size,
            core_count=core_count,
            core_window=core_window,
            tag_window=int(doc.get("tag_window", 64)),
            seed=int(doc.get("seed", 0)),
            max_ticks=_num(doc.get("max_ticks", 10**15)),
            strict=bool(doc.get("strict", True)),
            firmware=fw,
        ),
        [],
    )


def load_config(path: str) -> tuple[RunConfig | None, list[str]]:
    """Read and validate a config file; ConfigParseError for unreadable JSON."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigParseError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigParseError(f"{path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigParseError(f"{path}: top level must be an object")
    return parse_config(doc)


def load_config_or_raise(path: str) -> RunConfig:
    cfg, problems = load_config(path)
    if problems:
        raise ConfigInvalid(problems)
    return cfg
