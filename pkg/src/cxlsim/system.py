"""Full-path system assembly: cores drive the cache hierarchy; LLC misses are
routed by physical address either to system DRAM (fixed-latency backend) or
through the I/O bus, Root Complex packetization, CXL channels, and the
endpoint device.

Cache state and data move at access time; completion times flow through the
event queue, so channel contention shapes timing without perturbing the
functional outcome. CXL misses take three events: Root Complex ingress,
endpoint service, and Root Complex completion.
"""

from __future__ import annotations

from dataclasses import dataclass

from .addrmap import AddressMap, Pool, RegionKind
from .cache import CacheConfig, MemoryHierarchy, Op, SystemMemory
from .engine import Engine, Event, ns_to_ticks
from .protocol import (
    ChannelKind,
    CxlChannel,
    CxlFlit,
    LatencyTicks,
    Opcode,
    OutstandingTable,
    ProtocolViolation,
    TagExhausted,
    complete,
    depacketize_and_serve,
    packetize,
)


class SimulationStalled(Exception):
    """The event queue drained while work was still outstanding."""


class SimulationTimeout(Exception):
    """max_ticks elapsed before the workload finished."""


@dataclass(slots=True)
class _Ingress:
    """A fill or writeback headed for a CXL device, parked at the Root Complex."""

    op: int  # Op.LOAD for fills, Op.STORE for writebacks
    device: str
    offset: int
    data: bytes | None
    issued_at: int  # when the miss left the LLC
    waiter_core: int = -1  # -1 for fire-and-forget writebacks
    waiter_issue: int = 0
    waiter_size: int = 0

    def __repr__(self) -> str:
        kind = "fill" if self.op == Op.LOAD else "wb"
        return f"_Ingress({kind}, {self.device}, {self.offset:#x}, t={self.issued_at})"


class _DeviceLink:
    """The four CXL.mem channels of one endpoint link."""

    def __init__(self, lt: LatencyTicks):
        self.channels = {kind: CxlChannel(kind, lt.svc[kind]) for kind in ChannelKind}


class _PoolCounters:
    __slots__ = ("reads", "writes", "latencies")

    def __init__(self) -> None:
        self.reads = 0
        self.writes = 0
        self.latencies: list[int] = []


def _hist_bucket(ticks: int) -> int:
    """Power-of-two nanosecond bucket (upper bound) for a latency."""
    ns = -(-ticks // 1000)  # ceil
    if ns <= 1:
        return 1
    return 1 << (ns - 1).bit_length()


class System:
    def __init__(self, cfg) -> None:
        from .device import DeviceModel  # local import keeps module load light

        self.cfg = cfg
        self.engine = Engine()
        self.lt: LatencyTicks = cfg.latency.to_ticks()
        self.strict: bool = cfg.strict
        self.memory = SystemMemory()
        self.addr_map = AddressMap(
            regions=list(cfg.regions),
            decoders=list(cfg.decoders),
            mode=cfg.numa_mode,
            page_size=cfg.page_size,
        )
        self.hierarchy = MemoryHierarchy(
            cfg.core_count, cfg.l1, cfg.l2, self.memory, audit=cfg.audit
        )
        self.l1_lat = ns_to_ticks(cfg.l1.hit_latency_ns)
        self.l2_lat = ns_to_ticks(cfg.l2.hit_latency_ns)
        self.outstanding = OutstandingTable(cfg.tag_window)
        self.devices: dict[str, DeviceModel] = {}
        self.links: dict[str, _DeviceLink] = {}
        for dev_cfg in cfg.devices:
            self.devices[dev_cfg.id] = DeviceModel(
                dev_cfg.id,
                dev_cfg.capacity_bytes,
                self.engine,
                self.addr_map,
                mailbox_latency=ns_to_ticks(dev_cfg.mailbox_latency_ns),
            )
            self.links[dev_cfg.id] = _DeviceLink(self.lt)
            self.engine.register(
                f"dev.{dev_cfg.id}.ep",
                lambda ev, dev_id=dev_cfg.id: self._endpoint_rx(dev_id, ev),
            )
        self.engine.register("rc", self._handle_rc)
        self._pending_ingress: list[_Ingress] = []
        self._core_drivers: dict[int, object] = {}

        self.pool = {Pool.DRAM: _PoolCounters(), Pool.CXL: _PoolCounters()}
        self.retired = 0
        self.bytes_accessed = 0
        self.lat_sum_ticks = 0
        self.lat_hist: dict[int, int] = {}
        self.violations = 0
        self.last_activity = 0
        self._driver_seq = 0

    # -- driver plumbing ---------------------------------------------------

    def attach_driver(self, core: int, driver) -> None:
        self._core_drivers[core] = driver

    def next_driver_id(self) -> int:
        self._driver_seq += 1
        return self._driver_seq

    # -- the hot path --------------------------------------------------------

    def issue(
        self, core: int, op: int, addr: int, size: int, value: int | None, now: int
    ) -> tuple[int, int | None]:
        """Run one request through the hierarchy.

        Returns (loaded value, completion tick). A None completion means the
        request went down the CXL path; the core's driver is told when it
        finishes.
        """
        outcome, data, fill, writebacks = self.hierarchy.access(
            core, op, addr, size, value
        )
        if outcome == 0:  # L1 hit
            done = now + self.l1_lat
        elif outcome == 1:  # L2 hit
            done = now + self.l1_lat + self.l2_lat
        else:
            t_miss = now + self.l1_lat + self.l2_lat
            for wb_addr, wb_data in writebacks:
                self._route_writeback(wb_addr, wb_data, t_miss)
            done = self._route_fill(fill, core, now, size, t_miss)
        if done is not None:
            self._retire(size, done - now, done)
        return data, done

    def _route_fill(
        self, line_addr: int, core: int, req_issue: int, req_size: int, t_miss: int
    ) -> int | None:
        if self.addr_map.classify(line_addr) is RegionKind.CXL_WINDOW:
            device, offset = self.addr_map.decode(line_addr)
            ing = _Ingress(
                Op.LOAD, device, offset, None, t_miss,
                waiter_core=core, waiter_issue=req_issue, waiter_size=req_size,
            )
            self.engine.schedule(t_miss + self.lt.iobus, "rc", ing)
            return None
        # Everything else is served by the fixed-latency DRAM backend.
        done = t_miss + self.lt.dram_read
        ctr = self.pool[Pool.DRAM]
        ctr.reads += 1
        ctr.latencies.append(self.lt.dram_read)
        if done > self.last_activity:
            self.last_activity = done
        return done

    def _route_writeback(self, line_addr: int, data: bytes, at: int) -> None:
        if self.addr_map.classify(line_addr) is RegionKind.CXL_WINDOW:
            device, offset = self.addr_map.decode(line_addr)
            ing = _Ingress(Op.STORE, device, offset, data, at)
            self.engine.schedule(at + self.lt.iobus, "rc", ing)
            return
        done = at + self.lt.dram_write
        ctr = self.pool[Pool.DRAM]
        ctr.writes += 1
        ctr.latencies.append(self.lt.dram_write)
        if done > self.last_activity:
            self.last_activity = done

    def _retire(self, size: int, latency: int, at: int) -> None:
        self.retired += 1
        self.bytes_accessed += size
        self.lat_sum_ticks += latency
        bucket = _hist_bucket(latency)
        self.lat_hist[bucket] = self.lat_hist.get(bucket, 0) + 1
        if at > self.last_activity:
            self.last_activity = at

    # -- Root Complex --------------------------------------------------------

    def _handle_rc(self, ev: Event) -> None:
        payload = ev.payload
        if type(payload) is _Ingress:
            self._rc_ingress(payload, ev.fire_at)
        else:
            self._rc_complete(payload, ev.fire_at)

    def _rc_ingress(self, ing: _Ingress, now: int) -> None:
        try:
            self._rc_send(ing, now)
        except TagExhausted:
            # Hardware backpressure: hold at the Root Complex until a tag frees.
            self._pending_ingress.append(ing)

    def _rc_send(self, ing: _Ingress, now: int) -> None:
        flit, enq_t = packetize(
            ing.op, ing.offset, ing.data, self.outstanding, ing, now, self.lt
        )
        kind = ChannelKind.M2S_REQ if ing.op == Op.LOAD else ChannelKind.M2S_RWD
        departure = self.links[ing.device].channels[kind].enqueue(flit, enq_t)
        self.engine.schedule(departure + self.lt.link, f"dev.{ing.device}.ep", flit)

    def _endpoint_rx(self, device_id: str, ev: Event) -> None:
        flit: CxlFlit = ev.payload
        resp, ready = depacketize_and_serve(
            flit, self.devices[device_id].media, ev.fire_at, self.lt
        )
        kind = ChannelKind.S2M_DRS if resp.opcode is Opcode.MEM_DATA else ChannelKind.S2M_NDR
        departure = self.links[device_id].channels[kind].enqueue(resp, ready)
        # Return: link flight plus the Root-Complex-side de-packetization cost.
        self.engine.schedule(departure + self.lt.link + self.lt.pack, "rc", resp)

    def _rc_complete(self, resp: CxlFlit, now: int) -> None:
        try:
            entry, _ = complete(resp, self.outstanding, now)
        except ProtocolViolation:
            if self.strict:
                raise
            self.violations += 1
            return
        ing: _Ingress = entry.origin
        ctr = self.pool[Pool.CXL]
        if ing.op == Op.LOAD:
            ctr.reads += 1
        else:
            ctr.writes += 1
        ctr.latencies.append(now - ing.issued_at)
        if now > self.last_activity:
            self.last_activity = now
        if ing.waiter_core >= 0:
            self._retire(ing.waiter_size, now - ing.waiter_issue, now)
            driver = self._core_drivers.get(ing.waiter_core)
            if driver is not None:
                driver.on_fill_complete(now)
        while self._pending_ingress and len(self.outstanding) < self.outstanding.window:
            self._rc_send(self._pending_ingress.pop(0), now)

    # -- run control ----------------------------------------------------------

    def run_until_idle(self) -> None:
        """Drain the event queue, bounded by max_ticks."""
        if not self.engine.drain(self.cfg.max_ticks):
            raise SimulationTimeout(
                f"events still pending beyond max_ticks={self.cfg.max_ticks}"
            )

    def flush_and_drain(self) -> None:
        """Write back all dirty cache lines and let the traffic settle."""
        at = self.engine.clock
        for wb_addr, wb_data in self.hierarchy.flush():
            self._route_writeback(wb_addr, wb_data, at)
        self.run_until_idle()
        if len(self.outstanding):
            raise SimulationStalled(
                f"outstanding tags after drain: {self.outstanding.live_tags()}"
            )
        if self._pending_ingress:
            raise SimulationStalled("ingress backlog after drain")

    def sim_ns(self) -> float:
        return self.last_activity / 1000.0
