"""CXL.mem transaction layer: host-side packetization into M2S flits,
endpoint de-packetization and service, S2M responses, and per-channel FIFO
contention with calibratable per-hop latencies.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from heapq import heappop, heappush

from .engine import ns_to_ticks

LINE_BYTES = 64


class ChannelKind(Enum):
    M2S_REQ = "m2s_req"
    M2S_RWD = "m2s_rwd"
    S2M_NDR = "s2m_ndr"
    S2M_DRS = "s2m_drs"


class Opcode(Enum):
    MEM_RD = "MemRd"
    MEM_WR = "MemWr"
    CMP = "Cmp"
    MEM_DATA = "MemData"


# Wire encodings per the CXL 2.0 M2S/S2M opcode tables. Encodings collide
# across channels, so decode is keyed by (channel, bits). This table is the
# single source of truth for the opcode<->channel binding.
OPCODE_WIRE: dict[Opcode, tuple[ChannelKind, int]] = {
    Opcode.MEM_RD: (ChannelKind.M2S_REQ, 0b0001),
    Opcode.MEM_WR: (ChannelKind.M2S_RWD, 0b0001),
    Opcode.CMP: (ChannelKind.S2M_NDR, 0b000),
    Opcode.MEM_DATA: (ChannelKind.S2M_DRS, 0b000),
}

_WIRE_DECODE = {(ch, bits): op for op, (ch, bits) in OPCODE_WIRE.items()}

# Opcodes that carry a 64-byte payload.
_PAYLOAD_OPCODES = frozenset({Opcode.MEM_WR, Opcode.MEM_DATA})


def encode_opcode(op: Opcode) -> tuple[ChannelKind, int]:
    return OPCODE_WIRE[op]


def decode_opcode(channel: ChannelKind, bits: int) -> Opcode:
    try:
        return _WIRE_DECODE[(channel, bits)]
    except KeyError:
        raise ProtocolViolation(f"no opcode {bits:#x} on channel {channel.value}")


class ProtocolViolation(Exception):
    """A transaction-layer rule was broken; aborts the run in strict mode."""


class TagExhausted(ProtocolViolation):
    """More outstanding requests than the configured tag window."""


class UnknownTag(ProtocolViolation):
    """A response arrived for a tag with no outstanding request."""


class AddressOutOfRange(ProtocolViolation):
    """A flit addressed memory beyond the device capacity."""


@dataclass(slots=True)
class CxlFlit:
    opcode: Opcode
    tag: int
    created_at: int
    addr: int | None = None  # device-local offset, M2S only
    payload: bytes | None = None

    def __repr__(self) -> str:
        addr = f", addr={self.addr:#x}" if self.addr is not None else ""
        return f"CxlFlit({self.opcode.value}, tag={self.tag}{addr}, t={self.created_at})"


@dataclass(frozen=True)
class LatencyConfig:
    """Per-hop delays in nanoseconds, exposed verbatim for calibration."""

    iobus_ns: float = 10.0
    pack_ns: float = 5.0
    link_ns: float = 20.0
    depack_ns: float = 5.0
    device_ctrl_ns: float = 15.0
    media_read_ns: float = 50.0
    media_write_ns: float = 60.0
    dram_read_ns: float = 40.0
    dram_write_ns: float = 40.0
    service_interval_ns: dict = field(
        default_factory=lambda: {
            "m2s_req": 2.0,
            "m2s_rwd": 2.0,
            "s2m_ndr": 1.0,
            "s2m_drs": 4.0,
        }
    )

    def to_ticks(self) -> "LatencyTicks":
        svc = {
            kind: ns_to_ticks(float(self.service_interval_ns.get(kind.value, 0.0)))
            for kind in ChannelKind
        }
        return LatencyTicks(
            iobus=ns_to_ticks(self.iobus_ns),
            pack=ns_to_ticks(self.pack_ns),
            link=ns_to_ticks(self.link_ns),
            depack=ns_to_ticks(self.depack_ns),
            device_ctrl=ns_to_ticks(self.device_ctrl_ns),
            media_read=ns_to_ticks(self.media_read_ns),
            media_write=ns_to_ticks(self.media_write_ns),
            dram_read=ns_to_ticks(self.dram_read_ns),
            dram_write=ns_to_ticks(self.dram_write_ns),
            svc=svc,
        )


@dataclass(frozen=True)
class LatencyTicks:
    iobus: int
    pack: int
    link: int
    depack: int
    device_ctrl: int
    media_read: int
    media_write: int
    dram_read: int
    dram_write: int
    svc: dict


def cxl_read_path_ticks(lt: LatencyTicks) -> int:
    """The documented unloaded read path, request issue to fill delivery.

    Outbound: I/O bus crossing, Root Complex packetization, M2S Req channel
    service, link flight, endpoint de-packetization, device controller,
    media read. Return: S2M DRS channel service, link flight, and a Root
    Complex de-packetization cost equal to pack (symmetric stages). The
    I/O bus is paid once, outbound.
    """
    return (
        lt.iobus
        + lt.pack
        + lt.svc[ChannelKind.M2S_REQ]
        + lt.link
        + lt.depack
        + lt.device_ctrl
        + lt.media_read
        + lt.svc[ChannelKind.S2M_DRS]
        + lt.link
        + lt.pack
    )


def cxl_write_path_ticks(lt: LatencyTicks) -> int:
    """Unloaded write path: as the read path but via M2S RwD / S2M NDR and
    media write."""
    return (
        lt.iobus
        + lt.pack
        + lt.svc[ChannelKind.M2S_RWD]
        + lt.link
        + lt.depack
        + lt.device_ctrl
        + lt.media_write
        + lt.svc[ChannelKind.S2M_NDR]
        + lt.link
        + lt.pack
    )


class CxlChannel:
    """One direction-specific FIFO with a bandwidth-model service interval.

    Departure of flit i is max(arrival_i, departure_{i-1}) + interval, so at
    most one flit completes service per interval and order is preserved.
    """

    def __init__(self, kind: ChannelKind, service_interval: int):
        self.kind = kind
        self.service_interval = service_interval
        self.last_departure = 0
        self.flits = 0
        self.max_depth = 0
        self._sojourn_ticks = 0
        self._in_service: deque[int] = deque()  # pending departure times

    def enqueue(self, flit: CxlFlit, at: int) -> int:
        """Admit a flit at time `at`; returns its departure time."""
        expect_channel, _ = OPCODE_WIRE[flit.opcode]
        if expect_channel is not self.kind:
            raise ProtocolViolation(
                f"{flit.opcode.value} flit on channel {self.kind.value}"
            )
        if (flit.payload is not None) != (flit.opcode in _PAYLOAD_OPCODES):
            raise ProtocolViolation(
                f"{flit.opcode.value} flit payload presence rule violated"
            )
        if flit.payload is not None and len(flit.payload) != LINE_BYTES:
            raise ProtocolViolation(
                f"payload must be {LINE_BYTES} bytes, got {len(flit.payload)}"
            )
        departure = max(at, self.last_departure) + self.service_interval
        self.last_departure = departure
        self.flits += 1
        self._sojourn_ticks += departure - at
        inq = self._in_service
        while inq and inq[0] <= at:
            inq.popleft()
        inq.append(departure)
        if len(inq) > self.max_depth:
            self.max_depth = len(inq)
        return departure

    def mean_depth(self, elapsed_ticks: int) -> float:
        if elapsed_ticks <= 0:
            return 0.0
        return self._sojourn_ticks / elapsed_ticks


class DeviceMedia:
    """Zero-initialized device memory, line-granular, sparse."""

    def __init__(self, capacity_bytes: int):
        self.capacity = capacity_bytes
        self._lines: dict[int, bytes] = {}

    def read_line(self, offset: int) -> bytes:
        self._check(offset)
        return self._lines.get(offset, bytes(LINE_BYTES))

    def write_line(self, offset: int, data: bytes) -> None:
        self._check(offset)
        self._lines[offset] = bytes(data)

    def _check(self, offset: int) -> None:
        if offset < 0 or offset + LINE_BYTES > self.capacity:
            raise AddressOutOfRange(
                f"offset {offset:#x} outside device capacity {self.capacity:#x}"
            )
        if offset % LINE_BYTES:
            raise AddressOutOfRange(f"offset {offset:#x} not line aligned")


@dataclass(slots=True)
class OutstandingEntry:
    tag: int
    kind: Opcode
    origin: object  # opaque host bookkeeping (request, waiter, ...)
    created_at: int


class OutstandingTable:
    """Tag allocator and tracker for requests in flight.

    Tags are reused smallest-first after completion; each live tag is
    unique, and every entry is removed exactly once by its matching
    response.
    """

    def __init__(self, window: int = 64):
        self.window = window
        self._entries: dict[int, OutstandingEntry] = {}
        self._free: list[int] = list(range(window))
        self.allocated_total = 0
        self.completed_total = 0

    def __len__(self) -> int:
        return len(self._entries)

    def alloc(self, kind: Opcode, origin: object, now: int) -> int:
        if not self._free:
            raise TagExhausted(f"all {self.window} tags outstanding")
        tag = heappop(self._free)
        self._entries[tag] = OutstandingEntry(tag, kind, origin, now)
        self.allocated_total += 1
        return tag

    def complete(self, tag: int) -> OutstandingEntry:
        entry = self._entries.pop(tag, None)
        if entry is None:
            raise UnknownTag(f"response for unknown tag {tag}")
        heappush(self._free, tag)
        self.completed_total += 1
        return entry

    def live_tags(self) -> list[int]:
        return sorted(self._entries)


def packetize(
    op: int,
    offset: int,
    payload: bytes | None,
    table: OutstandingTable,
    origin: object,
    now: int,
    lt: LatencyTicks,
) -> tuple[CxlFlit, int]:
    """Root Complex packetization of a host request into an M2S flit.

    Loads become MemRd on M2S Req; stores become MemWr with payload on M2S
    RwD. Returns the flit and its channel enqueue time (now + pack cost).
    A tag is allocated and recorded; TagExhausted propagates when the
    outstanding window is full.
    """
    if op == 0:  # load
        tag = table.alloc(Opcode.MEM_RD, origin, now)
        flit = CxlFlit(Opcode.MEM_RD, tag, now, addr=offset)
    else:
        if payload is None:
            raise ProtocolViolation("store packetization requires a payload")
        tag = table.alloc(Opcode.MEM_WR, origin, now)
        flit = CxlFlit(Opcode.MEM_WR, tag, now, addr=offset, payload=bytes(payload))
    return flit, now + lt.pack


def depacketize_and_serve(
    flit: CxlFlit, media: DeviceMedia, now: int, lt: LatencyTicks
) -> tuple[CxlFlit, int]:
    """Endpoint de-packetization and media service of one M2S flit.

    Returns the response flit and the time it lands on its S2M channel:
    arrival + depack + controller + media access. Reads return the line
    content (zero-filled if never written); writes update the media and
    complete with Cmp.
    """
    if flit.opcode is Opcode.MEM_RD:
        data = media.read_line(flit.addr)
        ready = now + lt.depack + lt.device_ctrl + lt.media_read
        return CxlFlit(Opcode.MEM_DATA, flit.tag, ready, payload=data), ready
    if flit.opcode is Opcode.MEM_WR:
        media.write_line(flit.addr, flit.payload)
        ready = now + lt.depack + lt.device_ctrl + lt.media_write
        return CxlFlit(Opcode.CMP, flit.tag, ready), ready
    raise ProtocolViolation(f"endpoint received non-M2S flit {flit.opcode.value}")


def complete(
    resp: CxlFlit, table: OutstandingTable, now: int
) -> tuple[OutstandingEntry, int]:
    """Retire a response at the Root Complex.

    Removes the outstanding entry and returns it with the end-to-end
    latency relative to the entry's creation. UnknownTag propagates for
    responses without a matching request.
    """
    entry = table.complete(resp.tag)
    return entry, now - entry.created_at
