"""Bit-exact builders and parsers for the firmware structures that expose the
topology to an OS: E820 map, MCFG, CEDT (CHBS + CFMWS), SRAT, and stub
RSDP/MADT. One layout table (struct format) per structure; little-endian
throughout; every ACPI-style table carries a valid mod-256 checksum.

The E820 map is not an ACPI table on real hardware; this artifact wraps it
in the same header (signature "E820") so one checksum and round-trip
machinery covers every emitted blob.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

from .addrmap import AddressMap, NumaMode, RegionKind

ACPI_HEADER_FMT = "<4sIBB6s8sI4sI"
ACPI_HEADER_LEN = struct.calcsize(ACPI_HEADER_FMT)
assert ACPI_HEADER_LEN == 36
CHECKSUM_OFFSET = 9

E820_ENTRY_FMT = "<QQI"  # base, size, type
E820_USABLE = 1
E820_RESERVED = 2

MCFG_RESERVED_FMT = "<8x"
MCFG_ALLOC_FMT = "<QHBB4x"  # ecam base, segment, start bus, end bus

CEDT_CHBS_FMT = "<BBHIIIQQ"  # type=0, rsvd, len, uid, version, rsvd, base, length
CEDT_CFMWS_FIXED_FMT = "<BBHIQQBBHIHH"  # then one u32 per interleave target
CEDT_CHBS_TYPE = 0
CEDT_CFMWS_TYPE = 1

SRAT_PREAMBLE_FMT = "<IQ"  # reserved (must be 1), reserved
SRAT_CPU_FMT = "<BBBBIB3sI"  # type=0, len=16, prox lo, apic, flags, eid, prox hi, clk
SRAT_MEM_FMT = "<BBIHQQIIQ"  # type=1, len=40, prox, rsvd, base, size, rsvd, flags, rsvd
SRAT_CPU_TYPE = 0
SRAT_MEM_TYPE = 1
SRAT_FLAG_ENABLED = 0x1
SRAT_FLAG_HOT_PLUGGABLE = 0x2

OEM_ID = b"CXLSIM"
OEM_TABLE_ID = b"CXLSIMTB"
CREATOR_ID = b"CSIM"

RSDP_FMT = "<8sB6sBIIQB3s"
RSDP_SIGNATURE = b"RSD PTR "

# CFMWS window restrictions: bit1 type-3 memory, bit2 volatile.
CFMWS_RESTRICT_TYPE3_VOLATILE = 0x0006


class FirmwareError(Exception):
    pass


class BadSignature(FirmwareError):
    pass


class BadChecksum(FirmwareError):
    pass


class TruncatedTable(FirmwareError):
    pass


class InconsistentTopology(FirmwareError):
    """A cross-reference between tables and the address map does not hold."""


def checksum_fix(table: bytes) -> int:
    """Byte that makes sum(table) == 0 mod 256, given a zeroed checksum slot."""
    return (256 - sum(table) % 256) % 256


def _pack_header(signature: bytes, body: bytes, revision: int) -> bytes:
    length = ACPI_HEADER_LEN + len(body)
    header = struct.pack(
        ACPI_HEADER_FMT, signature, length, revision, 0,
        OEM_ID, OEM_TABLE_ID, 1, CREATOR_ID, 1,
    )
    blob = bytearray(header + body)
    blob[CHECKSUM_OFFSET] = checksum_fix(bytes(blob))
    return bytes(blob)


def _unpack_header(blob: bytes, expect: bytes | None = None) -> tuple:
    if len(blob) < ACPI_HEADER_LEN:
        raise TruncatedTable(f"{len(blob)} bytes is shorter than a table header")
    fields = struct.unpack_from(ACPI_HEADER_FMT, blob)
    signature, length = fields[0], fields[1]
    if expect is not None and signature != expect:
        raise BadSignature(f"expected {expect!r}, found {signature!r}")
    if length != len(blob):
        raise TruncatedTable(f"header says {length} bytes, blob has {len(blob)}")
    if sum(blob) % 256:
        raise BadChecksum(f"{signature!r} checksum mismatch")
    return fields


@dataclass(frozen=True)
class E820Entry:
    base: int
    size: int
    type: int


@dataclass(frozen=True)
class E820Map:
    entries: tuple[E820Entry, ...]
    revision: int = 1

    def to_bytes(self) -> bytes:
        body = b"".join(
            struct.pack(E820_ENTRY_FMT, e.base, e.size, e.type) for e in self.entries
        )
        return _pack_header(b"E820", body, self.revision)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "E820Map":
        fields = _unpack_header(blob, b"E820")
        body = blob[ACPI_HEADER_LEN:]
        step = struct.calcsize(E820_ENTRY_FMT)
        if len(body) % step:
            raise TruncatedTable("E820 body is not a whole number of entries")
        entries = tuple(
            E820Entry(*struct.unpack_from(E820_ENTRY_FMT, body, i))
            for i in range(0, len(body), step)
        )
        return cls(entries=entries, revision=fields[2])


@dataclass(frozen=True)
class McfgAllocation:
    ecam_base: int
    segment: int
    start_bus: int
    end_bus: int


@dataclass(frozen=True)
class McfgTable:
    allocations: tuple[McfgAllocation, ...]
    revision: int = 1

    def to_bytes(self) -> bytes:
        body = struct.pack(MCFG_RESERVED_FMT) + b"".join(
            struct.pack(MCFG_ALLOC_FMT, a.ecam_base, a.segment, a.start_bus, a.end_bus)
            for a in self.allocations
        )
        return _pack_header(b"MCFG", body, self.revision)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "McfgTable":
        fields = _unpack_header(blob, b"MCFG")
        body = blob[ACPI_HEADER_LEN + struct.calcsize(MCFG_RESERVED_FMT):]
        step = struct.calcsize(MCFG_ALLOC_FMT)
        if len(body) % step:
            raise TruncatedTable("MCFG body is not a whole number of allocations")
        allocs = tuple(
            McfgAllocation(*struct.unpack_from(MCFG_ALLOC_FMT, body, i))
            for i in range(0, len(body), step)
        )
        return cls(allocations=allocs, revision=fields[2])


@dataclass(frozen=True)
class Chbs:
    uid: int
    cxl_version: int
    register_base: int
    register_length: int


@dataclass(frozen=True)
class Cfmws:
    window_base: int
    window_size: int
    interleave_ways: int
    granularity: int
    restrictions: int
    qtg_id: int
    targets: tuple[int, ...]


@dataclass(frozen=True)
class CedtTable:
    chbs: tuple[Chbs, ...]
    cfmws: tuple[Cfmws, ...]
    revision: int = 1

    def to_bytes(self) -> bytes:
        parts = []
        for c in self.chbs:
            parts.append(
                struct.pack(
                    CEDT_CHBS_FMT, CEDT_CHBS_TYPE, 0, 32,
                    c.uid, c.cxl_version, 0, c.register_base, c.register_length,
                )
            )
        for w in self.cfmws:
            # Encoded interleave ways: field value g means 2**g ways.
            eniw = (w.interleave_ways - 1).bit_length()
            if (1 << eniw) != w.interleave_ways:
                raise InconsistentTopology(
                    f"interleave_ways {w.interleave_ways} is not a power of two"
                )
            rec_len = struct.calcsize(CEDT_CFMWS_FIXED_FMT) + 4 * len(w.targets)
            parts.append(
                struct.pack(
                    CEDT_CFMWS_FIXED_FMT, CEDT_CFMWS_TYPE, 0, rec_len, 0,
                    w.window_base, w.window_size, eniw, 0, 0,
                    w.granularity, w.restrictions, w.qtg_id,
                )
                + struct.pack(f"<{len(w.targets)}I", *w.targets)
            )
        return _pack_header(b"CEDT", b"".join(parts), self.revision)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "CedtTable":
        fields = _unpack_header(blob, b"CEDT")
        chbs, cfmws = [], []
        off = ACPI_HEADER_LEN
        while off < len(blob):
            if off + 4 > len(blob):
                raise TruncatedTable("CEDT structure header runs past the blob")
            rtype, _, rlen = struct.unpack_from("<BBH", blob, off)
            if rlen == 0 or off + rlen > len(blob):
                raise TruncatedTable(f"CEDT structure at {off:#x} truncated")
            if rtype == CEDT_CHBS_TYPE:
                _, _, _, uid, ver, _, base, length = struct.unpack_from(
                    CEDT_CHBS_FMT, blob, off
                )
                chbs.append(Chbs(uid, ver, base, length))
            elif rtype == CEDT_CFMWS_TYPE:
                (_, _, _, _, base, size, eniw, _, _, gran, restr, qtg) = (
                    struct.unpack_from(CEDT_CFMWS_FIXED_FMT, blob, off)
                )
                fixed = struct.calcsize(CEDT_CFMWS_FIXED_FMT)
                n_targets = (rlen - fixed) // 4
                targets = struct.unpack_from(f"<{n_targets}I", blob, off + fixed)
                cfmws.append(
                    Cfmws(base, size, 1 << eniw, gran, restr, qtg, tuple(targets))
                )
            else:
                raise BadSignature(f"unknown CEDT structure type {rtype}")
            off += rlen
        return cls(chbs=tuple(chbs), cfmws=tuple(cfmws), revision=fields[2])


@dataclass(frozen=True)
class SratCpuAffinity:
    apic_id: int
    node: int
    flags: int = SRAT_FLAG_ENABLED


@dataclass(frozen=True)
class SratMemAffinity:
    base: int
    size: int
    node: int
    flags: int = SRAT_FLAG_ENABLED


@dataclass(frozen=True)
class SratTable:
    cpus: tuple[SratCpuAffinity, ...]
    memory: tuple[SratMemAffinity, ...]
    revision: int = 3

    def to_bytes(self) -> bytes:
        parts = [struct.pack(SRAT_PREAMBLE_FMT, 1, 0)]
        for c in self.cpus:
            prox_lo = c.node & 0xFF
            prox_hi = ((c.node >> 8) & 0xFFFFFF).to_bytes(3, "little")
            parts.append(
                struct.pack(
                    SRAT_CPU_FMT, SRAT_CPU_TYPE, 16, prox_lo, c.apic_id,
                    c.flags, 0, prox_hi, 0,
                )
            )
        for m in self.memory:
            parts.append(
                struct.pack(
                    SRAT_MEM_FMT, SRAT_MEM_TYPE, 40, m.node, 0,
                    m.base, m.size, 0, m.flags, 0,
                )
            )
        return _pack_header(b"SRAT", b"".join(parts), self.revision)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "SratTable":
        fields = _unpack_header(blob, b"SRAT")
        off = ACPI_HEADER_LEN + struct.calcsize(SRAT_PREAMBLE_FMT)
        if off > len(blob):
            raise TruncatedTable("SRAT preamble truncated")
        cpus, memory = [], []
        while off < len(blob):
            if off + 2 > len(blob):
                raise TruncatedTable("SRAT entry header runs past the blob")
            etype, elen = struct.unpack_from("<BB", blob, off)
            if elen == 0 or off + elen > len(blob):
                raise TruncatedTable(f"SRAT entry at {off:#x} truncated")
            if etype == SRAT_CPU_TYPE:
                (_, _, prox_lo, apic, flags, _, prox_hi, _) = struct.unpack_from(
                    SRAT_CPU_FMT, blob, off
                )
                node = prox_lo | (int.from_bytes(prox_hi, "little") << 8)
                cpus.append(SratCpuAffinity(apic, node, flags))
            elif etype == SRAT_MEM_TYPE:
                (_, _, node, _, base, size, _, flags, _) = struct.unpack_from(
                    SRAT_MEM_FMT, blob, off
                )
                memory.append(SratMemAffinity(base, size, node, flags))
            else:
                raise BadSignature(f"unknown SRAT entry type {etype}")
            off += elen
        return cls(cpus=tuple(cpus), memory=tuple(memory), revision=fields[2])


@dataclass(frozen=True)
class MadtTable:
    """Minimal stub: a local APIC base and no controller entries."""

    lapic_base: int = 0xFEE00000
    flags: int = 1
    revision: int = 4

    def to_bytes(self) -> bytes:
        return _pack_header(
            b"APIC", struct.pack("<II", self.lapic_base, self.flags), self.revision
        )

    @classmethod
    def from_bytes(cls, blob: bytes) -> "MadtTable":
        fields = _unpack_header(blob, b"APIC")
        lapic, flags = struct.unpack_from("<II", blob, ACPI_HEADER_LEN)
        return cls(lapic_base=lapic, flags=flags, revision=fields[2])


@dataclass(frozen=True)
class Rsdp:
    """Minimal stub with both the v1 and the extended checksum valid."""

    revision: int = 2

    def to_bytes(self) -> bytes:
        blob = bytearray(
            struct.pack(
                RSDP_FMT, RSDP_SIGNATURE, 0, OEM_ID, self.revision,
                0, struct.calcsize(RSDP_FMT), 0, 0, b"\x00\x00\x00",
            )
        )
        blob[8] = checksum_fix(bytes(blob[:20]))
        blob[32] = checksum_fix(bytes(blob))
        return bytes(blob)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Rsdp":
        if len(blob) != struct.calcsize(RSDP_FMT):
            raise TruncatedTable("RSDP must be 36 bytes")
        fields = struct.unpack(RSDP_FMT, blob)
        if fields[0] != RSDP_SIGNATURE:
            raise BadSignature(f"bad RSDP signature {fields[0]!r}")
        if sum(blob[:20]) % 256 or sum(blob) % 256:
            raise BadChecksum("RSDP checksum mismatch")
        return cls(revision=fields[3])


@dataclass(frozen=True)
class FirmwareConfig:
    """Platform constants the tables publish."""

    ecam_base: int
    segment: int = 0
    start_bus: int = 0
    end_bus: int = 15
    host_bridge_uid: int = 0
    host_bridge_register_base: int = 0
    host_bridge_register_size: int = 0x10000
    cxl_version: int = 1  # CHBS encoding: 1 means CXL 2.0

    @property
    def ecam_size(self) -> int:
        return (self.end_bus - self.start_bus + 1) * 32 * 8 * 4096


@dataclass
class TableSet:
    e820: E820Map
    mcfg: McfgTable
    cedt: CedtTable
    srat: SratTable
    madt: MadtTable
    rsdp: Rsdp
    dsdt_sidecar: str

    def blobs(self) -> dict[str, bytes]:
        return {
            "e820": self.e820.to_bytes(),
            "mcfg": self.mcfg.to_bytes(),
            "cedt": self.cedt.to_bytes(),
            "srat": self.srat.to_bytes(),
            "madt": self.madt.to_bytes(),
            "rsdp": self.rsdp.to_bytes(),
        }


def default_firmware_config(addr_map: AddressMap) -> FirmwareConfig:
    """Derive ECAM/host-bridge placement from the first MMIO region."""
    mmio = [r for r in addr_map.regions if r.kind is RegionKind.MMIO]
    if not mmio:
        raise InconsistentTopology("no MMIO region to place the ECAM window in")
    region = mmio[0]
    buses = min(16, region.size // (32 * 8 * 4096))
    if buses < 1:
        raise InconsistentTopology("MMIO region too small for one ECAM bus")
    ecam_size = buses * 32 * 8 * 4096
    return FirmwareConfig(
        ecam_base=region.base,
        end_bus=buses - 1,
        host_bridge_register_base=region.base + ecam_size,
    )


def build_tables(
    addr_map: AddressMap,
    n_cores: int,
    devices: dict[str, int],
    fw: FirmwareConfig | None = None,
) -> TableSet:
    """Emit the full table set for a validated topology.

    Raises InconsistentTopology naming the first violated cross-reference.
    """
    fw = fw or default_firmware_config(addr_map)
    regions = addr_map.regions

    mmio = [r for r in regions if r.kind is RegionKind.MMIO]
    if not any(
        r.base <= fw.ecam_base and fw.ecam_base + fw.ecam_size <= r.end for r in mmio
    ):
        raise InconsistentTopology(
            f"ECAM window [{fw.ecam_base:#x},{fw.ecam_base + fw.ecam_size:#x}) "
            f"not covered by an MMIO region"
        )
    hb_end = fw.host_bridge_register_base + fw.host_bridge_register_size
    if not any(
        r.base <= fw.host_bridge_register_base and hb_end <= r.end for r in mmio
    ):
        raise InconsistentTopology(
            "host bridge register window not covered by an MMIO region"
        )

    e820 = E820Map(
        entries=tuple(
            E820Entry(
                r.base,
                r.size,
                E820_USABLE if r.kind is RegionKind.SYSTEM_DRAM else E820_RESERVED,
            )
            for r in regions
        )
    )

    mcfg = McfgTable(
        allocations=(
            McfgAllocation(fw.ecam_base, fw.segment, fw.start_bus, fw.end_bus),
        )
    )

    windows = [r for r in regions if r.kind is RegionKind.CXL_WINDOW]
    cfmws = tuple(
        Cfmws(
            window_base=r.base,
            window_size=r.size,
            interleave_ways=1,  # single logic devices only
            granularity=0,
            restrictions=CFMWS_RESTRICT_TYPE3_VOLATILE,
            qtg_id=0,
            targets=(fw.host_bridge_uid,),
        )
        for r in windows
    )
    cedt = CedtTable(
        chbs=(
            Chbs(
                uid=fw.host_bridge_uid,
                cxl_version=fw.cxl_version,
                register_base=fw.host_bridge_register_base,
                register_length=fw.host_bridge_register_size,
            ),
        ),
        cfmws=cfmws,
    )

    sys_nodes = {
        r.numa_node
        for r in regions
        if r.kind is RegionKind.SYSTEM_DRAM and r.numa_node is not None
    }
    if not sys_nodes:
        raise InconsistentTopology("no system DRAM region carries a NUMA node")
    cpu_node = min(sys_nodes)
    mem_entries = []
    for r in regions:
        if r.numa_node is None:
            continue
        if r.kind is RegionKind.CXL_WINDOW:
            if addr_map.mode is NumaMode.FLAT and r.numa_node not in sys_nodes:
                raise InconsistentTopology(
                    f"flat-mode CXL range at {r.base:#x} must carry the system "
                    f"node id, found node {r.numa_node}"
                )
            if addr_map.mode is NumaMode.ZNUMA and r.numa_node in sys_nodes:
                raise InconsistentTopology(
                    f"znuma-mode CXL range at {r.base:#x} must live on a "
                    f"CPU-less node, found node {r.numa_node}"
                )
            flags = SRAT_FLAG_ENABLED | SRAT_FLAG_HOT_PLUGGABLE
        elif r.kind is RegionKind.SYSTEM_DRAM:
            flags = SRAT_FLAG_ENABLED
        else:
            continue
        mem_entries.append(SratMemAffinity(r.base, r.size, r.numa_node, flags))
    srat = SratTable(
        cpus=tuple(SratCpuAffinity(apic_id=i, node=cpu_node) for i in range(n_cores)),
        memory=tuple(mem_entries),
    )

    sidecar = json.dumps(
        {
            "encoding": "cxlsim-topology-sidecar",
            "version": 1,
            "host_bridges": [
                {
                    "uid": fw.host_bridge_uid,
                    "acpi_hid": "ACPI0016",
                    "register_base": fw.host_bridge_register_base,
                    "register_size": fw.host_bridge_register_size,
                }
            ],
            "mmio_windows": [
                {"base": r.base, "size": r.size} for r in mmio
            ],
            "devices": [
                {"id": dev_id, "capacity_bytes": cap}
                for dev_id, cap in sorted(devices.items())
            ],
        },
        indent=2,
        sort_keys=True,
    ) + "\n"

    tables = TableSet(
        e820=e820, mcfg=mcfg, cedt=cedt, srat=srat,
        madt=MadtTable(), rsdp=Rsdp(), dsdt_sidecar=sidecar,
    )
    _check_cross_references(tables, addr_map)
    return tables


def _check_cross_references(tables: TableSet, addr_map: AddressMap) -> None:
    windows = {
        (r.base, r.size)
        for r in addr_map.regions
        if r.kind is RegionKind.CXL_WINDOW
    }
    emitted = {(w.window_base, w.window_size) for w in tables.cedt.cfmws}
    if windows != emitted:
        raise InconsistentTopology(
            f"CFMWS windows {sorted(emitted)} != CXL regions {sorted(windows)}"
        )
    for w in tables.cedt.cfmws:
        if w.interleave_ways != 1:
            raise InconsistentTopology("single logic devices require 1-way windows")
    node_regions = {
        (r.base, r.size, r.numa_node)
        for r in addr_map.regions
        if r.numa_node is not None
    }
    srat_regions = {(m.base, m.size, m.node) for m in tables.srat.memory}
    if srat_regions != node_regions:
        raise InconsistentTopology(
            f"SRAT memory affinity {sorted(srat_regions)} != NUMA regions "
            f"{sorted(node_regions)}"
        )


_PARSERS = {
    b"E820": E820Map.from_bytes,
    b"MCFG": McfgTable.from_bytes,
    b"CEDT": CedtTable.from_bytes,
    b"SRAT": SratTable.from_bytes,
    b"APIC": MadtTable.from_bytes,
}


def parse_table(blob: bytes):
    """Dispatch on the signature and return the structured table."""
    if len(blob) >= 8 and blob[:8] == RSDP_SIGNATURE:
        return Rsdp.from_bytes(blob)
    if len(blob) < 4:
        raise TruncatedTable("blob shorter than a signature")
    parser = _PARSERS.get(bytes(blob[:4]))
    if parser is None:
        raise BadSignature(f"unrecognized signature {bytes(blob[:4])!r}")
    return parser(blob)
