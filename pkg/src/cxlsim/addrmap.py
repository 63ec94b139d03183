"""Physical address space model: regions, NUMA assignment, page interleaving,
and HDM-decoder translation of host physical addresses to device-local offsets.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass, field
from enum import Enum

PAGE_ALIGN = 4096
DECODER_ALIGN = 256 * 1024 * 1024  # CXL 2.0 decoder granularity


class RegionKind(Enum):
    SYSTEM_DRAM = "system_dram"
    CXL_WINDOW = "cxl_window"
    RESERVED = "reserved"
    MMIO = "mmio"


class Pool(Enum):
    DRAM = "dram"
    CXL = "cxl"


class NumaMode(Enum):
    ZNUMA = "znuma"
    FLAT = "flat"


class PoolExhausted(Exception):
    """The named page pool has no free pages left for the workload footprint."""

    def __init__(self, pool: Pool):
        self.pool = pool
        super().__init__(f"{pool.value} pool exhausted")


@dataclass(frozen=True, slots=True)
class PhysRegion:
    base: int
    size: int
    kind: RegionKind
    numa_node: int | None = None

    @property
    def end(self) -> int:
        return self.base + self.size

    def contains(self, addr: int) -> bool:
        return self.base <= addr < self.end


@dataclass(slots=True)
class HdmDecoder:
    index: int
    base: int
    size: int
    target_device: str
    enabled: bool = True

    @property
    def end(self) -> int:
        return self.base + self.size


@dataclass(frozen=True)
class InterleavePolicy:
    """OS page-interleaving ratio between system DRAM and CXL memory.

    Weights are gcd-reduced so (2,2) behaves identically to (1,1).
    """

    dram_weight: int
    cxl_weight: int
    page_size: int = 4096

    def __post_init__(self) -> None:
        if self.dram_weight < 1:
            raise ValueError("dram_weight must be >= 1")
        if self.cxl_weight < 0:
            raise ValueError("cxl_weight must be >= 0")
        if self.page_size < 4096 or self.page_size & (self.page_size - 1):
            raise ValueError("page_size must be a power of two >= 4096")
        g = math.gcd(self.dram_weight, self.cxl_weight)
        if g > 1:
            object.__setattr__(self, "dram_weight", self.dram_weight // g)
            object.__setattr__(self, "cxl_weight", self.cxl_weight // g)

    @classmethod
    def parse(cls, text: str, page_size: int = 4096) -> "InterleavePolicy":
        """Parse an "a:b" ratio string."""
        parts = text.split(":")
        if len(parts) != 2:
            raise ValueError(f"interleave ratio must look like 'a:b', got {text!r}")
        return cls(int(parts[0]), int(parts[1]), page_size)

    @property
    def window(self) -> int:
        return self.dram_weight + self.cxl_weight


def assign_page(page_index: int, policy: InterleavePolicy) -> Pool:
    """Weighted round-robin page placement by virtual page ordinal.

    Within each window of (dram_weight + cxl_weight) consecutive pages the
    first dram_weight pages go to DRAM and the remainder to CXL.
    """
    if page_index < 0:
        raise ValueError("page_index must be >= 0")
    if policy.cxl_weight == 0:
        return Pool.DRAM
    pos = page_index % policy.window
    return Pool.DRAM if pos < policy.dram_weight else Pool.CXL


def decode_hdm(host_addr: int, decoders: list[HdmDecoder]) -> tuple[str, int] | None:
    """Translate a host physical address through the enabled HDM decoders.

    Returns (target_device, device-local offset), or None when no enabled
    decoder covers the address. Overlap among enabled decoders is a
    configuration error caught at validation time, never here.
    """
    for dec in decoders:
        if dec.enabled and dec.base <= host_addr < dec.end:
            return dec.target_device, host_addr - dec.base
    return None


@dataclass(slots=True)
class NumaNode:
    node_id: int
    has_cpus: bool
    regions: list[PhysRegion] = field(default_factory=list)


@dataclass(slots=True)
class NumaTopology:
    nodes: list[NumaNode]
    mode: NumaMode


class AddressMap:
    """E820-style region list plus allocator state and decoder set.

    Regions and decoders are mutable only before simulation start; during a
    run everything except map_page (which moves the pool cursors) is
    read-only.
    """

    def __init__(
        self,
        regions: list[PhysRegion],
        decoders: list[HdmDecoder],
        mode: NumaMode = NumaMode.ZNUMA,
        page_size: int = 4096,
    ) -> None:
        self.regions = sorted(regions, key=lambda r: r.base)
        self.decoders = list(decoders)
        self.mode = mode
        self.page_size = page_size
        self._bases = [r.base for r in self.regions]
        self._rebuild_pools()

    def _rebuild_pools(self) -> None:
        self._pool_regions: dict[Pool, list[PhysRegion]] = {
            Pool.DRAM: [r for r in self.regions if r.kind is RegionKind.SYSTEM_DRAM],
            Pool.CXL: [
                r
                for r in self.regions
                if r.kind is RegionKind.CXL_WINDOW and r.numa_node is not None
            ],
        }
        # cursor = (region list index, page offset inside that region)
        self._cursor: dict[Pool, tuple[int, int]] = {Pool.DRAM: (0, 0), Pool.CXL: (0, 0)}
        self._allocated: dict[Pool, int] = {Pool.DRAM: 0, Pool.CXL: 0}

    # -- queries -------------------------------------------------------

    def classify(self, host_addr: int) -> RegionKind:
        """Region kind containing the address; holes classify as Reserved."""
        i = bisect_right(self._bases, host_addr) - 1
        if i >= 0 and self.regions[i].contains(host_addr):
            return self.regions[i].kind
        return RegionKind.RESERVED

    def region_at(self, host_addr: int) -> PhysRegion | None:
        i = bisect_right(self._bases, host_addr) - 1
        if i >= 0 and self.regions[i].contains(host_addr):
            return self.regions[i]
        return None

    def decode(self, host_addr: int) -> tuple[str, int] | None:
        return decode_hdm(host_addr, self.decoders)

    def pool_pages(self, pool: Pool) -> int:
        return sum(r.size // self.page_size for r in self._pool_regions[pool])

    def pages_allocated(self, pool: Pool) -> int:
        return self._allocated[pool]

    # -- allocation ----------------------------------------------------

    def alloc_page(self, pool: Pool) -> int:
        """Next-lowest free physical page base in the pool; marks it used.

        There is no free(): allocation cursors only advance, so no physical
        page is ever handed out twice.
        """
        regions = self._pool_regions[pool]
        ri, po = self._cursor[pool]
        while ri < len(regions):
            region = regions[ri]
            if po < region.size // self.page_size:
                self._cursor[pool] = (ri, po + 1)
                self._allocated[pool] += 1
                return region.base + po * self.page_size
            ri, po = ri + 1, 0
        raise PoolExhausted(pool)

    def map_page(self, page_index: int, policy: InterleavePolicy) -> int:
        """Back a virtual page ordinal with a physical page per the policy."""
        return self.alloc_page(assign_page(page_index, policy))

    # -- online/offline management path ---------------------------------

    def system_node_id(self) -> int:
        for r in self.regions:
            if r.kind is RegionKind.SYSTEM_DRAM and r.numa_node is not None:
                return r.numa_node
        raise ValueError("no system DRAM region with a NUMA node")

    def online_cxl(self, device_id: str, nbytes: int, mode: NumaMode) -> NumaTopology:
        """Assign nbytes of a device's not-yet-onlined window to a NUMA node.

        ZNUMA places the range on a CPU-less node; FLAT folds it into the
        system-DRAM node so the OS sees one contiguous pool.
        """
        if self._allocated[Pool.DRAM] or self._allocated[Pool.CXL]:
            raise RuntimeError("cannot online memory after page allocation started")
        if nbytes % DECODER_ALIGN:
            raise ValueError(f"online size must be a multiple of {DECODER_ALIGN}")
        target = None
        for r in self.regions:
            if r.kind is RegionKind.CXL_WINDOW and r.numa_node is None:
                dec = self.decode(r.base)
                if dec is not None and dec[0] == device_id:
                    target = r
                    break
        if target is None:
            raise ValueError(f"device {device_id!r} has no offline window space")
        if nbytes > target.size:
            raise ValueError("online size exceeds remaining window")
        if mode is NumaMode.FLAT:
            node = self.system_node_id()
        else:
            used = {r.numa_node for r in self.regions if r.numa_node is not None}
            cpu_less = {
                r.numa_node
                for r in self.regions
                if r.kind is RegionKind.CXL_WINDOW and r.numa_node is not None
            }
            node = min(cpu_less) if cpu_less else (max(used) + 1 if used else 1)
        self.regions.remove(target)
        self.regions.append(PhysRegion(target.base, nbytes, RegionKind.CXL_WINDOW, node))
        if nbytes < target.size:
            self.regions.append(
                PhysRegion(target.base + nbytes, target.size - nbytes, RegionKind.CXL_WINDOW)
            )
        self.regions.sort(key=lambda r: r.base)
        self._bases = [r.base for r in self.regions]
        self._rebuild_pools()
        return self.topology()

    def topology(self) -> NumaTopology:
        """Derive the NUMA node view from region assignments.

        CPUs live on the system-DRAM node; CXL-backed nodes are CPU-less
        unless flat mode folded them into the system node.
        """
        cpu_nodes = {
            r.numa_node
            for r in self.regions
            if r.kind is RegionKind.SYSTEM_DRAM and r.numa_node is not None
        }
        by_node: dict[int, list[PhysRegion]] = {}
        for r in self.regions:
            if r.numa_node is not None:
                by_node.setdefault(r.numa_node, []).append(r)
        nodes = [
            NumaNode(node_id=n, has_cpus=n in cpu_nodes, regions=regs)
            for n, regs in sorted(by_node.items())
        ]
        return NumaTopology(nodes=nodes, mode=self.mode)

    # -- validation ------------------------------------------------------

    def validate(self, device_capacities: dict[str, int] | None = None) -> list[str]:
        """Check every structural invariant; returns all violations, not just the first."""
        problems: list[str] = []
        for i, r in enumerate(self.regions):
            if r.base % PAGE_ALIGN or r.size % PAGE_ALIGN:
                problems.append(
                    f"topology.regions[{i}]: base/size not 4KiB aligned "
                    f"(base={r.base:#x}, size={r.size:#x})"
                )
            if r.size <= 0:
                problems.append(f"topology.regions[{i}]: size must be positive")
        for i in range(1, len(self.regions)):
            prev, cur = self.regions[i - 1], self.regions[i]
            if cur.base < prev.end:
                problems.append(
                    f"topology.regions[{i}]: overlaps regions[{i - 1}] "
                    f"([{prev.base:#x},{prev.end:#x}) vs [{cur.base:#x},{cur.end:#x}))"
                )
        enabled = [d for d in self.decoders if d.enabled]
        for d in enabled:
            if d.base % DECODER_ALIGN or d.size % DECODER_ALIGN:
                problems.append(
                    f"topology.decoders[{d.index}]: base/size not 256MiB aligned"
                )
        for a in range(len(enabled)):
            for b in range(a + 1, len(enabled)):
                da, db = enabled[a], enabled[b]
                if da.base < db.end and db.base < da.end:
                    problems.append(
                        f"topology.decoders[{da.index}]: overlaps decoders[{db.index}]"
                    )
        for i, r in enumerate(self.regions):
            if r.kind is not RegionKind.CXL_WINDOW:
                continue
            covering = [
                d for d in enabled if d.base <= r.base and r.end <= d.end
            ]
            if len(covering) != 1:
                problems.append(
                    f"topology.regions[{i}]: CXL window covered by "
                    f"{len(covering)} enabled decoders, need exactly 1"
                )
            elif device_capacities is not None:
                dec = covering[0]
                cap = device_capacities.get(dec.target_device)
                if cap is None:
                    problems.append(
                        f"topology.decoders[{dec.index}]: unknown device "
                        f"{dec.target_device!r}"
                    )
                elif (r.end - dec.base) > cap:
                    problems.append(
                        f"topology.regions[{i}]: window extends past device "
                        f"{dec.target_device!r} capacity"
                    )
        sys_nodes = {
            r.numa_node
            for r in self.regions
            if r.kind is RegionKind.SYSTEM_DRAM and r.numa_node is not None
        }
        for i, r in enumerate(self.regions):
            if r.kind is RegionKind.CXL_WINDOW and r.numa_node is not None:
                if self.mode is NumaMode.FLAT and r.numa_node not in sys_nodes:
                    problems.append(
                        f"topology.regions[{i}]: flat mode requires the CXL range "
                        f"to share the system DRAM node"
                    )
                if self.mode is NumaMode.ZNUMA and r.numa_node in sys_nodes:
                    problems.append(
                        f"topology.regions[{i}]: znuma mode requires a CPU-less "
                        f"node for CXL memory"
                    )
        return problems
