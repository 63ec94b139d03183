"""Two-level directory-based MESI cache model.

Per-core L1s over a shared, inclusive L2 (the LLC). State and data move at
access time; the surrounding system attaches timing to the returned
outcome. Replacement is strict LRU at both levels, and the L2 carries a
full-map directory embedded in each line, which is the simplest correct
choice at the small core counts this model targets.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from enum import IntEnum


class Op(IntEnum):
    LOAD = 0
    STORE = 1


class CacheOutcome(IntEnum):
    L1_HIT = 0
    L2_HIT = 1
    LLC_MISS = 2


# MESI states for L1 lines; absence of a line is Invalid.
M, E, S = 0, 1, 2


@dataclass(frozen=True)
class CacheConfig:
    level: str  # "l1" or "l2"
    size_bytes: int
    associativity: int
    line_bytes: int = 64
    hit_latency_ns: float = 1.0

    def __post_init__(self) -> None:
        if self.line_bytes <= 0 or self.line_bytes & (self.line_bytes - 1):
            raise ValueError("line_bytes must be a power of two")
        if self.size_bytes % (self.line_bytes * self.associativity):
            raise ValueError("size_bytes must divide by line_bytes * associativity")

    @property
    def n_sets(self) -> int:
        return self.size_bytes // (self.line_bytes * self.associativity)

    @property
    def n_lines(self) -> int:
        return self.size_bytes // self.line_bytes


@dataclass(slots=True)
class MemRequest:
    """A timestamped load/store; the unit of traffic above the CXL boundary."""

    id: int
    core: int
    op: Op
    addr: int
    size: int
    issue_time: int
    data: bytes | None = None

    def __repr__(self) -> str:  # keep dispatch logs compact and deterministic
        return (
            f"MemRequest(id={self.id}, core={self.core}, op={self.op.name}, "
            f"addr={self.addr:#x}, size={self.size}, t={self.issue_time})"
        )


@dataclass(slots=True)
class CacheStats:
    accesses: int = 0
    hits: int = 0
    misses: int = 0
    evictions: int = 0
    writebacks: int = 0

    def as_dict(self) -> dict:
        miss_rate = self.misses / self.accesses if self.accesses else 0.0
        return {
            "accesses": self.accesses,
            "hits": self.hits,
            "misses": self.misses,
            "miss_rate": miss_rate,
            "evictions": self.evictions,
            "writebacks": self.writebacks,
        }

    def reset(self) -> None:
        self.accesses = self.hits = self.misses = 0
        self.evictions = self.writebacks = 0


class _L1Line:
    __slots__ = ("state", "data")

    def __init__(self, state: int, data: bytearray):
        self.state = state
        self.data = data


class _L2Line:
    __slots__ = ("data", "dirty", "owner", "sharers")

    def __init__(self, data: bytearray):
        self.data = data
        self.dirty = False
        self.owner: int | None = None  # core holding the line in M or E
        self.sharers: set[int] = set()


class SystemMemory:
    """Authoritative byte store for the whole physical space, zero-initialized.

    Sparse: only touched lines are materialized, so multi-GiB topologies cost
    nothing until used.
    """

    def __init__(self, line_bytes: int = 64):
        self.line_bytes = line_bytes
        self._lines: dict[int, bytearray] = {}

    def read_line(self, line_addr: int) -> bytearray:
        line = self._lines.get(line_addr)
        if line is None:
            line = bytearray(self.line_bytes)
            self._lines[line_addr] = line
        return line

    def write_line(self, line_addr: int, data: bytes) -> None:
        self._lines[line_addr] = bytearray(data)

    def read(self, addr: int, size: int) -> int:
        line = self.read_line(addr & ~(self.line_bytes - 1))
        off = addr & (self.line_bytes - 1)
        return int.from_bytes(line[off : off + size], "little")

    def write(self, addr: int, size: int, value: int) -> None:
        line = self.read_line(addr & ~(self.line_bytes - 1))
        off = addr & (self.line_bytes - 1)
        line[off : off + size] = value.to_bytes(size, "little")


class CoherenceError(AssertionError):
    """A MESI/directory/inclusion invariant was violated."""


class MemoryHierarchy:
    """Per-core L1s, shared inclusive L2, full-map directory, LRU everywhere."""

    def __init__(
        self,
        n_cores: int,
        l1_cfg: CacheConfig,
        l2_cfg: CacheConfig,
        memory: SystemMemory,
        audit: bool = False,
    ):
        if l1_cfg.line_bytes != l2_cfg.line_bytes:
            raise ValueError("L1 and L2 must share a line size")
        self.n_cores = n_cores
        self.l1_cfg = l1_cfg
        self.l2_cfg = l2_cfg
        self.memory = memory
        self.audit = audit
        self.line_bytes = l1_cfg.line_bytes
        self._line_mask = ~(self.line_bytes - 1)
        self._l1_sets = l1_cfg.n_sets
        self._l2_sets = l2_cfg.n_sets
        self._l1_ways = l1_cfg.associativity
        self._l2_ways = l2_cfg.associativity
        self._line_shift = self.line_bytes.bit_length() - 1
        self.l1: list[list[OrderedDict[int, _L1Line]]] = [
            [OrderedDict() for _ in range(self._l1_sets)] for _ in range(n_cores)
        ]
        self.l2: list[OrderedDict[int, _L2Line]] = [
            OrderedDict() for _ in range(self._l2_sets)
        ]
        self.stats: dict[str, CacheStats] = {
            f"l1.{c}": CacheStats() for c in range(n_cores)
        }
        self.stats["l2"] = CacheStats()

    # -- internal helpers ----------------------------------------------

    def _l1_set(self, core: int, line_addr: int) -> OrderedDict:
        return self.l1[core][(line_addr >> self._line_shift) % self._l1_sets]

    def _l2_set(self, line_addr: int) -> OrderedDict:
        return self.l2[(line_addr >> self._line_shift) % self._l2_sets]

    def _drop_l1(self, core: int, line_addr: int, l2line: _L2Line) -> None:
        """Invalidate one core's copy, merging modified data into L2."""
        l1set = self._l1_set(core, line_addr)
        line = l1set.pop(line_addr, None)
        if line is None:
            return
        if line.state == M:
            l2line.data[:] = line.data
            l2line.dirty = True
        if l2line.owner == core:
            l2line.owner = None
        l2line.sharers.discard(core)
        self.stats[f"l1.{core}"].evictions += 1

    def _evict_l1_victim(self, core: int, l1set: OrderedDict) -> None:
        victim_addr, victim = l1set.popitem(last=False)
        st = self.stats[f"l1.{core}"]
        st.evictions += 1
        l2line = self._l2_set(victim_addr).get(victim_addr)
        if l2line is None:  # inclusion guarantees this never happens
            raise CoherenceError(f"L1 line {victim_addr:#x} missing from L2")
        if victim.state == M:
            l2line.data[:] = victim.data
            l2line.dirty = True
            st.writebacks += 1
        if l2line.owner == core:
            l2line.owner = None
        l2line.sharers.discard(core)

    def _install_l1(
        self, core: int, line_addr: int, state: int, data: bytearray
    ) -> None:
        l1set = self._l1_set(core, line_addr)
        if len(l1set) >= self._l1_ways:
            self._evict_l1_victim(core, l1set)
        l1set[line_addr] = _L1Line(state, data)

    def _evict_l2_victim(self, l2set: OrderedDict) -> tuple[int, bytes] | None:
        """Evict the LRU L2 line; returns a downstream writeback if dirty."""
        victim_addr, victim = l2set.popitem(last=False)
        st = self.stats["l2"]
        st.evictions += 1
        for core in tuple(victim.sharers):
            l1set = self._l1_set(core, victim_addr)
            line = l1set.pop(victim_addr, None)
            if line is not None:
                if line.state == M:
                    victim.data[:] = line.data
                    victim.dirty = True
                self.stats[f"l1.{core}"].evictions += 1
        if victim.dirty:
            data = bytes(victim.data)
            self.memory.write_line(victim_addr, data)
            st.writebacks += 1
            return (victim_addr, data)
        return None

    # -- the access path -------------------------------------------------

    def access(
        self, core: int, op: int, addr: int, size: int, value: int | None = None
    ) -> tuple[CacheOutcome, int, int, list[tuple[int, bytes]]]:
        """Run one load/store through the hierarchy.

        Returns (outcome, loaded value, fill line address or -1, downstream
        writebacks). State, LRU, and data all update here; the caller owns
        timing.
        """
        line_addr = addr & self._line_mask
        off = addr - line_addr
        if off + size > self.line_bytes:
            raise ValueError(f"access at {addr:#x} size {size} crosses a line")
        l1st = self.stats[f"l1.{core}"]
        l1st.accesses += 1
        l1set = self._l1_set(core, line_addr)
        line = l1set.get(line_addr)
        writebacks: list[tuple[int, bytes]] = []
        outcome = CacheOutcome.L1_HIT
        fill = -1

        if line is not None and (op == Op.LOAD or line.state != S):
            # Pure L1 hit; a store to E upgrades silently.
            l1set.move_to_end(line_addr)
            l1st.hits += 1
            if op == Op.STORE:
                line.state = M
                line.data[off : off + size] = value.to_bytes(size, "little")
                result = value
            else:
                result = int.from_bytes(line.data[off : off + size], "little")
        else:
            l1st.misses += 1
            l2st = self.stats["l2"]
            l2st.accesses += 1
            l2set = self._l2_set(line_addr)
            l2line = l2set.get(line_addr)
            if line is not None:
                # Store upgrade on a Shared line: directory invalidates peers.
                l2set.move_to_end(line_addr)
                l2st.hits += 1
                outcome = CacheOutcome.L2_HIT
                for other in tuple(l2line.sharers):
                    if other != core:
                        self._drop_l1(other, line_addr, l2line)
                line.state = M
                l2line.owner = core
                l2line.sharers = {core}
                l1set.move_to_end(line_addr)
                line.data[off : off + size] = value.to_bytes(size, "little")
                result = value
            elif l2line is not None:
                l2set.move_to_end(line_addr)
                l2st.hits += 1
                outcome = CacheOutcome.L2_HIT
                if op == Op.LOAD:
                    owner = l2line.owner
                    if owner is not None:
                        # Intervention: downgrade the M/E holder to Shared.
                        oline = self._l1_set(owner, line_addr).get(line_addr)
                        if oline.state == M:
                            l2line.data[:] = oline.data
                            l2line.dirty = True
                        oline.state = S
                        l2line.owner = None
                    if l2line.sharers:
                        state = S
                        l2line.sharers.add(core)
                    else:
                        state = E
                        l2line.owner = core
                        l2line.sharers = {core}
                    data = bytearray(l2line.data)
                    self._install_l1(core, line_addr, state, data)
                    result = int.from_bytes(data[off : off + size], "little")
                else:
                    owner = l2line.owner
                    if owner is not None and owner != core:
                        self._drop_l1(owner, line_addr, l2line)
                    for other in tuple(l2line.sharers):
                        if other != core:
                            self._drop_l1(other, line_addr, l2line)
                    data = bytearray(l2line.data)
                    data[off : off + size] = value.to_bytes(size, "little")
                    self._install_l1(core, line_addr, M, data)
                    l2line.owner = core
                    l2line.sharers = {core}
                    result = value
            else:
                l2st.misses += 1
                outcome = CacheOutcome.LLC_MISS
                fill = line_addr
                if len(l2set) >= self._l2_ways:
                    wb = self._evict_l2_victim(l2set)
                    if wb is not None:
                        writebacks.append(wb)
                newline = _L2Line(bytearray(self.memory.read_line(line_addr)))
                l2set[line_addr] = newline
                data = bytearray(newline.data)
                if op == Op.STORE:
                    data[off : off + size] = value.to_bytes(size, "little")
                    state = M
                    result = value
                else:
                    state = E
                    result = int.from_bytes(data[off : off + size], "little")
                self._install_l1(core, line_addr, state, data)
                newline.owner = core
                newline.sharers = {core}

        if self.audit:
            self.check_line(line_addr)
        return outcome, result, fill, writebacks

    def flush(self) -> list[tuple[int, bytes]]:
        """Write back every dirty line and drop all cache state."""
        writebacks: list[tuple[int, bytes]] = []
        st = self.stats["l2"]
        for l2set in self.l2:
            for line_addr, l2line in l2set.items():
                owner = l2line.owner
                if owner is not None:
                    oline = self._l1_set(owner, line_addr).get(line_addr)
                    if oline is not None and oline.state == M:
                        l2line.data[:] = oline.data
                        l2line.dirty = True
                if l2line.dirty:
                    data = bytes(l2line.data)
                    self.memory.write_line(line_addr, data)
                    writebacks.append((line_addr, data))
                    st.writebacks += 1
            l2set.clear()
        for core_sets in self.l1:
            for l1set in core_sets:
                l1set.clear()
        return writebacks

    # -- invariant audit ---------------------------------------------------

    def _holders(self, line_addr: int) -> dict[int, int]:
        holders = {}
        for core in range(self.n_cores):
            line = self._l1_set(core, line_addr).get(line_addr)
            if line is not None:
                holders[core] = line.state
        return holders

    def check_line(self, line_addr: int) -> None:
        """Verify MESI safety, directory consistency, and inclusion for one line."""
        l2line = self._l2_set(line_addr).get(line_addr)
        holders = self._holders(line_addr)
        if l2line is None:
            if holders:
                raise CoherenceError(
                    f"{line_addr:#x}: cached in L1 of {sorted(holders)} but not in L2"
                )
            return
        exclusive = [c for c, s in holders.items() if s in (M, E)]
        if len(exclusive) > 1:
            raise CoherenceError(f"{line_addr:#x}: two M/E holders {exclusive}")
        if exclusive:
            c = exclusive[0]
            if len(holders) != 1:
                raise CoherenceError(
                    f"{line_addr:#x}: M/E holder {c} coexists with {sorted(holders)}"
                )
            if l2line.owner != c or l2line.sharers != {c}:
                raise CoherenceError(
                    f"{line_addr:#x}: directory owner={l2line.owner} "
                    f"sharers={sorted(l2line.sharers)} but L1 owner is {c}"
                )
        else:
            if l2line.owner is not None:
                raise CoherenceError(
                    f"{line_addr:#x}: directory owner={l2line.owner} but no M/E holder"
                )
            if l2line.sharers != set(holders):
                raise CoherenceError(
                    f"{line_addr:#x}: directory sharers {sorted(l2line.sharers)} != "
                    f"L1 holders {sorted(holders)}"
                )

    def check_all(self) -> None:
        seen = set()
        for l2set in self.l2:
            for line_addr in l2set:
                self.check_line(line_addr)
                seen.add(line_addr)
        for core in range(self.n_cores):
            for l1set in self.l1[core]:
                for line_addr in l1set:
                    if line_addr not in seen:
                        raise CoherenceError(
                            f"{line_addr:#x}: in L1 of core {core} but not in L2"
                        )
