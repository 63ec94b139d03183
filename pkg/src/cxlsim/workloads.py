"""Memory request stream generators: the four stream kernels at configurable
footprints, dependent-load pointer-chase probes, and external trace replay.

Each core runs a windowed driver: requests issue in program order while
fewer than `window` are outstanding, which reduces the in-order versus
out-of-order distinction to memory-level parallelism. Loads return data at
access time, so store values are composed exactly and the computation can
be checked end to end afterwards.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from heapq import heappop, heappush

from .addrmap import InterleavePolicy, Pool
from .cache import Op
from .engine import Event

MASK64 = (1 << 64) - 1

# kernel name -> (arrays used, loads per element, stores per element)
KERNELS = {
    "copy": (("a", "b"), 1, 1),     # a[i] = b[i]
    "scale": (("b", "c"), 1, 1),    # b[i] = s * c[i]
    "add": (("a", "b", "c"), 2, 1),  # a[i] = b[i] + c[i]
    "triad": (("a", "b", "c"), 2, 1),  # a[i] = b[i] + s * c[i]
}


class InsufficientChain(ValueError):
    """A pointer chase needs at least two elements."""


class ParseError(ValueError):
    def __init__(self, lineno: int, message: str):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}")


@dataclass(frozen=True)
class StreamSpec:
    kernel: str
    array_elems: int
    iterations: int = 1
    cores: tuple[int, ...] = (0,)
    scalar: int = 3

    def __post_init__(self) -> None:
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.array_elems < 1 or self.iterations < 1 or not self.cores:
            raise ValueError("array_elems, iterations and cores must be positive")

    @property
    def n_arrays(self) -> int:
        return len(KERNELS[self.kernel][0])

    @property
    def footprint_bytes(self) -> int:
        return self.n_arrays * self.array_elems * 8

    @property
    def bytes_per_iteration(self) -> int:
        arrays, loads, stores = KERNELS[self.kernel]
        return (loads + stores) * 8 * self.array_elems

    @classmethod
    def from_footprint(
        cls,
        kernel: str,
        footprint_x_l2: float,
        l2_bytes: int,
        iterations: int = 1,
        cores: tuple[int, ...] = (0,),
        scalar: int = 3,
    ) -> "StreamSpec":
        """Size the arrays so total footprint is a multiple of the L2 capacity."""
        n_arrays = len(KERNELS[kernel][0])
        elems = int(footprint_x_l2 * l2_bytes) // (8 * n_arrays)
        elems = max(len(cores), elems - elems % len(cores))
        return cls(kernel, elems, iterations, tuple(cores), scalar)


class _WindowedDriver:
    """Engine component issuing one core's request stream under a window bound.

    Runs of requests with engine-known completion times are batched inside a
    single dispatch; the driver yields to the engine whenever a CXL fill is
    in flight so cross-core contention resolves in event order.
    """

    BATCH = 4096

    def __init__(self, system, core: int, window: int):
        self.system = system
        self.core = core
        self.window = window
        self.name = f"core.{core}.drv.{system.next_driver_id()}"
        self._known: list[int] = []
        self._pending = 0
        self._turn_at: int | None = None
        self.finished = False
        system.attach_driver(core, self)
        system.engine.register(self.name, self._handle)

    # subclasses supply the stream
    def _has_next(self) -> bool:
        raise NotImplementedError

    def _issue_next(self, now: int) -> None:
        raise NotImplementedError

    def _issue(self, op: int, addr: int, size: int, value: int | None, now: int) -> int:
        data, done = self.system.issue(self.core, op, addr, size, value, now)
        if done is None:
            self._pending += 1
            self._pending_issue_at = now
        else:
            heappush(self._known, done)
            self._note_latency(done - now)
        return data

    def _note_latency(self, latency: int) -> None:
        pass

    def start(self, at: int) -> None:
        self.system.engine.schedule(at, self.name, "turn")

    def _handle(self, ev: Event) -> None:
        self._turn_at = None
        self._pump(ev.fire_at)

    def on_fill_complete(self, now: int) -> None:
        self._pending -= 1
        self._note_latency(now - self._pending_issue_at)
        self._pump(now)

    def _schedule_turn(self, at: int) -> None:
        if self._turn_at is not None and self._turn_at <= at:
            return
        self._turn_at = at
        self.system.engine.schedule(at, self.name, "turn")

    def _pump(self, t: int) -> None:
        budget = self.BATCH
        known = self._known
        while True:
            while known and known[0] <= t:
                heappop(known)
            if not self._has_next():
                break
            if len(known) + self._pending < self.window:
                self._issue_next(t)
                budget -= 1
                if budget <= 0:
                    self._schedule_turn(t)
                    return
                continue
            if self._pending == 0 and known:
                t = known[0]  # all completions known: advance locally
                continue
            if known:
                self._schedule_turn(known[0])
            return  # waiting on a CXL completion callback
        if self._pending == 0 and not self.finished:
            self.finished = True


class _StreamDriver(_WindowedDriver):
    """One core's slice of a stream kernel: contiguous element range."""

    def __init__(
        self,
        system,
        core: int,
        window: int,
        workload: "StreamWorkload",
        lo: int,
        hi: int,
        iterations: int,
    ):
        super().__init__(system, core, window)
        self.w = workload
        self.lo, self.hi = lo, hi
        self.iterations = iterations
        self._iter = 0
        self._elem = lo
        self._step = 0
        self._vb = 0
        self._vc = 0
        arrays, loads, _ = KERNELS[workload.spec.kernel]
        self._two_loads = loads == 2
        self._steps = loads + 1

    def _has_next(self) -> bool:
        return self._iter < self.iterations

    def _issue_next(self, now: int) -> None:
        w = self.w
        i = self._elem
        step = self._step
        kernel = w.spec.kernel
        if self._two_loads:
            if step == 0:
                self._vb = self._issue(Op.LOAD, w.addr("b", i), 8, None, now)
            elif step == 1:
                self._vc = self._issue(Op.LOAD, w.addr("c", i), 8, None, now)
            else:
                if kernel == "add":
                    value = (self._vb + self._vc) & MASK64
                else:  # triad
                    value = (self._vb + w.spec.scalar * self._vc) & MASK64
                self._issue(Op.STORE, w.addr("a", i), 8, value, now)
        else:
            if step == 0:
                src = "b" if kernel == "copy" else "c"
                self._vb = self._issue(Op.LOAD, w.addr(src, i), 8, None, now)
            else:
                if kernel == "copy":
                    self._issue(Op.STORE, w.addr("a", i), 8, self._vb, now)
                else:  # scale
                    value = (w.spec.scalar * self._vb) & MASK64
                    self._issue(Op.STORE, w.addr("b", i), 8, value, now)
        step += 1
        if step == self._steps:
            self._step = 0
            self._elem = i + 1
            if self._elem >= self.hi:
                self._elem = self.lo
                self._iter += 1
        else:
            self._step = step


class StreamWorkload:
    """Stream arrays mapped through the page-interleaving policy.

    Pages for all arrays are mapped up front in global virtual-page order,
    so the interleave ratio applies across the whole footprint exactly as
    the allocator would fault them in.
    """

    def __init__(self, system, spec: StreamSpec, policy: InterleavePolicy):
        self.system = system
        self.spec = spec
        self.policy = policy
        page = policy.page_size
        arrays = KERNELS[spec.kernel][0]
        array_bytes = spec.array_elems * 8
        pages_per_array = -(-array_bytes // page)
        self.page_shift = page.bit_length() - 1
        self.page_off_mask = page - 1
        self.page_tables: dict[str, list[int]] = {}
        ordinal = 0
        for name in arrays:
            table = []
            for _ in range(pages_per_array):
                table.append(system.addr_map.map_page(ordinal, policy))
                ordinal += 1
            self.page_tables[name] = table
        self.total_pages = ordinal
        self._init_inputs()

    def addr(self, array: str, elem: int) -> int:
        byte = elem * 8
        table = self.page_tables[array]
        return table[byte >> self.page_shift] + (byte & self.page_off_mask)

    @staticmethod
    def input_value(array: str, i: int) -> int:
        # Fixed-point integer inputs keep the end-to-end check exact.
        if array == "b":
            return (i * 3 + 7) & MASK64
        return (i * 5 + 11) & MASK64

    def _init_inputs(self) -> None:
        mem = self.system.memory
        for name in self.page_tables:
            if name == "a":
                continue
            for i in range(0, self.spec.array_elems, 8):
                vals = [
                    self.input_value(name, j)
                    for j in range(i, min(i + 8, self.spec.array_elems))
                ]
                if len(vals) == 8 and self.addr(name, i) % 64 == 0:
                    mem.write_line(self.addr(name, i), struct.pack("<8Q", *vals))
                else:
                    for k, v in enumerate(vals):
                        mem.write(self.addr(name, i + k), 8, v)

    def expected(self, i: int) -> int:
        kernel = self.spec.kernel
        s = self.spec.scalar
        b = self.input_value("b", i)
        c = self.input_value("c", i)
        if kernel == "copy":
            return b
        if kernel == "scale":
            return (s * c) & MASK64
        if kernel == "add":
            return (b + c) & MASK64
        return (b + s * c) & MASK64

    def output_array(self) -> str:
        return "b" if self.spec.kernel == "scale" else "a"

    def run(self, iterations: int | None = None, window: int | None = None) -> None:
        """Issue `iterations` full passes and drain; callable repeatedly on a
        warm system."""
        iters = iterations if iterations is not None else self.spec.iterations
        window = window if window is not None else self.system.cfg.core_window
        cores = self.spec.cores
        n = self.spec.array_elems
        per = n // len(cores)
        extra = n % len(cores)
        drivers = []
        lo = 0
        at = self.system.engine.clock
        for idx, core in enumerate(cores):
            hi = lo + per + (1 if idx < extra else 0)
            drv = _StreamDriver(self.system, core, window, self, lo, hi, iters)
            drivers.append(drv)
            drv.start(at)
            lo = hi
        self.system.run_until_idle()
        for drv in drivers:
            if not drv.finished:
                raise RuntimeError(f"stream driver for core {drv.core} stalled")

    def verify(self) -> None:
        """Check the computation landed in memory, then check the device media
        agrees with it for every CXL line written back."""
        self.system.flush_and_drain()
        mem = self.system.memory
        out = self.output_array()
        for i in range(self.spec.array_elems):
            got = mem.read(self.addr(out, i), 8)
            want = self.expected(i)
            if got != want:
                raise AssertionError(f"{out}[{i}] = {got:#x}, expected {want:#x}")
        for dev_id, device in self.system.devices.items():
            dec = next(
                d for d in self.system.addr_map.decoders
                if d.enabled and d.target_device == dev_id
            )
            for offset, line in device.media._lines.items():
                host = bytes(mem.read_line(dec.base + offset))
                if bytes(line) != host:
                    raise AssertionError(
                        f"device {dev_id} media at {offset:#x} diverges from memory"
                    )


class _ChaseDriver(_WindowedDriver):
    def __init__(self, system, core: int, addrs: list[int]):
        super().__init__(system, core, window=1)
        self.addrs = addrs
        self._idx = 0
        self.latencies: list[int] = []

    def _note_latency(self, latency: int) -> None:
        self.latencies.append(latency)

    def _has_next(self) -> bool:
        return self._idx < len(self.addrs)

    def _issue_next(self, now: int) -> None:
        self._issue(Op.LOAD, self.addrs[self._idx], 8, None, now)
        self._idx += 1


class PointerChase:
    """Dependent-load latency probe: window of one, each load waits for the
    previous completion, measuring the unloaded round trip to one pool."""

    def __init__(
        self, system, elems: int, stride: int, pool: Pool, core: int = 0
    ):
        if elems < 2:
            raise InsufficientChain("pointer chase needs elems >= 2")
        self.system = system
        page = system.addr_map.page_size
        n_pages = -(-(elems * stride) // page)
        table = [system.addr_map.alloc_page(pool) for _ in range(n_pages)]
        shift = page.bit_length() - 1
        self.addrs = [
            table[(i * stride) >> shift] + ((i * stride) & (page - 1))
            for i in range(elems)
        ]
        self.core = core

    def run(self) -> list[int]:
        drv = _ChaseDriver(self.system, self.core, self.addrs)
        drv.start(self.system.engine.clock)
        self.system.run_until_idle()
        if not drv.finished:
            raise RuntimeError("pointer chase stalled")
        return drv.latencies


@dataclass(frozen=True)
class TraceRecord:
    tick_offset: int
    core: int
    op: Op
    addr: int  # virtual: page ordinal * page_size + in-page offset
    size: int


def parse_trace(lines, line_bytes: int = 64) -> list[TraceRecord]:
    """Parse `tick,core,op,addr,size` lines; the header line is optional.

    Records must be sorted by tick offset; sizes above one cache line or
    malformed fields fail with the line number.
    """
    records: list[TraceRecord] = []
    last_tick = -1
    for lineno, raw in enumerate(lines, start=1):
        text = raw.strip()
        if not text or text.startswith("#"):
            continue
        if lineno == 1 and text.lower().replace(" ", "") == "tick,core,op,addr,size":
            continue
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 5:
            raise ParseError(lineno, f"expected 5 fields, got {len(parts)}")
        try:
            tick = int(parts[0], 0)
            core = int(parts[1], 0)
            addr = int(parts[3], 0)
            size = int(parts[4], 0)
        except ValueError as exc:
            raise ParseError(lineno, str(exc)) from None
        if parts[2] not in ("Load", "Store"):
            raise ParseError(lineno, f"op must be Load or Store, got {parts[2]!r}")
        if tick < last_tick:
            raise ParseError(lineno, "tick_offset out of order")
        if size < 1 or size > line_bytes:
            raise ParseError(lineno, f"size must be in [1, {line_bytes}]")
        if tick < 0 or core < 0 or addr < 0:
            raise ParseError(lineno, "negative field")
        last_tick = tick
        records.append(
            TraceRecord(tick, core, Op.LOAD if parts[2] == "Load" else Op.STORE,
                        addr, size)
        )
    return records


class TraceWorkload:
    """Open-loop replay: each record issues at its tick offset; virtual pages
    are faulted through the interleaving policy on first touch. Requests that
    cross a cache-line boundary are split."""

    def __init__(self, system, records: list[TraceRecord], policy: InterleavePolicy):
        self.system = system
        self.records = records
        self.policy = policy
        self._page_table: dict[int, int] = {}
        self._pending = 0
        self._group_idx = 0
        self._groups: list[tuple[int, list[TraceRecord]]] = []
        for rec in records:
            if self._groups and self._groups[-1][0] == rec.tick_offset:
                self._groups[-1][1].append(rec)
            else:
                self._groups.append((rec.tick_offset, [rec]))
        self.name = f"trace.{system.next_driver_id()}"
        system.engine.register(self.name, self._handle)
        for core in set(r.core for r in records):
            system.attach_driver(core, self)

    def _phys(self, vaddr: int) -> int:
        page = self.policy.page_size
        vpage = vaddr // page
        base = self._page_table.get(vpage)
        if base is None:
            base = self.system.addr_map.map_page(vpage, self.policy)
            self._page_table[vpage] = base
        return base + (vaddr % page)

    def on_fill_complete(self, now: int) -> None:
        self._pending -= 1

    def run(self) -> None:
        if not self._groups:
            return
        start = self.system.engine.clock
        self._base = start
        self.system.engine.schedule(start + self._groups[0][0], self.name, "grp")
        self.system.run_until_idle()
        if self._pending or self._group_idx != len(self._groups):
            raise RuntimeError("trace replay stalled")

    def _handle(self, ev: Event) -> None:
        _, recs = self._groups[self._group_idx]
        self._group_idx += 1
        line = self.system.hierarchy.line_bytes
        for rec in recs:
            for vaddr, size in _split_line_crossing(rec.addr, rec.size, line):
                phys = self._phys(vaddr)
                value = 0 if rec.op == Op.STORE else None
                _, done = self.system.issue(
                    rec.core, rec.op, phys, size, value, ev.fire_at
                )
                if done is None:
                    self._pending += 1
        if self._group_idx < len(self._groups):
            self.system.engine.schedule(
                self._base + self._groups[self._group_idx][0], self.name, "grp"
            )


def _split_line_crossing(addr: int, size: int, line: int):
    end = addr + size
    while addr < end:
        boundary = (addr & ~(line - 1)) + line
        chunk = min(end, boundary) - addr
        yield addr, chunk
        addr += chunk
