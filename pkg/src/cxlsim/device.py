"""CXL endpoint management plane: configuration-space register file with the
DVSEC capability chain, component registers (link/RAS/SEC/HDM decoders), the
mailbox command engine with its doorbell, and the memory-online lifecycle.

Register offsets live in one layout table, which is the single source of
truth for the register map and the generated documentation page.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum

from .addrmap import DECODER_ALIGN, AddressMap, HdmDecoder, NumaMode, NumaTopology
from .engine import Engine, Event
from .protocol import DeviceMedia

CFG_SPACE_SIZE = 4096
CXL_VENDOR_ID = 0x1E98

# DVSEC IDs per the CXL 2.0 designated vendor-specific capability assignments.
DVSEC_ID_GPF_DEVICE = 0x0004
DVSEC_ID_FLEXBUS_PORT = 0x0005
DVSEC_ID_PORT_EXT = 0x0002
DVSEC_ID_REGISTER_LOCATOR = 0x0007

PCIE_EXT_CAP_DVSEC = 0x0023

# Register block identifiers carried by the register locator.
BLOCK_ID_COMPONENT = 0x01
BLOCK_ID_DEVICE = 0x03
# Artifact convention: BIR value 0x7 marks a block resident in the 4 KiB
# configuration space itself, with the second locator dword holding the
# absolute config-space offset.
BIR_CONFIG_SPACE = 0x7

DVSEC_CHAIN_START = 0x100
COMPONENT_BLOCK_OFFSET = 0x200
DEVICE_BLOCK_OFFSET = 0x400
DECODER_TABLE_OFFSET = 0x240
DECODER_STRIDE = 0x20
DECODER_SLOTS = 4
MB_PAYLOAD_OFFSET = 0x440
MB_PAYLOAD_BYTES = 256

# Mailbox command opcodes (CXL-flavored; the v1 set is deliberately minimal).
CMD_IDENTIFY = 0x4000
CMD_SET_PARTITION = 0x4101
CMD_GET_STATUS = 0x4400

RC_SUCCESS = 0x0
RC_INVALID_INPUT = 0x2
RC_UNSUPPORTED = 0x3

IDENTIFY_FMT = "<QQHH4x"  # capacity, online bytes, decoder slots, vendor id
GET_STATUS_FMT = "<QI4x"  # online bytes, online region count


class ConfigSpaceError(Exception):
    pass


class Misaligned(ConfigSpaceError):
    pass


class OutOfRange(ConfigSpaceError):
    pass


class DecoderOverlap(ConfigSpaceError):
    """Committing this decoder would overlap another enabled decoder."""


class MisalignedDecoder(ConfigSpaceError):
    """Decoder base/size must be 256 MiB aligned at commit time."""


class MailboxError(Exception):
    pass


class MailboxBusy(MailboxError):
    pass


class MailboxNotComplete(MailboxError):
    pass


class IllegalMailboxTransition(MailboxError):
    pass


class ExceedsCapacity(Exception):
    pass


class MisalignedSize(Exception):
    pass


@dataclass(frozen=True)
class RegisterSpec:
    name: str
    offset: int
    width: int  # 1, 2 or 4 bytes
    writable_mask: int
    default: int
    group: str  # "header", "set1", "set2", "set3"
    desc: str = ""


def _dvsec_header(next_off: int, length: int, dvsec_id: int) -> list[tuple[int, int]]:
    """The three dwords every DVSEC starts with: ext-cap header, header1, header2."""
    return [
        (PCIE_EXT_CAP_DVSEC | (0x1 << 16) | (next_off << 20), 0),
        (CXL_VENDOR_ID | (0x0 << 16) | (length << 20), 4),
        (dvsec_id, 8),
    ]


def build_layout(
    n_decoders: int = DECODER_SLOTS,
    device_id: int = 0x0D93,
    bar0_size: int = 0x10000,
) -> list[RegisterSpec]:
    regs: list[RegisterSpec] = []

    def r(name, offset, width, mask, default, group, desc=""):
        regs.append(RegisterSpec(name, offset, width, mask, default, group, desc))

    # Standard type-0 header.
    r("VENDOR_ID", 0x00, 2, 0, CXL_VENDOR_ID, "header", "CXL consortium vendor id")
    r("DEVICE_ID", 0x02, 2, 0, device_id, "header")
    r("COMMAND", 0x04, 2, 0x0547, 0x0000, "header", "bus master / memory space enables")
    r("STATUS", 0x06, 2, 0, 0x0000, "header")
    r("REVISION", 0x08, 1, 0, 0x01, "header")
    r("PROG_IF", 0x09, 1, 0, 0x10, "header", "class 05/02/10: CXL memory device")
    r("SUBCLASS", 0x0A, 1, 0, 0x02, "header")
    r("CLASS", 0x0B, 1, 0, 0x05, "header")
    r("CACHE_LINE", 0x0C, 1, 0xFF, 0x00, "header")
    r("HEADER_TYPE", 0x0E, 1, 0, 0x00, "header")
    bar_mask = (~(bar0_size - 1)) & 0xFFFFFFF0
    r("BAR0", 0x10, 4, bar_mask, 0, "header", "register block BAR, sizing via mask")
    r("SUBSYS_VENDOR", 0x2C, 2, 0, CXL_VENDOR_ID, "header")
    r("SUBSYS_ID", 0x2E, 2, 0, 0x0001, "header")
    r("CAP_PTR", 0x34, 1, 0, 0x00, "header")
    r("INT_LINE", 0x3C, 1, 0xFF, 0x00, "header")
    r("INT_PIN", 0x3D, 1, 0, 0x00, "header")

    # Set 1: the DVSEC chain (GPF, Flex Bus, Port extensions, register locator).
    gpf, flexbus, port, locator = 0x100, 0x110, 0x124, 0x14C
    for dword, off in _dvsec_header(flexbus, 0x10, DVSEC_ID_GPF_DEVICE):
        r(f"GPF_DVSEC+{off:#x}", gpf + off, 4, 0, dword, "set1")
    r("GPF_PHASE2_DURATION", gpf + 0x0C, 4, 0, 0x0, "set1")
    for dword, off in _dvsec_header(port, 0x14, DVSEC_ID_FLEXBUS_PORT):
        r(f"FLEXBUS_DVSEC+{off:#x}", flexbus + off, 4, 0, dword, "set1")
    r("FLEXBUS_CAP", flexbus + 0x0C, 4, 0, 0x0004, "set1", "mem_capable")
    r("FLEXBUS_CTRL_STATUS", flexbus + 0x10, 4, 0x0004, 0x0004, "set1", "mem_enable")
    for dword, off in _dvsec_header(locator, 0x28, DVSEC_ID_PORT_EXT):
        r(f"PORT_DVSEC+{off:#x}", port + off, 4, 0, dword, "set1")
    r("PORT_STATUS", port + 0x0C, 4, 0, 0x0001, "set1")
    for dword, off in _dvsec_header(0, 0x0C + 16, DVSEC_ID_REGISTER_LOCATOR):
        r(f"REG_LOCATOR_DVSEC+{off:#x}", locator + off, 4, 0, dword, "set1")
    r("REG_BLOCK1_LO", locator + 0x0C, 4, 0,
      (BLOCK_ID_COMPONENT << 8) | BIR_CONFIG_SPACE, "set1", "component registers")
    r("REG_BLOCK1_HI", locator + 0x10, 4, 0, COMPONENT_BLOCK_OFFSET, "set1")
    r("REG_BLOCK2_LO", locator + 0x14, 4, 0,
      (BLOCK_ID_DEVICE << 8) | BIR_CONFIG_SPACE, "set1", "device (mailbox) registers")
    r("REG_BLOCK2_HI", locator + 0x18, 4, 0, DEVICE_BLOCK_OFFSET, "set1")

    # Set 2: component registers.
    c = COMPONENT_BLOCK_OFFSET
    r("COMPONENT_CAP", c + 0x00, 4, 0, 0x00010001, "set2")
    r("LINK_CAP", c + 0x08, 4, 0, 0x0068, "set2")
    r("LINK_CTRL", c + 0x0C, 4, 0x0003, 0x0000, "set2")
    r("LINK_STATUS", c + 0x10, 4, 0, 0x0001, "set2", "link up")
    r("RAS_UNCOR_STATUS", c + 0x18, 4, 0, 0, "set2")
    r("RAS_UNCOR_MASK", c + 0x1C, 4, 0xFFFFFFFF, 0, "set2")
    r("RAS_COR_STATUS", c + 0x20, 4, 0, 0, "set2")
    r("RAS_COR_MASK", c + 0x24, 4, 0xFFFFFFFF, 0, "set2")
    r("SEC_STATUS", c + 0x28, 4, 0, 0, "set2")
    r("HDM_DEC_CAP", c + 0x30, 4, 0, n_decoders, "set2", "decoder slot count")
    r("HDM_DEC_GLOBAL_CTRL", c + 0x34, 4, 0x0002, 0x0002, "set2")
    align_mask = 0xFFFFFFFF & ~(DECODER_ALIGN - 1)
    for i in range(n_decoders):
        base = DECODER_TABLE_OFFSET + i * DECODER_STRIDE
        r(f"DEC{i}_BASE_LO", base + 0x00, 4, align_mask, 0, "set2")
        r(f"DEC{i}_BASE_HI", base + 0x04, 4, 0xFFFFFFFF, 0, "set2")
        r(f"DEC{i}_SIZE_LO", base + 0x08, 4, align_mask, 0, "set2")
        r(f"DEC{i}_SIZE_HI", base + 0x0C, 4, 0xFFFFFFFF, 0, "set2")
        r(f"DEC{i}_CTRL", base + 0x10, 4, 0x0001, 0, "set2",
          "bit0 commit; bit1 committed (RO)")

    # Set 3: mailbox and status registers.
    d = DEVICE_BLOCK_OFFSET
    r("MB_CAPS", d + 0x00, 4, 0, 8, "set3", "log2 payload area size")
    r("MB_CTRL", d + 0x04, 4, 0, 0, "set3", "bit0 rings the doorbell; reads as status")
    r("MB_COMMAND", d + 0x08, 4, 0xFFFFFFFF, 0, "set3", "bits 15:0 opcode, 31:16 length")
    r("MB_STATUS", d + 0x0C, 4, 0, 0, "set3", "bits 15:0 return code, bit 31 ready")
    r("MB_BG_STATUS", d + 0x10, 4, 0, 0, "set3")
    r("DEV_STATUS", d + 0x14, 4, 0, 0, "set3", "bit0 doorbell")
    for i in range(MB_PAYLOAD_BYTES // 4):
        r(f"MB_PAYLOAD[{i}]", MB_PAYLOAD_OFFSET + i * 4, 4, 0xFFFFFFFF, 0, "set3")
    return regs


class RegisterFile:
    """4 KiB configuration space with per-byte write masks and write actions."""

    def __init__(self, layout: list[RegisterSpec]):
        self.layout = layout
        self.space = bytearray(CFG_SPACE_SIZE)
        self.mask = bytearray(CFG_SPACE_SIZE)
        self._actions: dict[int, object] = {}
        self.by_name = {spec.name: spec for spec in layout}
        for spec in layout:
            self.space[spec.offset : spec.offset + spec.width] = spec.default.to_bytes(
                spec.width, "little"
            )
            mask_bytes = spec.writable_mask.to_bytes(spec.width, "little")
            self.mask[spec.offset : spec.offset + spec.width] = mask_bytes

    def set_action(self, name: str, callback) -> None:
        spec = self.by_name[name]
        self._actions[spec.offset] = (spec, callback)

    def _check(self, offset: int, width: int) -> None:
        if width not in (1, 2, 4):
            raise Misaligned(f"width must be 1, 2 or 4, got {width}")
        if offset % width:
            raise Misaligned(f"offset {offset:#x} not aligned to width {width}")
        if offset < 0 or offset + width > CFG_SPACE_SIZE:
            raise OutOfRange(f"offset {offset:#x} width {width} outside 4 KiB space")

    def read(self, offset: int, width: int) -> int:
        self._check(offset, width)
        return int.from_bytes(self.space[offset : offset + width], "little")

    def write(self, offset: int, width: int, value: int) -> None:
        """Masked write: read-only bits are preserved, then actions fire.

        An action that rejects the write restores the previous bytes before
        raising, so failed commits leave no trace.
        """
        self._check(offset, width)
        old = bytes(self.space[offset : offset + width])
        new = value.to_bytes(width, "little")
        for i in range(width):
            m = self.mask[offset + i]
            self.space[offset + i] = (old[i] & ~m) | (new[i] & m)
        for base, (spec, callback) in self._actions.items():
            if base < offset + width and offset < base + spec.width:
                try:
                    callback(spec)
                except Exception:
                    self.space[offset : offset + width] = old
                    raise

    def poke(self, name: str, value: int) -> None:
        """Device-side update of a register, ignoring write masks."""
        spec = self.by_name[name]
        self.space[spec.offset : spec.offset + spec.width] = value.to_bytes(
            spec.width, "little"
        )

    def peek(self, name: str) -> int:
        spec = self.by_name[name]
        return int.from_bytes(
            self.space[spec.offset : spec.offset + spec.width], "little"
        )


def walk_dvsec_chain(regfile: RegisterFile, start: int = DVSEC_CHAIN_START):
    """Follow the extended-capability chain; yields (offset, dvsec_id).

    Raises on cycles or pointers escaping the 4 KiB space, which the chain
    invariant forbids.
    """
    visited: set[int] = set()
    off = start
    out = []
    while off:
        if off in visited or off + 12 > CFG_SPACE_SIZE:
            raise ConfigSpaceError(f"malformed capability chain at {off:#x}")
        visited.add(off)
        header = regfile.read(off, 4)
        if header & 0xFFFF != PCIE_EXT_CAP_DVSEC:
            raise ConfigSpaceError(f"not a DVSEC capability at {off:#x}")
        dvsec_id = regfile.read(off + 8, 4) & 0xFFFF
        out.append((off, dvsec_id))
        off = (header >> 20) & 0xFFF
    return out


class MailboxPhase(Enum):
    IDLE = "idle"
    COMMAND_WRITTEN = "command_written"
    DOORBELL_SET = "doorbell_set"
    EXECUTING = "executing"
    COMPLETE = "complete"


_LEGAL_TRANSITIONS = {
    MailboxPhase.IDLE: MailboxPhase.COMMAND_WRITTEN,
    MailboxPhase.COMMAND_WRITTEN: MailboxPhase.DOORBELL_SET,
    MailboxPhase.DOORBELL_SET: MailboxPhase.EXECUTING,
    MailboxPhase.EXECUTING: MailboxPhase.COMPLETE,
    MailboxPhase.COMPLETE: MailboxPhase.IDLE,
}


@dataclass
class DeviceState:
    capacity_bytes: int
    online_bytes: int = 0
    regions: list = field(default_factory=list)  # (offset, size, mode string)


class DeviceModel:
    """One emulated type-3 endpoint: registers, mailbox, media, lifecycle."""

    def __init__(
        self,
        device_id: str,
        capacity_bytes: int,
        engine: Engine,
        addr_map: AddressMap,
        mailbox_latency: int = 1_000_000,  # ticks
        n_decoder_slots: int = DECODER_SLOTS,
    ):
        self.device_id = device_id
        self.engine = engine
        self.addr_map = addr_map
        self.media = DeviceMedia(capacity_bytes)
        self.state = DeviceState(capacity_bytes)
        self.mailbox_latency = mailbox_latency
        self.regs = RegisterFile(build_layout(n_decoder_slots))
        self.phase = MailboxPhase.IDLE
        self.phase_history: list[MailboxPhase] = [MailboxPhase.IDLE]
        self._pending_opcode = 0
        self._pending_len = 0
        self._component = f"dev.{device_id}.mbox"
        engine.register(self._component, self._handle_event)

        # Bind decoder register slots to address-map decoder objects. Slots
        # beyond the configured decoders start disabled.
        self.decoder_slots: list[HdmDecoder] = []
        mine = [d for d in addr_map.decoders if d.target_device == device_id]
        mine.sort(key=lambda d: d.index)
        for slot in range(n_decoder_slots):
            if slot < len(mine):
                dec = mine[slot]
            else:
                dec = HdmDecoder(
                    index=len(addr_map.decoders), base=0, size=0,
                    target_device=device_id, enabled=False,
                )
                addr_map.decoders.append(dec)
            self.decoder_slots.append(dec)
            self._sync_decoder_regs(slot)
            self.regs.set_action(f"DEC{slot}_CTRL", self._make_decoder_action(slot))
        self.regs.set_action("MB_COMMAND", self._on_command_write)
        self.regs.set_action("MB_CTRL", self._on_doorbell_write)

    # -- configuration space ------------------------------------------------

    def cfg_read(self, offset: int, width: int) -> int:
        """Little-endian read; this register map has no read-to-clear bits."""
        return self.regs.read(offset, width)

    def cfg_write(self, offset: int, width: int, value: int) -> None:
        self.regs.write(offset, width, value)

    # -- HDM decoder registers -----------------------------------------------

    def _sync_decoder_regs(self, slot: int) -> None:
        dec = self.decoder_slots[slot]
        self.regs.poke(f"DEC{slot}_BASE_LO", dec.base & 0xFFFFFFFF)
        self.regs.poke(f"DEC{slot}_BASE_HI", dec.base >> 32)
        self.regs.poke(f"DEC{slot}_SIZE_LO", dec.size & 0xFFFFFFFF)
        self.regs.poke(f"DEC{slot}_SIZE_HI", dec.size >> 32)
        self.regs.poke(f"DEC{slot}_CTRL", 0b11 if dec.enabled else 0)

    def _make_decoder_action(self, slot: int):
        def action(spec: RegisterSpec) -> None:
            ctrl = self.regs.read(spec.offset, 4)
            dec = self.decoder_slots[slot]
            commit = bool(ctrl & 1)
            if commit and not dec.enabled:
                base = (
                    self.regs.peek(f"DEC{slot}_BASE_HI") << 32
                ) | self.regs.peek(f"DEC{slot}_BASE_LO")
                size = (
                    self.regs.peek(f"DEC{slot}_SIZE_HI") << 32
                ) | self.regs.peek(f"DEC{slot}_SIZE_LO")
                if base % DECODER_ALIGN or size % DECODER_ALIGN or size == 0:
                    raise MisalignedDecoder(
                        f"decoder {slot}: base={base:#x} size={size:#x}"
                    )
                for other in self.addr_map.decoders:
                    if other is dec or not other.enabled:
                        continue
                    if base < other.end and other.base < base + size:
                        raise DecoderOverlap(
                            f"decoder {slot} [{base:#x},{base + size:#x}) overlaps "
                            f"decoder {other.index}"
                        )
                dec.base, dec.size, dec.enabled = base, size, True
                self.regs.poke(f"DEC{slot}_CTRL", ctrl | 0b10)
            elif not commit and dec.enabled:
                dec.enabled = False
                self.regs.poke(f"DEC{slot}_CTRL", ctrl & ~0b10)

        return action

    # -- mailbox --------------------------------------------------------------

    def _transition(self, new: MailboxPhase) -> None:
        if _LEGAL_TRANSITIONS[self.phase] is not new:
            raise IllegalMailboxTransition(f"{self.phase.value} -> {new.value}")
        self.phase = new
        self.phase_history.append(new)

    def _on_command_write(self, spec: RegisterSpec) -> None:
        if self.phase is not MailboxPhase.IDLE:
            raise MailboxBusy(f"mailbox is {self.phase.value}")
        value = self.regs.read(spec.offset, 4)
        self._pending_opcode = value & 0xFFFF
        self._pending_len = value >> 16
        self._transition(MailboxPhase.COMMAND_WRITTEN)

    def _on_doorbell_write(self, spec: RegisterSpec) -> None:
        # Raw doorbell pokes outside the command flow are ignored, as on
        # hardware; only a ring after a command write starts execution.
        if self.phase is not MailboxPhase.COMMAND_WRITTEN:
            return
        self._transition(MailboxPhase.DOORBELL_SET)
        self.regs.poke("DEV_STATUS", 1)
        self.regs.poke("MB_CTRL", 1)
        self.engine.schedule_in(0, self._component, "mbox_exec")
        self.engine.schedule_in(self.mailbox_latency, self._component, "mbox_complete")

    def _handle_event(self, ev: Event) -> None:
        if ev.payload == "mbox_exec":
            self._transition(MailboxPhase.EXECUTING)
        elif ev.payload == "mbox_complete":
            payload_in = bytes(
                self.regs.space[
                    MB_PAYLOAD_OFFSET : MB_PAYLOAD_OFFSET + self._pending_len
                ]
            )
            rc, payload_out = self._execute(self._pending_opcode, payload_in)
            out = payload_out.ljust(MB_PAYLOAD_BYTES, b"\x00")
            self.regs.space[
                MB_PAYLOAD_OFFSET : MB_PAYLOAD_OFFSET + MB_PAYLOAD_BYTES
            ] = out
            self.regs.poke("MB_STATUS", (rc & 0xFFFF) | (1 << 31))
            self.regs.poke("DEV_STATUS", 0)
            self.regs.poke("MB_CTRL", 0)
            self._transition(MailboxPhase.COMPLETE)

    def _execute(self, opcode: int, payload: bytes) -> tuple[int, bytes]:
        if opcode == CMD_IDENTIFY:
            out = struct.pack(
                IDENTIFY_FMT,
                self.state.capacity_bytes,
                self.state.online_bytes,
                len(self.decoder_slots),
                CXL_VENDOR_ID,
            )
            return RC_SUCCESS, out
        if opcode == CMD_SET_PARTITION:
            # Single logic device: the partition is fixed; accept and no-op.
            if len(payload) < 8:
                return RC_INVALID_INPUT, b""
            return RC_SUCCESS, b""
        if opcode == CMD_GET_STATUS:
            return RC_SUCCESS, struct.pack(
                GET_STATUS_FMT, self.state.online_bytes, len(self.state.regions)
            )
        return RC_UNSUPPORTED, b""

    def mailbox_submit(self, opcode: int, payload: bytes = b"") -> MailboxPhase:
        """Drive the register path: command, payload, doorbell.

        Execution is scheduled on the engine; poll the status register (or
        `phase`) and collect results once complete.
        """
        if len(payload) > MB_PAYLOAD_BYTES:
            raise ValueError("payload exceeds mailbox payload area")
        self.cfg_write(
            self.regs.by_name["MB_COMMAND"].offset,
            4,
            (len(payload) << 16) | (opcode & 0xFFFF),
        )
        padded = payload.ljust((len(payload) + 3) & ~3, b"\x00")
        for i in range(0, len(padded), 4):
            self.cfg_write(
                MB_PAYLOAD_OFFSET + i, 4, int.from_bytes(padded[i : i + 4], "little")
            )
        self.cfg_write(self.regs.by_name["MB_CTRL"].offset, 4, 1)
        return self.phase

    def doorbell(self) -> bool:
        """Host-visible doorbell bit from the status register."""
        return bool(self.cfg_read(self.regs.by_name["DEV_STATUS"].offset, 4) & 1)

    def mailbox_collect(self) -> tuple[int, bytes]:
        if self.phase is not MailboxPhase.COMPLETE:
            raise MailboxNotComplete(f"mailbox is {self.phase.value}")
        status = self.regs.peek("MB_STATUS")
        payload = bytes(
            self.regs.space[MB_PAYLOAD_OFFSET : MB_PAYLOAD_OFFSET + MB_PAYLOAD_BYTES]
        )
        self.regs.poke("MB_STATUS", 0)
        self._transition(MailboxPhase.IDLE)
        return status & 0xFFFF, payload

    # -- memory online lifecycle ----------------------------------------------

    def online_memory(self, nbytes: int, mode: NumaMode) -> NumaTopology:
        """Online device capacity to a NUMA node (the NDCTL/CXL-CLI analogue)."""
        if nbytes % DECODER_ALIGN:
            raise MisalignedSize(
                f"online size must be a multiple of {DECODER_ALIGN} bytes"
            )
        if self.state.online_bytes + nbytes > self.state.capacity_bytes:
            raise ExceedsCapacity(
                f"online {nbytes:#x} exceeds capacity "
                f"{self.state.capacity_bytes:#x} with {self.state.online_bytes:#x} online"
            )
        topology = self.addr_map.online_cxl(self.device_id, nbytes, mode)
        self.state.regions.append((self.state.online_bytes, nbytes, mode.value))
        self.state.online_bytes += nbytes
        return topology

    # -- reporting --------------------------------------------------------------

    def dump_registers(self) -> str:
        """Hex dump plus decoded register table."""
        lines = [f"device {self.device_id}: configuration space"]
        space = self.regs.space
        for row in range(0, CFG_SPACE_SIZE, 16):
            chunk = space[row : row + 16]
            if any(chunk):
                hexes = " ".join(f"{b:02x}" for b in chunk)
                lines.append(f"  {row:04x}: {hexes}")
        lines.append("")
        lines.append(f"  {'offset':>6}  {'width':>5}  {'value':>10}  name")
        for spec in self.regs.layout:
            value = self.regs.peek(spec.name)
            lines.append(
                f"  {spec.offset:#06x}  {spec.width:>5}  {value:#010x}  {spec.name}"
            )
        return "\n".join(lines)


def generate_register_doc(layout: list[RegisterSpec] | None = None) -> str:
    """Markdown page describing the register map, generated from the layout table."""
    layout = layout or build_layout()
    out = [
        "# Register map",
        "",
        "All offsets are within the 4 KiB configuration space. Writes are",
        "masked per register: read-only bits ignore writes. Generated from",
        "the layout table in `cxlsim.device`.",
        "",
        "| offset | width | writable mask | group | name | notes |",
        "|--------|-------|---------------|-------|------|-------|",
    ]
    for spec in layout:
        out.append(
            f"| {spec.offset:#06x} | {spec.width} | {spec.writable_mask:#010x} "
            f"| {spec.group} | {spec.name} | {spec.desc} |"
        )
    return "\n".join(out) + "\n"
