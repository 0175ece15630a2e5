"""Cycle-accurate core model with cached capability bounds metadata.

The core is a two-stage (execute / writeback) pipeline in front of a serial
memory port.  Capabilities at rest carry their decompression corrections as
cached metadata; consistency of that cache with the stored fields is the
data-type invariant the checkers enforce every cycle.

A BuildConfig can enable exactly one of six seeded defects, each confined to
a single marked site in this file.  The architectural model in isa.py is
never affected by them.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

from .capability import (
    LOAD,
    STORE,
    M32,
    TOP_MAX,
    Capability,
    ExceptionCause,
    IRQ_MCAUSE,
    NULL_CAP,
    PERMS_OF_CODE,
    and_perms,
    bounds_of,
    corrections_of,
    data_cap,
    decode_bounds_raw,
    from_bits,
    perms_from_bits,
    seal,
    set_address,
    set_bounds,
    strip_global,
    to_bits,
    unseal,
)
from .isa import (
    ArchState,
    CSR_MCAUSE,
    CSR_MSTATUS,
    CSR_MTVAL,
    IRQ_ACK_ADDR,
    Instr,
    KNOWN_CSRS,
    LOAD_WIDTH,
    MemRequest,
    RESET_PC,
    SCR_MTCC,
    STORE_WIDTH,
    decode,
    extract_load_value,
    reset_state,
    split_access,
)

MUTATIONS = ("M1", "M2", "M3", "M4", "M5", "M6")

FIFO_DEPTH = 3

NOP_WORD = 0x00000013  # addi x0, x0, 0


# --- build configuration ----------------------------------------------------


@dataclass(frozen=True, slots=True)
class BuildConfig:
    """Static build options; mutation names one seeded defect or None."""

    mutation: Optional[str] = None
    mtval_on_ebreak: str = "zero"

    def __post_init__(self) -> None:
        if self.mutation is not None and self.mutation not in MUTATIONS:
            raise ValueError(f"unknown mutation {self.mutation!r}")
        if self.mtval_on_ebreak not in ("zero", "pc"):
            raise ValueError(f"unknown mtval policy {self.mtval_on_ebreak!r}")

    def has(self, mutation: str) -> bool:
        return self.mutation == mutation


# --- cached capabilities ----------------------------------------------------


@dataclass(frozen=True, slots=True)
class CachedCap:
    """A capability at rest together with its cached bound corrections."""

    cap: Capability
    base_cor: int  # in {-1, 0}
    top_cor: int  # in {-1, 0, 1}


def cached(cap: Capability) -> CachedCap:
    c = corrections_of(cap)
    return CachedCap(cap, c.c_b, c.c_t)


NULL_CACHED = cached(NULL_CAP)


def _data_cached(value: int) -> CachedCap:
    # untagged plain-integer result; zero fields decode to zero corrections
    return CachedCap(data_cap(value), 0, 0)


# --- timing schedules -------------------------------------------------------


@dataclass(frozen=True, slots=True)
class TimingSchedule:
    """Per-request memory latencies plus sleep and interrupt timing.

    Latency tuples are indexed by ordinal and repeat cyclically; grant and
    response latencies are in [1, 10] so a response can never share a cycle
    with its grant.  irq_at lists cycles at which the interrupt line rises;
    it stays high until a granted store to the acknowledge address.
    """

    gnt: tuple[int, ...] = (1,)
    rvalid: tuple[int, ...] = (1,)
    wfi_wake: tuple[int, ...] = (1,)
    irq_at: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not self.gnt or not self.rvalid or not self.wfi_wake:
            raise ValueError("latency tuples must be non-empty")
        for lat in self.gnt:
            if not 1 <= lat <= 10:
                raise ValueError(f"grant latency {lat} outside [1, 10]")
        for lat in self.rvalid:
            if not 1 <= lat <= 10:
                raise ValueError(f"response latency {lat} outside [1, 10]")
        for lat in self.wfi_wake:
            if not 1 <= lat <= 16:
                raise ValueError(f"wake latency {lat} outside [1, 16]")
        for cyc in self.irq_at:
            if cyc < 0:
                raise ValueError("irq cycles must be non-negative")

    def gnt_for(self, ordinal: int) -> int:
        return self.gnt[ordinal % len(self.gnt)]

    def rvalid_for(self, ordinal: int) -> int:
        return self.rvalid[ordinal % len(self.rvalid)]

    def wake_for(self, ordinal: int) -> int:
        return self.wfi_wake[ordinal % len(self.wfi_wake)]

    @classmethod
    def draw(
        cls,
        rng,
        count: int,
        max_gnt: int = 10,
        max_rvalid: int = 10,
        wfi_bound: int = 16,
        irq_at: tuple[int, ...] = (),
    ) -> "TimingSchedule":
        count = max(count, 1)
        return cls(
            gnt=tuple(rng.randint(1, max_gnt) for _ in range(count)),
            rvalid=tuple(rng.randint(1, max_rvalid) for _ in range(count)),
            wfi_wake=tuple(rng.randint(1, wfi_bound) for _ in range(8)),
            irq_at=irq_at,
        )


# --- port wiring ------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class CycleInputs:
    gnt: bool = False
    rvalid: bool = False
    rdata: tuple[int, bool] = (0, False)
    fetch_valid: bool = False
    fetch_bits: int = 0
    fetch_addr: int = 0
    irq: bool = False


@dataclass(frozen=True, slots=True)
class PortOutputs:
    req: bool = False
    addr: int = 0
    we: bool = False
    be: int = 0
    wdata: int = 0
    wtag: bool = False


IDLE_PORT = PortOutputs()


def _port_for(req: MemRequest) -> PortOutputs:
    return PortOutputs(True, req.addr, req.we, req.be, req.wdata, req.wtag)


# --- fetch fifo -------------------------------------------------------------


class FetchFifo:
    """Bounded in-order queue of (address, instruction word) pairs."""

    __slots__ = ("_slots", "_pending", "_pairs")

    def __init__(self) -> None:
        self._slots: deque[tuple[int, int]] = deque()
        self._pending: deque[int] = deque()  # enqueue addresses awaiting dequeue
        self._pairs: list[tuple[int, int]] = []

    def __len__(self) -> int:
        return len(self._slots)

    def __bool__(self) -> bool:
        return bool(self._slots)

    def enq(self, addr: int, bits: int) -> None:
        if len(self._slots) >= FIFO_DEPTH:
            raise AssertionError("fetch fifo overflow")
        self._slots.append((addr & M32, bits & M32))
        self._pending.append(addr & M32)

    def deq(self) -> tuple[int, int]:
        if not self._slots:
            raise AssertionError("fetch fifo underflow")
        addr, bits = self._slots.popleft()
        self._pairs.append((self._pending.popleft(), addr))
        return addr, bits

    def flush(self) -> None:
        # flushed entries never produce a trace pair
        self._slots.clear()
        self._pending.clear()

    def head_addr(self) -> Optional[int]:
        return self._slots[0][0] if self._slots else None


def fifo_trace(fifo: FetchFifo) -> tuple[tuple[int, int], ...]:
    """(enqueued address, dequeued address) for every completed traversal."""
    return tuple(fifo._pairs)


# --- load/store unit --------------------------------------------------------

LSU_IDLE = "idle"
LSU_WAIT_GNT1 = "wait_gnt1"
LSU_WAIT_RVALID1 = "wait_rvalid1"
LSU_WAIT_GNT2 = "wait_gnt2"
LSU_WAIT_RVALID2 = "wait_rvalid2"


@dataclass(slots=True)
class LsuState:
    phase: str = LSU_IDLE
    requests: tuple[MemRequest, ...] = ()
    beat: int = 0
    collected: list[tuple[int, bool]] = field(default_factory=list)
    is_read: bool = False
    zombie: bool = False
    emit: Optional[MemRequest] = None  # request currently driven on the port

    def start(self, requests: tuple[MemRequest, ...], is_read: bool, zombie: bool = False) -> None:
        if self.phase != LSU_IDLE:
            raise AssertionError("lsu started while busy")
        self.phase = LSU_WAIT_GNT1
        self.requests = requests
        self.beat = 0
        self.collected = []
        self.is_read = is_read
        self.zombie = zombie
        self.emit = requests[0]


# --- pipeline buffers -------------------------------------------------------


@dataclass(slots=True)
class MemAccess:
    kind: str  # "load" | "store" | "clc" | "csc"
    addr: int
    width: int
    sign_extend: bool
    rd: int
    filter_cap_access: bool = True
    filter_global: bool = True


@dataclass(slots=True)
class ExSlot:
    addr: int
    bits: int
    instr: Instr
    issued_at: int
    trap: Optional[int] = None
    trap_mtval: int = 0
    is_mem: bool = False
    mem_started: bool = False
    mem_info: Optional[MemAccess] = None
    slept: bool = False
    zombie_pending: bool = False


@dataclass(slots=True)
class WbSlot:
    rd: int
    pushed_at: int
    value: Optional[CachedCap] = None
    access: Optional[MemAccess] = None


# --- core state -------------------------------------------------------------


@dataclass(slots=True)
class MicroState:
    regfile: list[CachedCap]
    pcc: CachedCap  # pinned at its install address; pc tracks the live address
    pc: int
    mtcc: CachedCap
    mepcc: CachedCap
    mcause: int
    mtval: int
    mstatus_mie: bool
    mstatus_mpie: bool
    ex: Optional[ExSlot]
    wb: Optional[WbSlot]
    lsu: LsuState
    fifo: FetchFifo
    sleeping: bool
    wake_at: int
    cycle: int
    fetch_next_addr: int
    schedule: TimingSchedule
    config: BuildConfig
    wfi_ordinal: int


def micro_reset(schedule: TimingSchedule, config: BuildConfig = BuildConfig()) -> MicroState:
    arch = reset_state()
    regfile = [cached(arch.x[i]) for i in range(16)]
    return MicroState(
        regfile=regfile,
        pcc=cached(arch.pcc),
        pc=RESET_PC,
        mtcc=cached(arch.mtcc),
        mepcc=cached(arch.mepcc),
        mcause=0,
        mtval=0,
        mstatus_mie=False,
        mstatus_mpie=False,
        ex=None,
        wb=None,
        lsu=LsuState(),
        fifo=FetchFifo(),
        sleeping=False,
        wake_at=0,
        cycle=0,
        fetch_next_addr=RESET_PC,
        schedule=schedule,
        config=config,
        wfi_ordinal=0,
    )


def cached_slots(m: MicroState):
    """Every stored CachedCap with a slot name, for invariant sweeps."""
    for i in range(1, 16):
        yield f"x{i}", m.regfile[i]
    yield "pcc", m.pcc
    yield "mtcc", m.mtcc
    yield "mepcc", m.mepcc
    if m.wb is not None and m.wb.value is not None:
        yield "wb", m.wb.value


def project(m: MicroState) -> ArchState:
    """Architectural view of the committed core state (memory not modelled)."""
    x = tuple(cc.cap for cc in m.regfile)
    return ArchState(
        x=x,
        pcc=set_address(m.pcc.cap, m.pc),
        mtcc=m.mtcc.cap,
        mepcc=m.mepcc.cap,
        mcause=m.mcause,
        mtval=m.mtval,
        mstatus_mie=m.mstatus_mie,
        mstatus_mpie=m.mstatus_mpie,
        mem={},
        mem_tags={},
    )


def abs_state(m: MicroState) -> ArchState:
    """project() with any committed-but-unwritten register value forwarded."""
    state = project(m)
    if m.wb is not None and m.wb.value is not None and m.wb.rd:
        x = list(state.x)
        x[m.wb.rd] = m.wb.value.cap
        state = replace(state, x=tuple(x))
    return state


# --- step result ------------------------------------------------------------


@dataclass(slots=True)
class StepOutput:
    port: PortOutputs
    spec_en: bool
    sample: Optional[ArchState]  # pre-instruction view, present iff spec_en
    events: tuple


# --- mutation-sensitive primitives ------------------------------------------


def _micro_check_access(cap: Capability, addr: int, width: int, kind: str, cfg: BuildConfig) -> Optional[int]:
    """Data-side authorization; mirrors the architectural rules.

    [mutation M1] the upper bound is truncated to 32 bits before the compare,
    so a full-space capability (top == 2**32) spuriously rejects everything.
    """
    if not cap.tag:
        return int(ExceptionCause.TAG_VIOLATION)
    if cap.otype != 0:
        return int(ExceptionCause.SEAL_VIOLATION)
    p = PERMS_OF_CODE[cap.perm_code & 0x3F]
    ok = p.load if kind == LOAD else p.store
    if not ok:
        return int(ExceptionCause.PERMISSION_VIOLATION)
    base, top = decode_bounds_raw(cap.address, cap.b_field, cap.t_field, cap.exponent)
    if cfg.has("M1"):
        top &= M32
    if addr < base or addr + width > top:
        return int(ExceptionCause.BOUNDS_VIOLATION)
    return None


def _micro_trap_mepcc(m: MicroState) -> CachedCap:
    """Capability saved on trap entry.

    [mutation M2] the representability screen on the moved address is
    skipped, so the tag survives even when the bounds no longer decode.
    """
    if m.config.has("M2"):
        pcc = m.pcc.cap
        tag = pcc.tag and pcc.otype == 0
        forced = Capability(tag, m.pc & M32, pcc.b_field, pcc.t_field, pcc.exponent, pcc.perm_code, pcc.otype)
        return cached(forced)
    return cached(set_address(m.pcc.cap, m.pc))


def _micro_load_filter(raw: Capability, cap_access: bool, global_ok: bool, cfg: BuildConfig) -> Capability:
    """Permission screen applied to a loaded capability.

    [mutation M3] instead of re-encoding without the global permission, a
    fixed raw bit of the compressed code is cleared; for one permission kind
    that bit is not where global lives, so the loaded value keeps it.
    """
    loaded = raw
    if loaded.tag:
        if not cap_access:
            loaded = replace(loaded, tag=False)
        if not global_ok:
            if cfg.has("M3"):
                loaded = replace(loaded, perm_code=loaded.perm_code & ~0b001000)
            else:
                loaded = strip_global(loaded)
    return loaded


def _micro_set_bounds(parent: Capability, req_len: int, cfg: BuildConfig) -> tuple[Capability, bool]:
    """Re-bounding as the execute stage performs it.

    [mutation M4] the clause clearing the tag when the address sits below
    the decoded base is dropped from the validity conjunction.
    """
    derived, exact = set_bounds(parent, req_len)
    if cfg.has("M4") and not derived.tag:
        req_top = parent.address + req_len
        _, old_top = bounds_of(parent)
        if parent.tag and parent.otype == 0 and req_top <= old_top and req_top <= TOP_MAX:
            derived = replace(derived, tag=True)
    return derived, exact


def _micro_moved_cached(parent: CachedCap, moved: Capability, cfg: BuildConfig) -> CachedCap:
    """Package an address-moved result with its corrections metadata.

    [mutation M6] the corrections are carried over from the source instead
    of being recomputed at the new address.
    """
    if cfg.has("M6"):
        return CachedCap(moved, parent.base_cor, parent.top_cor)
    return cached(moved)


# --- trap entry -------------------------------------------------------------


def _enter_trap(m: MicroState, cause: Optional[int], mtval: int, events: list) -> None:
    """Redirect to the trap vector; cause None marks an interrupt."""
    m.mepcc = _micro_trap_mepcc(m)
    vector = set_address(m.mtcc.cap, m.mtcc.cap.address & ~3)
    m.pcc = cached(vector)
    m.pc = vector.address
    m.mcause = IRQ_MCAUSE if cause is None else int(cause)
    m.mtval = mtval & M32
    m.mstatus_mpie = m.mstatus_mie
    m.mstatus_mie = False
    m.fifo.flush()
    m.fetch_next_addr = m.pc
    events.append(("trap", m.mcause))
    events.append(("commit_csr", "mcause", m.mcause))
    events.append(("commit_csr", "mtval", m.mtval))
    events.append(("commit_csr", "mstatus", (m.mstatus_mie, m.mstatus_mpie)))
    events.append(("commit_csr", "mepcc", m.mepcc.cap))
    events.append(("redirect", m.pc))


# --- execute-stage completion -----------------------------------------------


def _execute(m: MicroState, ex: ExSlot, events: list) -> bool:
    """Apply the architectural effects of the instruction leaving execute.

    Returns True when control flow was redirected this cycle.  Memory
    instructions arrive here with their requests already granted; their
    register write is handed to writeback to land with the response.
    """
    instr = ex.instr
    name = instr.name
    pc = ex.addr
    cfg = m.config

    def push_value(rd: int, value: CachedCap) -> None:
        if rd:
            if m.wb is not None:
                raise AssertionError("writeback collision")
            m.wb = WbSlot(rd=rd, pushed_at=m.cycle, value=value)

    def trap(cause: int, mtval: int = 0) -> bool:
        _enter_trap(m, cause, mtval, events)
        return True

    def redirect(target: int, install: Optional[Capability]) -> None:
        m.pc = target & M32
        if install is not None:
            m.pcc = cached(set_address(install, target))
        m.fifo.flush()
        m.fetch_next_addr = m.pc
        events.append(("redirect", m.pc))

    if ex.trap is not None:
        return trap(ex.trap, ex.trap_mtval)

    if ex.is_mem:
        info = ex.mem_info
        if info is not None and info.rd and info.kind in ("load", "clc"):
            if m.wb is not None:
                raise AssertionError("writeback collision")
            m.wb = WbSlot(rd=info.rd, pushed_at=m.cycle, access=info)
        m.pc = (pc + 4) & M32
        return False

    rs1cap = m.regfile[instr.rs1].cap if instr.rs1 < 16 else NULL_CAP
    rs2cap = m.regfile[instr.rs2].cap
    rs1v = rs1cap.address
    rs2v = rs2cap.address

    def signed(v: int) -> int:
        return v - (1 << 32) if v & 0x80000000 else v

    if name == "addi":
        push_value(instr.rd, _data_cached(rs1v + instr.imm))
    elif name == "add":
        push_value(instr.rd, _data_cached(rs1v + rs2v))
    elif name == "sub":
        push_value(instr.rd, _data_cached(rs1v - rs2v))
    elif name == "and":
        push_value(instr.rd, _data_cached(rs1v & rs2v))
    elif name == "or":
        push_value(instr.rd, _data_cached(rs1v | rs2v))
    elif name == "xor":
        push_value(instr.rd, _data_cached(rs1v ^ rs2v))
    elif name == "slt":
        push_value(instr.rd, _data_cached(1 if signed(rs1v) < signed(rs2v) else 0))
    elif name == "sltu":
        push_value(instr.rd, _data_cached(1 if rs1v < rs2v else 0))
    elif name == "slti":
        push_value(instr.rd, _data_cached(1 if signed(rs1v) < instr.imm else 0))
    elif name == "sltiu":
        push_value(instr.rd, _data_cached(1 if rs1v < (instr.imm & M32) else 0))
    elif name == "sll":
        push_value(instr.rd, _data_cached(rs1v << (rs2v & 31)))
    elif name == "srl":
        push_value(instr.rd, _data_cached(rs1v >> (rs2v & 31)))
    elif name == "sra":
        push_value(instr.rd, _data_cached(signed(rs1v) >> (rs2v & 31)))
    elif name == "slli":
        push_value(instr.rd, _data_cached(rs1v << instr.imm))
    elif name == "srli":
        push_value(instr.rd, _data_cached(rs1v >> instr.imm))
    elif name == "srai":
        push_value(instr.rd, _data_cached(signed(rs1v) >> instr.imm))
    elif name == "lui":
        push_value(instr.rd, _data_cached(instr.imm))
    elif name == "auipcc":
        live = set_address(m.pcc.cap, pc)
        push_value(instr.rd, cached(set_address(live, pc + instr.imm)))

    elif name in ("beq", "bne", "blt", "bge", "bltu", "bgeu"):
        taken = {
            "beq": rs1v == rs2v,
            "bne": rs1v != rs2v,
            "blt": signed(rs1v) < signed(rs2v),
            "bge": signed(rs1v) >= signed(rs2v),
            "bltu": rs1v < rs2v,
            "bgeu": rs1v >= rs2v,
        }[name]
        if taken:
            target = (pc + instr.imm) & M32
            if target & 3:
                return trap(int(ExceptionCause.MISALIGNED_TARGET))
            redirect(target, None)
            return True

    elif name == "cjal":
        target = (pc + instr.imm) & M32
        if target & 3:
            return trap(int(ExceptionCause.MISALIGNED_TARGET))
        live = set_address(m.pcc.cap, pc)
        push_value(instr.rd, cached(set_address(live, pc + 4)))
        redirect(target, None)
        return True

    elif name == "cjalr":
        if not rs1cap.tag:
            return trap(int(ExceptionCause.TAG_VIOLATION))
        if rs1cap.otype != 0:
            return trap(int(ExceptionCause.SEAL_VIOLATION))
        if not rs1cap.perms.execute:
            return trap(int(ExceptionCause.PERMISSION_VIOLATION))
        target = (rs1cap.address + instr.imm) & ~1 & M32
        if target & 3:
            return trap(int(ExceptionCause.MISALIGNED_TARGET))
        live = set_address(m.pcc.cap, pc)
        push_value(instr.rd, cached(set_address(live, pc + 4)))
        redirect(target, rs1cap)
        return True

    elif name in ("csrrw", "csrrs", "csrrc", "csrrwi", "csrrsi", "csrrci"):
        live_pcc = set_address(m.pcc.cap, pc)
        if not live_pcc.perms.system_registers:
            return trap(int(ExceptionCause.PERMISSION_VIOLATION))
        if instr.csr not in KNOWN_CSRS:
            return trap(int(ExceptionCause.ILLEGAL_INSTRUCTION), ex.bits)
        if instr.csr == CSR_MSTATUS:
            old = (m.mstatus_mie << 3) | (m.mstatus_mpie << 7)
        elif instr.csr == CSR_MCAUSE:
            old = m.mcause
        else:
            old = m.mtval
        src = instr.rs1 if name.endswith("i") else rs1v
        write = True
        if name in ("csrrw", "csrrwi"):
            new = src
        elif name in ("csrrs", "csrrsi"):
            new = old | src
            write = instr.rs1 != 0
        else:
            new = old & ~src
            write = instr.rs1 != 0
        if write:
            if instr.csr == CSR_MSTATUS:
                m.mstatus_mie = bool(new >> 3 & 1)
                m.mstatus_mpie = bool(new >> 7 & 1)
                events.append(("commit_csr", "mstatus", (m.mstatus_mie, m.mstatus_mpie)))
            elif instr.csr == CSR_MCAUSE:
                m.mcause = new & M32
                events.append(("commit_csr", "mcause", m.mcause))
            else:
                m.mtval = new & M32
                events.append(("commit_csr", "mtval", m.mtval))
        push_value(instr.rd, _data_cached(old))

    elif name == "cspecialrw":
        live_pcc = set_address(m.pcc.cap, pc)
        if not live_pcc.perms.system_registers:
            return trap(int(ExceptionCause.PERMISSION_VIOLATION))
        old = m.mtcc.cap if instr.scr == SCR_MTCC else m.mepcc.cap
        if instr.rs1 != 0:
            incoming = rs1cap
            if instr.scr == SCR_MTCC:
                if incoming.tag and not incoming.perms.execute:
                    incoming = replace(incoming, tag=False)
                m.mtcc = cached(incoming)
                events.append(("commit_csr", "mtcc", incoming))
            else:
                m.mepcc = cached(incoming)
                events.append(("commit_csr", "mepcc", incoming))
        push_value(instr.rd, cached(old))

    elif name == "ecall":
        return trap(int(ExceptionCause.ECALL))
    elif name == "ebreak":
        return trap(int(ExceptionCause.EBREAK), pc if cfg.mtval_on_ebreak == "pc" else 0)

    elif name == "mret":
        live_pcc = set_address(m.pcc.cap, pc)
        if not live_pcc.perms.system_registers:
            return trap(int(ExceptionCause.PERMISSION_VIOLATION))
        returned = m.mepcc.cap
        if returned.tag and not returned.perms.execute:
            returned = replace(returned, tag=False)
        if returned.address & 3:
            return trap(int(ExceptionCause.MISALIGNED_TARGET))
        m.mstatus_mie = m.mstatus_mpie
        m.mstatus_mpie = True
        events.append(("commit_csr", "mstatus", (m.mstatus_mie, m.mstatus_mpie)))
        redirect(returned.address, returned)
        return True

    elif name == "cmove":
        push_value(instr.rd, m.regfile[instr.rs1])
    elif name == "cgetperm":
        push_value(instr.rd, _data_cached(rs1cap.perm_code))
    elif name == "cgettype":
        push_value(instr.rd, _data_cached(rs1cap.otype))
    elif name == "cgettag":
        push_value(instr.rd, _data_cached(1 if rs1cap.tag else 0))
    elif name == "cgetbase":
        push_value(instr.rd, _data_cached(bounds_of(rs1cap).base))
    elif name == "cgettop":
        push_value(instr.rd, _data_cached(min(bounds_of(rs1cap).top, M32)))
    elif name == "cgetlen":
        base, top = bounds_of(rs1cap)
        push_value(instr.rd, _data_cached(min(max(top - base, 0), M32)))
    elif name == "csetaddr":
        moved = set_address(rs1cap, rs2v)
        push_value(instr.rd, _micro_moved_cached(m.regfile[instr.rs1], moved, cfg))
    elif name == "cincaddr":
        moved = set_address(rs1cap, rs1v + rs2v)
        push_value(instr.rd, _micro_moved_cached(m.regfile[instr.rs1], moved, cfg))
    elif name in ("csetbounds", "csetboundsexact"):
        derived, exact = _micro_set_bounds(rs1cap, rs2v, cfg)
        if name == "csetboundsexact" and not exact:
            derived = replace(derived, tag=False)
        push_value(instr.rd, cached(derived))
    elif name == "candperm":
        push_value(instr.rd, cached(and_perms(rs1cap, perms_from_bits(rs2v))))
    elif name == "cseal":
        push_value(instr.rd, cached(seal(rs1cap, rs2cap)))
    elif name == "cunseal":
        push_value(instr.rd, cached(unseal(rs1cap, rs2cap)))
    elif name == "cseqx":
        same = rs1cap.tag == rs2cap.tag and to_bits(rs1cap) == to_bits(rs2cap)
        push_value(instr.rd, _data_cached(1 if same else 0))
    else:
        raise AssertionError(f"unhandled mnemonic {name}")

    m.pc = (pc + 4) & M32
    return False


# --- memory access initiation -----------------------------------------------


def _start_memory(m: MicroState, ex: ExSlot) -> None:
    """Authorize and launch the request plan for a memory instruction.

    A failed check turns the slot into a pending trap without touching the
    bus, keeping faulting accesses architecturally invisible.
    """
    instr = ex.instr
    name = instr.name
    cfg = m.config
    auth = m.regfile[instr.rs1].cap
    addr = (auth.address + instr.imm) & M32

    if name in LOAD_WIDTH:
        width = LOAD_WIDTH[name]
        err = _micro_check_access(auth, addr, width, LOAD, cfg)
        if err is not None:
            ex.trap = err
            return
        reqs = split_access(addr, width)
        ex.mem_info = MemAccess("load", addr, width, name in ("lb", "lh"), instr.rd)
        m.lsu.start(reqs, is_read=True)
    elif name in STORE_WIDTH:
        width = STORE_WIDTH[name]
        err = _micro_check_access(auth, addr, width, STORE, cfg)
        if err is not None:
            ex.trap = err
            return
        value = m.regfile[instr.rs2].cap.address
        reqs = split_access(addr, width, value, we=True)
        ex.mem_info = MemAccess("store", addr, width, False, 0)
        m.lsu.start(reqs, is_read=False)
    elif name == "clc":
        if addr & 7:
            ex.trap = int(ExceptionCause.MISALIGNED_TARGET)
            return
        err = _micro_check_access(auth, addr, 8, LOAD, cfg)
        if err is not None:
            ex.trap = err
            return
        perms = auth.perms
        reqs = (MemRequest(addr, 0xF, 0, False, False), MemRequest((addr + 4) & M32, 0xF, 0, False, False))
        ex.mem_info = MemAccess("clc", addr, 8, False, instr.rd, perms.cap_access, perms.global_)
        m.lsu.start(reqs, is_read=True)
    elif name == "csc":
        if addr & 7:
            ex.trap = int(ExceptionCause.MISALIGNED_TARGET)
            return
        err = _micro_check_access(auth, addr, 8, STORE, cfg)
        if err is not None:
            ex.trap = err
            return
        value = m.regfile[instr.rs2].cap
        stored_tag = value.tag and auth.perms.cap_access
        bits = to_bits(value)
        reqs = (
            MemRequest(addr, 0xF, bits & M32, stored_tag, True),
            MemRequest((addr + 4) & M32, 0xF, bits >> 32, False, True),
        )
        ex.mem_info = MemAccess("csc", addr, 8, False, 0)
        m.lsu.start(reqs, is_read=False)
    else:
        raise AssertionError(f"not a memory mnemonic {name}")
    ex.mem_started = True


def _finish_load(m: MicroState, acc: MemAccess, collected: list[tuple[int, bool]]) -> CachedCap:
    if acc.kind == "clc":
        (lo, tag_in), (hi, _) = collected[0], collected[1]
        raw = from_bits(lo | hi << 32, tag_in)
        loaded = _micro_load_filter(raw, acc.filter_cap_access, acc.filter_global, m.config)
        return cached(loaded)
    words = tuple(word for word, _ in collected)
    value = extract_load_value(acc.addr, acc.width, words)
    if acc.sign_extend and value >> (8 * acc.width - 1) & 1:
        value |= M32 ^ ((1 << 8 * acc.width) - 1)
    return _data_cached(value)


_MEM_NAMES = frozenset(LOAD_WIDTH) | frozenset(STORE_WIDTH) | {"clc", "csc"}


def _is_zombie_shape(bits: int) -> bool:
    # an undefined funct3 in the load opcode, shaped like a capability load
    return bits & 0x7F == 0x03 and (bits >> 12 & 0x7) == 0x7


# --- the cycle function -----------------------------------------------------


def micro_step(m: MicroState, inputs: CycleInputs) -> StepOutput:
    """Advance the core one clock cycle.

    Input consumption, writeback, execute-stage completion, interrupt entry,
    issue, request launch, and fetch enqueue happen in that order inside the
    cycle; the port outputs reflect the state after all of them.
    """
    events: list = []
    spec_en = False
    sample: Optional[ArchState] = None
    lsu = m.lsu
    cur = m.cycle
    granted_now = False
    final_grant = False
    redirected = False

    # -- protocol checks on the driver
    if inputs.gnt and lsu.phase not in (LSU_WAIT_GNT1, LSU_WAIT_GNT2):
        raise AssertionError("grant without a pending request")
    if inputs.rvalid and lsu.phase not in (LSU_WAIT_RVALID1, LSU_WAIT_RVALID2):
        raise AssertionError("response without a granted request")

    # -- grant consumption; the request stays driven through this cycle
    if inputs.gnt:
        granted_now = True
        final_grant = lsu.beat == len(lsu.requests) - 1
        lsu.phase = LSU_WAIT_RVALID1 if lsu.beat == 0 else LSU_WAIT_RVALID2

    # -- response consumption
    if inputs.rvalid:
        lsu.collected.append(inputs.rdata if lsu.is_read else (0, False))
        if lsu.beat + 1 < len(lsu.requests):
            lsu.beat += 1
            lsu.phase = LSU_WAIT_GNT2
            lsu.emit = lsu.requests[lsu.beat]
        else:
            lsu.phase = LSU_IDLE
            lsu.emit = None
            if lsu.zombie:
                # [mutation M5] the stray response merges onto the result bus
                lsu.zombie = False
                if m.wb is not None and m.wb.value is not None:
                    word = inputs.rdata[0]
                    hit = m.wb.value.cap
                    merged = from_bits(to_bits(hit) | word, hit.tag)
                    m.wb = WbSlot(rd=m.wb.rd, pushed_at=m.wb.pushed_at, value=cached(merged))
            elif m.wb is not None and m.wb.access is not None:
                value = _finish_load(m, m.wb.access, lsu.collected)
                if m.wb.rd:
                    m.regfile[m.wb.rd] = value
                    events.append(("commit_rf", m.wb.rd, value))
                m.wb = None

    # -- plain value writeback lands the cycle after it was handed over
    if m.wb is not None and m.wb.value is not None and m.wb.pushed_at < cur:
        if m.wb.rd:
            m.regfile[m.wb.rd] = m.wb.value
            events.append(("commit_rf", m.wb.rd, m.wb.value))
        m.wb = None

    # -- execute-stage completion
    ex = m.ex
    if ex is not None and not m.sleeping:
        if ex.instr.name == "wfi" and ex.trap is None:
            if not ex.slept and ex.issued_at < cur:
                ex.slept = True
                m.sleeping = True
                m.wake_at = cur + m.schedule.wake_for(m.wfi_ordinal)
                m.wfi_ordinal += 1
                events.append(("sleep", m.wake_at))
        else:
            completes = False
            if ex.trap is not None:
                completes = m.wb is None and ex.issued_at < cur
            elif ex.is_mem:
                completes = granted_now and final_grant and ex.mem_started
            else:
                completes = m.wb is None and ex.issued_at < cur
            if completes:
                sample = project(m)
                spec_en = True
                events.append(("spec_en", ex.bits, ex.addr, False))
                redirected = _execute(m, ex, events)
                m.ex = None

    # -- wake from sleep; a live enabled interrupt preempts the retire
    if m.sleeping:
        if cur >= m.wake_at and m.wb is None and lsu.phase == LSU_IDLE:
            m.sleeping = False
            ex = m.ex
            assert ex is not None
            sample = project(m)
            spec_en = True
            if inputs.irq and m.mstatus_mie:
                events.append(("spec_en", None, ex.addr, True))
                events.append(("irq",))
                _enter_trap(m, None, 0, events)
                redirected = True
            else:
                events.append(("spec_en", ex.bits, ex.addr, False))
                m.pc = (ex.addr + 4) & M32
            m.ex = None
    elif (
        not spec_en
        and m.ex is None
        and m.wb is None
        and lsu.phase == LSU_IDLE
        and inputs.irq
        and m.mstatus_mie
    ):
        sample = project(m)
        spec_en = True
        events.append(("spec_en", None, m.pc, True))
        events.append(("irq",))
        _enter_trap(m, None, 0, events)
        redirected = True

    # -- issue; held back while an enabled interrupt is draining the pipeline
    if (
        m.ex is None
        and not m.sleeping
        and not redirected
        and m.fifo
        and not (inputs.irq and m.mstatus_mie)
    ):
        addr, bits = m.fifo.deq()
        m.pc = addr
        instr = decode(bits)
        slot = ExSlot(addr=addr, bits=bits, instr=instr, issued_at=cur)
        fetch_err = _fetch_check(set_address(m.pcc.cap, addr), addr)
        if fetch_err is not None:
            slot.trap = int(ExceptionCause.FETCH_BOUNDS)
        elif instr.name == "illegal":
            slot.trap = int(ExceptionCause.ILLEGAL_INSTRUCTION)
            slot.trap_mtval = bits
            if m.config.has("M5") and _is_zombie_shape(bits):
                slot.zombie_pending = True
        else:
            slot.is_mem = instr.name in _MEM_NAMES
        m.ex = slot

    # -- launch memory requests once the path to writeback is clear
    ex = m.ex
    if ex is not None and not m.sleeping:
        if ex.is_mem and not ex.mem_started and ex.trap is None and lsu.phase == LSU_IDLE and m.wb is None:
            _start_memory(m, ex)
        if ex.zombie_pending and lsu.phase == LSU_IDLE:
            ex.zombie_pending = False
            rs1 = ex.bits >> 15 & 0xF
            imm = ex.bits >> 20 & 0xFFF
            if imm & 0x800:
                imm -= 0x1000
            zaddr = (m.regfile[rs1].cap.address + imm) & M32 & ~7
            lsu.start((MemRequest(zaddr, 0xF, 0, False, False),), is_read=True, zombie=True)

    # -- fetch enqueue; a redirect kills the in-flight word
    if inputs.fetch_valid and not redirected:
        m.fifo.enq(inputs.fetch_addr, inputs.fetch_bits)
        m.fetch_next_addr = (inputs.fetch_addr + 4) & M32

    # -- drive the port
    if lsu.emit is not None:
        out = _port_for(lsu.emit)
        if granted_now:
            lsu.emit = None
    else:
        out = IDLE_PORT

    m.cycle = cur + 1
    return StepOutput(out, spec_en, sample, tuple(events))


def _fetch_check(live_pcc: Capability, addr: int) -> Optional[int]:
    """All fetch-side authorization failures collapse to one bounds cause."""
    if not live_pcc.tag or live_pcc.otype != 0 or not live_pcc.perms.execute:
        return int(ExceptionCause.FETCH_BOUNDS)
    base, top = bounds_of(live_pcc)
    if addr < base or addr + 4 > top:
        return int(ExceptionCause.FETCH_BOUNDS)
    return None


# --- driver -----------------------------------------------------------------


class Driver:
    """Bus, fetch, and interrupt model closing the loop around one core.

    Grants and responses follow the schedule latencies counted from the
    first cycle a request is observed; read data comes from a pluggable
    stream indexed by read ordinal.  Fetch words are served from a static
    address map, one per cycle while the fifo has room, pausing two cycles
    after every redirect.  The interrupt line is level-held until a granted
    store hits the acknowledge address.
    """

    def __init__(
        self,
        program: dict[int, int],
        schedule: TimingSchedule,
        read_data: Callable[[int], tuple[int, bool]] = lambda k: (0, False),
    ) -> None:
        self.program = program
        self.schedule = schedule
        self.read_data = read_data
        self._req: Optional[MemRequest] = None
        self._grant_at: Optional[int] = None
        self._rvalid_at: Optional[int] = None
        self._req_ordinal = 0
        self._read_count = 0
        self._fetch_hold = 0
        self._irq_line = False
        self._irq_idx = 0
        self.reads_served: list[tuple[int, bool]] = []

    def line_high(self, cycle: int) -> bool:
        while self._irq_idx < len(self.schedule.irq_at) and self.schedule.irq_at[self._irq_idx] <= cycle:
            self._irq_line = True
            self._irq_idx += 1
        return self._irq_line

    def inputs_for(self, cycle: int, m: MicroState) -> CycleInputs:
        gnt = self._grant_at is not None and cycle == self._grant_at
        rvalid = self._rvalid_at is not None and cycle == self._rvalid_at
        rdata = (0, False)
        if rvalid and self._req is not None and not self._req.we:
            rdata = self.read_data(self._read_count)
            rdata = (rdata[0] & M32, bool(rdata[1]))
            self._read_count += 1
            self.reads_served.append(rdata)
        fetch_valid = False
        fetch_bits = 0
        fetch_addr = 0
        if cycle >= self._fetch_hold and len(m.fifo) < FIFO_DEPTH:
            fetch_valid = True
            fetch_addr = m.fetch_next_addr
            fetch_bits = self.program.get(fetch_addr, NOP_WORD)
        return CycleInputs(
            gnt=gnt,
            rvalid=rvalid,
            rdata=rdata,
            fetch_valid=fetch_valid,
            fetch_bits=fetch_bits,
            fetch_addr=fetch_addr,
            irq=self.line_high(cycle),
        )

    def observe(self, cycle: int, cin: CycleInputs, out: PortOutputs, events: tuple) -> None:
        if cin.gnt:
            self._grant_at = None
            assert self._req is not None
            if self._req.we and self._req.addr == IRQ_ACK_ADDR:
                self._irq_line = False
            self._rvalid_at = cycle + self.schedule.rvalid_for(self._req_ordinal - 1)
        if cin.rvalid:
            self._rvalid_at = None
            self._req = None
        if out.req and self._req is None:
            self._req = MemRequest(out.addr, out.be, out.wdata, out.wtag, out.we)
            self._grant_at = cycle + self.schedule.gnt_for(self._req_ordinal)
            self._req_ordinal += 1
        for ev in events:
            if ev[0] == "redirect":
                self._fetch_hold = cycle + 2


def program_map(words: Sequence[int], base: int = RESET_PC) -> dict[int, int]:
    return {(base + 4 * k) & M32: w & M32 for k, w in enumerate(words)}


def realize_inputs(
    i_seq,
    t: TimingSchedule,
    config: BuildConfig = BuildConfig(),
    max_cycles: int = 100000,
) -> list[CycleInputs]:
    """Drive a fresh core through the given architectural inputs.

    The instruction words are laid out linearly from the reset address, read
    data is served in the order the steps consume it, and the interrupt
    line follows the schedule.  Returns the per-cycle inputs delivered, one
    entry per elapsed cycle, ending once every step has fired.
    """
    steps = list(i_seq)
    stream: list[tuple[int, bool]] = []
    for step in steps:
        stream.extend(step.mem_read_data)
    m = micro_reset(t, config)
    driver = Driver(program_map([s.instr_bits for s in steps]), t, lambda k: stream[k] if k < len(stream) else (0, False))
    delivered: list[CycleInputs] = []
    fired = 0
    for cycle in range(max_cycles):
        cin = driver.inputs_for(cycle, m)
        delivered.append(cin)
        step = micro_step(m, cin)
        driver.observe(cycle, cin, step.port, step.events)
        if step.spec_en:
            fired += 1
            if fired >= len(steps):
                return delivered
    raise AssertionError("input realization did not converge")
