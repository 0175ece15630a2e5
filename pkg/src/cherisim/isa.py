"""Architectural single-step model.

One call to spec_step consumes an instruction word (plus the interrupt line
and any memory read responses the instruction will receive) and produces the
next architectural state together with the memory-event plan the instruction
is entitled to emit.  Traps are ordinary state transitions.  The register
file holds sixteen capabilities with x0 hardwired null; plain integers live
in untagged capabilities whose address is the value.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, NamedTuple, Optional

from .capability import (
    EXECUTE,
    FULL_PERMS,
    IRQ_MCAUSE,
    LOAD,
    M32,
    NULL_CAP,
    STORE,
    Capability,
    ExceptionCause,
    PermissionSet,
    and_perms,
    bounds_of,
    cap_stricter_than,
    check_access,
    data_cap,
    from_bits,
    perms_from_bits,
    seal,
    set_address,
    set_bounds,
    strip_global,
    to_bits,
    unseal,
)

RESET_PC = 0x80000000

# The three maximal-authority capabilities installed at reset.
EXEC_ROOT = Capability(True, RESET_PC, 0, 0x100, 24, 0b011111, 0)
MEM_ROOT = Capability(True, 0, 0, 0x100, 24, 0b001111, 0)
SEAL_ROOT = Capability(True, 1, 0, 8, 0, 0b100111, 0)

# Writing a word to this address acknowledges the external interrupt line.
IRQ_ACK_ADDR = 0xF0

CSR_MSTATUS = 0x300
CSR_MCAUSE = 0x342
CSR_MTVAL = 0x343
KNOWN_CSRS = (CSR_MSTATUS, CSR_MCAUSE, CSR_MTVAL)

SCR_MTCC = 28
SCR_MEPCC = 31


class MemRequest(NamedTuple):
    addr: int
    be: int
    wdata: int
    wtag: bool
    we: bool


@dataclass(frozen=True, slots=True)
class MemEventPlan:
    kind: str  # "none" | "read" | "write"
    requests: tuple[MemRequest, ...] = ()


PLAN_NONE = MemEventPlan("none")


@dataclass(frozen=True, slots=True)
class ArchInput:
    instr_bits: int
    irq_pending: bool = False
    mem_read_data: tuple[tuple[int, bool], ...] = ()


@dataclass(frozen=True, slots=True)
class Instr:
    name: str
    rd: int = 0
    rs1: int = 0
    rs2: int = 0
    imm: int = 0
    csr: int = 0
    scr: int = 0


ILLEGAL = Instr("illegal")


@dataclass(slots=True)
class ArchState:
    """Treated as immutable; spec_step always builds a fresh instance."""

    x: tuple[Capability, ...]  # 16 entries, x[0] null
    pcc: Capability
    mtcc: Capability
    mepcc: Capability
    mcause: int
    mtval: int
    mstatus_mie: bool
    mstatus_mpie: bool
    mem: dict[int, int]  # byte address -> byte
    mem_tags: dict[int, bool]  # granule index (addr >> 3) -> tag

    @property
    def pc(self) -> int:
        return self.pcc.address


def reset_state() -> ArchState:
    regs = [NULL_CAP] * 16
    regs[1] = MEM_ROOT
    regs[2] = SEAL_ROOT
    return ArchState(
        x=tuple(regs),
        pcc=EXEC_ROOT,
        mtcc=EXEC_ROOT,
        mepcc=NULL_CAP,
        mcause=0,
        mtval=0,
        mstatus_mie=False,
        mstatus_mpie=False,
        mem={},
        mem_tags={},
    )


CAP_SLOTS = tuple(f"x{i}" for i in range(1, 16)) + ("pcc", "mtcc", "mepcc")


def cap_slot_values(s: ArchState):
    """Iterate (slot name, capability) over all capability-holding slots."""
    for i in range(1, 16):
        yield f"x{i}", s.x[i]
    yield "pcc", s.pcc
    yield "mtcc", s.mtcc
    yield "mepcc", s.mepcc


@dataclass(frozen=True, slots=True)
class Derivation:
    """Parentage record for a capability produced by this step: the result
    must stay within the parent's bounds and within parent perms ∩ mask."""

    slot: str
    parent: Capability
    perm_mask: PermissionSet = FULL_PERMS


@dataclass(frozen=True, slots=True)
class StepResult:
    state: ArchState
    plan: MemEventPlan
    instr: Optional[Instr]  # None when the step consumed an interrupt
    cause: Optional[ExceptionCause]
    interrupt: bool
    derivations: tuple[Derivation, ...]


# --- instruction decode -----------------------------------------------------


def _sign(value: int, bits: int) -> int:
    return value - (1 << bits) if value >> (bits - 1) & 1 else value


_BRANCHES = {0: "beq", 1: "bne", 4: "blt", 5: "bge", 6: "bltu", 7: "bgeu"}
_LOADS = {0: "lb", 1: "lh", 2: "lw", 3: "clc", 4: "lbu", 5: "lhu"}
_STORES = {0: "sb", 1: "sh", 2: "sw", 3: "csc"}
_CSR_OPS = {1: "csrrw", 2: "csrrs", 3: "csrrc", 5: "csrrwi", 6: "csrrsi", 7: "csrrci"}
_CHERI_F7 = {
    0x08: "csetbounds",
    0x09: "csetboundsexact",
    0x0B: "cseal",
    0x0C: "cunseal",
    0x0D: "candperm",
    0x10: "csetaddr",
    0x11: "cincaddr",
    0x21: "cseqx",
}
_CHERI_UNARY = {0: "cgetperm", 1: "cgettype", 2: "cgetbase", 3: "cgetlen", 4: "cgettag", 5: "cgettop", 0x0A: "cmove"}
LOAD_WIDTH = {"lb": 1, "lbu": 1, "lh": 2, "lhu": 2, "lw": 4}
STORE_WIDTH = {"sb": 1, "sh": 2, "sw": 4}


def decode(instr_bits: int) -> Instr:
    """Strict decoder for the implemented subset; anything else is illegal,
    including register numbers 16..31 wherever a field names a register."""
    w = instr_bits & M32
    opcode = w & 0x7F
    rd = w >> 7 & 0x1F
    f3 = w >> 12 & 7
    rs1 = w >> 15 & 0x1F
    rs2 = w >> 20 & 0x1F
    f7 = w >> 25 & 0x7F

    if opcode == 0x37 or opcode == 0x17:
        if rd >= 16:
            return ILLEGAL
        return Instr("lui" if opcode == 0x37 else "auipcc", rd=rd, imm=w & 0xFFFFF000)

    if opcode == 0x6F:
        if rd >= 16:
            return ILLEGAL
        imm = _sign((w >> 31 << 20) | (w >> 12 & 0xFF) << 12 | (w >> 20 & 1) << 11 | (w >> 21 & 0x3FF) << 1, 21)
        return Instr("cjal", rd=rd, imm=imm)

    if opcode == 0x67:
        if f3 != 0 or rd >= 16 or rs1 >= 16:
            return ILLEGAL
        return Instr("cjalr", rd=rd, rs1=rs1, imm=_sign(w >> 20, 12))

    if opcode == 0x63:
        name = _BRANCHES.get(f3)
        if name is None or rs1 >= 16 or rs2 >= 16:
            return ILLEGAL
        imm = _sign((w >> 31 << 12) | (w >> 7 & 1) << 11 | (w >> 25 & 0x3F) << 5 | (w >> 8 & 0xF) << 1, 13)
        return Instr(name, rs1=rs1, rs2=rs2, imm=imm)

    if opcode == 0x03:
        name = _LOADS.get(f3)
        if name is None or rd >= 16 or rs1 >= 16:
            return ILLEGAL
        return Instr(name, rd=rd, rs1=rs1, imm=_sign(w >> 20, 12))

    if opcode == 0x23:
        name = _STORES.get(f3)
        if name is None or rs1 >= 16 or rs2 >= 16:
            return ILLEGAL
        return Instr(name, rs1=rs1, rs2=rs2, imm=_sign((w >> 25) << 5 | (w >> 7 & 0x1F), 12))

    if opcode == 0x13:
        if rd >= 16 or rs1 >= 16:
            return ILLEGAL
        if f3 == 0 or f3 == 2 or f3 == 3:
            name = {0: "addi", 2: "slti", 3: "sltiu"}[f3]
            return Instr(name, rd=rd, rs1=rs1, imm=_sign(w >> 20, 12))
        if f3 == 1 and f7 == 0:
            return Instr("slli", rd=rd, rs1=rs1, imm=rs2)
        if f3 == 5 and f7 == 0:
            return Instr("srli", rd=rd, rs1=rs1, imm=rs2)
        if f3 == 5 and f7 == 0x20:
            return Instr("srai", rd=rd, rs1=rs1, imm=rs2)
        return ILLEGAL

    if opcode == 0x33:
        if rd >= 16 or rs1 >= 16 or rs2 >= 16:
            return ILLEGAL
        if f7 == 0:
            name = {0: "add", 1: "sll", 2: "slt", 3: "sltu", 4: "xor", 5: "srl", 6: "or", 7: "and"}.get(f3)
        elif f7 == 0x20:
            name = {0: "sub", 5: "sra"}.get(f3)
        else:
            name = None
        return Instr(name, rd=rd, rs1=rs1, rs2=rs2) if name else ILLEGAL

    if opcode == 0x73:
        imm12 = w >> 20 & 0xFFF
        if f3 == 0:
            if rd != 0 or rs1 != 0:
                return ILLEGAL
            system = {0x000: "ecall", 0x001: "ebreak", 0x302: "mret", 0x105: "wfi"}.get(imm12)
            return Instr(system) if system else ILLEGAL
        name = _CSR_OPS.get(f3)
        if name is None or rd >= 16:
            return ILLEGAL
        if f3 < 4 and rs1 >= 16:
            return ILLEGAL
        # immediate forms carry a 5-bit value in the rs1 slot
        return Instr(name, rd=rd, rs1=rs1, csr=imm12)

    if opcode == 0x5B:
        if f3 != 0:
            return ILLEGAL
        if f7 == 0x01:
            if rd >= 16 or rs1 >= 16 or rs2 not in (SCR_MTCC, SCR_MEPCC):
                return ILLEGAL
            return Instr("cspecialrw", rd=rd, rs1=rs1, scr=rs2)
        if f7 == 0x7F:
            name = _CHERI_UNARY.get(rs2)
            if name is None or rd >= 16 or rs1 >= 16:
                return ILLEGAL
            return Instr(name, rd=rd, rs1=rs1)
        name = _CHERI_F7.get(f7)
        if name is None or rd >= 16 or rs1 >= 16 or rs2 >= 16:
            return ILLEGAL
        return Instr(name, rd=rd, rs1=rs1, rs2=rs2)

    return ILLEGAL


def encode_instr(i: Instr) -> int:
    """Inverse of decode for the implemented subset (used by the program
    generator and directed tests)."""
    n = i.name
    if n in ("lui", "auipcc"):
        return (i.imm & 0xFFFFF000) | i.rd << 7 | (0x37 if n == "lui" else 0x17)
    if n == "cjal":
        imm = i.imm & 0x1FFFFF
        word = (imm >> 20 & 1) << 31 | (imm >> 1 & 0x3FF) << 21 | (imm >> 11 & 1) << 20 | (imm >> 12 & 0xFF) << 12
        return word | i.rd << 7 | 0x6F
    if n == "cjalr":
        return (i.imm & 0xFFF) << 20 | i.rs1 << 15 | i.rd << 7 | 0x67
    if n in _BRANCHES.values():
        f3 = next(k for k, v in _BRANCHES.items() if v == n)
        imm = i.imm & 0x1FFF
        word = (imm >> 12 & 1) << 31 | (imm >> 5 & 0x3F) << 25 | (imm >> 1 & 0xF) << 8 | (imm >> 11 & 1) << 7
        return word | i.rs2 << 20 | i.rs1 << 15 | f3 << 12 | 0x63
    if n in _LOADS.values():
        f3 = next(k for k, v in _LOADS.items() if v == n)
        return (i.imm & 0xFFF) << 20 | i.rs1 << 15 | f3 << 12 | i.rd << 7 | 0x03
    if n in _STORES.values():
        f3 = next(k for k, v in _STORES.items() if v == n)
        imm = i.imm & 0xFFF
        return (imm >> 5) << 25 | i.rs2 << 20 | i.rs1 << 15 | f3 << 12 | (imm & 0x1F) << 7 | 0x23
    if n in ("addi", "slti", "sltiu"):
        f3 = {"addi": 0, "slti": 2, "sltiu": 3}[n]
        return (i.imm & 0xFFF) << 20 | i.rs1 << 15 | f3 << 12 | i.rd << 7 | 0x13
    if n in ("slli", "srli", "srai"):
        f3 = 1 if n == "slli" else 5
        f7 = 0x20 if n == "srai" else 0
        return f7 << 25 | (i.imm & 0x1F) << 20 | i.rs1 << 15 | f3 << 12 | i.rd << 7 | 0x13
    if n in ("add", "sub", "sll", "slt", "sltu", "xor", "srl", "sra", "or", "and"):
        f3 = {"add": 0, "sub": 0, "sll": 1, "slt": 2, "sltu": 3, "xor": 4, "srl": 5, "sra": 5, "or": 6, "and": 7}[n]
        f7 = 0x20 if n in ("sub", "sra") else 0
        return f7 << 25 | i.rs2 << 20 | i.rs1 << 15 | f3 << 12 | i.rd << 7 | 0x33
    if n in ("ecall", "ebreak", "mret", "wfi"):
        imm12 = {"ecall": 0, "ebreak": 1, "mret": 0x302, "wfi": 0x105}[n]
        return imm12 << 20 | 0x73
    if n in _CSR_OPS.values():
        f3 = next(k for k, v in _CSR_OPS.items() if v == n)
        return (i.csr & 0xFFF) << 20 | i.rs1 << 15 | f3 << 12 | i.rd << 7 | 0x73
    if n == "cspecialrw":
        return 0x01 << 25 | i.scr << 20 | i.rs1 << 15 | i.rd << 7 | 0x5B
    if n in _CHERI_UNARY.values():
        sel = next(k for k, v in _CHERI_UNARY.items() if v == n)
        return 0x7F << 25 | sel << 20 | i.rs1 << 15 | i.rd << 7 | 0x5B
    if n in _CHERI_F7.values():
        f7 = next(k for k, v in _CHERI_F7.items() if v == n)
        return f7 << 25 | i.rs2 << 20 | i.rs1 << 15 | i.rd << 7 | 0x5B
    raise ValueError(f"cannot encode {n!r}")


# --- memory-access shaping --------------------------------------------------


def split_access(addr: int, width: int, value: int = 0, we: bool = False) -> tuple[MemRequest, ...]:
    """Word-aligned request(s) for a width-byte access; a misaligned access
    that crosses a word boundary becomes two requests.  Reads use full byte
    enables; write data is laned with disabled lanes zero-filled."""
    addr &= M32
    value &= (1 << 8 * width) - 1
    off = addr & 3
    first = min(width, 4 - off)
    reqs = []
    if we:
        be1 = ((1 << first) - 1) << off
        reqs.append(MemRequest(addr & ~3, be1, (value << 8 * off) & M32, False, True))
        if first < width:
            be2 = (1 << width - first) - 1
            reqs.append(MemRequest((addr & ~3) + 4 & M32, be2, value >> 8 * first, False, True))
    else:
        reqs.append(MemRequest(addr & ~3, 0xF, 0, False, False))
        if first < width:
            reqs.append(MemRequest((addr & ~3) + 4 & M32, 0xF, 0, False, False))
    return tuple(reqs)


def extract_load_value(addr: int, width: int, words: tuple[int, ...]) -> int:
    """Assemble the accessed bytes from the aligned response words."""
    off = addr & 3
    combined = words[0] >> 8 * off
    if off + width > 4:
        combined |= words[1] << 8 * (4 - off)
    return combined & (1 << 8 * width) - 1


# --- the step function ------------------------------------------------------


def _signed(v: int) -> int:
    return v - (1 << 32) if v & 0x80000000 else v


def spec_step_full(s: ArchState, i: ArchInput, mtval_on_ebreak: str = "zero") -> StepResult:
    pc = s.pcc.address

    def trap(cause: Optional[ExceptionCause], mtval: int = 0) -> StepResult:
        mepcc = set_address(s.pcc, pc)
        vector = set_address(s.mtcc, s.mtcc.address & ~3)
        state = ArchState(
            x=s.x,
            pcc=vector,
            mtcc=s.mtcc,
            mepcc=mepcc,
            mcause=IRQ_MCAUSE if cause is None else int(cause),
            mtval=mtval,
            mstatus_mie=False,
            mstatus_mpie=s.mstatus_mie,
            mem=s.mem,
            mem_tags=s.mem_tags,
        )
        derivs = (Derivation("mepcc", s.pcc), Derivation("pcc", s.mtcc))
        return StepResult(state, PLAN_NONE, instr, cause, cause is None, derivs)

    instr = None
    if i.irq_pending and s.mstatus_mie:
        return trap(None)

    fetch_err = check_access(s.pcc, pc, 4, EXECUTE)
    if fetch_err is not None:
        return trap(ExceptionCause.FETCH_BOUNDS)

    instr = decode(i.instr_bits)
    name = instr.name
    if name == "illegal":
        return trap(ExceptionCause.ILLEGAL_INSTRUCTION, mtval=i.instr_bits & M32)

    x = list(s.x)
    derivs: list[Derivation] = []
    plan = PLAN_NONE
    mem = s.mem
    mem_tags = s.mem_tags
    mtcc = s.mtcc
    mepcc = s.mepcc
    mcause = s.mcause
    mtval = s.mtval
    mie = s.mstatus_mie
    mpie = s.mstatus_mpie
    next_pc = (pc + 4) & M32
    pcc_source: Capability = s.pcc  # capability the next pcc derives from

    def wr(rd: int, cap: Capability) -> None:
        if rd:
            x[rd] = cap

    # the rs1 field of a csr immediate form holds a 5-bit literal, not a register
    rs1v = s.x[instr.rs1].address if instr.rs1 < 16 else 0
    rs2v = s.x[instr.rs2].address

    def transfer(target: int, source: Capability) -> Optional[StepResult]:
        """Route control flow to target via source; returns a trap result
        for a misaligned target, else records the redirect."""
        nonlocal next_pc, pcc_source
        target &= M32
        if target & 3:
            return trap(ExceptionCause.MISALIGNED_TARGET)
        next_pc = target
        pcc_source = source
        return None

    if name == "addi":
        wr(instr.rd, data_cap(rs1v + instr.imm))
    elif name == "add":
        wr(instr.rd, data_cap(rs1v + rs2v))
    elif name == "sub":
        wr(instr.rd, data_cap(rs1v - rs2v))
    elif name == "and":
        wr(instr.rd, data_cap(rs1v & rs2v))
    elif name == "or":
        wr(instr.rd, data_cap(rs1v | rs2v))
    elif name == "xor":
        wr(instr.rd, data_cap(rs1v ^ rs2v))
    elif name == "slt":
        wr(instr.rd, data_cap(1 if _signed(rs1v) < _signed(rs2v) else 0))
    elif name == "sltu":
        wr(instr.rd, data_cap(1 if rs1v < rs2v else 0))
    elif name == "slti":
        wr(instr.rd, data_cap(1 if _signed(rs1v) < instr.imm else 0))
    elif name == "sltiu":
        wr(instr.rd, data_cap(1 if rs1v < (instr.imm & M32) else 0))
    elif name == "sll":
        wr(instr.rd, data_cap(rs1v << (rs2v & 31)))
    elif name == "srl":
        wr(instr.rd, data_cap(rs1v >> (rs2v & 31)))
    elif name == "sra":
        wr(instr.rd, data_cap(_signed(rs1v) >> (rs2v & 31)))
    elif name == "slli":
        wr(instr.rd, data_cap(rs1v << instr.imm))
    elif name == "srli":
        wr(instr.rd, data_cap(rs1v >> instr.imm))
    elif name == "srai":
        wr(instr.rd, data_cap(_signed(rs1v) >> instr.imm))
    elif name == "lui":
        wr(instr.rd, data_cap(instr.imm))
    elif name == "auipcc":
        wr(instr.rd, set_address(s.pcc, pc + instr.imm))
        if instr.rd:
            derivs.append(Derivation(f"x{instr.rd}", s.pcc))

    elif name in _BRANCHES.values():
        a, b = rs1v, rs2v
        taken = {
            "beq": a == b,
            "bne": a != b,
            "blt": _signed(a) < _signed(b),
            "bge": _signed(a) >= _signed(b),
            "bltu": a < b,
            "bgeu": a >= b,
        }[name]
        if taken:
            bad = transfer(pc + instr.imm, s.pcc)
            if bad:
                return bad

    elif name == "cjal":
        bad = transfer(pc + instr.imm, s.pcc)
        if bad:
            return bad
        wr(instr.rd, set_address(s.pcc, pc + 4))
        if instr.rd:
            derivs.append(Derivation(f"x{instr.rd}", s.pcc))

    elif name == "cjalr":
        target_cap = s.x[instr.rs1]
        if not target_cap.tag:
            return trap(ExceptionCause.TAG_VIOLATION)
        if target_cap.otype != 0:
            return trap(ExceptionCause.SEAL_VIOLATION)
        if not target_cap.perms.execute:
            return trap(ExceptionCause.PERMISSION_VIOLATION)
        bad = transfer((target_cap.address + instr.imm) & ~1, target_cap)
        if bad:
            return bad
        wr(instr.rd, set_address(s.pcc, pc + 4))
        if instr.rd:
            derivs.append(Derivation(f"x{instr.rd}", s.pcc))

    elif name in LOAD_WIDTH:
        width = LOAD_WIDTH[name]
        addr = (rs1v + instr.imm) & M32
        err = check_access(s.x[instr.rs1], addr, width, LOAD)
        if err is not None:
            return trap(err)
        reqs = split_access(addr, width)
        plan = MemEventPlan("read", reqs)
        words = tuple(i.mem_read_data[k][0] for k in range(len(reqs)))
        value = extract_load_value(addr, width, words)
        if name in ("lb", "lh") and value >> (8 * width - 1) & 1:
            value |= M32 ^ ((1 << 8 * width) - 1)
        wr(instr.rd, data_cap(value))

    elif name in STORE_WIDTH:
        width = STORE_WIDTH[name]
        addr = (rs1v + instr.imm) & M32
        err = check_access(s.x[instr.rs1], addr, width, STORE)
        if err is not None:
            return trap(err)
        reqs = split_access(addr, width, rs2v, we=True)
        plan = MemEventPlan("write", reqs)
        mem = dict(mem)
        mem_tags = dict(mem_tags)
        for req in reqs:
            for lane in range(4):
                if req.be >> lane & 1:
                    mem[(req.addr + lane) & M32] = req.wdata >> 8 * lane & 0xFF
            mem_tags[req.addr >> 3] = False

    elif name == "clc":
        addr = (rs1v + instr.imm) & M32
        if addr & 7:
            return trap(ExceptionCause.MISALIGNED_TARGET)
        auth = s.x[instr.rs1]
        err = check_access(auth, addr, 8, LOAD)
        if err is not None:
            return trap(err)
        plan = MemEventPlan("read", (MemRequest(addr, 0xF, 0, False, False), MemRequest(addr + 4, 0xF, 0, False, False)))
        (lo, tag_in), (hi, _) = i.mem_read_data[0], i.mem_read_data[1]
        raw = from_bits(lo | hi << 32, tag_in)
        loaded = raw
        if loaded.tag:
            # the load filter acts only on genuine capabilities so that
            # untagged data words round-trip bit for bit
            auth_perms = auth.perms
            if not auth_perms.cap_access:
                loaded = replace(loaded, tag=False)
            if not auth_perms.global_:
                loaded = strip_global(loaded)
        wr(instr.rd, loaded)
        if instr.rd and loaded.tag:
            mask = FULL_PERMS if auth.perms.global_ else replace(FULL_PERMS, global_=False)
            derivs.append(Derivation(f"x{instr.rd}", raw, mask))

    elif name == "csc":
        addr = (rs1v + instr.imm) & M32
        if addr & 7:
            return trap(ExceptionCause.MISALIGNED_TARGET)
        auth = s.x[instr.rs1]
        err = check_access(auth, addr, 8, STORE)
        if err is not None:
            return trap(err)
        value = s.x[instr.rs2]
        stored_tag = value.tag and auth.perms.cap_access
        bits = to_bits(value)
        plan = MemEventPlan(
            "write",
            (
                MemRequest(addr, 0xF, bits & M32, stored_tag, True),
                MemRequest(addr + 4, 0xF, bits >> 32, False, True),
            ),
        )
        mem = dict(mem)
        mem_tags = dict(mem_tags)
        for req in plan.requests:
            for lane in range(4):
                mem[(req.addr + lane) & M32] = req.wdata >> 8 * lane & 0xFF
        mem_tags[addr >> 3] = stored_tag

    elif name in _CSR_OPS.values():
        if not s.pcc.perms.system_registers:
            return trap(ExceptionCause.PERMISSION_VIOLATION)
        if instr.csr not in KNOWN_CSRS:
            return trap(ExceptionCause.ILLEGAL_INSTRUCTION, mtval=i.instr_bits & M32)
        if instr.csr == CSR_MSTATUS:
            old = (mie << 3) | (mpie << 7)
        elif instr.csr == CSR_MCAUSE:
            old = mcause
        else:
            old = mtval
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
                mie = bool(new >> 3 & 1)
                mpie = bool(new >> 7 & 1)
            elif instr.csr == CSR_MCAUSE:
                mcause = new & M32
            else:
                mtval = new & M32
        wr(instr.rd, data_cap(old))

    elif name == "cspecialrw":
        if not s.pcc.perms.system_registers:
            return trap(ExceptionCause.PERMISSION_VIOLATION)
        old = mtcc if instr.scr == SCR_MTCC else mepcc
        if instr.rs1 != 0:
            incoming = s.x[instr.rs1]
            if instr.scr == SCR_MTCC:
                if incoming.tag and not incoming.perms.execute:
                    incoming = replace(incoming, tag=False)
                mtcc = incoming
                derivs.append(Derivation("mtcc", s.x[instr.rs1]))
            else:
                mepcc = incoming
                derivs.append(Derivation("mepcc", s.x[instr.rs1]))
        wr(instr.rd, old)

    elif name == "ecall":
        return trap(ExceptionCause.ECALL)
    elif name == "ebreak":
        return trap(ExceptionCause.EBREAK, mtval=pc if mtval_on_ebreak == "pc" else 0)
    elif name == "wfi":
        pass  # sleeping is a timing matter; architecturally a nop
    elif name == "mret":
        if not s.pcc.perms.system_registers:
            return trap(ExceptionCause.PERMISSION_VIOLATION)
        returned = s.mepcc
        if returned.tag and not returned.perms.execute:
            returned = replace(returned, tag=False)
        bad = transfer(returned.address, returned)
        if bad:
            return bad
        mie = mpie
        mpie = True

    elif name == "cmove":
        wr(instr.rd, s.x[instr.rs1])
    elif name == "cgetperm":
        wr(instr.rd, data_cap(s.x[instr.rs1].perm_code))
    elif name == "cgettype":
        wr(instr.rd, data_cap(s.x[instr.rs1].otype))
    elif name == "cgettag":
        wr(instr.rd, data_cap(1 if s.x[instr.rs1].tag else 0))
    elif name == "cgetbase":
        wr(instr.rd, data_cap(bounds_of(s.x[instr.rs1]).base))
    elif name == "cgettop":
        wr(instr.rd, data_cap(min(bounds_of(s.x[instr.rs1]).top, M32)))
    elif name == "cgetlen":
        base, top = bounds_of(s.x[instr.rs1])
        wr(instr.rd, data_cap(min(max(top - base, 0), M32)))
    elif name == "csetaddr":
        wr(instr.rd, set_address(s.x[instr.rs1], rs2v))
        if instr.rd:
            derivs.append(Derivation(f"x{instr.rd}", s.x[instr.rs1]))
    elif name == "cincaddr":
        wr(instr.rd, set_address(s.x[instr.rs1], rs1v + rs2v))
        if instr.rd:
            derivs.append(Derivation(f"x{instr.rd}", s.x[instr.rs1]))
    elif name in ("csetbounds", "csetboundsexact"):
        derived, exact = set_bounds(s.x[instr.rs1], rs2v)
        if name == "csetboundsexact" and not exact:
            derived = replace(derived, tag=False)
        wr(instr.rd, derived)
        if instr.rd:
            derivs.append(Derivation(f"x{instr.rd}", s.x[instr.rs1]))
    elif name == "candperm":
        mask = perms_from_bits(rs2v)
        wr(instr.rd, and_perms(s.x[instr.rs1], mask))
        if instr.rd:
            derivs.append(Derivation(f"x{instr.rd}", s.x[instr.rs1], mask))
    elif name == "cseal":
        wr(instr.rd, seal(s.x[instr.rs1], s.x[instr.rs2]))
        if instr.rd:
            derivs.append(Derivation(f"x{instr.rd}", s.x[instr.rs1]))
    elif name == "cunseal":
        wr(instr.rd, unseal(s.x[instr.rs1], s.x[instr.rs2]))
        if instr.rd:
            derivs.append(Derivation(f"x{instr.rd}", s.x[instr.rs1]))
    elif name == "cseqx":
        a, b = s.x[instr.rs1], s.x[instr.rs2]
        wr(instr.rd, data_cap(1 if (a.tag == b.tag and to_bits(a) == to_bits(b)) else 0))
    else:
        raise AssertionError(f"unhandled mnemonic {name}")

    new_pcc = set_address(pcc_source, next_pc)
    derivs.append(Derivation("pcc", pcc_source))
    state = ArchState(
        x=tuple(x),
        pcc=new_pcc,
        mtcc=mtcc,
        mepcc=mepcc,
        mcause=mcause,
        mtval=mtval,
        mstatus_mie=mie,
        mstatus_mpie=mpie,
        mem=mem,
        mem_tags=mem_tags,
    )
    return StepResult(state, plan, instr, None, False, tuple(derivs))


def spec_step(s: ArchState, i: ArchInput, mtval_on_ebreak: str = "zero") -> tuple[ArchState, MemEventPlan]:
    r = spec_step_full(s, i, mtval_on_ebreak)
    return r.state, r.plan


def spec_out(s: ArchState, i: ArchInput, mtval_on_ebreak: str = "zero") -> MemEventPlan:
    return spec_step_full(s, i, mtval_on_ebreak).plan


ClearRule = Callable[[str, Optional[Instr]], bool]


def cspec_step(
    s: ArchState,
    i: ArchInput,
    clear_rules: tuple[ClearRule, ...] = (),
    mtval_on_ebreak: str = "zero",
) -> tuple[ArchState, MemEventPlan]:
    """spec_step strengthened by extra tag clearing on selected slots."""
    r = spec_step_full(s, i, mtval_on_ebreak)
    if not clear_rules:
        return r.state, r.plan
    state = r.state
    regs = list(state.x)
    changed = False
    for idx in range(1, 16):
        if regs[idx].tag and any(rule(f"x{idx}", r.instr) for rule in clear_rules):
            regs[idx] = replace(regs[idx], tag=False)
            changed = True
    special = {}
    for slot in ("pcc", "mtcc", "mepcc"):
        cur = getattr(state, slot)
        if cur.tag and any(rule(slot, r.instr) for rule in clear_rules):
            special[slot] = replace(cur, tag=False)
    if changed or special:
        state = replace(state, x=tuple(regs), **special)
    return state, r.plan


def state_stricter_than(s1: ArchState, s2: ArchState, include_mem: bool = True) -> bool:
    """Slot-wise capability strictness plus equality of everything else."""
    for i in range(1, 16):
        if not cap_stricter_than(s1.x[i], s2.x[i]):
            return False
    if not (
        cap_stricter_than(s1.pcc, s2.pcc)
        and cap_stricter_than(s1.mtcc, s2.mtcc)
        and cap_stricter_than(s1.mepcc, s2.mepcc)
    ):
        return False
    if (s1.mcause, s1.mtval, s1.mstatus_mie, s1.mstatus_mpie) != (
        s2.mcause,
        s2.mtval,
        s2.mstatus_mie,
        s2.mstatus_mpie,
    ):
        return False
    if include_mem:
        if s1.mem != s2.mem:
            return False
        for granule, tagged in s1.mem_tags.items():
            if tagged and not s2.mem_tags.get(granule, False):
                return False
        for granule, tagged in s2.mem_tags.items():
            if not tagged and s1.mem_tags.get(granule, False):
                return False
    return True
