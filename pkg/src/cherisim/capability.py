"""Compressed-capability codec.

A capability is a 32-bit address plus metadata: an out-of-band validity tag,
9-bit bottom/top bound fields sharing an exponent, a 6-bit compressed
permission code, and a 3-bit object type (0 = unsealed).  Bounds are stored
floating-point style: the fields give the low 9 bits of the base and top at
granularity 2**exponent, and the missing upper address bits are recovered
from the capability's own address with small signed corrections.

Everything in this module is a pure function over immutable values.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple, Optional

M32 = 0xFFFFFFFF
M33 = 0x1FFFFFFFF
TOP_MAX = 1 << 32

# Legal exponents: fine-grained 0..14, plus 24 for giant regions.
EXPONENTS = tuple(range(15)) + (24,)
EXP_CODE_E24 = 31


class ExceptionCause(enum.IntEnum):
    """Trap causes; values are the codes written to mcause."""

    MISALIGNED_TARGET = 0
    FETCH_BOUNDS = 1
    ILLEGAL_INSTRUCTION = 2
    EBREAK = 3
    ECALL = 11
    BOUNDS_VIOLATION = 26
    SEAL_VIOLATION = 27
    TAG_VIOLATION = 28
    PERMISSION_VIOLATION = 29


# mcause value for a taken external interrupt (top bit = interrupt flag).
IRQ_MCAUSE = 0x8000000B


class Bounds(NamedTuple):
    base: int  # 32-bit
    top: int  # 33-bit


class Corrections(NamedTuple):
    c_b: int  # in {-1, 0}
    c_t: int  # in {-1, 0, 1}


PERM_FIELDS = (
    "execute",
    "load",
    "store",
    "cap_access",
    "seal",
    "unseal",
    "global_",
    "system_registers",
)


@dataclass(frozen=True, slots=True)
class PermissionSet:
    """Expanded permission booleans (the decoded form of a 6-bit code)."""

    execute: bool = False
    load: bool = False
    store: bool = False
    cap_access: bool = False
    seal: bool = False
    unseal: bool = False
    global_: bool = False
    system_registers: bool = False

    def __and__(self, other: "PermissionSet") -> "PermissionSet":
        return _PS_OF_BITS[_BITS_OF_PS[self] & _BITS_OF_PS[other]]

    def issubset(self, other: "PermissionSet") -> bool:
        a, b = _BITS_OF_PS[self], _BITS_OF_PS[other]
        return a & b == a

    def cardinality(self) -> int:
        return _BITS_OF_PS[self].bit_count()


def _ps_from_bits(bits: int) -> PermissionSet:
    return PermissionSet(**{name: bool(bits >> i & 1) for i, name in enumerate(PERM_FIELDS)})


_PS_OF_BITS = tuple(_ps_from_bits(bits) for bits in range(256))
_BITS_OF_PS = {ps: bits for bits, ps in enumerate(_PS_OF_BITS)}

_PERM_BIT = {name: 1 << i for i, name in enumerate(PERM_FIELDS)}


def _decode_code_bits(code: int) -> int:
    """Decoded permission mask of one 6-bit code, as a PERM_FIELDS bitmask."""
    kind, flags = code >> 4, code & 0xF
    bits = 0
    if kind == 0:  # memory: load, store, cap_access, global
        if flags & 1:
            bits |= _PERM_BIT["load"]
        if flags & 2:
            bits |= _PERM_BIT["store"]
        if flags & 4:
            bits |= _PERM_BIT["cap_access"]
        if flags & 8:
            bits |= _PERM_BIT["global_"]
    elif kind == 1:  # executable: execute implied; load, cap_access, system_registers, global
        bits |= _PERM_BIT["execute"]
        if flags & 1:
            bits |= _PERM_BIT["load"]
        if flags & 2:
            bits |= _PERM_BIT["cap_access"]
        if flags & 4:
            bits |= _PERM_BIT["system_registers"]
        if flags & 8:
            bits |= _PERM_BIT["global_"]
    elif kind == 2:  # sealing: seal, unseal, global; flag bit 3 reserved
        if flags & 1:
            bits |= _PERM_BIT["seal"]
        if flags & 2:
            bits |= _PERM_BIT["unseal"]
        if flags & 4:
            bits |= _PERM_BIT["global_"]
    # kind 3: null, decodes empty
    return bits


_CODE_BITS = tuple(_decode_code_bits(code) for code in range(64))
PERMS_OF_CODE = tuple(_PS_OF_BITS[bits] for bits in _CODE_BITS)


def _best_code_for(mask: int) -> int:
    """Code whose decoded set is the maximal representable subset of mask.

    Ties break toward the higher kind, then the lower flags value, which is
    what makes e.g. encode({execute, load, store}) land on the executable
    kind rather than the load/store one.
    """
    best = None
    for code in range(64):
        bits = _CODE_BITS[code]
        if bits & mask != bits:
            continue
        key = (bits.bit_count(), code >> 4, -(code & 0xF))
        if best is None or key > best[0]:
            best = (key, code)
    assert best is not None  # kind 3 always qualifies
    return best[1]


_ENCODE_OF_MASK = tuple(_best_code_for(mask) for mask in range(256))

CANONICAL_CODES = frozenset(
    code for code in range(64) if _ENCODE_OF_MASK[_CODE_BITS[code]] == code
)


def perms_decode(code: int) -> PermissionSet:
    return PERMS_OF_CODE[code & 0x3F]


def perms_encode(p: PermissionSet) -> int:
    return _ENCODE_OF_MASK[_BITS_OF_PS[p]]


def perms_from_bits(bits: int) -> PermissionSet:
    """Expanded permission mask (one bit per PERM_FIELDS entry) to a set."""
    return _PS_OF_BITS[bits & 0xFF]


def perm_bits_of(p: PermissionSet) -> int:
    return _BITS_OF_PS[p]


FULL_PERMS = _PS_OF_BITS[0xFF]


@dataclass(frozen=True, slots=True)
class Capability:
    tag: bool
    address: int  # 32-bit
    b_field: int  # 9-bit
    t_field: int  # 9-bit
    exponent: int  # 0..14 or 24
    perm_code: int  # 6-bit compressed permissions
    otype: int  # 3-bit, 0 = unsealed

    @property
    def perms(self) -> PermissionSet:
        return PERMS_OF_CODE[self.perm_code & 0x3F]

    @property
    def is_sealed(self) -> bool:
        return self.otype != 0


NULL_CAP = Capability(False, 0, 0, 0, 0, 0, 0)


def data_cap(value: int) -> Capability:
    """Plain integer wrapped as an untagged capability (ALU results)."""
    return Capability(False, value & M32, 0, 0, 0, 0, 0)


def decode_bounds_raw(address: int, b_field: int, t_field: int, exponent: int) -> tuple[int, int]:
    """Decompress the bound fields against an address; returns (base, top).

    The middle 9 address bits select whether the address sits above or below
    the stored base, giving the signed block corrections; the upper address
    bits plus corrections reconstruct the missing high bits of each bound.
    """
    a_mid = (address >> exponent) & 0x1FF
    a_hi = 1 if a_mid < b_field else 0
    t_hi = 1 if t_field < b_field else 0
    c_b = -a_hi
    c_t = t_hi - a_hi
    a_top = address >> (exponent + 9)
    base = (((a_top + c_b) << 9 | b_field) << exponent) & M32
    top = (((a_top + c_t) << 9 | t_field) << exponent) & M33
    return base, top


def corrections_raw(address: int, b_field: int, t_field: int, exponent: int) -> Corrections:
    a_mid = (address >> exponent) & 0x1FF
    a_hi = 1 if a_mid < b_field else 0
    t_hi = 1 if t_field < b_field else 0
    return Corrections(-a_hi, t_hi - a_hi)


def bounds_of(cap: Capability) -> Bounds:
    return Bounds(*decode_bounds_raw(cap.address, cap.b_field, cap.t_field, cap.exponent))


def corrections_of(cap: Capability) -> Corrections:
    return corrections_raw(cap.address, cap.b_field, cap.t_field, cap.exponent)


def is_representable(cap: Capability, new_address: int) -> bool:
    """True iff moving the address to new_address leaves the bounds unchanged."""
    return decode_bounds_raw(new_address & M32, cap.b_field, cap.t_field, cap.exponent) == decode_bounds_raw(
        cap.address, cap.b_field, cap.t_field, cap.exponent
    )


def set_address(cap: Capability, new_address: int) -> Capability:
    """Replace the address; the tag survives only for an unsealed capability
    whose bounds decode identically at the new address."""
    new_address &= M32
    tag = cap.tag and cap.otype == 0 and is_representable(cap, new_address)
    return Capability(tag, new_address, cap.b_field, cap.t_field, cap.exponent, cap.perm_code, cap.otype)


def set_bounds(cap: Capability, req_len: int) -> tuple[Capability, bool]:
    """Re-bound to [cap.address, cap.address + req_len), rounding outward as
    little as the encoding allows.

    Scans exponents smallest-first; the first exponent whose aligned region
    round-trips through the decoder (at the capability's address) wins, so
    the result is the tightest representable superset of the request.
    Returns (capability, exact); exact means no rounding occurred.  The tag
    is cleared when the request is not covered by the existing bounds, when
    it runs past the top of the address space, or when the capability was
    untagged or sealed to begin with.
    """
    addr = cap.address
    req_top = addr + req_len
    old_base, old_top = decode_bounds_raw(addr, cap.b_field, cap.t_field, cap.exponent)
    tag = (
        cap.tag
        and cap.otype == 0
        and addr >= old_base
        and req_top <= old_top
        and req_top <= TOP_MAX
    )

    b_f = t_f = 0
    exp = 24
    exact = False
    for e in EXPONENTS:
        mask = (1 << e) - 1
        base_al = addr & ~mask
        top_al = (req_top + mask) & ~mask
        if top_al - base_al > 0x1FF << e:
            continue
        b_f = (base_al >> e) & 0x1FF
        t_f = (top_al >> e) & 0x1FF
        if decode_bounds_raw(addr, b_f, t_f, e) == (base_al, top_al):
            exp = e
            exact = base_al == addr and top_al == req_top
            break
    else:
        # Nothing round-trips (request top too close to 2**33 even at e=24);
        # keep the wrapped e=24 fields.  The tag is already cleared by the
        # req_top <= TOP_MAX rule, so the bounds are inert.
        e = 24
        mask = (1 << e) - 1
        b_f = (addr & ~mask) >> e & 0x1FF
        t_f = ((req_top + mask) & ~mask) >> e & 0x1FF

    return Capability(tag, addr, b_f, t_f, exp, cap.perm_code, cap.otype), exact


def and_perms(cap: Capability, mask: PermissionSet) -> Capability:
    """Intersect permissions with a mask, re-encoding to the best
    representable subset; sealed capabilities lose their tag."""
    code = _ENCODE_OF_MASK[_CODE_BITS[cap.perm_code & 0x3F] & _BITS_OF_PS[mask]]
    tag = cap.tag and cap.otype == 0
    return Capability(tag, cap.address, cap.b_field, cap.t_field, cap.exponent, code, cap.otype)


def _auth_address_in_bounds(auth: Capability) -> bool:
    base, top = decode_bounds_raw(auth.address, auth.b_field, auth.t_field, auth.exponent)
    return base <= auth.address < top


def seal(cap: Capability, auth: Capability) -> Capability:
    """Mark cap with the object type named by auth's address.

    The otype is installed unconditionally; the tag survives only when both
    capabilities are tagged and unsealed, auth has the seal permission with
    its address in bounds, and the otype is nonzero.
    """
    otype = auth.address & 7
    ok = (
        cap.tag
        and auth.tag
        and cap.otype == 0
        and auth.otype == 0
        and auth.perms.seal
        and _auth_address_in_bounds(auth)
        and otype != 0
    )
    return Capability(ok, cap.address, cap.b_field, cap.t_field, cap.exponent, cap.perm_code, otype)


def unseal(cap: Capability, auth: Capability) -> Capability:
    """Inverse of seal: auth's address must name cap's otype exactly.

    The result is unsealed and loses the global permission if auth lacks it;
    the tag survives only when the authorization conditions all hold.
    """
    ok = (
        cap.tag
        and auth.tag
        and cap.otype != 0
        and auth.otype == 0
        and auth.perms.unseal
        and _auth_address_in_bounds(auth)
        and auth.address == cap.otype
    )
    code = cap.perm_code & 0x3F
    if not auth.perms.global_:
        code = _ENCODE_OF_MASK[_CODE_BITS[code] & ~_PERM_BIT["global_"]]
    return Capability(ok, cap.address, cap.b_field, cap.t_field, cap.exponent, code, 0)


def strip_global(cap: Capability) -> Capability:
    """Remove the global permission, leaving tag and seal status alone."""
    code = _ENCODE_OF_MASK[_CODE_BITS[cap.perm_code & 0x3F] & ~_PERM_BIT["global_"]]
    return Capability(cap.tag, cap.address, cap.b_field, cap.t_field, cap.exponent, code, cap.otype)


# Access kinds for check_access.
LOAD, STORE, LOAD_CAP, STORE_CAP, EXECUTE = "load", "store", "load_cap", "store_cap", "execute"


def check_access(cap: Capability, addr: int, width: int, kind: str) -> Optional[ExceptionCause]:
    """Authorize a width-byte access at addr; None means allowed.

    Violations are reported in fixed priority: tag, then seal, then
    permission, then bounds.  The upper bounds compare is exact integer
    arithmetic, so an access ending at 2**32 is in bounds of a full-space
    capability.
    """
    if not cap.tag:
        return ExceptionCause.TAG_VIOLATION
    if cap.otype != 0:
        return ExceptionCause.SEAL_VIOLATION
    p = PERMS_OF_CODE[cap.perm_code & 0x3F]
    if kind == LOAD:
        ok = p.load
    elif kind == STORE:
        ok = p.store
    elif kind == LOAD_CAP:
        ok = p.load and p.cap_access
    elif kind == STORE_CAP:
        ok = p.store and p.cap_access
    elif kind == EXECUTE:
        ok = p.execute
    else:
        raise ValueError(f"unknown access kind {kind!r}")
    if not ok:
        return ExceptionCause.PERMISSION_VIOLATION
    base, top = decode_bounds_raw(cap.address, cap.b_field, cap.t_field, cap.exponent)
    if addr < base or addr + width > top:
        return ExceptionCause.BOUNDS_VIOLATION
    return None


def to_bits(cap: Capability) -> int:
    """Pack into the 64-bit memory word: perms | otype | exp | T | B | address."""
    exp_code = EXP_CODE_E24 if cap.exponent == 24 else cap.exponent
    return (
        (cap.perm_code & 0x3F) << 58
        | (cap.otype & 7) << 55
        | exp_code << 50
        | (cap.t_field & 0x1FF) << 41
        | (cap.b_field & 0x1FF) << 32
        | (cap.address & M32)
    )


def from_bits(word: int, tag: bool) -> Capability:
    """Unpack a 64-bit memory word; invalid exponent codes force the tag off."""
    exp_code = word >> 50 & 0x1F
    if exp_code <= 14:
        exp = exp_code
    elif exp_code == EXP_CODE_E24:
        exp = 24
    else:
        exp = 0
        tag = False
    return Capability(
        bool(tag),
        word & M32,
        word >> 32 & 0x1FF,
        word >> 41 & 0x1FF,
        exp,
        word >> 58 & 0x3F,
        word >> 55 & 7,
    )


def is_mem_wellformed(cap: Capability) -> bool:
    """Untagged values are unconstrained; tagged ones must have a legal
    exponent, a canonical permission code, and sane decoded bounds."""
    if not cap.tag:
        return True
    if cap.exponent not in EXPONENTS:
        return False
    if cap.perm_code not in CANONICAL_CODES:
        return False
    base, top = decode_bounds_raw(cap.address, cap.b_field, cap.t_field, cap.exponent)
    return base <= top <= TOP_MAX


def cap_stricter_than(c1: Capability, c2: Capability) -> bool:
    """c1 differs from c2 at most by having the tag cleared."""
    return (
        c1.address == c2.address
        and c1.b_field == c2.b_field
        and c1.t_field == c2.t_field
        and c1.exponent == c2.exponent
        and c1.perm_code == c2.perm_code
        and c1.otype == c2.otype
        and (not c1.tag or c2.tag)
    )
