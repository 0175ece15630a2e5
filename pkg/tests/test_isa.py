"""Single-step model tests: decoding, per-instruction semantics, trap
behaviour, and the strengthened step variants the checkers build on."""

import random
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from cherisim.capability import (
    M32,
    NULL_CAP,
    Capability,
    ExceptionCause,
    IRQ_MCAUSE,
    data_cap,
    from_bits,
    is_mem_wellformed,
    seal,
    set_address,
    to_bits,
)
from cherisim.isa import (
    ArchInput,
    ArchState,
    EXEC_ROOT,
    ILLEGAL,
    Instr,
    MEM_ROOT,
    MemEventPlan,
    MemRequest,
    RESET_PC,
    SEAL_ROOT,
    cap_slot_values,
    cspec_step,
    decode,
    encode_instr,
    extract_load_value,
    reset_state,
    spec_out,
    spec_step,
    spec_step_full,
    split_access,
    state_stricter_than,
)

NOP = Instr("addi")

# Executable but lacking the system-register permission.
PCC_NO_SR = Capability(True, RESET_PC, 0, 0x100, 24, 0b011011, 0)


def set_reg(s, idx, value):
    regs = list(s.x)
    regs[idx] = value
    return replace(s, x=tuple(regs))


def run(s, instr, irq=False, mem=(), **kw):
    word = encode_instr(instr) if isinstance(instr, Instr) else instr
    return spec_step_full(s, ArchInput(word, irq, tuple(mem)), **kw)


def rv(result, idx):
    return result.state.x[idx].address


class TestDecode:
    def test_canonical_nop(self):
        assert decode(0x00000013) == Instr("addi")

    def test_addi_example(self):
        assert decode(0x02A00193) == Instr("addi", rd=3, imm=42)

    def test_all_zero_and_all_one_words_are_illegal(self):
        assert decode(0x00000000) == ILLEGAL
        assert decode(0xFFFFFFFF) == ILLEGAL

    def test_register_fields_above_fifteen_are_illegal(self):
        assert decode(0x02A00893) == ILLEGAL  # addi rd=17
        assert decode(encode_instr(Instr("add", rd=3, rs1=17, rs2=1))) == ILLEGAL
        assert decode(encode_instr(Instr("beq", rs1=0, rs2=16, imm=8))) == ILLEGAL

    def test_shift_amounts_and_csr_immediates_are_exempt(self):
        assert decode(encode_instr(Instr("slli", rd=3, rs1=4, imm=31))).name == "slli"
        w = encode_instr(Instr("csrrwi", rd=3, rs1=31, csr=0x300))
        assert decode(w) == Instr("csrrwi", rd=3, rs1=31, csr=0x300)

    def test_unsupported_op_imm_encodings(self):
        # xori / ori / andi and malformed shift funct7 values
        for f3 in (4, 6, 7):
            assert decode(f3 << 12 | 0x13) == ILLEGAL
        assert decode(0x02101013) == ILLEGAL  # shift with a stray funct7 bit

    def test_wide_memory_ops_use_the_spare_width_codes(self):
        assert decode(encode_instr(Instr("clc", rd=3, rs1=1, imm=8))).name == "clc"
        assert decode(encode_instr(Instr("csc", rs1=1, rs2=2, imm=8))).name == "csc"
        assert decode(6 << 12 | 0x03) == ILLEGAL  # load width 6 unused
        assert decode(7 << 12 | 0x03) == ILLEGAL
        assert decode(4 << 12 | 0x23) == ILLEGAL  # store width 4 unused

    def test_system_instruction_encodings(self):
        assert decode(0x00000073) == Instr("ecall")
        assert decode(0x00100073) == Instr("ebreak")
        assert decode(0x30200073) == Instr("mret")
        assert decode(0x10500073) == Instr("wfi")
        assert decode(0x00000073 | 1 << 7) == ILLEGAL  # rd must be zero
        assert decode(0x00000073 | 1 << 15) == ILLEGAL

    def test_special_register_numbers(self):
        assert decode(encode_instr(Instr("cspecialrw", rd=3, rs1=0, scr=28))).scr == 28
        assert decode(encode_instr(Instr("cspecialrw", rd=3, rs1=0, scr=31))).scr == 31
        assert decode(encode_instr(Instr("cspecialrw", rd=3, rs1=0, scr=5))) == ILLEGAL

    def test_unary_selector(self):
        assert decode(encode_instr(Instr("cmove", rd=3, rs1=1))).name == "cmove"
        bad = 0x7F << 25 | 6 << 20 | 1 << 15 | 3 << 7 | 0x5B
        assert decode(bad) == ILLEGAL

    @given(st.integers(0, M32))
    def test_decode_total(self, word):
        assert isinstance(decode(word), Instr)


REG = st.integers(0, 15)


@st.composite
def instrs(draw):
    name = draw(
        st.sampled_from(
            [
                "lui", "auipcc", "cjal", "cjalr", "beq", "bne", "blt", "bge", "bltu", "bgeu",
                "lb", "lh", "lw", "lbu", "lhu", "clc", "sb", "sh", "sw", "csc",
                "addi", "slti", "sltiu", "slli", "srli", "srai",
                "add", "sub", "sll", "slt", "sltu", "xor", "srl", "sra", "or", "and",
                "ecall", "ebreak", "mret", "wfi",
                "csrrw", "csrrs", "csrrc", "csrrwi", "csrrsi", "csrrci",
                "cspecialrw", "cmove", "cgetperm", "cgettype", "cgetbase", "cgetlen",
                "cgettag", "cgettop", "csetbounds", "csetboundsexact", "cseal",
                "cunseal", "candperm", "csetaddr", "cincaddr", "cseqx",
            ]
        )
    )
    rd, rs1, rs2 = draw(REG), draw(REG), draw(REG)
    imm12 = st.integers(-2048, 2047)
    if name in ("lui", "auipcc"):
        return Instr(name, rd=rd, imm=draw(st.integers(0, 0xFFFFF)) << 12)
    if name == "cjal":
        return Instr(name, rd=rd, imm=draw(st.integers(-(1 << 19), (1 << 19) - 1)) * 2)
    if name == "cjalr":
        return Instr(name, rd=rd, rs1=rs1, imm=draw(imm12))
    if name in ("beq", "bne", "blt", "bge", "bltu", "bgeu"):
        return Instr(name, rs1=rs1, rs2=rs2, imm=draw(st.integers(-(1 << 11), (1 << 11) - 1)) * 2)
    if name in ("lb", "lh", "lw", "lbu", "lhu", "clc"):
        return Instr(name, rd=rd, rs1=rs1, imm=draw(imm12))
    if name in ("sb", "sh", "sw", "csc"):
        return Instr(name, rs1=rs1, rs2=rs2, imm=draw(imm12))
    if name in ("addi", "slti", "sltiu"):
        return Instr(name, rd=rd, rs1=rs1, imm=draw(imm12))
    if name in ("slli", "srli", "srai"):
        return Instr(name, rd=rd, rs1=rs1, imm=draw(st.integers(0, 31)))
    if name in ("ecall", "ebreak", "mret", "wfi"):
        return Instr(name)
    if name in ("csrrw", "csrrs", "csrrc"):
        return Instr(name, rd=rd, rs1=rs1, csr=draw(st.integers(0, 0xFFF)))
    if name in ("csrrwi", "csrrsi", "csrrci"):
        return Instr(name, rd=rd, rs1=draw(st.integers(0, 31)), csr=draw(st.integers(0, 0xFFF)))
    if name == "cspecialrw":
        return Instr(name, rd=rd, rs1=rs1, scr=draw(st.sampled_from((28, 31))))
    if name in ("cmove", "cgetperm", "cgettype", "cgetbase", "cgetlen", "cgettag", "cgettop"):
        return Instr(name, rd=rd, rs1=rs1)
    return Instr(name, rd=rd, rs1=rs1, rs2=rs2)


class TestEncodeRoundTrip:
    @given(instrs())
    @settings(max_examples=400)
    def test_decode_inverts_encode(self, i):
        assert decode(encode_instr(i)) == i

    def test_encode_rejects_unknown(self):
        with pytest.raises(ValueError):
            encode_instr(Instr("bogus"))


class TestAluSemantics:
    def test_addi_writes_untagged_value(self):
        r = run(reset_state(), Instr("addi", rd=3, imm=42))
        assert r.state.x[3] == data_cap(42)
        assert r.state.pcc.address == RESET_PC + 4
        assert r.cause is None and r.plan.kind == "none"

    def test_add_sub_wrap(self):
        s = set_reg(set_reg(reset_state(), 3, data_cap(0xFFFFFFFF)), 4, data_cap(2))
        assert rv(run(s, Instr("add", rd=5, rs1=3, rs2=4)), 5) == 1
        assert rv(run(s, Instr("sub", rd=5, rs1=4, rs2=3)), 5) == 3

    def test_comparisons_respect_signedness(self):
        s = set_reg(set_reg(reset_state(), 3, data_cap(0xFFFFFFFF)), 4, data_cap(1))
        assert rv(run(s, Instr("slt", rd=5, rs1=3, rs2=4)), 5) == 1  # -1 < 1
        assert rv(run(s, Instr("sltu", rd=5, rs1=3, rs2=4)), 5) == 0
        assert rv(run(s, Instr("slti", rd=5, rs1=3, imm=0)), 5) == 1
        assert rv(run(s, Instr("sltiu", rd=5, rs1=4, imm=-1)), 5) == 1

    def test_shifts(self):
        s = set_reg(reset_state(), 3, data_cap(0x80000001))
        assert rv(run(s, Instr("slli", rd=5, rs1=3, imm=1)), 5) == 2
        assert rv(run(s, Instr("srli", rd=5, rs1=3, imm=31)), 5) == 1
        assert rv(run(s, Instr("srai", rd=5, rs1=3, imm=31)), 5) == 0xFFFFFFFF

    def test_bitwise(self):
        s = set_reg(set_reg(reset_state(), 3, data_cap(0b1100)), 4, data_cap(0b1010))
        assert rv(run(s, Instr("and", rd=5, rs1=3, rs2=4)), 5) == 0b1000
        assert rv(run(s, Instr("or", rd=5, rs1=3, rs2=4)), 5) == 0b1110
        assert rv(run(s, Instr("xor", rd=5, rs1=3, rs2=4)), 5) == 0b0110

    def test_lui(self):
        r = run(reset_state(), Instr("lui", rd=3, imm=0xABCDE000))
        assert r.state.x[3] == data_cap(0xABCDE000)

    def test_auipcc_derives_from_pcc(self):
        r = run(reset_state(), Instr("auipcc", rd=3, imm=0x1000))
        got = r.state.x[3]
        assert got.tag and got.address == RESET_PC + 0x1000
        assert got.perm_code == EXEC_ROOT.perm_code
        assert any(d.slot == "x3" for d in r.derivations)

    def test_x0_never_written(self):
        r = run(reset_state(), Instr("addi", rd=0, imm=5))
        assert r.state.x[0] is NULL_CAP or r.state.x[0] == NULL_CAP
        r = run(reset_state(), Instr("cmove", rd=0, rs1=1))
        assert r.state.x[0] == NULL_CAP


class TestControlFlow:
    def test_branch_taken_and_not_taken(self):
        s = reset_state()
        assert run(s, Instr("beq", imm=8)).state.pcc.address == RESET_PC + 8
        assert run(s, Instr("bne", imm=8)).state.pcc.address == RESET_PC + 4

    def test_branch_misaligned_target_traps_only_when_taken(self):
        s = reset_state()
        r = run(s, Instr("beq", imm=2))
        assert r.cause is ExceptionCause.MISALIGNED_TARGET
        assert r.state.mcause == 0 and r.state.mtval == 0
        assert r.state.mepcc == set_address(s.pcc, RESET_PC)
        assert run(s, Instr("bne", imm=2)).cause is None

    def test_cjal_links_and_redirects(self):
        r = run(reset_state(), Instr("cjal", rd=3, imm=0x100))
        assert r.state.pcc.address == RESET_PC + 0x100
        link = r.state.x[3]
        assert link.tag and link.address == RESET_PC + 4 and link.perms.execute

    def test_cjal_misaligned_leaves_link_unwritten(self):
        r = run(reset_state(), Instr("cjal", rd=3, imm=2))
        assert r.cause is ExceptionCause.MISALIGNED_TARGET
        assert r.state.x[3] == NULL_CAP

    def test_cjalr_clears_bit_zero_then_checks_alignment(self):
        s = set_reg(reset_state(), 5, set_address(EXEC_ROOT, 0x80000040))
        r = run(s, Instr("cjalr", rd=3, rs1=5, imm=5))
        assert r.cause is None and r.state.pcc.address == 0x80000044
        assert r.state.x[3].address == RESET_PC + 4
        r = run(s, Instr("cjalr", rd=3, rs1=5, imm=6))
        assert r.cause is ExceptionCause.MISALIGNED_TARGET

    def test_cjalr_authority_checks_in_order(self):
        s = reset_state()
        r = run(set_reg(s, 5, data_cap(0x80000002)), Instr("cjalr", rs1=5))
        assert r.cause is ExceptionCause.TAG_VIOLATION  # tag outranks alignment
        sealed = seal(set_address(EXEC_ROOT, 0x80000040), SEAL_ROOT)
        assert sealed.tag
        r = run(set_reg(s, 5, sealed), Instr("cjalr", rs1=5))
        assert r.cause is ExceptionCause.SEAL_VIOLATION
        r = run(set_reg(s, 5, MEM_ROOT), Instr("cjalr", rs1=5))
        assert r.cause is ExceptionCause.PERMISSION_VIOLATION

    def test_cjalr_installs_target_capability_as_pcc(self):
        target = set_address(EXEC_ROOT, 0x80000040)
        s = set_reg(reset_state(), 5, target)
        r = run(s, Instr("cjalr", rd=0, rs1=5))
        assert r.state.pcc == set_address(target, 0x80000040)


class TestLoads:
    def test_lw_plan_and_value(self):
        r = run(reset_state(), Instr("lw", rd=3, rs1=1, imm=0x100), mem=((0xDEADBEEF, False),))
        assert r.plan == MemEventPlan("read", (MemRequest(0x100, 0xF, 0, False, False),))
        assert r.state.x[3] == data_cap(0xDEADBEEF)

    def test_byte_and_half_extraction(self):
        s = reset_state()
        assert rv(run(s, Instr("lb", rd=3, rs1=1), mem=((0x123456FF, False),)), 3) == 0xFFFFFFFF
        assert rv(run(s, Instr("lbu", rd=3, rs1=1), mem=((0x123456FF, False),)), 3) == 0xFF
        assert rv(run(s, Instr("lh", rd=3, rs1=1, imm=2), mem=((0xABCD1234, False),)), 3) == 0xFFFFABCD
        assert rv(run(s, Instr("lhu", rd=3, rs1=1, imm=2), mem=((0xABCD1234, False),)), 3) == 0xABCD

    def test_misaligned_word_load_uses_two_beats(self):
        r = run(
            reset_state(),
            Instr("lw", rd=3, rs1=1, imm=2),
            mem=((0x11223344, False), (0xAABBCCDD, False)),
        )
        assert [q.addr for q in r.plan.requests] == [0, 4]
        assert rv(r, 3) == 0xCCDD1122

    def test_half_load_across_word_boundary(self):
        r = run(
            reset_state(),
            Instr("lhu", rd=3, rs1=1, imm=3),
            mem=((0x55667788, False), (0x99AABBCC, False)),
        )
        assert rv(r, 3) == 0xCC55

    def test_load_authority_failures(self):
        s = reset_state()
        r = run(set_reg(s, 5, data_cap(0x40)), Instr("lw", rd=3, rs1=5))
        assert r.cause is ExceptionCause.TAG_VIOLATION
        r = run(set_reg(s, 5, SEAL_ROOT), Instr("lw", rd=3, rs1=5))
        assert r.cause is ExceptionCause.PERMISSION_VIOLATION  # no load permission
        r = run(set_reg(s, 5, seal(MEM_ROOT, SEAL_ROOT)), Instr("lw", rd=3, rs1=5))
        assert r.cause is ExceptionCause.SEAL_VIOLATION

    def test_load_bounds_failure_is_atomic(self):
        narrow = Capability(True, 0x100, 0x100, 0x110, 0, 0x0F, 0)  # [0x100, 0x110)
        s = set_reg(reset_state(), 5, narrow)
        r = run(s, Instr("lw", rd=3, rs1=5, imm=0x0E))
        assert r.cause is ExceptionCause.BOUNDS_VIOLATION
        assert r.plan.kind == "none"
        assert r.state.x[3] == NULL_CAP
        assert r.state.mcause == int(ExceptionCause.BOUNDS_VIOLATION)


class TestStores:
    def test_sw_updates_memory_and_clears_granule_tag(self):
        s = set_reg(reset_state(), 3, data_cap(0x11223344))
        s.mem_tags[1] = True
        r = run(s, Instr("sw", rs1=1, rs2=3, imm=8))
        assert r.plan == MemEventPlan("write", (MemRequest(8, 0xF, 0x11223344, False, True),))
        assert [r.state.mem[a] for a in (8, 9, 10, 11)] == [0x44, 0x33, 0x22, 0x11]
        assert r.state.mem_tags[1] is False

    def test_sb_touches_one_byte(self):
        s = set_reg(reset_state(), 3, data_cap(0xAB))
        r = run(s, Instr("sb", rs1=1, rs2=3, imm=5))
        assert r.plan.requests == (MemRequest(4, 0b0010, 0xAB00, False, True),)
        assert r.state.mem == {5: 0xAB}

    def test_misaligned_word_store_splits_with_byte_enables(self):
        s = set_reg(reset_state(), 3, data_cap(0xDDCCBBAA))
        r = run(s, Instr("sw", rs1=1, rs2=3, imm=0x102))
        assert r.plan.requests == (
            MemRequest(0x100, 0b1100, 0xBBAA0000, False, True),
            MemRequest(0x104, 0b0011, 0x0000DDCC, False, True),
        )
        assert {a: r.state.mem[a] for a in (0x102, 0x103, 0x104, 0x105)} == {
            0x102: 0xAA, 0x103: 0xBB, 0x104: 0xCC, 0x105: 0xDD,
        }

    def test_store_permission_failure_is_atomic(self):
        s = set_reg(reset_state(), 5, set_address(EXEC_ROOT, 0x100))
        r = run(set_reg(s, 3, data_cap(1)), Instr("sw", rs1=5, rs2=3))
        assert r.cause is ExceptionCause.PERMISSION_VIOLATION
        assert r.plan.kind == "none" and r.state.mem == {}


CAP_WORD = to_bits(MEM_ROOT)


class TestCapMemory:
    def test_clc_loads_a_tagged_capability(self):
        r = run(
            reset_state(),
            Instr("clc", rd=3, rs1=1, imm=0x10),
            mem=((CAP_WORD & M32, True), (CAP_WORD >> 32, False)),
        )
        assert r.plan.kind == "read"
        assert [q.addr for q in r.plan.requests] == [0x10, 0x14]
        assert all(q.be == 0xF for q in r.plan.requests)
        assert r.state.x[3] == MEM_ROOT
        assert any(d.slot == "x3" for d in r.derivations)

    def test_clc_data_round_trip_preserves_bits(self):
        word = 0x0123456789ABCDEF  # exponent field valid, tag clear
        r = run(
            reset_state(),
            Instr("clc", rd=3, rs1=1),
            mem=((word & M32, False), (word >> 32, False)),
        )
        assert not r.state.x[3].tag
        assert to_bits(r.state.x[3]) == word

    def test_clc_filter_strips_tag_without_cap_access(self):
        auth = Capability(True, 0, 0, 0x100, 24, 0b001011, 0)
        s = set_reg(reset_state(), 5, auth)
        r = run(s, Instr("clc", rd=3, rs1=5), mem=((CAP_WORD & M32, True), (CAP_WORD >> 32, False)))
        assert not r.state.x[3].tag
        assert to_bits(r.state.x[3]) == CAP_WORD

    def test_clc_filter_strips_global_without_global_authority(self):
        auth = Capability(True, 0, 0, 0x100, 24, 0b000111, 0)
        s = set_reg(reset_state(), 5, auth)
        r = run(s, Instr("clc", rd=3, rs1=5), mem=((CAP_WORD & M32, True), (CAP_WORD >> 32, False)))
        got = r.state.x[3]
        assert got.tag and not got.perms.global_
        assert got.perm_code == 0b000111
        assert got.perms.load and got.perms.store and got.perms.cap_access

    def test_clc_filter_leaves_untagged_data_alone(self):
        auth = Capability(True, 0, 0, 0x100, 24, 0b000111, 0)
        word = 0x0123456789ABCDEF
        s = set_reg(reset_state(), 5, auth)
        r = run(s, Instr("clc", rd=3, rs1=5), mem=((word & M32, False), (word >> 32, False)))
        assert to_bits(r.state.x[3]) == word

    def test_clc_alignment_outranks_authority(self):
        s = set_reg(reset_state(), 5, data_cap(0))
        r = run(s, Instr("clc", rd=3, rs1=5, imm=4))
        assert r.cause is ExceptionCause.MISALIGNED_TARGET
        r = run(s, Instr("clc", rd=3, rs1=5, imm=8))
        assert r.cause is ExceptionCause.TAG_VIOLATION

    def test_csc_stores_capability_with_tag(self):
        s = reset_state()
        r = run(s, Instr("csc", rs1=1, rs2=2, imm=0x20))
        bits = to_bits(SEAL_ROOT)
        assert r.plan == MemEventPlan(
            "write",
            (
                MemRequest(0x20, 0xF, bits & M32, True, True),
                MemRequest(0x24, 0xF, bits >> 32, False, True),
            ),
        )
        assert r.state.mem_tags[4] is True
        stored = 0
        for k in range(8):
            stored |= r.state.mem[0x20 + k] << 8 * k
        assert stored == bits

    def test_csc_untagged_value_stores_without_tag(self):
        s = set_reg(reset_state(), 3, data_cap(5))
        r = run(s, Instr("csc", rs1=1, rs2=3, imm=0x20))
        assert r.plan.requests[0].wtag is False
        assert r.state.mem_tags[4] is False

    def test_csc_without_cap_access_strips_the_stored_tag(self):
        auth = Capability(True, 0, 0, 0x100, 24, 0b001011, 0)
        s = set_reg(reset_state(), 5, auth)
        r = run(s, Instr("csc", rs1=5, rs2=2))
        assert r.plan.requests[0].wtag is False
        assert r.plan.requests[0].wdata == to_bits(SEAL_ROOT) & M32
        assert r.state.mem_tags[0] is False

    def test_csc_alignment_and_atomicity(self):
        s = reset_state()
        r = run(s, Instr("csc", rs1=1, rs2=2, imm=4))
        assert r.cause is ExceptionCause.MISALIGNED_TARGET
        r = run(set_reg(s, 5, set_address(EXEC_ROOT, 0x40)), Instr("csc", rs1=5, rs2=2))
        assert r.cause is ExceptionCause.PERMISSION_VIOLATION
        assert r.state.mem == {} and r.state.mem_tags == {}


class TestCsr:
    def test_mstatus_is_warl_two_bits(self):
        s = set_reg(reset_state(), 3, data_cap(0xFFFFFFFF))
        r = run(s, Instr("csrrw", rd=4, rs1=3, csr=0x300))
        assert rv(r, 4) == 0  # old value
        assert r.state.mstatus_mie and r.state.mstatus_mpie
        r2 = run(r.state, Instr("csrrs", rd=4, csr=0x300))
        assert rv(r2, 4) == 0x88

    def test_csrrs_and_csrrc_with_zero_source_do_not_write(self):
        s = replace(reset_state(), mcause=0x1234)
        r = run(s, Instr("csrrs", rd=3, rs1=0, csr=0x342))
        assert rv(r, 3) == 0x1234 and r.state.mcause == 0x1234
        r = run(s, Instr("csrrci", rd=3, rs1=0, csr=0x342))
        assert r.state.mcause == 0x1234

    def test_csr_read_write_mcause_mtval(self):
        s = set_reg(reset_state(), 3, data_cap(0xABCD))
        r = run(s, Instr("csrrw", rd=0, rs1=3, csr=0x342))
        assert r.state.mcause == 0xABCD
        r = run(s, Instr("csrrw", rd=0, rs1=3, csr=0x343))
        assert r.state.mtval == 0xABCD

    def test_immediate_forms_use_the_field_as_value(self):
        r = run(reset_state(), Instr("csrrwi", rd=0, rs1=0x1F, csr=0x342))
        assert r.state.mcause == 0x1F
        r2 = run(r.state, Instr("csrrci", rd=0, rs1=0x0F, csr=0x342))
        assert r2.state.mcause == 0x10

    def test_unknown_csr_is_illegal_with_instruction_in_mtval(self):
        i = Instr("csrrw", rd=3, rs1=0, csr=0x301)
        r = run(reset_state(), i)
        assert r.cause is ExceptionCause.ILLEGAL_INSTRUCTION
        assert r.state.mtval == encode_instr(i)

    def test_system_register_permission_gates_csr_access(self):
        s = replace(reset_state(), pcc=PCC_NO_SR)
        for i in (Instr("csrrs", rd=3, csr=0x300), Instr("cspecialrw", rd=3, scr=28), Instr("mret")):
            r = run(s, i)
            assert r.cause is ExceptionCause.PERMISSION_VIOLATION


class TestScr:
    def test_read_only_when_source_is_x0(self):
        r = run(reset_state(), Instr("cspecialrw", rd=3, rs1=0, scr=28))
        assert r.state.x[3] == EXEC_ROOT
        assert r.state.mtcc == EXEC_ROOT

    def test_trap_vector_write_requires_execute(self):
        s = reset_state()
        r = run(s, Instr("cspecialrw", rd=3, rs1=1, scr=28))
        assert r.state.x[3] == EXEC_ROOT
        assert r.state.mtcc == replace(MEM_ROOT, tag=False)
        target = set_address(EXEC_ROOT, 0x80000100)
        r = run(set_reg(s, 5, target), Instr("cspecialrw", rd=0, rs1=5, scr=28))
        assert r.state.mtcc == target

    def test_saved_pcc_register_accepts_anything(self):
        s = set_reg(reset_state(), 5, MEM_ROOT)
        r = run(s, Instr("cspecialrw", rd=3, rs1=5, scr=31))
        assert r.state.mepcc == MEM_ROOT
        assert r.state.x[3] == NULL_CAP  # old value


class TestTraps:
    def test_ecall(self):
        s = reset_state()
        r = run(s, Instr("ecall"))
        assert r.cause is ExceptionCause.ECALL and not r.interrupt
        assert r.state.mcause == 11 and r.state.mtval == 0
        assert r.state.mepcc == s.pcc
        assert r.state.pcc == s.mtcc
        assert not r.state.mstatus_mie and not r.state.mstatus_mpie

    def test_ebreak_mtval_config(self):
        s = reset_state()
        assert run(s, Instr("ebreak")).state.mtval == 0
        assert run(s, Instr("ebreak"), mtval_on_ebreak="pc").state.mtval == RESET_PC
        assert run(s, Instr("ebreak")).state.mcause == 3

    def test_trap_vector_address_is_aligned_on_entry(self):
        vec = set_address(EXEC_ROOT, 0x80000042)
        s = replace(reset_state(), mtcc=vec)
        r = run(s, Instr("ecall"))
        assert r.state.pcc.address == 0x80000040

    def test_mret_round_trip(self):
        s = replace(reset_state(), mstatus_mie=True)
        trapped = run(s, Instr("ecall")).state
        assert trapped.mstatus_mpie and not trapped.mstatus_mie
        r = run(trapped, Instr("mret"))
        assert r.state.pcc == s.pcc
        assert r.state.mstatus_mie and r.state.mstatus_mpie

    def test_mret_without_execute_produces_dead_pcc(self):
        s = replace(reset_state(), mepcc=MEM_ROOT)
        r = run(s, Instr("mret"))
        assert r.cause is None
        assert not r.state.pcc.tag and r.state.pcc.address == 0
        r2 = run(r.state, NOP)
        assert r2.cause is ExceptionCause.FETCH_BOUNDS

    def test_mret_misaligned_saved_address(self):
        s = replace(reset_state(), mepcc=set_address(EXEC_ROOT, 0x80000002))
        r = run(s, Instr("mret"))
        assert r.cause is ExceptionCause.MISALIGNED_TARGET

    def test_interrupt_preempts_everything(self):
        s = replace(reset_state(), mstatus_mie=True)
        r = run(s, Instr("ecall"), irq=True)
        assert r.interrupt and r.instr is None and r.cause is None
        assert r.state.mcause == IRQ_MCAUSE
        assert r.state.mepcc == s.pcc
        assert r.state.mstatus_mpie and not r.state.mstatus_mie
        dead = replace(s, pcc=data_cap(0x40))
        assert run(dead, NOP, irq=True).interrupt

    def test_interrupt_masked_by_mie(self):
        r = run(reset_state(), NOP, irq=True)
        assert not r.interrupt and r.cause is None

    def test_fetch_failures_share_one_cause(self):
        dead = replace(reset_state(), pcc=data_cap(RESET_PC))
        assert run(dead, NOP).cause is ExceptionCause.FETCH_BOUNDS
        sealed = replace(reset_state(), pcc=replace(EXEC_ROOT, otype=3))
        assert run(sealed, NOP).cause is ExceptionCause.FETCH_BOUNDS
        narrow = replace(reset_state(), pcc=Capability(True, 0x80000010, 0, 0x010, 0, 0b011111, 0))
        assert run(narrow, NOP).cause is ExceptionCause.FETCH_BOUNDS
        assert run(narrow, NOP).state.mcause == 1

    def test_fetch_failure_outranks_decode(self):
        dead = replace(reset_state(), pcc=data_cap(RESET_PC))
        assert run(dead, 0x00000000).cause is ExceptionCause.FETCH_BOUNDS

    def test_wfi_is_a_nop_architecturally(self):
        s = reset_state()
        r = run(s, Instr("wfi"))
        assert r.cause is None and r.plan.kind == "none"
        assert r.state.x == s.x and r.state.pcc.address == RESET_PC + 4

    def test_illegal_instruction_records_the_word(self):
        r = run(reset_state(), 0xFFFFFFFF)
        assert r.cause is ExceptionCause.ILLEGAL_INSTRUCTION
        assert r.state.mtval == 0xFFFFFFFF and r.state.mcause == 2


class TestCapInspection:
    def test_getters(self):
        s = reset_state()
        assert rv(run(s, Instr("cgetperm", rd=3, rs1=1)), 3) == 0b001111
        assert rv(run(s, Instr("cgetbase", rd=3, rs1=1)), 3) == 0
        assert rv(run(s, Instr("cgettop", rd=3, rs1=1)), 3) == 0xFFFFFFFF  # clamped
        assert rv(run(s, Instr("cgetlen", rd=3, rs1=1)), 3) == 0xFFFFFFFF
        assert rv(run(s, Instr("cgettag", rd=3, rs1=1)), 3) == 1
        assert rv(run(s, Instr("cgettag", rd=3, rs1=0)), 3) == 0
        assert rv(run(s, Instr("cgettype", rd=3, rs1=1)), 3) == 0

    def test_getters_on_a_narrow_capability(self):
        narrow = Capability(True, 0x100, 0x100, 0x1F0, 0, 0x0F, 0)
        s = set_reg(reset_state(), 5, narrow)
        assert rv(run(s, Instr("cgetbase", rd=3, rs1=5)), 3) == 0x100
        assert rv(run(s, Instr("cgettop", rd=3, rs1=5)), 3) == 0x1F0
        assert rv(run(s, Instr("cgetlen", rd=3, rs1=5)), 3) == 0xF0

    def test_type_of_sealed_value(self):
        s = set_reg(reset_state(), 5, seal(MEM_ROOT, SEAL_ROOT))
        assert rv(run(s, Instr("cgettype", rd=3, rs1=5)), 3) == 1

    def test_cseqx(self):
        s = set_reg(reset_state(), 3, MEM_ROOT)
        assert rv(run(s, Instr("cseqx", rd=4, rs1=1, rs2=3)), 4) == 1
        s2 = set_reg(s, 3, replace(MEM_ROOT, tag=False))
        assert rv(run(s2, Instr("cseqx", rd=4, rs1=1, rs2=3)), 4) == 0
        assert rv(run(s, Instr("cseqx", rd=4, rs1=1, rs2=2)), 4) == 0

    def test_cmove_preserves_everything(self):
        r = run(reset_state(), Instr("cmove", rd=3, rs1=2))
        assert r.state.x[3] == SEAL_ROOT


class TestCapManipulation:
    def test_set_and_increment_address(self):
        s = reset_state()
        r = run(set_reg(s, 3, data_cap(0x1234)), Instr("csetaddr", rd=4, rs1=1, rs2=3))
        assert r.state.x[4] == set_address(MEM_ROOT, 0x1234)
        r2 = run(r.state, Instr("cincaddr", rd=5, rs1=4, rs2=3))
        assert r2.state.x[5].address == 0x2468 and r2.state.x[5].tag

    def test_set_bounds_rounds_and_exact_variant_detags(self):
        s = set_reg(reset_state(), 3, data_cap(0x301))
        base = set_address(MEM_ROOT, 0x1000)
        s = set_reg(s, 5, base)
        r = run(s, Instr("csetbounds", rd=4, rs1=5, rs2=3))
        got = r.state.x[4]
        assert got.tag and got.exponent == 1
        r = run(s, Instr("csetboundsexact", rd=4, rs1=5, rs2=3))
        assert not r.state.x[4].tag
        s2 = set_reg(s, 3, data_cap(0x100))
        r = run(s2, Instr("csetboundsexact", rd=4, rs1=5, rs2=3))
        assert r.state.x[4].tag

    def test_andperm_masks_with_expanded_bits(self):
        s = set_reg(reset_state(), 3, data_cap(0b01000010))  # keep load+global
        r = run(s, Instr("candperm", rd=4, rs1=1, rs2=3))
        got = r.state.x[4]
        assert got.tag and got.perm_code == 0b001001
        assert got.perms.load and got.perms.global_ and not got.perms.store

    def test_seal_unseal_round_trip(self):
        s = reset_state()
        r = run(s, Instr("cseal", rd=3, rs1=1, rs2=2))
        sealed = r.state.x[3]
        assert sealed.tag and sealed.otype == 1
        r2 = run(r.state, Instr("cunseal", rd=4, rs1=3, rs2=2))
        assert r2.state.x[4] == MEM_ROOT

    def test_derivation_records_cover_register_results(self):
        s = set_reg(reset_state(), 3, data_cap(0x100))
        r = run(s, Instr("csetbounds", rd=4, rs1=1, rs2=3))
        recs = {d.slot: d for d in r.derivations}
        assert recs["x4"].parent == MEM_ROOT
        assert "pcc" in recs


class TestStrengthenedStep:
    def test_no_rules_matches_plain_step(self):
        s = set_reg(reset_state(), 3, data_cap(7))
        i = ArchInput(encode_instr(Instr("add", rd=4, rs1=3, rs2=3)))
        assert cspec_step(s, i) == spec_step(s, i)

    def test_clear_everything_rule(self):
        s = reset_state()
        i = ArchInput(encode_instr(NOP))
        state, plan = cspec_step(s, i, clear_rules=(lambda slot, instr: True,))
        ref, ref_plan = spec_step(s, i)
        assert plan == ref_plan
        assert all(not c.tag for _, c in cap_slot_values(state))
        assert state_stricter_than(state, ref)

    def test_link_register_rule(self):
        s = reset_state()
        i = ArchInput(encode_instr(Instr("cjal", rd=3, imm=8)))
        rule = lambda slot, instr: instr is not None and instr.name == "cjal" and slot == f"x{instr.rd}"
        state, _ = cspec_step(s, i, clear_rules=(rule,))
        assert not state.x[3].tag
        assert state.pcc.tag

    def test_rules_see_interrupt_steps_as_no_instruction(self):
        s = replace(reset_state(), mstatus_mie=True)
        seen = []
        rule = lambda slot, instr: seen.append(instr) or False
        cspec_step(s, ArchInput(encode_instr(NOP), irq_pending=True), clear_rules=(rule,))
        assert seen and all(i is None for i in seen)


class TestStricterThan:
    def test_reflexive(self):
        s = reset_state()
        assert state_stricter_than(s, s)

    def test_tag_clearing_is_strictening_only_one_way(self):
        s = reset_state()
        weak = set_reg(s, 1, replace(MEM_ROOT, tag=False))
        assert state_stricter_than(weak, s)
        assert not state_stricter_than(s, weak)

    def test_value_changes_break_the_relation(self):
        s = reset_state()
        other = set_reg(s, 3, data_cap(1))
        assert not state_stricter_than(s, other)
        assert not state_stricter_than(other, s)
        assert not state_stricter_than(s, replace(s, mcause=5))

    def test_memory_can_be_excluded(self):
        s = reset_state()
        dirty = replace(s, mem={0: 1})
        assert not state_stricter_than(dirty, s)
        assert state_stricter_than(dirty, s, include_mem=False)


class TestAccessHelpers:
    def test_split_access_shapes(self):
        assert split_access(0x100, 4) == (MemRequest(0x100, 0xF, 0, False, False),)
        assert split_access(0x102, 4) == (
            MemRequest(0x100, 0xF, 0, False, False),
            MemRequest(0x104, 0xF, 0, False, False),
        )
        assert split_access(0x5, 1, 0xAB, we=True) == (MemRequest(0x4, 0b0010, 0xAB00, False, True),)

    def test_extract_values(self):
        assert extract_load_value(0x102, 4, (0x11223344, 0xAABBCCDD)) == 0xCCDD1122
        assert extract_load_value(0x103, 2, (0x55667788, 0x99AABBCC)) == 0xCC55
        assert extract_load_value(0x100, 4, (0xDEADBEEF,)) == 0xDEADBEEF


def _wellformed_cap(rng):
    while True:
        c = Capability(
            True,
            rng.getrandbits(32),
            rng.getrandbits(9),
            rng.getrandbits(9),
            rng.choice(tuple(range(15)) + (24,)),
            rng.choice((0b001111, 0b011111, 0b100111, 0b000111, 0b001011)),
            rng.getrandbits(3),
        )
        if is_mem_wellformed(c):
            return c


def _random_responses(rng):
    if rng.random() < 0.4:
        bits = to_bits(_wellformed_cap(rng))
        return ((bits & M32, True), (bits >> 32, False), (rng.getrandbits(32), False), (0, False))
    return tuple((rng.getrandbits(32), False) for _ in range(4))


_SWEEP_POOL = [
    "addi", "add", "sub", "xor", "sll", "sltu", "lui", "auipcc",
    "cjal", "cjalr", "beq", "bne", "lw", "lb", "lhu", "sw", "sb", "clc", "csc",
    "cmove", "cgetperm", "cgetbase", "cgetlen", "cgettag", "cgettop", "cgettype",
    "csetaddr", "cincaddr", "csetbounds", "csetboundsexact", "candperm",
    "cseal", "cunseal", "cseqx", "csrrw", "csrrs", "cspecialrw",
    "ecall", "mret", "wfi",
]


def _random_instr(rng):
    name = rng.choice(_SWEEP_POOL)
    rd, rs1, rs2 = rng.randrange(16), rng.randrange(16), rng.randrange(16)
    if name in ("lui", "auipcc"):
        return Instr(name, rd=rd, imm=rng.getrandbits(20) << 12)
    if name == "cjal":
        return Instr(name, rd=rd, imm=rng.randrange(-64, 64) * 2)
    if name in ("beq", "bne"):
        return Instr(name, rs1=rs1, rs2=rs2, imm=rng.randrange(-64, 64) * 2)
    if name == "cjalr":
        return Instr(name, rd=rd, rs1=rs1, imm=rng.randrange(-16, 16))
    if name in ("lw", "lb", "lhu", "clc"):
        return Instr(name, rd=rd, rs1=rs1, imm=rng.randrange(0, 256))
    if name in ("sw", "sb", "csc"):
        return Instr(name, rs1=rs1, rs2=rs2, imm=rng.randrange(0, 256))
    if name in ("csrrw", "csrrs"):
        return Instr(name, rd=rd, rs1=rs1, csr=rng.choice((0x300, 0x342, 0x343)))
    if name == "cspecialrw":
        return Instr(name, rd=rd, rs1=rs1, scr=rng.choice((28, 31)))
    if name in ("ecall", "mret", "wfi"):
        return Instr(name)
    if name in ("cmove", "cgetperm", "cgetbase", "cgetlen", "cgettag", "cgettop", "cgettype"):
        return Instr(name, rd=rd, rs1=rs1)
    return Instr(name, rd=rd, rs1=rs1, rs2=rs2)


def _granule_word(state, granule):
    word = 0
    for k in range(8):
        word |= state.mem.get(granule * 8 + k, 0) << 8 * k
    return word


@pytest.mark.parametrize("seed", range(20))
def test_wellformedness_is_preserved_by_execution(seed):
    rng = random.Random(seed)
    s = reset_state()
    for _ in range(150):
        r = run(s, _random_instr(rng), irq=rng.random() < 0.05, mem=_random_responses(rng))
        s = r.state
        for slot, c in cap_slot_values(s):
            assert not c.tag or is_mem_wellformed(c), (seed, slot, c)
        for granule, tagged in s.mem_tags.items():
            if tagged:
                assert is_mem_wellformed(from_bits(_granule_word(s, granule), True))


def test_step_is_deterministic():
    rng1, rng2 = random.Random(7), random.Random(7)
    outs = []
    for rng in (rng1, rng2):
        s = reset_state()
        for _ in range(80):
            s = run(s, _random_instr(rng), mem=_random_responses(rng)).state
        outs.append(s)
    assert outs[0] == outs[1]


def test_spec_out_matches_spec_step_plan():
    s = set_reg(reset_state(), 3, data_cap(0x11223344))
    i = ArchInput(encode_instr(Instr("sw", rs1=1, rs2=3, imm=8)))
    assert spec_out(s, i) == spec_step(s, i)[1]
