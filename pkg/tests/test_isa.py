from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from bpfopt.corpus import MICRO_CORPUS, generated_corpus
from bpfopt.isa import (
    ALU_OPS,
    FP,
    JMP_OPS,
    SHIFT_OPS,
    ControlInsn,
    Instruction,
    IsaError,
    Program,
    SyntaxError,
    UnknownOpcode,
    UnsupportedInstruction,
    decode,
    decode_program,
    encode,
    encode_program,
    format_insn,
    parse_asm,
    parse_insn,
    print_asm,
)

regs = st.integers(0, 10)
dst_regs = st.integers(0, 9)
imm32 = st.integers(-(1 << 31), (1 << 31) - 1)
off16 = st.integers(-(1 << 15), (1 << 15) - 1)
widths = st.sampled_from((1, 2, 4, 8))


@st.composite
def alu_insns(draw):
    is32 = draw(st.booleans())
    op = draw(st.sampled_from(sorted(ALU_OPS)))
    dst = draw(dst_regs)
    if op == "neg":
        return Instruction.alu("neg", dst, is32=is32)
    if draw(st.booleans()):
        return Instruction.alu(op, dst, draw(regs), is32=is32)
    if op in SHIFT_OPS:
        return Instruction.alu(op, dst, imm=draw(st.integers(0, 31 if is32 else 63)), is32=is32)
    return Instruction.alu(op, dst, imm=draw(imm32), is32=is32)


@st.composite
def mem_insns(draw):
    kind = draw(st.sampled_from(("ldx", "stx", "st")))
    w, off = draw(widths), draw(off16)
    if kind == "ldx":
        return Instruction.ldx(w, draw(dst_regs), draw(regs), off)
    if kind == "stx":
        return Instruction.stx(w, draw(regs), off, draw(regs))
    return Instruction.st(w, draw(regs), off, draw(imm32))


@st.composite
def control_insns(draw):
    kind = draw(st.sampled_from(("ja", "jcond", "call", "exit")))
    if kind == "exit":
        return ControlInsn("exit")
    if kind == "call":
        return ControlInsn("call", imm=draw(st.integers(0, 200)))
    if kind == "ja":
        return ControlInsn("ja", off=draw(off16))
    op = draw(st.sampled_from(sorted(JMP_OPS)))
    is32 = draw(st.booleans())
    if draw(st.booleans()):
        return ControlInsn("jcond", op, is32, draw(regs), True, draw(regs), 0, draw(off16))
    return ControlInsn("jcond", op, is32, draw(regs), False, 0, draw(imm32), draw(off16))


any_insn = st.one_of(alu_insns(), mem_insns(), control_insns())


# -- parsing ------------------------------------------------------------------------


def test_parse_u64_load():
    (insn,) = parse_asm("r2 = *(u64 *)(r0 + 8)").instructions
    assert (insn.cls, insn.width, insn.dst, insn.src, insn.off) == ("ldx", 8, 2, 0, 8)


def test_parse_right_shift_immediate():
    (insn,) = parse_asm("r1 >>= 1").instructions
    assert (insn.cls, insn.op, insn.src_reg, insn.imm, insn.dst) == ("alu64", "rsh", False, 1, 1)


def test_parse_empty_program():
    p = parse_asm("")
    assert p.instructions == () and p.blocks == ()


def test_comments_blank_lines_and_line_prefixes():
    p = parse_asm("; leading comment\n\n 0: r0 = 1  # set\n1: exit\n")
    assert print_asm(p) == "r0 = 1\nexit\n"


def test_print_u16_load_and_register_move():
    assert format_insn(Instruction.ldx(2, 3, 1, 2)) == "r3 = *(u16 *)(r1 + 2)"
    assert format_insn(Instruction.alu("mov", 1, 4)) == "r1 = r4"


@pytest.mark.parametrize(
    "text",
    [
        "w3 += w4",
        "r0 = -r0",
        "w5 = -w5",
        "*(u32 *)(r10 - 4) = 7",
        "*(u8 *)(r1 + 0) = r2",
        "r1 s>>= 3",
        "if r1 s> 3 goto -2",
        "if w2 & 0x10 goto +1",
        "call 5",
        "goto +0",
        "exit",
    ],
)
def test_text_round_trip(text):
    p = parse_asm(text)
    assert print_asm(parse_asm(print_asm(p))) == print_asm(p)


def test_corpus_round_trip_token_streams():
    for cp in (*MICRO_CORPUS, *generated_corpus(20, seed=3)):
        p = cp.program
        again = parse_asm(print_asm(p))
        assert again.instructions == p.instructions
        assert print_asm(again).split() == print_asm(p).split()


def test_syntax_error_carries_line():
    with pytest.raises(SyntaxError) as info:
        parse_asm("r0 = 1\nr1 = = 3\n")
    assert info.value.line == 2


@pytest.mark.parametrize("text", ["r1 = be16 r1", "r1 = 0x1234 ll", "lock *(u64 *)(r1 + 0) += r2", "callx r3"])
def test_unsupported_instructions_rejected(text):
    with pytest.raises(UnsupportedInstruction):
        parse_asm(text)


@pytest.mark.parametrize(
    "text",
    ["r1 = r2 + 1", "w1 += r2", "r10 = 1", "r1 <<= 64", "w1 <<= 32", "r1 = -r2", "r1 = 0x100000000"],
)
def test_malformed_instructions_rejected(text):
    with pytest.raises(IsaError):
        parse_asm(text)


def test_constructor_validation():
    with pytest.raises(IsaError):
        Instruction.ldx(3, 1, 2, 0)
    with pytest.raises(IsaError):
        Instruction.alu("mov", FP, 1)
    with pytest.raises(IsaError):
        Instruction.ldx(4, 1, 2, 1 << 15)


# -- encoding -----------------------------------------------------------------------


def test_encode_neg_has_zero_operands():
    raw = encode(Instruction.alu("neg", 0))
    assert len(raw) == 8
    assert raw[0] == 0x87 and raw[2:] == bytes(6)


def test_decode_all_zero_word():
    with pytest.raises(UnknownOpcode):
        decode(bytes(8))


def test_decode_rejects_short_input():
    with pytest.raises(IsaError):
        decode_program(bytes(12))


@given(any_insn)
def test_encode_decode_round_trip(insn):
    assert decode(encode(insn)) == insn


@given(any_insn)
def test_format_parse_round_trip(insn):
    assert parse_insn(format_insn(insn)) == insn


@given(st.lists(st.one_of(alu_insns(), mem_insns()), max_size=12))
def test_program_binary_round_trip(insns):
    p = Program.from_instructions([*insns, ControlInsn("exit")])
    assert decode_program(encode_program(p)).instructions == p.instructions


# -- block structure ----------------------------------------------------------------


def test_blocks_split_at_control_and_targets():
    p = parse_asm("r0 = 0\nr1 = 1\nif r1 == 0 goto +2\nr2 = 3\nr3 = 4\nr0 += 1\nexit")
    assert p.blocks == ((0, 2), (3, 5), (5, 6))


def test_instruction_queries():
    st_insn = Instruction.stx(4, 10, -4, 3)
    assert st_insn.is_store and st_insn.is_mem and not st_insn.is_load
    assert set(st_insn.regs_read()) == {10, 3} and st_insn.reg_written() is None
    ld = Instruction.ldx(8, 2, 1, 0)
    assert ld.regs_read() == (1,) and ld.reg_written() == 2 and ld.base_reg() == 1
    mov = Instruction.alu("mov", 4, imm=7)
    assert mov.regs_read() == () and mov.reg_written() == 4
    add = Instruction.alu("add", 4, 5)
    assert set(add.regs_read()) == {4, 5}
