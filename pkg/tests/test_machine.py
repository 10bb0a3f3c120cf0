from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bpfopt.isa import Instruction, parse_asm
from bpfopt.machine import (
    CTX,
    PTR_TO_CTX,
    PTR_TO_STACK,
    SCALAR,
    STACK,
    UNINIT,
    Fault,
    Footprint,
    MachineState,
    distance,
    format_state,
    interpret,
    make_state,
    parse_footprint,
    parse_state,
    parse_type,
    project,
    ptr_to_mem,
    random_state,
    run,
    run_program,
)


def insns(text):
    return list(parse_asm(text).instructions)


def fill_from(rng):
    sink = {}

    def fill(key):
        if key not in sink:
            sink[key] = rng.getrandbits(8)
        return sink[key]

    return fill, sink


EXAMPLE1 = insns("r1 = *(u32 *)(r0 + 8)\nr2 = *(u32 *)(r0 + 12)\nr2 <<= 32\nr2 |= r1")
EXAMPLE1_OPT = insns("r2 = *(u64 *)(r0 + 8)")


def test_example1_pair_agrees_on_random_ctx_images():
    rng = random.Random(1)
    for _ in range(1000):
        s0 = random_state({0: PTR_TO_CTX}, rng)
        fill, sink = fill_from(rng)
        a = run(EXAMPLE1, s0, fill=fill)
        b = run(EXAMPLE1_OPT, MachineState(s0.regs, s0.ptrs, dict(sink)))
        assert a.regs[2] == b.regs[2]


def test_forced_arithmetic():
    out = interpret(insns("r1 = 5\nr1 <<= 2"), make_state({}, {}))
    assert out.regs[1] == 20


def test_stack_offset_zero_is_out_of_bounds():
    with pytest.raises(Fault) as info:
        interpret(insns("r1 = *(u32 *)(r10 + 0)"), make_state({}, {}))
    assert info.value.kind == "OutOfBounds"


def test_uninitialized_stack_and_register_reads_fault():
    with pytest.raises(Fault) as info:
        interpret(insns("r1 = *(u32 *)(r10 - 4)"), make_state({}, {}))
    assert info.value.kind == "UninitRead"
    with pytest.raises(Fault):
        interpret(insns("r3 = r4"), make_state({}, {}))
    assert run(insns("r3 = r4"), make_state({}, {})) is None


@pytest.mark.parametrize(
    "src, r1, r2, want",
    [
        ("r1 /= r2", 7, 0, 0),
        ("r1 %= r2", 7, 0, 7),
        ("w1 = -1", 0, 0, 0xFFFFFFFF),
        ("w1 += 0", (1 << 64) - 1, 0, 0xFFFFFFFF),
        ("r1 s>>= 1", 1 << 63, 0, 0xC000000000000000),
        ("r1 >>= 1", 1 << 63, 0, 1 << 62),
        ("r1 <<= r2", 1, 65, 2),
        ("w1 <<= w2", 1, 33, 2),
        ("r1 = -r1", 1, 0, (1 << 64) - 1),
        ("r1 *= r2", 1 << 63, 2, 0),
        ("w1 s>>= 4", 0x80000000, 0, 0xF8000000),
    ],
)
def test_alu_semantics(src, r1, r2, want):
    out = interpret(insns(src), make_state({1: SCALAR, 2: SCALAR}, {1: r1, 2: r2}))
    assert out.regs[1] == want


def test_store_load_little_endian():
    out = interpret(insns("*(u32 *)(r10 - 4) = r1\nr2 = *(u8 *)(r10 - 4)\nr3 = *(u16 *)(r10 - 2)"),
                    make_state({1: SCALAR}, {1: 0x11223344}))
    assert out.regs[2] == 0x44 and out.regs[3] == 0x1122
    assert out.mem[(STACK, -1)] == 0x11


def test_pointer_arithmetic_tracks_region():
    out = interpret(insns("r2 = r10\nr2 += -8\n*(u64 *)(r2 + 0) = 5\nr3 = *(u64 *)(r10 - 8)"), make_state({}, {}))
    assert out.ptrs[2] == STACK and out.regs[3] == 5


def test_region_bounds_enforced():
    with pytest.raises(Fault):
        interpret(insns("r2 = *(u64 *)(r1 + 4092)"), make_state({1: PTR_TO_CTX}, {}))
    with pytest.raises(Fault):
        interpret(insns("*(u8 *)(r10 - 513) = 1"), make_state({}, {}))


# -- distance -----------------------------------------------------------------------


def test_distance_identity_is_zero():
    s = make_state({1: SCALAR}, {1: 9}, {(STACK, -1): 3})
    assert distance(s, s, parse_footprint("r1,stack[*]")) == 0


def test_three_registers_differ():
    t = {1: SCALAR, 2: SCALAR, 3: SCALAR}
    s = make_state(t, {1: 1, 2: 2, 3: 3})
    u = make_state(t, {1: 0, 2: 0, 3: 0})
    assert distance(s, u, parse_footprint("r1,r2,r3")) == 3


def test_sixteen_byte_run_needs_two_stores():
    s = make_state({}, {}, {(STACK, o): 0 for o in range(-16, 0)})
    u = make_state({}, {}, {(STACK, o): 1 for o in range(-16, 0)})
    assert distance(s, u, parse_footprint("stack[-16..0)")) == 2


def test_distance_ignores_dead_locations():
    t = {1: SCALAR, 2: SCALAR}
    s = make_state(t, {1: 1, 2: 2})
    u = make_state(t, {1: 1, 2: 5})
    assert distance(s, u, parse_footprint("r1")) == 0


ADMISSIBLE_ALPHABET = [
    *(Instruction.alu(op, d, imm=k) for op in ("mov", "add", "xor") for d in (1, 2) for k in (0, 1, 255)),
    *(Instruction.alu(op, d, s) for op in ("mov", "add", "or") for d in (1, 2) for s in (1, 2)),
    *(Instruction.stx(w, 10, -w * k, s) for w in (1, 2, 4, 8) for k in (1, 2) for s in (1, 2)),
    *(Instruction.st(w, 10, -8, 7) for w in (1, 2, 4, 8)),
]


@settings(max_examples=300, deadline=None)
@given(
    st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1),
    st.lists(st.integers(0, 255), min_size=16, max_size=16), st.lists(st.integers(0, 255), min_size=16, max_size=16),
    st.sampled_from(ADMISSIBLE_ALPHABET),
)
def test_one_instruction_lowers_distance_by_at_most_one(a1, a2, b1, b2, ma, mb, insn):
    t = {1: SCALAR, 2: SCALAR}
    s = make_state(t, {1: a1, 2: a2}, {(STACK, -16 + k): v for k, v in enumerate(ma)})
    target = make_state(t, {1: b1, 2: b2}, {(STACK, -16 + k): v for k, v in enumerate(mb)})
    fp = parse_footprint("r1,r2,stack[-16..0)")
    after = interpret([insn], s)
    assert distance(s, target, fp) <= distance(after, target, fp) + 1


# -- footprints, types, snapshots ---------------------------------------------------


def test_parse_footprint_forms():
    fp = parse_footprint("r0,r3,stack[-8..-4),stack[-2..0)")
    assert fp.regs == {0, 3} and fp.stack == frozenset({-8, -7, -6, -5, -2, -1}) and fp.other_mem
    assert parse_footprint("stack[*]").stack is None
    assert not parse_footprint("nomem").other_mem
    assert str(fp) == "r0,r3,stack[-8..-4),stack[-2..0)"


def test_project_only_sees_live_locations():
    fp = Footprint(frozenset({1}), frozenset({-1}), other_mem=False)
    s = make_state({1: SCALAR, 2: SCALAR}, {1: 4, 2: 5}, {(STACK, -1): 1, (STACK, -2): 2, (CTX, 0): 3})
    u = make_state({1: SCALAR, 2: SCALAR}, {1: 4, 2: 6}, {(STACK, -1): 1, (STACK, -2): 9, (CTX, 0): 4})
    assert project(s, fp) == project(u, fp)


@pytest.mark.parametrize(
    "text, want",
    [("scalar", SCALAR), ("ctx", PTR_TO_CTX), ("PTR_TO_STACK", PTR_TO_STACK), ("uninit", UNINIT),
     ("mem:pkt", ptr_to_mem("pkt")), ("ctx+8", PTR_TO_CTX.at(8))],
)
def test_parse_type(text, want):
    assert parse_type(text) == want


def test_parse_type_rejects_garbage():
    with pytest.raises(ValueError):
        parse_type("pointer-ish")


def test_state_snapshot_round_trip():
    s = make_state({1: PTR_TO_CTX, 2: SCALAR}, {2: 0xDEAD}, {(CTX, 4): 1, (CTX, 5): 2, (STACK, -1): 255})
    again = parse_state(format_state(s))
    assert again.regs == s.regs and again.ptrs == s.ptrs and again.mem == s.mem


def test_state_parser_rejects_bad_lines():
    with pytest.raises(ValueError):
        parse_state("r1 := 4")
    with pytest.raises(ValueError):
        parse_state("mem stack[-2..0) = 01")


# -- whole programs -----------------------------------------------------------------


def test_run_program_follows_branches():
    p = parse_asm("r2 = 5\nif r2 > 3 goto +1\nr2 = 99\nr0 = r2\nexit")
    assert run_program(p, make_state({}, {})).regs[0] == 5
    p = parse_asm("r2 = 1\nif r2 > 3 goto +1\nr2 = 99\nr0 = r2\nexit")
    assert run_program(p, make_state({}, {})).regs[0] == 99


def test_run_program_signed_and_32_bit_compares():
    p = parse_asm("r2 = -1\nr0 = 0\nif r2 s< 0 goto +1\nexit\nr0 = 1\nif w2 == -1 goto +1\nexit\nr0 = 2\nexit")
    assert run_program(p, make_state({}, {})).regs[0] == 2


def test_run_program_loops_and_step_limit():
    p = parse_asm("r0 = 0\nr0 += 1\nif r0 < 10 goto -2\nexit")
    assert run_program(p, make_state({}, {})).regs[0] == 10
    with pytest.raises(Fault):
        run_program(parse_asm("goto -1\nexit"), make_state({}, {}), max_steps=50)


def test_run_program_call_clobbers_arguments():
    out = run_program(parse_asm("r1 = 3\nr6 = 4\ncall 1\nexit"), make_state({}, {}))
    assert out.regs[0] == 0 and out.regs[1] is None and out.regs[6] == 4


def test_run_program_falls_off_end():
    with pytest.raises(Fault):
        run_program(parse_asm("r0 = 1"), make_state({}, {}))
