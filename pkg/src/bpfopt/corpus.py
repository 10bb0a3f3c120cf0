"""Bundled workloads: a hand-written micro-corpus, a template-generated corpus
for rule-transfer experiments, a pruning micro-suite, and random fuzzers."""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace

from .isa import Instruction, Program, parse_asm
from .machine import (
    PTR_TO_CTX,
    SCALAR,
    Footprint,
    RegType,
    parse_footprint,
    ptr_to_mem,
)
from .slicer import parse_liveness


@dataclass
class CorpusProgram:
    name: str
    source: str
    annotations: str = ""
    ranges: dict[int, tuple[int, int]] = field(default_factory=dict)

    @property
    def program(self) -> Program:
        return parse_asm(self.source)

    def liveness(self) -> tuple[dict[int, Footprint], dict[int, dict[int, RegType]]]:
        return parse_liveness(self.annotations)


def _p(name: str, source: str, annotations: str = "", ranges=None) -> CorpusProgram:
    return CorpusProgram(name, source.strip() + "\n", annotations.strip(), dict(ranges or {}))


# r1 holds the context pointer at entry; r0 is live at exit.
MICRO_CORPUS: tuple[CorpusProgram, ...] = (
    _p("load_merge", """
r2 = *(u32 *)(r1 + 8)
r3 = *(u32 *)(r1 + 12)
r3 <<= 32
r3 |= r2
r0 = r3
exit
"""),
    _p("store_merge", """
r2 = *(u32 *)(r1 + 0)
*(u8 *)(r10 - 2) = r2
r2 >>= 8
*(u8 *)(r10 - 1) = r2
r0 = 0
exit
""", "block 0 live-out: r0,stack[-2..0)"),
    _p("packet_offset", """
r3 = r7
r3 += r1
r3 = *(u16 *)(r3 + 2)
r1 = r4
r0 = 0
exit
""", "block 0 live-out: r0,r1,r3,r7\nblock 0 types: r1=scalar,r4=scalar,r7=mem:pkt", {1: (0, 63)}),
    _p("move_chain", """
r0 = *(u32 *)(r1 + 0)
r2 = r0
r3 = r2
r0 = r3
exit
"""),
    _p("const_fold", """
r0 = 1
r0 <<= 3
exit
"""),
    _p("double_neg", """
r0 = *(u32 *)(r1 + 4)
r0 = -r0
r0 = -r0
exit
"""),
    _p("xor_self", """
r0 = *(u64 *)(r1 + 16)
r0 ^= r0
exit
"""),
    _p("add_sub", """
r0 = *(u32 *)(r1 + 24)
r0 += 4
r0 -= 4
exit
"""),
    _p("byte_mask", """
r0 = *(u8 *)(r1 + 3)
r0 &= 255
exit
"""),
    _p("zero_extend", """
r0 = *(u32 *)(r1 + 32)
r0 <<= 32
r0 >>= 32
exit
"""),
    _p("branch_relink", """
r2 = *(u32 *)(r1 + 0)
if r2 == 0 goto +5
r4 = r2
r4 += 1
r4 -= 1
r0 = r4
exit
r0 = 7
exit
"""),
    _p("imm_store_merge", """
*(u32 *)(r10 - 8) = 0
*(u32 *)(r10 - 4) = 0
r0 = 0
exit
""", "block 0 live-out: r0,stack[-8..0)"),
    _p("stack_roundtrip", """
r2 = *(u64 *)(r1 + 40)
*(u64 *)(r10 - 8) = r2
r3 = *(u64 *)(r10 - 8)
r0 = r3
exit
"""),
    _p("scale", """
r0 = *(u32 *)(r1 + 48)
r2 = r0
r2 *= 4
r0 = r2
exit
"""),
    _p("or_self", """
r0 = *(u32 *)(r1 + 52)
r2 = r0
r0 |= r2
exit
"""),
    _p("two_blocks", """
r0 = 0
r6 = *(u32 *)(r1 + 8)
r7 = *(u32 *)(r1 + 12)
r7 <<= 32
r7 |= r6
if r7 > 100 goto +3
r0 = *(u32 *)(r1 + 0)
r0 += 2
r0 -= 2
exit
"""),
    _p("already_optimal", """
r0 = *(u32 *)(r1 + 0)
r0 += 1
exit
"""),
    _p("narrow_reload", """
r2 = *(u64 *)(r1 + 56)
*(u64 *)(r10 - 8) = r2
r0 = *(u32 *)(r10 - 8)
exit
"""),
    _p("alu32_mov", """
r0 = *(u32 *)(r1 + 60)
w0 = w0
exit
"""),
)


# -- template corpus ----------------------------------------------------------------

# Each template yields lines writing ``d`` using scratch ``t``/``u`` and a base
# ctx offset ``o`` (a multiple of 8).
_TEMPLATES = {
    "load_merge": lambda d, t, u, o, k: [
        f"r{t} = *(u32 *)(r1 + {o})",
        f"r{d} = *(u32 *)(r1 + {o + 4})",
        f"r{d} <<= 32",
        f"r{d} |= r{t}",
    ],
    "move_chain": lambda d, t, u, o, k: [f"r{t} = *(u32 *)(r1 + {o})", f"r{u} = r{t}", f"r{d} = r{u}"],
    "add_sub": lambda d, t, u, o, k: [f"r{d} = *(u32 *)(r1 + {o})", f"r{d} += {k}", f"r{d} -= {k}"],
    "double_neg": lambda d, t, u, o, k: [f"r{d} = *(u32 *)(r1 + {o})", f"r{d} = -r{d}", f"r{d} = -r{d}"],
    "zero_extend": lambda d, t, u, o, k: [f"r{d} = *(u32 *)(r1 + {o})", f"r{d} <<= 32", f"r{d} >>= 32"],
    "byte_mask": lambda d, t, u, o, k: [f"r{d} = *(u8 *)(r1 + {o})", f"r{d} &= 255"],
    "or_copy": lambda d, t, u, o, k: [f"r{d} = *(u32 *)(r1 + {o})", f"r{t} = r{d}", f"r{d} |= r{t}"],
    "optimal": lambda d, t, u, o, k: [f"r{d} = *(u32 *)(r1 + {o})", f"r{d} += {k}"],
}
TEMPLATE_NAMES = tuple(_TEMPLATES)


def generate_program(rng: random.Random, name: str = "gen", parts: int = 3) -> CorpusProgram:
    """Template instances in separate blocks, then a block folding them into r0."""
    dests = rng.sample([6, 7, 8, 9], parts)
    lines: list[str] = []
    for d in dests:
        t, u = rng.sample([2, 3, 4, 5], 2)
        o = 8 * rng.randrange(0, 16)
        k = rng.choice((1, 2, 4))
        lines.extend(_TEMPLATES[rng.choice(TEMPLATE_NAMES)](d, t, u, o, k))
        lines.append("goto +0")
    lines.append(f"r0 = r{dests[0]}")
    lines.extend(f"r0 += r{d}" for d in dests[1:])
    lines.append("exit")
    return _p(name, "\n".join(lines))


def generated_corpus(n: int = 100, seed: int = 0) -> list[CorpusProgram]:
    rng = random.Random(seed)
    return [generate_program(rng, f"gen{k:03d}", rng.choice((2, 3))) for k in range(n)]


# -- pruning micro-suite ------------------------------------------------------------


@dataclass(frozen=True)
class SuiteSlice:
    name: str
    insns: tuple[Instruction, ...]
    footprint: Footprint
    types: dict[int, RegType]
    ranges: dict[int, tuple[int, int]] = field(default_factory=dict)


def _s(name: str, src: str, live: str, types: dict, ranges=None) -> SuiteSlice:
    return SuiteSlice(name, tuple(parse_asm(src).instructions), parse_footprint(live), dict(types), dict(ranges or {}))


PRUNING_SUITE: tuple[SuiteSlice, ...] = (
    _s("load_merge", "r1 = *(u32 *)(r0 + 8)\nr2 = *(u32 *)(r0 + 12)\nr2 <<= 32\nr2 |= r1", "r2", {0: PTR_TO_CTX}),
    _s("store_merge", "*(u8 *)(r10 - 2) = r1\nr1 >>= 8\n*(u8 *)(r10 - 1) = r1", "stack[-2..0)", {1: SCALAR}),
    _s("packet_offset", "r3 = r7\nr3 += r1\nr3 = *(u16 *)(r3 + 2)", "r3,r7",
       {1: SCALAR, 7: ptr_to_mem("pkt")}, {1: (0, 63)}),
    _s("scale", "r2 = r1\nr2 *= 4\nr0 = r2", "r0", {1: SCALAR}),
    _s("neg_sub", "r0 = r1\nr0 -= r2\nr0 = -r0", "r0", {1: SCALAR, 2: SCALAR}),
    _s("zero_extend", "r0 = r1\nr0 <<= 32\nr0 >>= 32", "r0", {1: SCALAR}),
    _s("shift_pair", "r0 = r1\nr0 <<= 2\nr0 <<= 3", "r0", {1: SCALAR}),
    _s("imm_store_merge", "*(u32 *)(r10 - 8) = 0\n*(u32 *)(r10 - 4) = 0", "stack[-8..0)", {}),
    _s("zext_add", "r0 = r1\nr0 <<= 32\nr0 >>= 32\nr0 += 1", "r0", {1: SCALAR}),
    _s("merge_add", "r2 = *(u32 *)(r1 + 0)\nr3 = *(u32 *)(r1 + 4)\nr3 <<= 32\nr3 |= r2\nr3 += 1", "r3", {1: PTR_TO_CTX}),
)


# -- fuzzers ------------------------------------------------------------------------

FUZZ_TYPES: dict[int, RegType] = {1: PTR_TO_CTX, 2: SCALAR, 3: SCALAR}
_FUZZ_ALU = ("add", "sub", "and", "or", "xor", "lsh", "rsh", "mov", "mul", "neg")


def random_block(rng: random.Random, n: int | None = None) -> list[Instruction]:
    """A safe straight-line block over r0-r5 with r1 = ctx and r2, r3 scalar."""
    n = n if n is not None else rng.randint(2, 7)
    init = {2, 3}
    stack: set[int] = set()
    out: list[Instruction] = []
    while len(out) < n:
        kind = rng.random()
        if kind < 0.2:
            w = rng.choice((1, 2, 4, 8))
            off = w * rng.randrange(0, 8)
            d = rng.choice((0, 2, 3, 4, 5))
            out.append(Instruction.ldx(w, d, 1, off))
            init.add(d)
        elif kind < 0.32 and init:
            w = rng.choice((1, 2, 4, 8))
            off = -w * rng.randint(1, 16 // w) if w < 8 else -8 * rng.randint(1, 2)
            if rng.random() < 0.5:
                out.append(Instruction.stx(w, 10, off, rng.choice(sorted(init))))
            else:
                out.append(Instruction.st(w, 10, off, rng.choice((0, 1, -1, 7))))
            stack.update(range(off, off + w))
        elif kind < 0.4 and stack:
            w = rng.choice((1, 2, 4, 8))
            slots = [o for o in range(-16, 0, w) if all(b in stack for b in range(o, o + w))]
            if not slots:
                continue
            d = rng.choice((0, 2, 3, 4, 5))
            out.append(Instruction.ldx(w, d, 10, rng.choice(slots)))
            init.add(d)
        else:
            op = rng.choice(_FUZZ_ALU)
            srcs = sorted(init)
            if op == "mov":
                d = rng.choice((0, 2, 3, 4, 5))
            else:
                d = rng.choice(srcs)
            is32 = rng.random() < 0.15
            if op == "neg":
                if d not in init:
                    continue
                out.append(Instruction.alu("neg", d, is32=is32))
            elif rng.random() < 0.5:
                imm = rng.randrange(0, 32 if is32 else 64) if op in ("lsh", "rsh") else rng.choice((0, 1, 2, 4, -1, 255))
                out.append(Instruction.alu(op, d, imm=imm, is32=is32))
            else:
                if op in ("lsh", "rsh"):
                    continue
                out.append(Instruction.alu(op, d, rng.choice(srcs), is32=is32))
            init.add(d)
    return out


def random_liveness(rng: random.Random, block: list[Instruction]) -> Footprint:
    written = sorted({i.reg_written() for i in block if i.reg_written() is not None})
    regs = frozenset(r for r in written if rng.random() < 0.5) or frozenset(written[:1])
    stack_bytes = {b for i in block if i.is_store for b in range(i.off, i.off + i.width)}
    keep = frozenset(b for b in stack_bytes if rng.random() < 0.7)
    return Footprint(regs, keep)


def config_for(cp: CorpusProgram, base):
    """Copy of pipeline config ``base`` carrying ``cp``'s annotations and ranges."""
    live, types = cp.liveness()
    return replace(base, liveness=live or None, entry_types=types or None, ranges=dict(cp.ranges))


MEM_FUZZ_TYPES: dict[int, RegType] = {1: PTR_TO_CTX, 2: SCALAR, 3: SCALAR, 6: ptr_to_mem("pkt")}


def random_mem_block(rng: random.Random, n: int | None = None) -> list[Instruction]:
    """Loads and stores through a packet pointer at a variable offset (r7 = r6 + (r2 & 63))."""
    n = n if n is not None else rng.randint(3, 8)
    out = [Instruction.alu("and", 2, imm=63), Instruction.alu("mov", 7, 6), Instruction.alu("add", 7, 2)]
    init = {2, 3}
    while len(out) < n + 3:
        base = rng.choice((6, 7))
        w = rng.choice((1, 2, 4, 8))
        off = w * rng.randrange(0, 4)
        if rng.random() < 0.05:
            off = 4096 - 64 + w * rng.randrange(0, 8)  # may run past the end
        kind = rng.random()
        if kind < 0.35:
            d = rng.choice((0, 3, 4, 5))
            out.append(Instruction.ldx(w, d, base, off))
            init.add(d)
        elif kind < 0.7:
            if rng.random() < 0.6:
                out.append(Instruction.stx(w, base, off, rng.choice(sorted(init - {2}) or [3])))
            else:
                out.append(Instruction.st(w, base, off, rng.choice((0, 1, -1, 9))))
        else:
            d = rng.choice(sorted(init - {2}) or [3])
            op = rng.choice(("add", "xor", "or", "lsh"))
            if op == "lsh":
                out.append(Instruction.alu(op, d, imm=rng.randrange(64)))
            else:
                out.append(Instruction.alu(op, d, rng.choice(sorted(init)) if rng.random() < 0.5 else None, imm=rng.choice((1, 7))))
    return out


def mutate(rng: random.Random, block: list[Instruction]) -> list[Instruction]:
    """A small random edit: tweak an immediate or offset, change an ALU op, or drop an instruction."""
    out = list(block)
    k = rng.randrange(len(out))
    insn = out[k]
    choice = rng.random()
    if choice < 0.2 and len(out) > 1:
        del out[k]
    elif insn.is_alu and insn.op not in ("neg", "mov") and choice < 0.6:
        ops = [o for o in ("add", "sub", "or", "xor", "and") if o != insn.op]
        out[k] = replace(insn, op=rng.choice(ops))
    elif insn.is_mem and choice < 0.6:
        out[k] = replace(insn, off=insn.off + insn.width * rng.choice((-1, 1)))
    elif insn.op in ("lsh", "rsh") and not insn.src_reg:
        out[k] = replace(insn, imm=(insn.imm + 1) % 32)
    elif not insn.src_reg and insn.op != "neg":
        out[k] = replace(insn, imm=insn.imm ^ rng.choice((1, 2, 0x10)))
    else:
        out[k] = Instruction.alu("xor", insn.dst if insn.reg_written() is not None else 0, imm=1) if insn.is_alu else insn
    return out
