"""Concrete machine model: register/memory state, the reference interpreter and
the distance metric used to prune the search.

Pointers are concrete 64-bit addresses.  Every memory region has a fixed base
address (see :class:`Layout`); the interpreter tracks which region each
register points into, so a dereference can be mapped back to a
``(region, offset)`` key.  Memory is byte addressed and sparse: a byte missing
from ``MachineState.mem`` is uninitialized and reading it is a fault.
"""

from __future__ import annotations

import random
import re
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from .isa import FP, NUM_REGS, Instruction, Program

M64 = (1 << 64) - 1
M32 = (1 << 32) - 1

STACK = "stack"
CTX = "ctx"
STACK_SIZE = 512


def u64(v: int) -> int:
    return v & M64


def s64(v: int) -> int:
    v &= M64
    return v - (1 << 64) if v >> 63 else v


def s32(v: int) -> int:
    v &= M32
    return v - (1 << 32) if v >> 31 else v


# -- register types ---------------------------------------------------------------


@dataclass(frozen=True)
class RegType:
    """Verifier-style register type.

    ``off`` is the known constant offset of a pointer from its region base, or
    ``None`` when the offset is variable.
    """

    kind: str
    region: str | None = None
    off: int | None = 0

    @property
    def is_ptr(self) -> bool:
        return self.region is not None

    def at(self, off: int | None) -> "RegType":
        return RegType(self.kind, self.region, off)

    def base(self) -> "RegType":
        """Type without its offset; what rule preconditions compare."""
        return RegType(self.kind, self.region, 0) if self.is_ptr else self

    def __str__(self) -> str:
        if self.kind == "PTR_TO_MEM":
            text = f"PTR_TO_MEM({self.region})"
        else:
            text = self.kind
        if self.is_ptr and self.off:
            text += f"{self.off:+d}"
        elif self.is_ptr and self.off is None:
            text += "+var"
        return text


SCALAR = RegType("SCALAR")
UNINIT = RegType("UNINIT")
UNKNOWN = RegType("UNKNOWN")
PTR_TO_STACK = RegType("PTR_TO_STACK", STACK)
PTR_TO_CTX = RegType("PTR_TO_CTX", CTX)


def ptr_to_mem(region: str) -> RegType:
    if region in (STACK, CTX):
        raise ValueError(f"{region!r} is reserved")
    return RegType("PTR_TO_MEM", region)


RegTypeMap = Mapping[int, RegType]


def normalize_types(types: RegTypeMap | None) -> dict[int, RegType]:
    """Fill unspecified registers: r10 is the frame pointer, the rest UNINIT."""
    out = {r: UNINIT for r in range(NUM_REGS)}
    if types:
        out.update(types)
    out[FP] = PTR_TO_STACK
    return out


def parse_type(text: str) -> RegType:
    t = text.strip()
    low = t.lower()
    if low in ("scalar", "int"):
        return SCALAR
    if low in ("uninit", "none"):
        return UNINIT
    if low == "unknown":
        return UNKNOWN
    m = re.fullmatch(r"(ctx|stack|ptr_to_ctx|ptr_to_stack|(?:mem|ptr_to_mem)[:(]\s*(\w+)\s*\)?)([+-]\d+)?", low)
    if not m:
        raise ValueError(f"unknown register type {text!r}")
    off = int(m[3]) if m[3] else 0
    if m[1] in ("ctx", "ptr_to_ctx"):
        return PTR_TO_CTX.at(off)
    if m[1] in ("stack", "ptr_to_stack"):
        return PTR_TO_STACK.at(off)
    return ptr_to_mem(m[2]).at(off)


# -- memory layout ----------------------------------------------------------------


@dataclass(frozen=True)
class Layout:
    """Base addresses and extents of memory regions."""

    ctx_size: int = 4096
    mem_size: int = 4096
    extents: tuple[tuple[str, int], ...] = ()

    def base(self, region: str) -> int:
        if region == STACK:
            return 0x7FF0_0000_0000
        if region == CTX:
            return 0x1000_0000_0000
        return 0x2000_0000_0000 + (zlib.crc32(region.encode()) & 0xFFF) * 0x1_0000_0000

    def bounds(self, region: str) -> tuple[int, int]:
        """Valid byte offsets ``[lo, hi)`` relative to the region base."""
        if region == STACK:
            return -STACK_SIZE, 0
        for name, size in self.extents:
            if name == region:
                return 0, size
        return 0, self.ctx_size if region == CTX else self.mem_size


DEFAULT_LAYOUT = Layout()


# -- state ------------------------------------------------------------------------


@dataclass(frozen=True)
class MachineState:
    """Register file plus sparse byte memory.

    ``regs[i]`` is ``None`` while uninitialized.  ``ptrs[i]`` names the region a
    register points into (``None`` for scalars).  ``mem`` maps
    ``(region, offset)`` to a byte; absent keys are uninitialized.
    """

    regs: tuple[int | None, ...]
    ptrs: tuple[str | None, ...] = (None,) * NUM_REGS
    mem: Mapping[tuple[str, int], int] = field(default_factory=dict)

    @property
    def init(self) -> tuple[bool, ...]:
        return tuple(v is not None for v in self.regs)

    def mem_init(self, key: tuple[str, int]) -> bool:
        return key in self.mem

    def reg(self, r: int) -> int:
        v = self.regs[r]
        if v is None:
            raise KeyError(f"r{r} is uninitialized")
        return v

    def with_regs(self, **updates: int) -> "MachineState":
        regs = list(self.regs)
        for name, v in updates.items():
            regs[int(name.lstrip("r"))] = u64(v)
        return MachineState(tuple(regs), self.ptrs, self.mem)

    def __hash__(self) -> int:
        return hash((self.regs, self.ptrs, frozenset(self.mem.items())))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MachineState):
            return NotImplemented
        return self.regs == other.regs and self.ptrs == other.ptrs and dict(self.mem) == dict(other.mem)


def make_state(
    types: RegTypeMap | None = None,
    values: Mapping[int, int] | None = None,
    mem: Mapping[tuple[str, int], int] | None = None,
    layout: Layout = DEFAULT_LAYOUT,
) -> MachineState:
    """Entry state: pointers sit at their region base plus the typed offset,
    scalars take ``values`` (missing scalars are uninitialized)."""
    types = normalize_types(types)
    values = values or {}
    regs: list[int | None] = [None] * NUM_REGS
    ptrs: list[str | None] = [None] * NUM_REGS
    for r, t in types.items():
        if t.is_ptr:
            regs[r] = u64(layout.base(t.region) + (t.off or 0))
            ptrs[r] = t.region
        elif r in values:
            regs[r] = u64(values[r])
    for r, v in values.items():
        if not types[r].is_ptr:
            regs[r] = u64(v)
    return MachineState(tuple(regs), tuple(ptrs), dict(mem or {}))


class Fault(Exception):
    """Execution trapped: ``kind`` is UninitRead, OutOfBounds or BadRegion."""

    def __init__(self, kind: str, pc: int):
        super().__init__(f"{kind} at pc {pc}")
        self.kind = kind
        self.pc = pc


# -- compiled single-step kernels -------------------------------------------------
#
# A kernel maps (regs, ptrs, mem, fill) to a new (regs, ptrs, mem) triple, or to
# a fault-kind string.  ``fill`` is an optional callback used to materialize
# missing memory bytes lazily (random test generation); with ``fill=None``
# missing bytes are uninitialized reads.

Kernel = Callable[[tuple, tuple, dict, object], object]


def _alu64(op: str) -> Callable[[int, int], int]:
    if op == "add":
        return lambda a, b: (a + b) & M64
    if op == "sub":
        return lambda a, b: (a - b) & M64
    if op == "mul":
        return lambda a, b: (a * b) & M64
    if op == "div":
        return lambda a, b: a // b if b else 0
    if op == "mod":
        return lambda a, b: a % b if b else a
    if op == "or":
        return lambda a, b: a | b
    if op == "and":
        return lambda a, b: a & b
    if op == "xor":
        return lambda a, b: a ^ b
    if op == "lsh":
        return lambda a, b: (a << (b & 63)) & M64
    if op == "rsh":
        return lambda a, b: a >> (b & 63)
    if op == "arsh":
        return lambda a, b: (s64(a) >> (b & 63)) & M64
    if op == "neg":
        return lambda a, b: (-a) & M64
    if op == "mov":
        return lambda a, b: b
    raise ValueError(op)


def _alu32(op: str) -> Callable[[int, int], int]:
    if op == "add":
        return lambda a, b: (a + b) & M32
    if op == "sub":
        return lambda a, b: (a - b) & M32
    if op == "mul":
        return lambda a, b: (a * b) & M32
    if op == "div":
        return lambda a, b: (a & M32) // (b & M32) if b & M32 else 0
    if op == "mod":
        return lambda a, b: (a & M32) % (b & M32) if b & M32 else a & M32
    if op == "or":
        return lambda a, b: (a | b) & M32
    if op == "and":
        return lambda a, b: a & b & M32
    if op == "xor":
        return lambda a, b: (a ^ b) & M32
    if op == "lsh":
        return lambda a, b: (a << (b & 31)) & M32
    if op == "rsh":
        return lambda a, b: (a & M32) >> (b & 31)
    if op == "arsh":
        return lambda a, b: (s32(a) >> (b & 31)) & M32
    if op == "neg":
        return lambda a, b: (-a) & M32
    if op == "mov":
        return lambda a, b: b & M32
    raise ValueError(op)


def _ptr_result(op: str, is32: bool, src_reg: bool, pa: str | None, pb: str | None) -> str | None:
    """Region tracked by the result of an ALU op (``None`` means scalar)."""
    if is32:
        return None
    if op == "mov":
        return pb if src_reg else None
    if op == "add":
        if pa and not pb:
            return pa
        if pb and not pa:
            return pb
        return None
    if op == "sub":
        return pa if pa and not pb else None
    return None


def compile_insn(insn: Instruction, layout: Layout = DEFAULT_LAYOUT) -> Kernel:
    if insn.is_alu:
        return _compile_alu(insn)
    return _compile_mem(insn, layout)


def _compile_alu(insn: Instruction) -> Kernel:
    is32 = insn.cls == "alu32"
    fn = (_alu32 if is32 else _alu64)(insn.op)
    dst, src, src_reg, op = insn.dst, insn.src, insn.src_reg, insn.op
    imm = (insn.imm & M32) if is32 else u64(insn.imm)
    reads_dst = op != "mov"
    ptr_sensitive = not is32 and op in ("mov", "add", "sub")

    def kernel(regs, ptrs, mem, fill):
        a = regs[dst]
        if reads_dst and a is None:
            return "UninitRead"
        if src_reg:
            b = regs[src]
            if b is None:
                return "UninitRead"
            pb = ptrs[src]
        else:
            b = imm
            pb = None
        r = list(regs)
        r[dst] = fn(a, b)
        if ptr_sensitive:
            p = _ptr_result(op, False, src_reg, ptrs[dst] if reads_dst else None, pb)
        else:
            p = None
        if ptrs[dst] != p:
            pl = list(ptrs)
            pl[dst] = p
            ptrs = tuple(pl)
        return tuple(r), ptrs, mem

    return kernel


def _compile_mem(insn: Instruction, layout: Layout) -> Kernel:
    base_reg = insn.base_reg()
    off, width = insn.off, insn.width
    bases: dict[str, tuple[int, int, int]] = {}

    def resolve(regs, ptrs):
        region = ptrs[base_reg]
        v = regs[base_reg]
        if v is None:
            return "UninitRead"
        if region is None:
            return "BadRegion"
        info = bases.get(region)
        if info is None:
            lo, hi = layout.bounds(region)
            info = bases[region] = (layout.base(region), lo, hi)
        rel = s64(v - info[0] + off)
        if rel < info[1] or rel + width > info[2]:
            return "OutOfBounds"
        return region, rel

    if insn.cls == "ldx":
        dst = insn.dst

        def kernel(regs, ptrs, mem, fill):
            where = resolve(regs, ptrs)
            if where.__class__ is str:
                return where
            region, rel = where
            value = 0
            for k in range(width - 1, -1, -1):
                byte = mem.get((region, rel + k))
                if byte is None:
                    if fill is None:
                        return "UninitRead"
                    byte = fill((region, rel + k))
                    mem = dict(mem)
                    mem[(region, rel + k)] = byte
                value = (value << 8) | byte
            r = list(regs)
            r[dst] = value
            if ptrs[dst] is not None:
                pl = list(ptrs)
                pl[dst] = None
                ptrs = tuple(pl)
            return tuple(r), ptrs, mem

        return kernel

    src, is_reg = insn.src, insn.cls == "stx"
    imm = u64(insn.imm)

    def kernel(regs, ptrs, mem, fill):
        where = resolve(regs, ptrs)
        if where.__class__ is str:
            return where
        region, rel = where
        if is_reg:
            value = regs[src]
            if value is None:
                return "UninitRead"
        else:
            value = imm
        mem = dict(mem)
        for k in range(width):
            mem[(region, rel + k)] = (value >> (8 * k)) & 0xFF
        return regs, ptrs, mem

    return kernel


_KERNELS: dict[tuple[Instruction, Layout], Kernel] = {}


def kernel_for(insn: Instruction, layout: Layout = DEFAULT_LAYOUT) -> Kernel:
    key = (insn, layout)
    k = _KERNELS.get(key)
    if k is None:
        if len(_KERNELS) > 200_000:
            _KERNELS.clear()
        k = _KERNELS[key] = compile_insn(insn, layout)
    return k


def interpret(
    insns: Sequence[Instruction],
    s0: MachineState,
    types: RegTypeMap | None = None,
    layout: Layout = DEFAULT_LAYOUT,
    fill: Callable[[tuple[str, int]], int] | None = None,
) -> MachineState:
    """Run straight-line ``insns`` from ``s0``.

    ``types`` overrides the pointer tags carried by ``s0`` (pointer registers
    must then hold addresses inside their region).  Raises :class:`Fault`.
    """
    ptrs = s0.ptrs
    if types is not None:
        full = normalize_types(types)
        ptrs = tuple(full[r].region for r in range(NUM_REGS))
    regs, mem = s0.regs, s0.mem
    for pc, insn in enumerate(insns):
        out = kernel_for(insn, layout)(regs, ptrs, mem, fill)
        if out.__class__ is str:
            raise Fault(out, pc)
        regs, ptrs, mem = out
    return MachineState(regs, ptrs, mem)


def run(insns: Sequence[Instruction], s0: MachineState, layout: Layout = DEFAULT_LAYOUT, fill=None):
    """Like :func:`interpret` but returns ``None`` instead of raising."""
    try:
        return interpret(insns, s0, layout=layout, fill=fill)
    except Fault:
        return None


# -- live-out footprint and distance --------------------------------------------



_CMP: dict[str, Callable[[int, int, Callable[[int], int]], bool]] = {
    "jeq": lambda a, b, s: a == b,
    "jne": lambda a, b, s: a != b,
    "jgt": lambda a, b, s: a > b,
    "jge": lambda a, b, s: a >= b,
    "jlt": lambda a, b, s: a < b,
    "jle": lambda a, b, s: a <= b,
    "jset": lambda a, b, s: bool(a & b),
    "jsgt": lambda a, b, s: s(a) > s(b),
    "jsge": lambda a, b, s: s(a) >= s(b),
    "jslt": lambda a, b, s: s(a) < s(b),
    "jsle": lambda a, b, s: s(a) <= s(b),
}


def run_program(
    p: Program,
    s0: MachineState,
    layout: Layout = DEFAULT_LAYOUT,
    fill: Callable[[tuple[str, int]], int] | None = None,
    max_steps: int = 100_000,
) -> MachineState:
    """Execute a whole program until ``exit``.

    Helper calls are not modeled: r0 becomes 0 and r1-r5 become uninitialized.
    Raises :class:`Fault` on any fault, on running off the end, or when
    ``max_steps`` is exceeded.
    """
    regs, ptrs, mem = s0.regs, s0.ptrs, s0.mem
    pc = steps = 0
    insns = p.instructions
    while True:
        if not 0 <= pc < len(insns):
            raise Fault("control fell off the program", pc)
        steps += 1
        if steps > max_steps:
            raise Fault("step limit exceeded", pc)
        insn = insns[pc]
        if isinstance(insn, Instruction):
            out = kernel_for(insn, layout)(regs, ptrs, mem, fill)
            if out.__class__ is str:
                raise Fault(out, pc)
            regs, ptrs, mem = out
            pc += 1
            continue
        for r in insn.regs_read() if insn.kind != "call" else ():
            if regs[r] is None:
                raise Fault(f"read of uninitialized r{r}", pc)
        if insn.kind == "exit":
            return MachineState(regs, ptrs, mem)
        if insn.kind == "ja":
            pc += 1 + insn.off
        elif insn.kind == "call":
            regs = (0,) + (None,) * 5 + regs[6:]
            ptrs = (None,) * 6 + ptrs[6:]
            pc += 1
        else:
            a = regs[insn.dst]
            b = regs[insn.src] if insn.src_reg else u64(insn.imm)
            if insn.is32:
                a, b, sx = a & M32, b & M32, s32
            else:
                sx = s64
            pc += 1 + (insn.off if _CMP[insn.op](a, b, sx) else 0)


@dataclass(frozen=True)
class Footprint:
    """Observed locations: registers, live stack bytes, and whether non-stack
    memory is observed (it always is unless explicitly disabled).

    ``stack=None`` means every stack byte is live.
    """

    regs: frozenset[int] = frozenset()
    stack: frozenset[int] | None = frozenset()
    other_mem: bool = True

    def mem_live(self, key: tuple[str, int]) -> bool:
        region, off = key
        if region == STACK:
            return self.stack is None or off in self.stack
        return self.other_mem

    def is_empty(self) -> bool:
        return not self.regs and self.stack == frozenset() and not self.other_mem

    def __str__(self) -> str:
        parts = [f"r{r}" for r in sorted(self.regs)]
        if self.stack is None:
            parts.append("stack[*]")
        else:
            parts.extend(f"stack[{a}..{b})" for a, b in byte_runs(self.stack))
        return ",".join(parts)


def byte_runs(offsets: Iterable[int]) -> list[tuple[int, int]]:
    """Maximal contiguous ``[start, end)`` runs of the given offsets."""
    runs: list[tuple[int, int]] = []
    for o in sorted(set(offsets)):
        if runs and runs[-1][1] == o:
            runs[-1] = (runs[-1][0], o + 1)
        else:
            runs.append((o, o + 1))
    return runs


def parse_footprint(text: str) -> Footprint:
    """Parse ``r0,r2,stack[-8..0)`` style live-out lists."""
    regs: set[int] = set()
    stack: set[int] | None = set()
    other = True
    for item in filter(None, (t.strip() for t in re.split(r"[,\s]+(?![^\[]*\))", text))):
        if m := re.fullmatch(r"r(10|[0-9])", item):
            regs.add(int(m[1]))
        elif m := re.fullmatch(r"stack\[\s*(-?\d+)\s*\.\.\s*(-?\d+)\s*\)", item):
            if stack is not None:
                stack.update(range(int(m[1]), int(m[2])))
        elif item == "stack[*]":
            stack = None
        elif item in ("nomem", "-mem"):
            other = False
        else:
            raise ValueError(f"bad live-out item {item!r}")
    return Footprint(frozenset(regs), None if stack is None else frozenset(stack), other)


def _window_cover(offsets: list[int]) -> int:
    """Fewest 8-byte windows covering every offset (greedy is optimal here)."""
    count = 0
    end = None
    for o in sorted(offsets):
        if end is None or o >= end:
            count += 1
            end = o + 8
    return count


def mem_distance(a: Mapping, b: Mapping, fp: Footprint) -> int:
    diff: dict[str, list[int]] = {}
    for key in set(a) | set(b):
        if fp.mem_live(key) and a.get(key) != b.get(key):
            diff.setdefault(key[0], []).append(key[1])
    return sum(_window_cover(v) for v in diff.values())


def distance(s: MachineState, t: MachineState, fp: Footprint) -> int:
    """Lower bound on the instructions needed to turn ``s`` into ``t`` on ``fp``.

    One per differing register, plus for memory the fewest 8-byte store windows
    that cover every differing byte of a region.
    """
    d = 0
    for r in fp.regs:
        if s.regs[r] != t.regs[r] or s.ptrs[r] != t.ptrs[r]:
            d += 1
    return d + mem_distance(s.mem, t.mem, fp)


def project(s: MachineState, fp: Footprint) -> tuple:
    """Canonical live-out view of a state, used as the expected test output."""
    regs = tuple((r, s.regs[r], s.ptrs[r]) for r in sorted(fp.regs))
    mem = tuple(sorted((k, v) for k, v in s.mem.items() if fp.mem_live(k)))
    return regs, mem


# -- random states ------------------------------------------------------------------

_SPECIAL = (0, 1, 2, 0xFF, 0xFFFF, 0xFFFFFFFF, M64, 1 << 31, 1 << 63, 0x8000)


def random_scalar(rng: random.Random, bounds: tuple[int, int] | None = None) -> int:
    if bounds is not None:
        return rng.randint(*bounds)
    roll = rng.random()
    if roll < 0.15:
        return rng.choice(_SPECIAL)
    if roll < 0.35:
        return rng.randint(0, 64)
    if roll < 0.55:
        return rng.getrandbits(32)
    return rng.getrandbits(64)


def random_state(
    types: RegTypeMap,
    rng: random.Random,
    ranges: Mapping[int, tuple[int, int]] | None = None,
    layout: Layout = DEFAULT_LAYOUT,
) -> MachineState:
    """Random entry state; memory is left empty for lazy filling."""
    full = normalize_types(types)
    ranges = ranges or {}
    values = {r: random_scalar(rng, ranges.get(r)) for r, t in full.items() if t.kind == "SCALAR"}
    return make_state(full, values, layout=layout)


# -- snapshot text format -----------------------------------------------------------


def format_state(s: MachineState, layout: Layout = DEFAULT_LAYOUT) -> str:
    lines = []
    for r, v in enumerate(s.regs):
        if v is None:
            continue
        if s.ptrs[r]:
            rel = s64(v - layout.base(s.ptrs[r]))
            lines.append(f"r{r} = {s.ptrs[r]}{rel:+d}")
        else:
            lines.append(f"r{r} = 0x{v:x}")
    by_region: dict[str, list[int]] = {}
    for region, off in s.mem:
        by_region.setdefault(region, []).append(off)
    for region in sorted(by_region):
        for a, b in byte_runs(by_region[region]):
            data = bytes(s.mem[(region, o)] for o in range(a, b))
            lines.append(f"mem {region}[{a}..{b}] = {data.hex()}")
    return "\n".join(lines) + "\n"


def parse_state(text: str, layout: Layout = DEFAULT_LAYOUT) -> MachineState:
    """Parse ``rN = 0x...`` / ``rN = ctx+0`` / ``mem REGION[A..B] = hex`` lines."""
    regs: list[int | None] = [None] * NUM_REGS
    ptrs: list[str | None] = [None] * NUM_REGS
    mem: dict[tuple[str, int], int] = {}
    ptrs[FP] = STACK
    regs[FP] = layout.base(STACK)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if m := re.fullmatch(r"r(10|[0-9])\s*=\s*([A-Za-z_]\w*)\s*([+-]\s*\d+)?", line):
            region = m[2]
            ptrs[int(m[1])] = region
            regs[int(m[1])] = u64(layout.base(region) + int((m[3] or "0").replace(" ", "")))
        elif m := re.fullmatch(r"r(10|[0-9])\s*=\s*(-?(?:0[xX][0-9a-fA-F]+|\d+))", line):
            regs[int(m[1])] = u64(int(m[2], 0))
        elif m := re.fullmatch(r"mem\s+(\w+)\s*\[\s*(-?\d+)\s*\.\.\s*(-?\d+)\s*[\])]\s*=\s*([0-9a-fA-F]*)", line):
            start, end, data = int(m[2]), int(m[3]), bytes.fromhex(m[4])
            if len(data) != end - start:
                raise ValueError(f"line {lineno}: byte count does not match range")
            for k, b in enumerate(data):
                mem[(m[1], start + k)] = b
        else:
            raise ValueError(f"line {lineno}: cannot parse {raw!r}")
    return MachineState(tuple(regs), tuple(ptrs), mem)
