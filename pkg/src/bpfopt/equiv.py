"""Equivalence checking of straight-line programs.

Both programs are encoded as SMT-LIB bitvector formulas: registers are 64-bit
vectors, every memory byte is 8 bits.  Initial memory of each region is an
uninterpreted function from region offset to byte, so loads and stores at
variable offsets stay quantifier free.  A query asks for an input on which the
original runs in bounds but the live-out footprint differs (or the candidate
faults); ``unsat`` proves equivalence.
"""

from __future__ import annotations

import itertools
import random
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .isa import NUM_REGS, Instruction
from .machine import (
    DEFAULT_LAYOUT,
    M32,
    STACK,
    Footprint,
    Layout,
    MachineState,
    RegTypeMap,
    make_state,
    normalize_types,
    project,
    run,
    u64,
)
from .safety import analyze
from .smt import SolverSession, SolverUnavailable, bv

__all__ = [
    "BOUNDED_EQUIVALENT",
    "EQUIVALENT",
    "NOT_EQUIVALENT",
    "UNKNOWN",
    "CounterExample",
    "EncodingMismatch",
    "EncodingUnsupported",
    "EquivQuery",
    "EquivResult",
    "SolverUnavailable",
    "SpaceTooLarge",
    "bounded_check",
    "check_equiv",
    "encoder_agrees",
    "replay",
]

EQUIVALENT = "Equivalent"
NOT_EQUIVALENT = "NotEquivalent"
UNKNOWN = "Unknown"
BOUNDED_EQUIVALENT = "BoundedEquivalent"


class EncodingUnsupported(ValueError):
    pass


class EncodingMismatch(AssertionError):
    """A solver model failed to replay in the interpreter."""


class SpaceTooLarge(ValueError):
    pass


@dataclass
class EquivQuery:
    original: Sequence[Instruction]
    candidate: Sequence[Instruction]
    footprint: Footprint
    entry_types: RegTypeMap | None = None
    ranges: Mapping[int, tuple[int, int]] = field(default_factory=dict)
    timeout: float = 10.0
    layout: Layout = DEFAULT_LAYOUT


@dataclass
class CounterExample:
    state: MachineState
    mismatch: str


@dataclass
class EquivResult:
    verdict: str
    counterexample: CounterExample | None = None
    reason: str = ""

    @property
    def equivalent(self) -> bool:
        return self.verdict in (EQUIVALENT, BOUNDED_EQUIVALENT)

    def __str__(self) -> str:
        if self.counterexample is not None:
            return f"{self.verdict} ({self.counterexample.mismatch})"
        return self.verdict + (f" ({self.reason})" if self.reason else "")


def _sanitize(region: str) -> str:
    return re.sub(r"\W", "_", region)


class _Encoder:
    """Shared input variables plus a growing list of definitions."""

    def __init__(self, types: RegTypeMap | None, layout: Layout, tag: str = ""):
        self.types = normalize_types(types)
        self.layout = layout
        self.tag = tag
        self.lines: list[str] = []
        self.count = 0
        self.inputs: dict[int, str] = {}
        self.scalar_inputs: dict[int, str] = {}
        self.mem_funs: dict[str, str] = {}

    def define(self, expr: str, width: int = 64) -> str:
        name = f"t{self.tag}{self.count}"
        self.count += 1
        sort = "Bool" if width == 0 else f"(_ BitVec {width})"
        self.lines.append(f"(define-fun {name} () {sort} {expr})")
        return name

    def reg_input(self, r: int) -> str:
        term = self.inputs.get(r)
        if term is None:
            t = self.types[r]
            if t.is_ptr:
                term = bv(self.layout.base(t.region) + (t.off or 0))
            else:
                term = f"in_r{r}{self.tag}"
                self.lines.append(f"(declare-fun {term} () (_ BitVec 64))")
                self.scalar_inputs[r] = term
            self.inputs[r] = term
        return term

    def mem0(self, region: str) -> str:
        name = self.mem_funs.get(region)
        if name is None:
            name = f"m0_{_sanitize(region)}{self.tag}"
            self.lines.append(f"(declare-fun {name} ((_ BitVec 64)) (_ BitVec 8))")
            self.mem_funs[region] = name
        return name


@dataclass
class _Store:
    addr: str
    const: int | None
    byte: str


@dataclass
class _Run:
    regs: list[str | None]
    types: dict
    stores: dict[str, list[_Store]]
    inbounds: list[str]
    probes: list[tuple[str, str, int | None, int]]
    stack_inputs: set[int]
    stack_written: set[int]
    written_regions: set[str]


def _alu_expr(op: str, is32: bool, a: str, b: str) -> str:
    if is32:
        a = f"((_ extract 31 0) {a})"
        b = f"((_ extract 31 0) {b})" if not b.startswith("#x") or len(b) > 10 else b
        zero, mask = bv(0, 32), bv(31, 32)
    else:
        zero, mask = bv(0), bv(63)
    body = {
        "add": f"(bvadd {a} {b})",
        "sub": f"(bvsub {a} {b})",
        "mul": f"(bvmul {a} {b})",
        "div": f"(ite (= {b} {zero}) {zero} (bvudiv {a} {b}))",
        "mod": f"(ite (= {b} {zero}) {a} (bvurem {a} {b}))",
        "or": f"(bvor {a} {b})",
        "and": f"(bvand {a} {b})",
        "xor": f"(bvxor {a} {b})",
        "lsh": f"(bvshl {a} (bvand {b} {mask}))",
        "rsh": f"(bvlshr {a} (bvand {b} {mask}))",
        "arsh": f"(bvashr {a} (bvand {b} {mask}))",
        "neg": f"(bvneg {a})",
        "mov": b,
    }[op]
    return f"((_ zero_extend 32) {body})" if is32 else body


def _read_byte(enc: _Encoder, stores: list[_Store], region: str, addr: str, const: int | None) -> str:
    expr = f"({enc.mem0(region)} {addr})"
    for s in reversed(stores):  # stores are newest first; newer ones must win
        if const is not None and s.const is not None:
            if s.const == const:
                expr = s.byte
            continue
        expr = f"(ite (= {addr} {s.addr}) {s.byte} {expr})"
    return expr


def _encode(enc: _Encoder, insns: Sequence[Instruction]) -> _Run:
    states, _ = analyze(insns, enc.types, enc.layout)
    regs: list[str | None] = [None] * NUM_REGS
    stores: dict[str, list[_Store]] = {}
    out = _Run(regs, states[-1], stores, [], [], set(), set(), set())

    def get(r: int) -> str:
        if regs[r] is None:
            regs[r] = enc.reg_input(r)
        return regs[r]

    for pc, insn in enumerate(insns):
        if not isinstance(insn, Instruction):
            raise EncodingUnsupported(str(insn))
        if insn.is_alu:
            is32 = insn.cls == "alu32"
            a = get(insn.dst) if insn.op != "mov" else bv(0)
            if insn.src_reg:
                b = get(insn.src)
            else:
                b = bv(insn.imm & M32, 32) if is32 else bv(u64(insn.imm))
            regs[insn.dst] = enc.define(_alu_expr(insn.op, is32, a, b))
            continue
        base_t = states[pc][insn.base_reg()]
        if not base_t.is_ptr:
            raise EncodingUnsupported(f"pc {pc}: dereference of non-pointer r{insn.base_reg()}")
        region = base_t.region
        lo, hi = enc.layout.bounds(region)
        w = insn.width
        if region == STACK:
            if base_t.off is None:
                raise EncodingUnsupported(f"pc {pc}: variable stack offset")
            const = base_t.off + insn.off
            addr = bv(const)
            if not (lo <= const and const + w <= hi):
                out.inbounds.append("false")
        else:
            const = None
            rel = f"(bvadd (bvsub {get(insn.base_reg())} {bv(enc.layout.base(region))}) {bv(insn.off)})"
            addr = enc.define(rel)
            out.inbounds.append(f"(and (bvsle {bv(lo)} {addr}) (bvsle {addr} {bv(hi - w)}))")
        region_stores = stores.setdefault(region, [])
        byte_addrs = []
        for k in range(w):
            if const is not None:
                byte_addrs.append((bv(const + k), const + k))
            elif k == 0:
                byte_addrs.append((addr, None))
            else:
                byte_addrs.append((enc.define(f"(bvadd {addr} {bv(k)})"), None))
        if insn.is_load:
            out.probes.append((region, addr, const, w))
            parts = []
            for a, c in byte_addrs:
                if region == STACK and c not in out.stack_written:
                    out.stack_inputs.add(c)
                parts.append(_read_byte(enc, region_stores, region, a, c))
            value = parts[0] if w == 1 else f"(concat {' '.join(reversed(parts))})"
            regs[insn.dst] = enc.define(f"((_ zero_extend {64 - 8 * w}) {value})" if w < 8 else value)
        else:
            if insn.cls == "stx":
                v = get(insn.src)
            else:
                v = bv(u64(insn.imm))
            for k, (a, c) in enumerate(byte_addrs):
                byte = enc.define(f"((_ extract {8 * k + 7} {8 * k}) {v})", 8)
                region_stores.insert(0, _Store(a, c, byte))
                if c is not None and region == STACK:
                    out.stack_written.add(c)
            out.written_regions.add(region)
    return out


def _final_reg(enc: _Encoder, run_: _Run, r: int) -> str:
    return run_.regs[r] if run_.regs[r] is not None else enc.reg_input(r)


def _conj(items: list[str]) -> str:
    if not items:
        return "true"
    return items[0] if len(items) == 1 else f"(and {' '.join(items)})"


def _disj(items: list[str]) -> str:
    if not items:
        return "false"
    return items[0] if len(items) == 1 else f"(or {' '.join(items)})"


def _range_constraints(enc: _Encoder, ranges: Mapping[int, tuple[int, int]]) -> list[str]:
    out = []
    for r, (lo, hi) in ranges.items():
        if enc.types[r].is_ptr:
            continue
        t = enc.reg_input(r)
        out.append(f"(bvule {bv(lo)} {t})")
        out.append(f"(bvule {t} {bv(hi)})")
    return out


def check_equiv(q: EquivQuery, session: SolverSession | None = None, solver_cmd: str | None = None) -> EquivResult:
    """Prove or refute that ``q.candidate`` matches ``q.original`` on the
    live-out footprint for every input satisfying the preconditions."""
    if session is None:
        with SolverSession(solver_cmd, timeout=q.timeout) as s:
            return check_equiv(q, s)
    enc = _Encoder(q.entry_types, q.layout)
    p = _encode(enc, q.original)
    c = _encode(enc, q.candidate)
    fp = q.footprint

    mismatches: list[tuple[str, str]] = []
    static: list[str] = []
    for r in sorted(fp.regs):
        tp, tc = p.types[r], c.types[r]
        if (tp.kind, tp.region) != (tc.kind, tc.region):
            static.append(f"r{r} type {tp} vs {tc}")
            continue
        if tp.kind == "UNINIT":
            continue
        a, b = _final_reg(enc, p, r), _final_reg(enc, c, r)
        if a != b:
            mismatches.append((f"(distinct {a} {b})", f"r{r}"))
    bad_stack = sorted(c.stack_inputs - p.stack_inputs)
    if bad_stack:
        static.append(f"candidate reads uninitialized stack byte {bad_stack[0]}")
    stack_bytes = sorted((p.stack_written | c.stack_written) if fp.stack is None else
                         (p.stack_written | c.stack_written) & fp.stack)
    for o in stack_bytes:
        a = _read_byte(enc, p.stores.get(STACK, []), STACK, bv(o), o)
        b = _read_byte(enc, c.stores.get(STACK, []), STACK, bv(o), o)
        if a != b:
            mismatches.append((f"(distinct {a} {b})", f"stack[{o}]"))
    probe_addrs: list[tuple[str, str]] = []
    if fp.other_mem:
        for region in sorted((p.written_regions | c.written_regions) - {STACK}):
            lo, hi = q.layout.bounds(region)
            addr = f"any_{_sanitize(region)}"
            enc.lines.append(f"(declare-fun {addr} () (_ BitVec 64))")
            a = _read_byte(enc, p.stores.get(region, []), region, addr, None)
            b = _read_byte(enc, c.stores.get(region, []), region, addr, None)
            within = f"(and (bvsle {bv(lo)} {addr}) (bvslt {addr} {bv(hi)}))"
            mismatches.append((f"(and {within} (distinct {a} {b}))", f"{region}[*]"))
            probe_addrs.append((region, addr))
    if c.inbounds:
        mismatches.append((f"(not {_conj(c.inbounds)})", "candidate out of bounds"))

    pre = _conj(p.inbounds + _range_constraints(enc, q.ranges))
    session.push()
    try:
        for line in enc.lines:
            session.send(line)
        session.send(f"(assert {pre})")
        if static:
            status = session.check(q.timeout)
            if status == "unsat":
                return EquivResult(EQUIVALENT, reason="preconditions unsatisfiable")
            if status != "sat":
                return EquivResult(UNKNOWN, reason="solver timeout")
            state = _decode(session, enc, p, c, probe_addrs, q)
            if bad_stack:  # leave those bytes uninitialized so the candidate faults
                gone = {(STACK, o) for o in bad_stack}
                state = MachineState(state.regs, state.ptrs, {k: v for k, v in state.mem.items() if k not in gone})
            ce = CounterExample(state, static[0])
            if not replay(q, ce):
                raise EncodingMismatch(f"counterexample for {static[0]} does not replay")
            return EquivResult(NOT_EQUIVALENT, ce)
        if not mismatches:
            return EquivResult(EQUIVALENT)
        names = []
        for k, (expr, _label) in enumerate(mismatches):
            name = f"diff{k}"
            session.send(f"(define-fun {name} () Bool {expr})")
            names.append(name)
        session.send(f"(assert {_disj(names)})")
        status = session.check(q.timeout)
        if status == "unsat":
            return EquivResult(EQUIVALENT)
        if status != "sat":
            return EquivResult(UNKNOWN, reason="solver timeout")
        flags = session.get_values(names)
        label = next(lbl for (_, lbl), f in zip(mismatches, flags) if f)
        state = _decode(session, enc, p, c, probe_addrs, q)
        ce = CounterExample(state, label)
        if not replay(q, ce):
            raise EncodingMismatch(f"counterexample for {label} does not replay")
        return EquivResult(NOT_EQUIVALENT, ce)
    finally:
        session.pop()


def _decode(session: SolverSession, enc: _Encoder, p: _Run, c: _Run, extra, q: EquivQuery) -> MachineState:
    regs = sorted(enc.scalar_inputs)
    values = dict(zip(regs, session.get_values([enc.scalar_inputs[r] for r in regs])))
    for r, t in enc.types.items():
        if t.kind == "SCALAR" and r not in values:
            values[r] = 0
    wanted: list[tuple[str, int]] = []
    sym = [(region, addr, w) for region, addr, const, w in p.probes + c.probes if const is None]
    sym += [(region, addr, 1) for region, addr in extra]
    offsets = session.get_values([addr for _, addr, _ in sym])
    for (region, _, w), off in zip(sym, offsets):
        off = off - (1 << 64) if off >> 63 else off
        wanted.extend((region, off + k) for k in range(w))
    for region, _, const, w in p.probes + c.probes:
        if const is not None:
            wanted.extend((region, const + k) for k in range(w))
    lo_hi = {region: q.layout.bounds(region) for region, _ in wanted}
    wanted = sorted({(r, o) for r, o in wanted if lo_hi[r][0] <= o < lo_hi[r][1]})
    terms = [f"({enc.mem0(region)} {bv(o)})" for region, o in wanted]
    mem = dict(zip(wanted, session.get_values(terms)))
    return make_state(q.entry_types, values, mem, q.layout)


def replay(q: EquivQuery, ce: CounterExample) -> bool:
    """True when the interpreter reproduces a mismatch on the counterexample."""
    before = run(q.original, ce.state, q.layout)
    if before is None:
        return False
    after = run(q.candidate, ce.state, q.layout)
    if after is None:
        return True
    return project(before, q.footprint) != project(after, q.footprint)


# -- solver-free bounded checking ---------------------------------------------------


def bounded_check(q: EquivQuery, bits: int = 8, limit: int = 1 << 24) -> EquivResult:
    """Exhaustively compare the programs on inputs restricted to ``bits``-wide
    scalars and a tiny memory image (bytes read under the all-zero input).

    ``NotEquivalent`` is definitive; ``BoundedEquivalent`` only means no
    counterexample exists in the bounded space.
    """
    types = normalize_types(q.entry_types)
    scalar_regs = sorted(
        {r for i in list(q.original) + list(q.candidate) for r in i.regs_read() if types[r].kind == "SCALAR"}
    )
    zero_input: dict[tuple[str, int], int] = {}

    def fill_zero(key):
        zero_input[key] = 0
        return 0

    base = make_state(types, {r: 0 for r in scalar_regs}, layout=q.layout)
    run(q.original, base, q.layout, fill_zero)
    run(q.candidate, base, q.layout, fill_zero)
    mem_keys = sorted(zero_input)
    n_vars = len(scalar_regs) + len(mem_keys)
    space = 1 << (bits * n_vars)
    if space > limit:
        raise SpaceTooLarge(f"2^{bits * n_vars} assignments exceed the limit of {limit}")
    byte_bits = min(bits, 8)
    for assignment in itertools.product(range(1 << bits), repeat=len(scalar_regs)):
        for mem_vals in itertools.product(range(1 << byte_bits), repeat=len(mem_keys)):
            mem = dict(zip(mem_keys, mem_vals))
            s0 = make_state(types, dict(zip(scalar_regs, assignment)), mem, q.layout)
            fill = lambda key: 0  # noqa: E731 - bytes outside the tiny image read as zero
            before = run(q.original, s0, q.layout, fill)
            if before is None:
                continue
            after = run(q.candidate, s0, q.layout, fill)
            if after is None or project(before, q.footprint) != project(after, q.footprint):
                return EquivResult(NOT_EQUIVALENT, CounterExample(s0, "bounded witness"))
    return EquivResult(BOUNDED_EQUIVALENT)


# -- encoder/interpreter agreement ------------------------------------------------


def encoder_agrees(
    insns: Sequence[Instruction],
    s0: MachineState,
    types: RegTypeMap | None,
    session: SolverSession,
    layout: Layout = DEFAULT_LAYOUT,
) -> bool:
    """Fix the inputs to ``s0`` and check that the symbolic outputs equal the
    interpreter's (satisfiable) and cannot differ from them (unsatisfiable)."""
    concrete = run(insns, s0, layout)
    enc = _Encoder(types, layout)
    prog = _encode(enc, insns)
    pins = []
    for r, term in list(enc.inputs.items()):
        if r in enc.scalar_inputs:
            pins.append(f"(= {term} {bv(s0.regs[r])})")
    for (region, off), byte in s0.mem.items():
        pins.append(f"(= ({enc.mem0(region)} {bv(off)}) {bv(byte, 8)})")
    expected = None
    if concrete is not None:
        outs = []
        for r in range(NUM_REGS):
            if concrete.regs[r] is not None and prog.regs[r] is not None:
                outs.append(f"(= {prog.regs[r]} {bv(concrete.regs[r])})")
        for (region, off), byte in concrete.mem.items():
            if s0.mem.get((region, off)) == byte and not any(
                st.const == off or st.const is None for st in prog.stores.get(region, [])
            ):
                continue
            got = _read_byte(enc, prog.stores.get(region, []), region, bv(off), off if region == STACK else None)
            outs.append(f"(= {got} {bv(byte, 8)})")
        expected = _conj(outs + prog.inbounds)
    session.push()
    try:
        for line in enc.lines:  # sent last: building terms may declare memory functions
            session.send(line)
        session.send(f"(assert {_conj(pins)})")
        if expected is None:
            session.send(f"(assert {_conj(prog.inbounds)})")
            return session.check() == "unsat"
        session.push()
        session.send(f"(assert {expected})")
        sat = session.check()
        session.pop()
        session.send(f"(assert (not {expected}))")
        unsat = session.check()
        return sat == "sat" and unsat == "unsat"
    finally:
        session.pop()


def random_fill(rng: random.Random, sink: dict):
    def fill(key):
        v = sink.get(key)
        if v is None:
            v = sink[key] = rng.getrandbits(8)
        return v

    return fill
