"""Cost-bounded enumerative synthesis by iterative deepening.

Candidates are enumerated shortest first from a finite alphabet derived from the
slice (its registers in order of first appearance, its memory offsets, and a
small immediate pool).  Partial candidates are executed incrementally on every
testcase and pruned by three admissible rules:

* distance: the number of footprint registers and 8-byte memory windows still
  differing from the target bounds the instructions still needed;
* memoization: a joint per-test state that already failed with at least the
  current remaining budget fails again;
* redundant definitions: overwriting a register or store that was never used.

The enumeration order only depends on the slice up to register renaming and
offset shifting, which keeps mined rules and fresh synthesis consistent.
"""

from __future__ import annotations

import random
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator, Mapping, Sequence

from .isa import FP, SHIFT_OPS, Instruction
from .machine import (
    DEFAULT_LAYOUT,
    Footprint,
    Layout,
    MachineState,
    RegTypeMap,
    _window_cover,
    kernel_for,
    project,
    random_state,
    run,
)

__all__ = [
    "DEFAULT_IMMEDIATES",
    "DEFAULT_LATENCY",
    "Alphabet",
    "Candidate",
    "CostModel",
    "MissingLatency",
    "NoneFound",
    "PruneConfig",
    "SearchBudget",
    "SearchStats",
    "SynthesisTimeout",
    "Testcase",
    "alphabet_for",
    "cost_of",
    "iter_candidates",
    "make_testcase",
    "make_tests",
    "opclass",
    "parse_latency_table",
    "prune_by_distance",
    "redundant_def",
    "synthesize",
]

DEFAULT_IMMEDIATES = (0, 1, -1, 2, 4, 8, 16, 32)
WIDTHS = (1, 2, 4, 8)


class NoneFound(Exception):
    """Search space exhausted below the cost bound."""


class SynthesisTimeout(Exception):
    pass


class MissingLatency(KeyError):
    pass


# -- cost models ------------------------------------------------------------------

DEFAULT_LATENCY: dict[str, Fraction] = {
    "ALU": Fraction(1),
    "MUL": Fraction(3),
    "DIV": Fraction(20),
    "LDX": Fraction(4),
    "STX": Fraction(2),
    "ST": Fraction(2),
}


def opclass(insn: Instruction) -> tuple[str, ...]:
    """Latency-table keys for ``insn``, most specific first."""
    if insn.is_alu:
        keys = [insn.mnemonic(), insn.cls.upper()]
        if insn.op == "mul":
            keys.append("MUL")
        elif insn.op in ("div", "mod"):
            keys.append("DIV")
        keys.append("ALU")
        return tuple(keys)
    return (insn.mnemonic(), insn.cls.upper(), "MEM")


@dataclass(frozen=True)
class CostModel:
    mode: str = "size"
    latency_table: Mapping[str, Fraction] = field(default_factory=lambda: dict(DEFAULT_LATENCY))

    def __post_init__(self) -> None:
        if self.mode not in ("size", "latency"):
            raise ValueError(f"unknown cost mode {self.mode!r}")
        if any(v <= 0 for v in self.latency_table.values()):
            raise ValueError("latencies must be positive")

    def insn_cost(self, insn: Instruction) -> Fraction:
        if self.mode == "size":
            return Fraction(1)
        for key in opclass(insn):
            if key in self.latency_table:
                return Fraction(self.latency_table[key])
        raise MissingLatency(opclass(insn)[1])


def cost_of(insns: Sequence[Instruction], cost: CostModel) -> Fraction:
    if cost.mode == "size":
        return Fraction(len(insns))
    return sum((cost.insn_cost(i) for i in insns), Fraction(0))


def parse_latency_table(text: str) -> dict[str, Fraction]:
    table: dict[str, Fraction] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"line {lineno}: expected 'OPCLASS nanoseconds'")
        try:
            value = Fraction(parts[1])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad latency {parts[1]!r}") from exc
        if value <= 0:
            raise ValueError(f"line {lineno}: latency must be positive")
        table[parts[0]] = value
    return table


# -- budget and statistics -----------------------------------------------------------


@dataclass
class SearchBudget:
    max_cost: Fraction | None = None
    depth_limit: int | None = None
    timeout: float = 600.0
    imm_pool: tuple[int, ...] | None = None
    max_nodes: int | None = None


@dataclass
class PruneConfig:
    distance: bool = True
    memo: bool = True
    redundant: bool = True

    @classmethod
    def none(cls) -> "PruneConfig":
        return cls(False, False, False)


@dataclass
class SearchStats:
    nodes_expanded: int = 0
    pruned_distance: int = 0
    pruned_memo: int = 0
    pruned_redundant_def: int = 0
    elapsed: float = 0.0
    rejected_unsafe: int = 0
    candidates: int = 0
    cegis_rounds: int = 0

    def merge(self, other: "SearchStats") -> None:
        for name in self.__dataclass_fields__:
            setattr(self, name, getattr(self, name) + getattr(other, name))

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class Candidate:
    insns: tuple[Instruction, ...]
    cost: Fraction


# -- testcases ---------------------------------------------------------------------


@dataclass(frozen=True)
class Testcase:
    input: MachineState
    target: MachineState

    def expected(self, fp: Footprint) -> tuple:
        return project(self.target, fp)


def make_testcase(insns: Sequence[Instruction], s0: MachineState, layout: Layout = DEFAULT_LAYOUT) -> Testcase | None:
    out = run(insns, s0, layout)
    if out is None:
        return None
    return Testcase(s0, out)


def make_tests(
    insns: Sequence[Instruction],
    types: RegTypeMap | None,
    rng: random.Random,
    n: int = 4,
    ranges: Mapping[int, tuple[int, int]] | None = None,
    layout: Layout = DEFAULT_LAYOUT,
    attempts: int = 64,
) -> list[Testcase]:
    """Random inputs; memory the original reads is filled lazily and becomes
    part of the input state."""
    tests: list[Testcase] = []
    for _ in range(attempts):
        if len(tests) >= n:
            break
        s0 = random_state(types or {}, rng, ranges, layout)
        sink: dict = {}

        def fill(key, sink=sink):
            v = sink.get(key)
            if v is None:
                v = sink[key] = rng.getrandbits(8)
            return v

        if run(insns, s0, layout, fill) is None:
            continue
        s0 = MachineState(s0.regs, s0.ptrs, dict(sink))
        t = make_testcase(insns, s0, layout)
        if t is not None:
            tests.append(t)
    return tests


# -- alphabet ----------------------------------------------------------------------


@dataclass(frozen=True)
class Alphabet:
    regs: tuple[int, ...]
    offsets: tuple[int, ...]
    imms: tuple[int, ...]
    alu32: bool = False
    divmod: bool = False
    memory: bool = True
    ops: tuple[str, ...] | None = None  # restrict ALU operations
    widths: tuple[int, ...] | None = None  # restrict access widths

    @property
    def dsts(self) -> tuple[int, ...]:
        return tuple(r for r in self.regs if r != FP)


def alphabet_for(
    insns: Sequence[Instruction],
    imm_pool: Sequence[int] | None = None,
    allow_divmod: bool = False,
    extra_regs: Sequence[int] = (),
) -> Alphabet:
    regs: list[int] = []
    offsets: list[int] = []
    imms: list[int] = []
    for insn in insns:
        for r in (*insn.regs_read(), insn.dst):
            if r not in regs:
                regs.append(r)
        if insn.is_mem and insn.off not in offsets:
            offsets.append(insn.off)
        if (insn.is_alu and not insn.src_reg) or insn.cls == "st":
            if insn.op != "neg" and insn.imm not in imms:
                imms.append(insn.imm)
    for r in extra_regs:
        if r not in regs:
            regs.append(r)
    pool = imm_pool if imm_pool is not None else DEFAULT_IMMEDIATES
    for v in pool:
        if v not in imms:
            imms.append(v)
    return Alphabet(
        regs=tuple(regs),
        offsets=tuple(offsets),
        imms=tuple(imms),
        alu32=any(i.cls == "alu32" for i in insns),
        divmod=allow_divmod or any(i.op in ("div", "mod") for i in insns),
        memory=any(i.is_mem for i in insns),
    )


_ALU_ORDER = ("mov", "add", "sub", "mul", "or", "and", "xor", "lsh", "rsh", "arsh", "div", "mod")


def _is_noop(insn: Instruction) -> bool:
    if insn.cls != "alu64":
        return False
    if insn.src_reg:
        return insn.op in ("mov", "and", "or") and insn.src == insn.dst
    if insn.op in ("add", "sub", "or", "xor", "lsh", "rsh", "arsh"):
        return insn.imm == 0
    return (insn.op == "mul" and insn.imm == 1) or (insn.op == "and" and insn.imm == -1)


def enumerate_alphabet(a: Alphabet) -> list[Instruction]:
    """Every instruction of the alphabet in canonical (opcode-major) order."""
    out: list[Instruction] = []
    ops = [op for op in _ALU_ORDER if (a.divmod or op not in ("div", "mod")) and (a.ops is None or op in a.ops)]
    widths = [w for w in WIDTHS if a.widths is None or w in a.widths]
    classes = [False, True] if a.alu32 else [False]
    for is32 in classes:
        bits = 32 if is32 else 64
        for op in ops:
            for dst in a.dsts:
                for src in a.regs:
                    out.append(Instruction.alu(op, dst, src, is32=is32))
        for op in ops:
            for dst in a.dsts:
                for imm in a.imms:
                    if op in SHIFT_OPS and not 0 <= imm < bits:
                        continue
                    if op in ("div", "mod") and imm == 0:
                        continue
                    out.append(Instruction.alu(op, dst, imm=imm, is32=is32))
        if a.ops is None or "neg" in a.ops:
            for dst in a.dsts:
                out.append(Instruction.alu("neg", dst, is32=is32))
    if a.memory:
        for w in widths:
            for dst in a.dsts:
                for base in a.regs:
                    for off in a.offsets:
                        out.append(Instruction.ldx(w, dst, base, off))
        for w in widths:
            for base in a.regs:
                for off in a.offsets:
                    for src in a.regs:
                        out.append(Instruction.stx(w, base, off, src))
        for w in widths:
            for base in a.regs:
                for off in a.offsets:
                    for imm in a.imms:
                        out.append(Instruction.st(w, base, off, imm))
    return [i for i in out if not _is_noop(i)]


# -- pruning primitives -------------------------------------------------------------


def _test_distance(state: tuple, target: MachineState, fp: Footprint) -> tuple[int, set[int], bool]:
    regs, ptrs, mem = state
    diff_regs = {r for r in fp.regs if regs[r] != target.regs[r] or ptrs[r] != target.ptrs[r]}
    by_region: dict[str, list[int]] = {}
    tmem = target.mem
    for key in mem.keys() | tmem.keys():
        if mem.get(key) != tmem.get(key) and fp.mem_live(key):
            by_region.setdefault(key[0], []).append(key[1])
    d = len(diff_regs) + sum(_window_cover(v) for v in by_region.values())
    return d, diff_regs, bool(by_region)


def prune_by_distance(states: Sequence[MachineState], targets: Sequence[MachineState], fp: Footprint, remaining: int) -> bool:
    """True when some test needs more instructions than remain."""
    worst = max(
        (_test_distance((s.regs, s.ptrs, s.mem), t, fp)[0] for s, t in zip(states, targets)),
        default=0,
    )
    return worst > remaining


def redundant_def(partial: Sequence[Instruction], nxt: Instruction) -> bool:
    """True when ``nxt`` overwrites a register or store whose previous value
    was never used."""
    unused: set[int] = set()
    stores: list[tuple[int, int, int, int]] = []
    version = {}
    for insn in partial:
        unused -= set(insn.regs_read())
        if insn.is_load:
            stores.clear()
        w = insn.reg_written()
        if w is not None:
            unused.add(w)
            version[w] = version.get(w, 0) + 1
        elif insn.is_store:
            stores.append((insn.dst, version.get(insn.dst, 0), insn.off, insn.width))
    w = nxt.reg_written()
    if w is not None and w in unused and w not in nxt.regs_read():
        return True
    if nxt.is_store:
        lo, hi = nxt.off, nxt.off + nxt.width
        for base, ver, off, width in stores:
            if base == nxt.dst and ver == version.get(nxt.dst, 0) and lo <= off and off + width <= hi:
                return True
    return False


# -- search -------------------------------------------------------------------------


@dataclass
class _Entry:
    insn: Instruction
    reads: tuple[int, ...]
    writes: int | None
    base: int | None
    is_store: bool
    is_load: bool
    cost: Fraction


class _Search:
    def __init__(
        self,
        original: Sequence[Instruction],
        fp: Footprint,
        types: RegTypeMap | None,
        tests: Sequence[Testcase],
        cost: CostModel,
        budget: SearchBudget,
        prune: PruneConfig,
        stats: SearchStats,
        layout: Layout,
        alphabet: Alphabet,
    ):
        self.fp = fp
        self.tests = list(tests)
        self.cost = cost
        self.prune = prune
        self.stats = stats
        self.layout = layout
        self.max_cost = budget.max_cost if budget.max_cost is not None else cost_of(original, cost)
        if budget.depth_limit is not None:
            self.depth_limit = budget.depth_limit
        elif cost.mode == "size":
            self.depth_limit = int(self.max_cost) - 1 if self.max_cost == int(self.max_cost) else int(self.max_cost)
        else:
            self.depth_limit = len(original)
        self.deadline = time.monotonic() + budget.timeout
        self.max_nodes = budget.max_nodes
        self.entries = []
        for insn in enumerate_alphabet(alphabet):
            try:
                c = cost.insn_cost(insn)
            except MissingLatency:
                continue
            self.entries.append(
                _Entry(insn, insn.regs_read(), insn.reg_written(), insn.base_reg(), insn.is_store, insn.is_load, c)
            )
        self.min_cost = min((e.cost for e in self.entries), default=Fraction(1))
        self.kernels = [kernel_for(e.insn, layout) for e in self.entries]
        self.memo: dict[tuple, list[tuple[int, Fraction]]] = {}

    def _check_budget(self) -> None:
        if time.monotonic() > self.deadline:
            raise SynthesisTimeout("synthesis timeout")
        if self.max_nodes is not None and self.stats.nodes_expanded > self.max_nodes:
            raise SynthesisTimeout("node budget exhausted")

    def run(self) -> Iterator[Candidate]:
        init = [(t.input.regs, t.input.ptrs, t.input.mem) for t in self.tests]
        for depth in range(0, self.depth_limit + 1):
            self.memo.clear()
            yield from self._dfs(depth, init, [], Fraction(0), {}, [], {})

    def _dfs(self, depth, states, prefix, spent, unused, stores, version) -> Iterator[Candidate]:
        stats = self.stats
        stats.nodes_expanded += 1
        if stats.nodes_expanded & 0x3FF == 0:
            self._check_budget()
        remaining = depth - len(prefix)
        worst, worst_diff, worst_mem = 0, set(), False
        for st, t in zip(states, self.tests):
            d, diff, mdiff = _test_distance(st, t.target, self.fp)
            if d > worst:
                worst, worst_diff, worst_mem = d, diff, mdiff
        if remaining == 0:
            if worst == 0 and spent < self.max_cost:
                yield Candidate(tuple(prefix), spent)
            return
        if self.prune.distance and worst > remaining:
            stats.pruned_distance += 1
            return
        budget_left = self.max_cost - spent
        if self.prune.distance and worst and self.min_cost * worst >= budget_left:
            stats.pruned_distance += 1
            return
        key = None
        if self.prune.memo:
            key = tuple((r, p, frozenset(m.items())) for r, p, m in states)
            for d_rec, c_rec in self.memo.get(key, ()):
                if d_rec >= remaining and c_rec >= budget_left:
                    stats.pruned_memo += 1
                    return
        restrict = self.prune.distance and worst == remaining
        found = False
        regs0, ptrs0, _ = states[0]
        for idx, e in enumerate(self.entries):
            if spent + e.cost >= self.max_cost:
                continue
            if any(regs0[r] is None for r in e.reads):
                continue
            if e.base is not None and ptrs0[e.base] is None:
                continue
            if restrict:
                if e.is_store:
                    if not worst_mem:
                        stats.pruned_distance += 1
                        continue
                elif e.writes not in worst_diff:
                    stats.pruned_distance += 1
                    continue
            if self.prune.redundant:
                if remaining == 1 and e.writes is not None and e.writes not in self.fp.regs:
                    stats.pruned_redundant_def += 1  # dead final write
                    continue
                if e.writes is not None and unused.get(e.writes) and e.writes not in e.reads:
                    stats.pruned_redundant_def += 1
                    continue
                if e.is_store:
                    lo, hi = e.insn.off, e.insn.off + e.insn.width
                    ver = version.get(e.base, 0)
                    if any(b == e.base and v == ver and lo <= o and o + w <= hi for b, v, o, w in stores):
                        stats.pruned_redundant_def += 1
                        continue
            kernel = self.kernels[idx]
            new_states = []
            for regs, ptrs, mem in states:
                out = kernel(regs, ptrs, mem, None)
                if out.__class__ is str:
                    break
                new_states.append(out)
            else:
                n_unused = dict(unused)
                for r in e.reads:
                    n_unused.pop(r, None)
                n_stores = [] if e.is_load else stores
                n_version = version
                if e.writes is not None:
                    n_unused[e.writes] = True
                    n_version = dict(version)
                    n_version[e.writes] = version.get(e.writes, 0) + 1
                elif e.is_store:
                    n_stores = stores + [(e.base, version.get(e.base, 0), e.insn.off, e.insn.width)]
                prefix.append(e.insn)
                for cand in self._dfs(depth, new_states, prefix, spent + e.cost, n_unused, n_stores, n_version):
                    found = True
                    yield cand
                prefix.pop()
        if key is not None and not found:
            self.memo.setdefault(key, []).append((remaining, budget_left))


def iter_candidates(
    original: Sequence[Instruction],
    fp: Footprint,
    types: RegTypeMap | None,
    tests: Sequence[Testcase],
    cost: CostModel | None = None,
    budget: SearchBudget | None = None,
    prune: PruneConfig | None = None,
    stats: SearchStats | None = None,
    layout: Layout = DEFAULT_LAYOUT,
    alphabet: Alphabet | None = None,
    allow_divmod: bool = False,
) -> Iterator[Candidate]:
    """All test-passing candidates cheaper than ``original``, in search order."""
    if not tests:
        raise ValueError("synthesis needs at least one testcase")
    cost = cost or CostModel()
    budget = budget or SearchBudget()
    stats = stats if stats is not None else SearchStats()
    alphabet = alphabet or alphabet_for(original, budget.imm_pool, allow_divmod)
    search = _Search(original, fp, types, tests, cost, budget, prune or PruneConfig(), stats, layout, alphabet)
    start = time.monotonic()
    try:
        for cand in search.run():
            stats.candidates += 1
            stats.elapsed += time.monotonic() - start
            yield cand
            start = time.monotonic()
    finally:
        stats.elapsed += time.monotonic() - start


def synthesize(
    original: Sequence[Instruction],
    fp: Footprint,
    types: RegTypeMap | None,
    tests: Sequence[Testcase],
    cost: CostModel | None = None,
    budget: SearchBudget | None = None,
    prune: PruneConfig | None = None,
    stats: SearchStats | None = None,
    layout: Layout = DEFAULT_LAYOUT,
    alphabet: Alphabet | None = None,
) -> Candidate:
    """First candidate in search order that passes every test; raises
    :class:`NoneFound` or :class:`SynthesisTimeout`."""
    for cand in iter_candidates(original, fp, types, tests, cost, budget, prune, stats, layout, alphabet):
        return cand
    raise NoneFound("no cheaper candidate passes the testcases")
