"""Pipeline orchestration: CEGIS per slice, operating modes, whole programs."""

from __future__ import annotations

import json
import random
import time
import zlib
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

from .equiv import EQUIVALENT, NOT_EQUIVALENT, EquivQuery, check_equiv
from .isa import ControlInsn, Instruction, Program, format_insn
from .machine import (
    DEFAULT_LAYOUT,
    Footprint,
    Layout,
    MachineState,
    RegType,
    project,
    random_state,
    run,
)
from .rules import RuleStore, match_and_apply, mine_rule
from .safety import check_safety
from .slicer import (
    Slice,
    block_entry_types,
    extract_slices,
    program_liveness,
    recompose_detailed,
)
from .smt import SolverError, SolverSession
from .synth import (
    Alphabet,
    CostModel,
    NoneFound,
    PruneConfig,
    SearchBudget,
    SearchStats,
    SynthesisTimeout,
    Testcase,
    cost_of,
    iter_candidates,
    make_testcase,
    make_tests,
)

__all__ = [
    "BlockReport",
    "OptimizationReport",
    "PipelineConfig",
    "SliceOutcome",
    "SliceReport",
    "cegis_optimize_slice",
    "differential_check",
    "optimize_block",
    "optimize_program",
]

MODES = ("offline", "online", "hybrid")


@dataclass
class PipelineConfig:
    mode: str = "offline"
    window: int = 6
    synth_timeout: float = 600.0
    cost: CostModel = field(default_factory=CostModel)
    rules_in: str | None = None
    rules_out: str | None = None
    solver: str | None = None
    solver_timeout: float = 10.0
    seed: int = 0
    report: str = "text"
    tests: int = 4
    diff_states: int = 1000
    allow_divmod: bool = False
    prune: PruneConfig = field(default_factory=PruneConfig)
    max_nodes: int | None = None
    liveness: Mapping[int, Footprint] | None = None
    entry_types: Mapping[int, Mapping[int, RegType]] | None = None
    ranges: Mapping[int, tuple[int, int]] = field(default_factory=dict)
    timestamp: str | None = None
    layout: Layout = DEFAULT_LAYOUT

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {', '.join(MODES)}")
        if self.window < 1:
            raise ValueError("window must be at least 1")
        if self.mode == "online" and self.rules_in is not None and not Path(self.rules_in).is_file():
            raise ValueError(f"rule file {self.rules_in!r} is not readable")


# -- solver session handling ---------------------------------------------------------


class _Solver:
    """Lazily started, restartable solver session."""

    def __init__(self, cmd: str | None, timeout: float):
        self.cmd = cmd
        self.timeout = timeout
        self.session: SolverSession | None = None

    def get(self) -> SolverSession:
        if self.session is None or self.session.proc.poll() is not None:
            self.session = SolverSession(self.cmd, timeout=self.timeout)
        return self.session

    def close(self) -> None:
        if self.session is not None:
            self.session.close()
            self.session = None


# -- CEGIS ------------------------------------------------------------------------


@dataclass
class SliceOutcome:
    status: str  # "optimized" or "unchanged"
    insns: tuple[Instruction, ...]
    verdict: str = ""
    source: str = ""  # "synth", "rule" or ""
    note: str = ""
    stats: SearchStats = field(default_factory=SearchStats)
    unsafe: list[tuple[tuple[Instruction, ...], str]] = field(default_factory=list)

    @property
    def optimized(self) -> bool:
        return self.status == "optimized"


def _slice_seed(seed: int, s: Slice) -> int:
    text = "|".join(format_insn(i) for i in s.insns)
    return seed ^ zlib.crc32(text.encode())


def cegis_optimize_slice(
    s: Slice,
    config: PipelineConfig | None = None,
    session: SolverSession | None = None,
    stats: SearchStats | None = None,
    tests: Sequence[Testcase] | None = None,
    alphabet: Alphabet | None = None,
) -> SliceOutcome:
    """Synthesize, check safety, prove equivalence; counterexamples become tests."""
    config = config or PipelineConfig()
    stats = stats if stats is not None else SearchStats()
    solver = _Solver(config.solver, config.solver_timeout)
    if session is not None:
        solver.session = session
    layout = config.layout
    fp = s.footprint
    rng = random.Random(_slice_seed(config.seed, s))
    tests = list(tests) if tests is not None else make_tests(s.insns, s.entry_types, rng, config.tests, s.ranges, layout)
    if not tests:
        return SliceOutcome("unchanged", s.insns, note="no valid testcase could be generated", stats=stats)
    budget = SearchBudget(timeout=config.synth_timeout, max_nodes=config.max_nodes)
    rejected: set[tuple[Instruction, ...]] = set()
    unsafe: list[tuple[tuple[Instruction, ...], str]] = []
    deadline = time.monotonic() + config.synth_timeout
    try:
        while True:
            budget.timeout = max(0.0, deadline - time.monotonic())
            restart = False
            for cand in iter_candidates(
                s.insns, fp, s.entry_types, tests, config.cost, budget, config.prune, stats, layout,
                alphabet=alphabet, allow_divmod=config.allow_divmod,
            ):
                if cand.insns in rejected:
                    continue
                verdict = check_safety(cand.insns, s.entry_types, layout)
                if not verdict.ok:
                    stats.rejected_unsafe += 1
                    rejected.add(cand.insns)
                    unsafe.append((cand.insns, verdict.violations[0].rule))
                    continue
                q = EquivQuery(s.insns, cand.insns, fp, s.entry_types, s.ranges, config.solver_timeout, layout)
                result = check_equiv(q, solver.get())
                if result.verdict == EQUIVALENT:
                    return SliceOutcome("optimized", cand.insns, EQUIVALENT, "synth", stats=stats, unsafe=unsafe)
                if result.verdict == NOT_EQUIVALENT:
                    t = make_testcase(s.insns, result.counterexample.state, layout)
                    if t is None:
                        rejected.add(cand.insns)
                        continue
                    tests.append(t)
                    stats.cegis_rounds += 1
                    restart = True
                    break
                rejected.add(cand.insns)  # solver gave up: never accept unproven
            if not restart:
                return SliceOutcome("unchanged", s.insns, note="no cheaper equivalent candidate", stats=stats, unsafe=unsafe)
    except SynthesisTimeout as exc:
        return SliceOutcome("unchanged", s.insns, note=str(exc), stats=stats, unsafe=unsafe)
    except NoneFound:
        return SliceOutcome("unchanged", s.insns, stats=stats, unsafe=unsafe)
    finally:
        if session is None:
            solver.close()


# -- reporting ----------------------------------------------------------------------


@dataclass
class SliceReport:
    label: str
    positions: list[int]
    before: list[str]
    after: list[str]
    status: str
    source: str = ""
    verdict: str = ""
    note: str = ""
    placed: bool = True

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class BlockReport:
    index: int
    before: list[str]
    after: list[str]
    slices: list[SliceReport] = field(default_factory=list)
    note: str = ""

    def as_dict(self) -> dict:
        d = dict(self.__dict__)
        d["slices"] = [s.as_dict() for s in self.slices]
        return d


@dataclass
class OptimizationReport:
    mode: str
    cost_mode: str
    blocks: list[BlockReport] = field(default_factory=list)
    insns_before: int = 0
    insns_after: int = 0
    latency_before: Fraction = Fraction(0)
    latency_after: Fraction = Fraction(0)
    rules_applied: int = 0
    rules_mined: int = 0
    stats: SearchStats = field(default_factory=SearchStats)

    @property
    def reduction(self) -> float:
        before = sum(len(b.before) for b in self.blocks)
        after = sum(len(b.after) for b in self.blocks)
        return (before - after) / before if before else 0.0

    def as_dict(self, timings: bool = False) -> dict:
        stats = self.stats.as_dict()
        if not timings:
            stats.pop("elapsed")
        return {
            "mode": self.mode,
            "cost_mode": self.cost_mode,
            "insns_before": self.insns_before,
            "insns_after": self.insns_after,
            "size_reduction": round(self.reduction, 6),
            "latency_before": str(self.latency_before),
            "latency_after": str(self.latency_after),
            "rules_applied": self.rules_applied,
            "rules_mined": self.rules_mined,
            "stats": stats,
            "blocks": [b.as_dict() for b in self.blocks],
        }

    def to_json(self, timings: bool = False) -> str:
        return json.dumps(self.as_dict(timings), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [
            f"mode: {self.mode}  cost: {self.cost_mode}",
            f"instructions: {self.insns_before} -> {self.insns_after} ({self.reduction:.2%} smaller)",
            f"latency estimate: {self.latency_before} -> {self.latency_after}",
            f"rules applied: {self.rules_applied}  rules mined: {self.rules_mined}",
            "search: " + ", ".join(f"{k}={v}" for k, v in self.stats.as_dict().items() if k != "elapsed"),
        ]
        for b in self.blocks:
            changed = [s for s in b.slices if s.status == "optimized"]
            lines.append(f"block {b.index}: {len(b.before)} -> {len(b.after)}" + (f"  [{b.note}]" if b.note else ""))
            for s in changed:
                lines.append(f"  slice {s.label} via {s.source} ({s.verdict})" + ("" if s.placed else " not placed"))
                lines.extend(f"    - {t}" for t in s.before)
                lines.extend(f"    + {t}" for t in s.after)
        return "\n".join(lines)


# -- blocks -----------------------------------------------------------------------


def differential_check(
    before: Sequence[Instruction],
    after: Sequence[Instruction],
    live: Footprint,
    types: Mapping[int, RegType],
    n: int,
    seed: int = 0,
    ranges: Mapping[int, tuple[int, int]] | None = None,
    layout: Layout = DEFAULT_LAYOUT,
) -> MachineState | None:
    """Run both sequences on ``n`` random states; return a disagreeing input."""
    rng = random.Random(seed)
    for _ in range(n):
        s0 = random_state(types, rng, ranges, layout)
        sink: dict = {}

        def fill(key, sink=sink):
            v = sink.get(key)
            if v is None:
                v = sink[key] = rng.getrandbits(8)
            return v

        out_a = run(before, s0, layout, fill)
        if out_a is None:
            continue
        if run(after, MachineState(s0.regs, s0.ptrs, dict(sink)), layout, fill) is None:
            return MachineState(s0.regs, s0.ptrs, dict(sink))
        # both runs must see every byte either one reads, or lazily filled
        # bytes show up in only one final image
        s_in = MachineState(s0.regs, s0.ptrs, dict(sink))
        out_a = run(before, s_in, layout, fill)
        out_b = run(after, s_in, layout, fill)
        if out_b is None or project(out_a, live) != project(out_b, live):
            return s_in
    return None


def _cost(insns: Sequence[Instruction], cost: CostModel) -> Fraction:
    try:
        return cost_of(insns, cost)
    except KeyError:
        return Fraction(len(insns))


def optimize_block(
    block: Sequence[Instruction],
    live: Footprint,
    types: Mapping[int, RegType],
    config: PipelineConfig,
    store: RuleStore,
    solver: _Solver,
    index: int = 0,
    stats: SearchStats | None = None,
    origin: str = "",
) -> tuple[list[Instruction], BlockReport, int, int]:
    """Returns (new block, report, rules applied, rules mined)."""
    stats = stats if stats is not None else SearchStats()
    report = BlockReport(index, [format_insn(i) for i in block], [])
    applied = mined = 0
    if not block:
        return [], report, 0, 0
    slices = extract_slices(block, live, types, config.window, config.ranges, config.layout)
    outcomes: list[SliceOutcome] = []
    for s in slices:
        out: SliceOutcome | None = None
        try:
            if config.mode in ("online", "hybrid") and len(store):
                m = match_and_apply(s, store, config.cost, solver.get(), config.solver_timeout)
                if m is not None:
                    out = SliceOutcome("optimized", tuple(m.insns), EQUIVALENT, "rule")
            if out is None and config.mode in ("offline", "hybrid"):
                out = cegis_optimize_slice(s, config, solver.get(), stats)
                if out.optimized:
                    rule = mine_rule(s, out.insns, config.cost, origin, config.timestamp)
                    if rule is not None and rule.cost_delta_size >= 0 and store.add(rule):
                        mined += 1
        except (SolverError, OSError) as exc:
            out = SliceOutcome("unchanged", s.insns, note=f"internal error: {exc}")
        if out is None:
            out = SliceOutcome("unchanged", s.insns)
        outcomes.append(out)

    def build(enabled: Sequence[bool]):
        units = [s.with_replacement(o.insns if (o.optimized and on) else None) for s, o, on in zip(slices, outcomes, enabled)]
        return recompose_detailed(units)

    enabled = [o.optimized for o in outcomes]
    rec = build(enabled)
    seed = config.seed ^ (index * 7919)
    bad = differential_check(block, rec.insns, live, types, config.diff_states, seed, config.ranges, config.layout)
    if bad is not None:
        report.note = "internal error: block differential check failed; accepting slices one at a time"
        enabled = [False] * len(slices)
        rec = build(enabled)
        for k, o in enumerate(outcomes):
            if not o.optimized:
                continue
            trial = list(enabled)
            trial[k] = True
            r = build(trial)
            if differential_check(block, r.insns, live, types, config.diff_states, seed, config.ranges, config.layout) is None:
                enabled, rec = trial, r
    new = list(rec.insns) if any(enabled) else list(block)  # nothing rewritten: keep the block verbatim
    if _cost(new, config.cost) > _cost(block, config.cost):
        new, report.note = list(block), "reverted: recomposed block was not cheaper"
        enabled = [False] * len(slices)
    for k, (s, o) in enumerate(zip(slices, outcomes)):
        placed = enabled[k] and rec.placed[k] if o.optimized else True
        if o.optimized and placed and o.source == "rule":
            applied += 1
        report.slices.append(
            SliceReport(
                s.label(), list(s.positions), [format_insn(i) for i in s.insns],
                [format_insn(i) for i in o.insns], o.status, o.source, o.verdict, o.note, placed,
            )
        )
    report.after = [format_insn(i) for i in new]
    return new, report, applied, mined


# -- programs -----------------------------------------------------------------------


def _relink(p: Program, new_blocks: list[list[Instruction]]) -> Program:
    """Splice optimized blocks back and retarget jump offsets."""
    old = p.instructions
    starts = {start: k for k, (start, _) in enumerate(p.blocks)}
    new_pc: dict[int, int] = {}
    out: list = []
    jumps: list[tuple[int, int]] = []  # (new index, old pc)
    pc = 0
    while pc < len(old):
        new_pc[pc] = len(out)
        if pc in starts:
            k = starts[pc]
            out.extend(new_blocks[k])
            pc = p.blocks[k][1]
            continue
        if isinstance(old[pc], ControlInsn) and old[pc].kind in ("ja", "jcond"):
            jumps.append((len(out), pc))
        out.append(old[pc])
        pc += 1
    new_pc[len(old)] = len(out)
    for k, old_pc in jumps:
        target = old_pc + 1 + out[k].off
        out[k] = replace(out[k], off=new_pc[target] - (k + 1))
    return Program.from_instructions(out)


def optimize_program(
    p: Program, config: PipelineConfig | None = None, store: RuleStore | None = None, origin: str = ""
) -> tuple[Program, OptimizationReport]:
    config = config or PipelineConfig()
    if store is None:
        store = RuleStore.load(config.rules_in) if config.rules_in else RuleStore()
    solver = _Solver(config.solver, config.solver_timeout)
    if config.mode != "online" or len(store):
        solver.get()  # fail fast with SolverUnavailable
    report = OptimizationReport(config.mode, config.cost.mode)
    live = program_liveness(p, config.layout, config.liveness)
    types = block_entry_types(p, config.layout)
    if config.entry_types:
        for k, t in config.entry_types.items():
            if k < len(types):
                types[k] = {**types[k], **t}
    new_blocks = []
    try:
        for k, (start, end) in enumerate(p.blocks):
            block = list(p.instructions[start:end])
            new, br, applied, mined = optimize_block(block, live[k], types[k], config, store, solver, k, report.stats, origin)
            new_blocks.append(new)
            report.blocks.append(br)
            report.rules_applied += applied
            report.rules_mined += mined
    finally:
        solver.close()
    out = _relink(p, new_blocks)
    report.insns_before = len(p.instructions)
    report.insns_after = len(out.instructions)
    lat = config.cost if config.cost.mode == "latency" else CostModel("latency")
    straight_before = [i for i in p.instructions if isinstance(i, Instruction)]
    straight_after = [i for i in out.instructions if isinstance(i, Instruction)]
    report.latency_before = _cost(straight_before, lat)
    report.latency_after = _cost(straight_after, lat)
    if config.rules_out:
        store.save(config.rules_out)
    return out, report
