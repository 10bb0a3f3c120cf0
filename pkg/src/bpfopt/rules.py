"""Abstract rewrite rules: mining, persistence and matching.

A rule is a (pattern, replacement) pair over abstract registers numbered by
first appearance (source operands before destinations; r10 stays r10) with
memory offsets normalized per base register: the first offset used with a base
becomes 0 and later ones are deltas.  Immediates stay concrete.

Matching abstracts a slice the same way, looks rules up by opcode fingerprint,
checks preconditions, de-abstracts the replacement and re-verifies safety and
equivalence on the concrete instance before accepting it.
"""

from __future__ import annotations

import datetime as _dt
import json
import threading
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .equiv import EquivQuery, check_equiv
from .isa import FP, Instruction, IsaError, format_insn, parse_insn
from .machine import DEFAULT_LAYOUT, RegType, parse_type
from .safety import check_safety
from .slicer import Slice
from .smt import SolverSession
from .synth import CostModel, cost_of

__all__ = [
    "CorruptRuleFile",
    "Match",
    "NotAbstractable",
    "RewriteRule",
    "RuleStore",
    "abstract",
    "abstract_insns",
    "deabstract",
    "fingerprint",
    "load_rules",
    "match_and_apply",
    "mine_rule",
    "store_rules",
]


class NotAbstractable(ValueError):
    pass


class CorruptRuleFile(ValueError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


def fingerprint(insns: Sequence[Instruction]) -> str:
    return " ".join(i.mnemonic() for i in insns)


@dataclass(frozen=True)
class _Abstraction:
    insns: tuple[Instruction, ...]
    regmap: dict[int, int]  # concrete -> abstract
    base_first: dict[int, int]  # abstract base -> first concrete offset


def _rename(insn: Instruction, regmap: Mapping[int, int], off: int) -> Instruction:
    dst = regmap[insn.dst]
    src = regmap[insn.src] if (insn.src_reg or insn.cls == "ldx") else 0
    return replace(insn, dst=dst, src=src, off=off, origin=None)


def _order(insn: Instruction) -> list[int]:
    """Registers in naming order: source operand first, then destination/base."""
    if insn.src_reg or insn.cls == "ldx":
        return [insn.src, insn.dst]
    return [insn.dst]


def abstract_insns(insns: Sequence[Instruction], regmap: dict[int, int] | None = None) -> _Abstraction:
    """Rename registers by first appearance and normalize offsets per base."""
    regmap = dict(regmap or {})
    base_first: dict[int, int] = {}
    out = []
    for insn in insns:
        for r in _order(insn):
            if r not in regmap:
                regmap[r] = FP if r == FP else sum(1 for v in regmap.values() if v != FP)
        off = 0
        if insn.is_mem:
            b = regmap[insn.base_reg()]
            first = base_first.setdefault(b, insn.off)
            off = insn.off - first
            if not -(1 << 15) <= off < (1 << 15):
                raise NotAbstractable(f"offset delta {off} does not fit in 16 bits")
        out.append(_rename(insn, regmap, off))
    return _Abstraction(tuple(out), regmap, base_first)


@dataclass(frozen=True)
class RewriteRule:
    pattern: tuple[Instruction, ...]
    replacement: tuple[Instruction, ...]
    refs: tuple[int | None, ...]  # per replacement insn: abstract base whose first offset is added
    dead_regs: frozenset[int] = frozenset()
    dead_stack: frozenset[int] = frozenset()
    entry_types: tuple[tuple[int, str], ...] = ()
    align_residues: tuple[tuple[int, int, int], ...] = ()  # (abstract base, modulus, residue)
    ranges: tuple[tuple[int, int, int], ...] = ()
    cost_delta_size: int = 0
    cost_delta_latency: Fraction = Fraction(0)
    provenance: tuple[tuple[str, str], ...] = ()

    @property
    def key(self) -> tuple[int, str]:
        return len(self.pattern), fingerprint(self.pattern)

    @property
    def identity(self) -> tuple:
        """Pattern plus preconditions; two stored rules never share it."""
        return (self.pattern, self.dead_regs, self.dead_stack, self.entry_types, self.align_residues, self.ranges)

    def cost_delta(self, cost: CostModel) -> Fraction:
        return Fraction(self.cost_delta_size) if cost.mode == "size" else self.cost_delta_latency

    # -- serialization --------------------------------------------------------------
    def to_json(self) -> dict:
        return {
            "pattern": [format_insn(i) for i in self.pattern],
            "replacement": [format_insn(i) for i in self.replacement],
            "preconds": {
                "refs": [r for r in self.refs],
                "dead_regs": sorted(self.dead_regs),
                "dead_stack": sorted(self.dead_stack),
                "entry_types": {str(r): t for r, t in self.entry_types},
                "align": [list(a) for a in self.align_residues],
                "ranges": [list(r) for r in self.ranges],
            },
            "costs": {"size": self.cost_delta_size, "latency": str(self.cost_delta_latency)},
            "provenance": dict(self.provenance),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "RewriteRule":
        pre = obj["preconds"]
        pattern = tuple(parse_insn(t) for t in obj["pattern"])
        replacement = tuple(parse_insn(t) for t in obj["replacement"])
        for i in pattern + replacement:
            if not isinstance(i, Instruction):
                raise ValueError(f"control-flow instruction {i} in a rule")
        refs = tuple(pre.get("refs") or [None] * len(replacement))
        if len(refs) != len(replacement):
            raise ValueError("refs length does not match the replacement")
        for r, t in pre.get("entry_types", {}).items():
            parse_type(t)
        return cls(
            pattern=pattern,
            replacement=replacement,
            refs=refs,
            dead_regs=frozenset(pre.get("dead_regs", [])),
            dead_stack=frozenset(pre.get("dead_stack", [])),
            entry_types=tuple(sorted((int(r), t) for r, t in pre.get("entry_types", {}).items())),
            align_residues=tuple(tuple(a) for a in pre.get("align", [])),
            ranges=tuple(tuple(r) for r in pre.get("ranges", [])),
            cost_delta_size=int(obj["costs"]["size"]),
            cost_delta_latency=Fraction(obj["costs"]["latency"]),
            provenance=tuple(sorted((str(k), str(v)) for k, v in obj.get("provenance", {}).items())),
        )


def abstract(
    orig: Sequence[Instruction],
    rewrite: Sequence[Instruction],
    live_regs: Iterable[int] = (),
    live_stack: Iterable[int] | None = (),
    entry_types: Mapping[int, RegType] | None = None,
    ranges: Mapping[int, tuple[int, int]] | None = None,
    cost: CostModel | None = None,
    origin: str = "",
    timestamp: str | None = None,
) -> RewriteRule:
    """Build an abstract rule from a verified (orig, rewrite) pair."""
    entry_types = entry_types or {}
    ranges = ranges or {}
    pat = abstract_insns(orig)
    regmap = dict(pat.regmap)
    # registers the rewrite introduces must be written before they are read
    for insn in rewrite:
        for r in insn.regs_read():
            if r not in regmap:
                raise NotAbstractable(f"rewrite reads r{r}, which the pattern never mentions")
        w = insn.reg_written()
        if w is not None and w not in regmap:
            regmap[w] = sum(1 for v in regmap.values() if v != FP)
    repl: list[Instruction] = []
    refs: list[int | None] = []
    first_access = next((i for i in pat.insns if i.is_mem), None)
    for insn in rewrite:
        if insn.is_mem:
            b = regmap[insn.base_reg()]
            if b in pat.base_first:
                ref = b
            elif first_access is not None:
                ref = first_access.base_reg()
            else:
                raise NotAbstractable("rewrite accesses memory but the pattern does not")
            off = insn.off - pat.base_first[ref]
            if not -(1 << 15) <= off < (1 << 15):
                raise NotAbstractable(f"offset delta {off} does not fit in 16 bits")
            refs.append(ref)
            repl.append(_rename(insn, regmap, off))
        else:
            refs.append(None)
            repl.append(_rename(insn, regmap, 0))
    inv = {a: c for c, a in regmap.items()}
    live_regs = set(live_regs)
    written = {i.reg_written() for i in orig if i.reg_written() is not None}
    dead = frozenset(regmap[r] for r in written if r not in live_regs)
    dead_stack: frozenset[int] = frozenset()
    if FP in pat.base_first and live_stack is not None:
        first = pat.base_first[FP]
        stored = {i.off + k for i in orig if i.is_store and i.dst == FP for k in range(i.width)}
        dead_stack = frozenset(o - first for o in stored if o not in set(live_stack))
    read_first: dict[int, str] = {}
    seen_written: set[int] = set()
    for insn in orig:
        for r in insn.regs_read():
            if r not in seen_written and regmap[r] not in read_first and r != FP:
                read_first[regmap[r]] = str(entry_types.get(r, RegType("UNINIT")).base())
        w = insn.reg_written()
        if w is not None:
            seen_written.add(w)
    residues = []
    for b, first in sorted(pat.base_first.items()):
        t = entry_types.get(inv[b]) if b != FP else RegType("PTR_TO_STACK", "stack")
        if t is None or not t.is_ptr or t.off is None:
            continue
        widths = [i.width for i in orig if i.is_mem and regmap[i.base_reg()] == b]
        widths += [i.width for i, ref in zip(rewrite, refs) if ref == b]
        mod = max(widths)
        residues.append((b, mod, (t.off + first) % mod))
    rng = tuple(sorted((regmap[r], lo, hi) for r, (lo, hi) in ranges.items() if r in regmap))
    cost = cost or CostModel()
    size_delta = len(orig) - len(rewrite)
    try:
        lat = CostModel("latency", cost.latency_table if cost.mode == "latency" else CostModel("latency").latency_table)
        lat_delta = cost_of(orig, lat) - cost_of(rewrite, lat)
    except KeyError:
        lat_delta = Fraction(0)
    stamp = timestamp if timestamp is not None else _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    return RewriteRule(
        pattern=pat.insns,
        replacement=tuple(repl),
        refs=tuple(refs),
        dead_regs=dead,
        dead_stack=dead_stack,
        entry_types=tuple(sorted(read_first.items())),
        align_residues=tuple(residues),
        ranges=rng,
        cost_delta_size=size_delta,
        cost_delta_latency=lat_delta,
        provenance=(("discovered", stamp), ("origin", origin)),
    )


def mine_rule(s: Slice, rewrite: Sequence[Instruction], cost: CostModel | None = None, origin: str = "", timestamp: str | None = None) -> RewriteRule | None:
    """Rule for an accepted slice rewrite, or ``None`` when it cannot be abstracted."""
    try:
        return abstract(
            s.insns,
            rewrite,
            s.live_out_regs,
            s.live_out_mem,
            s.entry_types,
            s.ranges,
            cost,
            origin=origin,
            timestamp=timestamp,
        )
    except NotAbstractable:
        return None


def deabstract(rule: RewriteRule, abs_: _Abstraction) -> list[Instruction] | None:
    inv = {a: c for c, a in abs_.regmap.items()}
    out = []
    for insn, ref in zip(rule.replacement, rule.refs):
        regs = {insn.dst} | ({insn.src} if (insn.src_reg or insn.cls == "ldx") else set())
        for a in regs:
            if a not in inv:
                return None  # fresh register with no concrete counterpart
        off = 0
        if insn.is_mem:
            if ref not in abs_.base_first:
                return None
            off = abs_.base_first[ref] + insn.off
            if not -(1 << 15) <= off < (1 << 15):
                return None
        src = inv[insn.src] if (insn.src_reg or insn.cls == "ldx") else 0
        try:
            out.append(replace(insn, dst=inv[insn.dst], src=src, off=off))
        except IsaError:
            return None
    return out


# -- store --------------------------------------------------------------------------


class RuleStore:
    """Rules indexed by (pattern length, opcode fingerprint)."""

    def __init__(self, rules: Iterable[RewriteRule] = ()):
        self.rules: list[RewriteRule] = []
        self.index: dict[tuple[int, str], list[int]] = {}
        self._ids: dict[tuple, int] = {}
        self._lock = threading.Lock()
        for r in rules:
            self.add(r)

    def __len__(self) -> int:
        return len(self.rules)

    def __iter__(self):
        return iter(self.rules)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RuleStore):
            return NotImplemented
        return [r.to_json() for r in self.rules] == [r.to_json() for r in other.rules]

    def add(self, rule: RewriteRule) -> bool:
        """Insert ``rule``; returns ``False`` for duplicates.  A rule with the same
        pattern and preconditions but a larger size gain replaces the stored one."""
        with self._lock:
            k = self._ids.get(rule.identity)
            if k is not None:
                old = self.rules[k]
                if (rule.cost_delta_size, rule.cost_delta_latency) > (old.cost_delta_size, old.cost_delta_latency):
                    self.rules[k] = rule
                    return True
                return False
            self._ids[rule.identity] = len(self.rules)
            self.index.setdefault(rule.key, []).append(len(self.rules))
            self.rules.append(rule)
            return True

    def lookup(self, pattern: Sequence[Instruction]) -> list[RewriteRule]:
        key = (len(pattern), fingerprint(pattern))
        return [self.rules[k] for k in self.index.get(key, [])]

    def save(self, path: str | Path) -> None:
        with self._lock:
            lines = [json.dumps(r.to_json(), sort_keys=True) for r in self.rules]
        Path(path).write_text("".join(line + "\n" for line in lines))

    @classmethod
    def load(cls, path: str | Path) -> "RuleStore":
        text = Path(path).read_text()
        store = cls()
        lines = text.split("\n")
        for lineno, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rule = RewriteRule.from_json(obj)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, IsaError) as exc:
                raise CorruptRuleFile(lineno, str(exc) or type(exc).__name__) from None
            store.add(rule)
        if text and not text.endswith("\n"):
            raise CorruptRuleFile(len(lines), "file is truncated (missing final newline)")
        return store


def store_rules(store: RuleStore, path: str | Path) -> None:
    store.save(path)


def load_rules(path: str | Path) -> RuleStore:
    return RuleStore.load(path)


# -- matching -----------------------------------------------------------------------


@dataclass
class Match:
    rule: RewriteRule
    insns: list[Instruction]


def _preconditions_hold(rule: RewriteRule, s: Slice, abs_: _Abstraction) -> bool:
    inv = {a: c for c, a in abs_.regmap.items()}
    for a in rule.dead_regs:
        if a not in inv or inv[a] in s.live_out_regs:
            return False
    if rule.dead_stack:
        if s.live_out_mem is None or FP not in abs_.base_first:
            return False
        first = abs_.base_first[FP]
        if any(first + d in s.live_out_mem for d in rule.dead_stack):
            return False
    for a, t in rule.entry_types:
        if a not in inv:
            return False
        have = s.entry_types.get(inv[a], RegType("UNINIT"))
        if str(have.base()) != t:
            return False
    for b, mod, res in rule.align_residues:
        if b == FP:
            t = RegType("PTR_TO_STACK", "stack")
        else:
            if b not in inv:
                return False
            t = s.entry_types.get(inv[b])
        if t is None or not t.is_ptr or t.off is None or b not in abs_.base_first:
            return False
        if (t.off + abs_.base_first[b]) % mod != res:
            return False
    for a, lo, hi in rule.ranges:
        if a not in inv:
            return False
        have = s.ranges.get(inv[a])
        if have is None or have[0] < lo or have[1] > hi:
            return False
    return True


def _exactness(rule: RewriteRule, s: Slice, abs_: _Abstraction) -> int:
    written = {i.reg_written() for i in s.insns if i.reg_written() is not None}
    dead = {abs_.regmap[r] for r in written if r not in s.live_out_regs}
    return 1 if dead == set(rule.dead_regs) else 0


def match_and_apply(
    s: Slice,
    store: RuleStore,
    cost: CostModel | None = None,
    session: SolverSession | None = None,
    solver_timeout: float = 10.0,
) -> Match | None:
    """Rewrite ``s`` with the best applicable stored rule, or ``None``."""
    cost = cost or CostModel()
    try:
        abs_ = abstract_insns(s.insns)
    except NotAbstractable:
        return None
    candidates = []
    for order, rule in enumerate(store.lookup(abs_.insns)):
        if rule.pattern != abs_.insns:
            continue
        if not _preconditions_hold(rule, s, abs_):
            continue
        candidates.append((-rule.cost_delta(cost), -_exactness(rule, s, abs_), -len(rule.dead_regs), order, rule))
    candidates.sort(key=lambda c: c[:4])
    original_cost = cost_of(s.insns, cost)
    for *_, rule in candidates:
        concrete = deabstract(rule, abs_)
        if concrete is None:
            continue
        try:
            if cost_of(concrete, cost) >= original_cost:
                continue
        except KeyError:
            continue
        layout = s.context.layout if s.context else DEFAULT_LAYOUT
        if not check_safety(concrete, s.entry_types, layout).ok:
            continue
        q = EquivQuery(s.insns, concrete, s.footprint, s.entry_types, s.ranges, solver_timeout, layout)
        if check_equiv(q, session).verdict == "Equivalent":
            return Match(rule, concrete)
    return None

