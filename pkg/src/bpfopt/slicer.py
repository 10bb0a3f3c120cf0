"""Slice extraction and recomposition for straight-line blocks.

Extraction follows the per-destination computation-chain construction: every
instruction's slice absorbs the slices of the registers and memory it reads,
stores are keyed by a memory identifier, and stores touching adjacent or
overlapping bytes of one region are merged.  Slices longer than the window are
cut into windows.

Recomposition places optimized slices back into the block.  Each candidate
placement is validated by reaching definitions: every retained read and every
live location at block end must see the same definitions as in the original
block, and values the replacement is free to clobber must never be observed.
The accepted order is then emitted as a topological order of the def-use graph.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

from .isa import FP, NUM_REGS, ControlInsn, Instruction, Program
from .machine import (
    DEFAULT_LAYOUT,
    PTR_TO_CTX,
    PTR_TO_STACK,
    SCALAR,
    STACK,
    UNINIT,
    UNKNOWN,
    Footprint,
    Layout,
    RegType,
    RegTypeMap,
    normalize_types,
    parse_footprint,
    parse_type,
)
from .safety import analyze

__all__ = [
    "BlockContext",
    "CyclicDependency",
    "MalformedBlock",
    "Recomposition",
    "Slice",
    "block_entry_types",
    "dependency_order",
    "extract_slices",
    "insn_locations",
    "mem_id",
    "parse_liveness",
    "program_liveness",
    "recompose",
    "recompose_detailed",
]

ENTRY = "entry"


class MalformedBlock(ValueError):
    pass


class CyclicDependency(RuntimeError):
    pass


def mem_id(base: int, off: int, width: int) -> int:
    """Packed store identifier: offset in the high bits, then width, then base."""
    return (off << 8) | (width << 4) | base


# -- locations ----------------------------------------------------------------------
#
# A location is ("r", n) for a register or ("m", region, off) for one memory byte.
# ``off=None`` is an unknown offset inside ``region``; region "*" is an unknown
# region (dereference of a non-pointer).

Loc = tuple


def _access_locs(insn: Instruction, t: RegType) -> list[Loc]:
    if not t.is_ptr:
        return [("m", "*", None)]
    if t.off is None:
        return [("m", t.region, None)]
    a = t.off + insn.off
    return [("m", t.region, a + k) for k in range(insn.width)]


def insn_locations(insn: Instruction, types: Mapping[int, RegType]) -> tuple[list[Loc], list[Loc]]:
    """Locations read and written by ``insn`` given the register types before it."""
    reads: list[Loc] = [("r", r) for r in insn.regs_read()]
    writes: list[Loc] = []
    if insn.is_mem:
        m = _access_locs(insn, types[insn.base_reg()])
        if insn.is_load:
            reads += m
            writes.append(("r", insn.dst))
        else:
            writes += m
    else:
        writes.append(("r", insn.dst))
    return reads, writes


def _may_alias(a: Loc, b: Loc) -> bool:
    if a[0] != b[0]:
        return False
    if a[0] == "r":
        return a[1] == b[1]
    if a[1] != b[1] and "*" not in (a[1], b[1]):
        return False
    return a[2] is None or b[2] is None or a[2] == b[2] or "*" in (a[1], b[1])


@dataclass(frozen=True)
class _Tag:
    pos: int
    unit: int | None = None
    poison: bool = False


class _Reach:
    """Reaching-definition state over registers and memory bytes."""

    def __init__(self) -> None:
        self.regs: dict[int, object] = {}
        self.mem: list[tuple[object, str, int | None]] = []

    def read(self, loc: Loc) -> set:
        if loc[0] == "r":
            return {self.regs.get(loc[1], ENTRY)}
        _, region, off = loc
        out: set = set()
        for tag, wr, wo in reversed(self.mem):
            if region != "*" and wr != "*" and wr != region:
                continue
            if off is None or wo is None or wo == off or "*" in (region, wr):
                out.add(tag)
                if off is not None and wo == off and wr == region:
                    return out
        out.add(ENTRY)
        return out

    def write(self, loc: Loc, tag: object) -> None:
        if loc[0] == "r":
            self.regs[loc[1]] = tag
        else:
            self.mem.append((tag, loc[1], loc[2]))


def _end_locations(written: Iterable[Loc], live: Footprint) -> list[Loc]:
    out = {("r", r) for r in live.regs}
    for loc in written:
        if loc[0] != "m":
            continue
        region, off = loc[1], loc[2]
        if region == STACK and off is not None and not live.mem_live((STACK, off)):
            continue
        if region == STACK and off is None and live.stack is not None and not live.stack:
            continue
        if region != STACK and not live.other_mem:
            continue
        out.add(loc)
    return sorted(out, key=repr)


# -- slices -------------------------------------------------------------------------


@dataclass
class BlockContext:
    """Everything recomposition needs to know about the source block."""

    block: tuple[Instruction, ...]
    live_out: Footprint
    entry_types: dict[int, RegType]
    layout: Layout
    types: list[dict[int, RegType]]
    reads: list[list[tuple[Loc, frozenset]]]
    writes: list[list[Loc]]
    end: dict[Loc, frozenset]


@dataclass
class Slice:
    """One optimization unit.

    ``insns`` are the original instructions in block order and ``positions``
    their block-relative indices.  ``id`` is a register number for register
    slices and a packed memory identifier for store slices.
    """

    id: int
    kind: str
    insns: tuple[Instruction, ...]
    positions: tuple[int, ...]
    live_out_regs: frozenset[int]
    live_out_mem: frozenset[int]
    entry_types: dict[int, RegType]
    window: tuple[int, int] = (0, 1)
    ranges: dict[int, tuple[int, int]] = field(default_factory=dict)
    last_writers: dict[Loc, int] = field(default_factory=dict, repr=False)
    context: BlockContext | None = field(default=None, repr=False, compare=False)
    replacement: tuple[Instruction, ...] | None = None

    @property
    def footprint(self) -> Footprint:
        return Footprint(self.live_out_regs, self.live_out_mem, True)

    @property
    def anchor(self) -> int:
        return self.positions[-1]

    def label(self) -> str:
        if self.kind == "reg":
            return f"r{self.id}"
        return f"mem#{self.id}"

    def with_replacement(self, insns: Sequence[Instruction] | None) -> "Slice":
        return replace(self, replacement=None if insns is None else tuple(insns))


def _analyze_block(block: Sequence[Instruction], live: Footprint, types: RegTypeMap | None, layout: Layout) -> BlockContext:
    entry = normalize_types(types)
    states, _ = analyze(block, entry, layout)
    reach = _Reach()
    reads, writes = [], []
    for p, insn in enumerate(block):
        r, w = insn_locations(insn, states[p])
        reads.append([(loc, frozenset(reach.read(loc))) for loc in r])
        for loc in w:
            reach.write(loc, p)
        writes.append(w)
    all_written = [loc for w in writes for loc in w]
    end = {loc: frozenset(reach.read(loc)) for loc in _end_locations(all_written, live)}
    return BlockContext(tuple(block), live, entry, layout, states, reads, writes, end)


def _touch(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return a[0] <= b[1] and b[0] <= a[1]


def extract_slices(
    block: Sequence[Instruction],
    block_live_out: Footprint,
    entry_types: RegTypeMap | None = None,
    window: int = 6,
    ranges: Mapping[int, tuple[int, int]] | None = None,
    layout: Layout = DEFAULT_LAYOUT,
) -> list[Slice]:
    if window < 1:
        raise ValueError("window must be positive")
    for i, insn in enumerate(block):
        if not isinstance(insn, Instruction):
            raise MalformedBlock(f"control-flow instruction at block index {i}: {insn}")
    ctx = _analyze_block(block, block_live_out, entry_types, layout)

    reg_map: dict[int, frozenset[int]] = {}
    # store entries: [region, (lo, hi) | None, slice, first store position]
    stores: list[list] = []
    for i, insn in enumerate(block):
        deps: set[int] = {i}
        for r in insn.regs_read():
            deps |= reg_map.get(r, frozenset())
        mem = [loc for loc in ctx.reads[i] if loc[0][0] == "m"]
        if mem:
            for loc, _ in mem:
                for region, span, s, _first in stores:
                    if _may_alias(loc, ("m", region, None if span is None else span[0])) and (
                        span is None or loc[2] is None or span[0] <= loc[2] < span[1] or "*" in (region, loc[1])
                    ):
                        deps |= s
        frozen = frozenset(deps)
        if insn.is_store:
            w = ctx.writes[i][0]
            region = w[1]
            span = None if w[2] is None else (w[2], w[2] + insn.width)
            stores = [e for e in stores if not (e[0] == region and e[1] == span and span is not None)]
            stores.append([region, span, frozen, i])
        else:
            reg_map[insn.dst] = frozen

    candidates: list[tuple[str, int, frozenset[int]]] = []
    for r in sorted(reg_map):
        if r in block_live_out.regs:
            candidates.append(("reg", r, reg_map[r]))
    # merge stores whose byte spans touch or overlap within one region
    groups: list[list] = []
    for region, span, s, first in stores:
        merged = [g for g in groups if g[0] in (region, "*") or region == "*"
                  if span is None or any(sp is None or _touch(sp, span) for sp in g[1])]
        keep = [g for g in groups if g not in merged]
        new = [region, [span], set(s), first]
        for g in merged:
            new[1].extend(g[1])
            new[2] |= g[2]
            new[3] = min(new[3], g[3])
        keep.append(new)
        groups = keep
    for region, spans, s, first in sorted(groups, key=lambda g: g[3]):
        live = region != STACK or any(
            span is None or any(block_live_out.mem_live((STACK, o)) for o in range(*span)) for span in spans
        )
        if not live:
            continue
        st = block[first]
        candidates.append(("mem", mem_id(st.dst, st.off, st.width), frozenset(s)))

    # drop subsumed slices
    kept: list[tuple[str, int, frozenset[int]]] = []
    for k, c in enumerate(candidates):
        if any(c[2] < o[2] or (c[2] == o[2] and j < k) for j, o in enumerate(candidates) if j != k):
            continue
        kept.append(c)
    kept.sort(key=lambda c: max(c[2]))

    units: list[Slice] = []
    for kind, ident, positions in kept:
        order = sorted(positions)
        chunks = [order[k : k + window] for k in range(0, len(order), window)]
        for w_idx, chunk in enumerate(chunks):
            units.append(
                Slice(
                    id=ident,
                    kind=kind,
                    insns=tuple(block[p] for p in chunk),
                    positions=tuple(chunk),
                    live_out_regs=frozenset(),
                    live_out_mem=frozenset(),
                    entry_types={},
                    window=(w_idx, len(chunks)),
                    context=ctx,
                )
            )
    membership: dict[int, list[int]] = {}
    for u_idx, u in enumerate(units):
        for p in u.positions:
            membership.setdefault(p, []).append(u_idx)
    for u_idx, u in enumerate(units):
        _finish_unit(u, u_idx, units, membership, ctx, dict(ranges or {}))
    return units


def _finish_unit(u: Slice, u_idx: int, units, membership, ctx: BlockContext, ranges) -> None:
    pos = set(u.positions)
    last: dict[Loc, int] = {}
    for p in u.positions:
        for loc in ctx.writes[p]:
            last[loc] = p
    needed: set[Loc] = set()
    for loc, p in last.items():
        if loc[0] == "m" and loc[1] != STACK:
            continue
        if p in ctx.end.get(loc, ()):
            needed.add(loc)
            continue
        for q, rds in enumerate(ctx.reads):
            if q in pos or q not in membership:
                continue
            if not any(p not in units[v].positions for v in membership[q]):
                continue
            if any(_may_alias(loc, l2) and p in s for l2, s in rds):
                needed.add(loc)
                break
    # registers the unit leaves untouched but that stay live afterwards must be
    # preserved by a replacement
    preserve = set()
    for r in range(FP):
        if ("r", r) in last:
            continue
        for q in range(u.anchor + 1, len(ctx.block)):
            if any(l2 == ("r", r) for l2, _ in ctx.reads[q]):
                preserve.add(r)
                break
            if ("r", r) in ctx.writes[q]:
                break
        else:
            if ("r", r) in ctx.end:
                preserve.add(r)
    regs = frozenset(loc[1] for loc in needed if loc[0] == "r") | frozenset(preserve)
    stack = frozenset(loc[2] for loc in needed if loc[0] == "m" and loc[2] is not None)
    if any(loc[0] == "m" and loc[2] is None for loc in needed):
        stack = None  # unknown stack offsets: observe the whole stack
    types: dict[int, RegType] = {FP: PTR_TO_STACK}
    rng: dict[int, tuple[int, int]] = {}
    written: set[int] = set()
    for p in u.positions:
        insn = ctx.block[p]
        for r in insn.regs_read():
            if r not in written and r not in types:
                types[r] = ctx.types[p][r]
                reach = dict(ctx.reads[p]).get(("r", r))
                if r in ranges and reach == frozenset([ENTRY]):
                    rng[r] = ranges[r]
        w = insn.reg_written()
        if w is not None:
            written.add(w)
    u.live_out_regs = regs
    u.live_out_mem = stack
    u.entry_types = types
    u.ranges = rng
    u.last_writers = last


# -- recomposition ------------------------------------------------------------------


@dataclass
class _Node:
    insns: tuple[Instruction, ...]
    ids: tuple[int, ...]
    unit: int | None = None
    clobbers: tuple[Loc, ...] = ()

    @property
    def key(self) -> int:
        return max(self.ids)


@dataclass
class Recomposition:
    insns: list[Instruction]
    placed: list[bool]


def _clobbers(s: Slice, ctx: BlockContext) -> tuple[Loc, ...]:
    """Locations the replacement writes that the original unit does not."""
    states, _ = analyze(s.replacement, s.entry_types, ctx.layout)
    orig = {loc for p in s.positions for loc in ctx.writes[p]}
    out = []
    for k, insn in enumerate(s.replacement):
        for loc in insn_locations(insn, states[k])[1]:
            if loc in orig or (loc[0] == "m" and loc[1] not in (STACK, "*")):
                continue
            out.append(loc)
    return tuple(dict.fromkeys(out))


def _valid(seq: list[_Node], ctx: BlockContext, units: list[Slice]) -> bool:
    flat = [i for n in seq for i in n.insns]
    states, _ = analyze(flat, ctx.entry_types, ctx.layout)
    reach = _Reach()
    k = 0
    written: list[Loc] = []
    for node in seq:
        unit = units[node.unit] if node.unit is not None else None
        for insn, p in zip(node.insns, node.ids):
            r, w = insn_locations(insn, states[k])
            k += 1
            expected = ctx.reads[p]
            if len(r) != len(expected):
                return False
            for loc, (oloc, want) in zip(r, expected):
                if loc != oloc:
                    return False
                got = set()
                for tag in reach.read(loc):
                    if tag == ENTRY:
                        got.add(ENTRY)
                        continue
                    if tag.poison and tag.unit != node.unit:
                        return False
                    got.add(tag.pos)
                if got != want:
                    return False
            for loc in w:
                poison = False
                if unit is not None:
                    live = (
                        loc[0] == "m" and loc[1] not in (STACK, "*") and loc[2] is not None
                    ) or (loc[0] == "r" and loc[1] in unit.live_out_regs) or (
                        loc[0] == "m" and loc[1] == STACK and loc[2] is not None
                        and (unit.live_out_mem is None or loc[2] in unit.live_out_mem)
                    )
                    poison = not (live and unit.last_writers.get(loc) == p)
                reach.write(loc, _Tag(p, node.unit, poison))
                written.append(loc)
        for loc in node.clobbers:
            reach.write(loc, _Tag(-1, node.unit, True))
            written.append(loc)
    end_locs = set(ctx.end) | set(_end_locations(written, ctx.live_out))
    for loc in end_locs:
        want = ctx.end.get(loc)
        if want is None:
            want = frozenset([ENTRY])
        got = set()
        for tag in reach.read(loc):
            if tag == ENTRY:
                got.add(ENTRY)
                continue
            if tag.poison:
                return False
            got.add(tag.pos)
        if got != want:
            return False
    return True


def _positions_to_try(base: list[_Node], anchor: int) -> list[int]:
    k0 = sum(1 for n in base if n.key <= anchor)
    order = sorted(range(len(base) + 1), key=lambda k: (abs(k - k0), -k))
    return order


def recompose_detailed(slices: Sequence[Slice]) -> Recomposition:
    """Recompose units; replacements that cannot be placed soundly revert."""
    if not slices:
        return Recomposition([], [])
    ctx = slices[0].context
    if ctx is None or any(s.context is not ctx for s in slices):
        raise ValueError("all slices must come from one extract_slices call")
    units = list(slices)
    holders: dict[int, set[int]] = {}
    for u_idx, s in enumerate(units):
        for p in s.positions:
            holders.setdefault(p, set()).add(u_idx)
    seq = [_Node((ctx.block[p],), (p,)) for p in sorted(holders)]
    placed = [False] * len(units)
    order = sorted(range(len(units)), key=lambda u: units[u].anchor)
    for u_idx in order:
        s = units[u_idx]
        if s.replacement is None:
            continue
        new_holders = {p: h - {u_idx} for p, h in holders.items()}
        base = [n for n in seq if n.unit is not None or new_holders[n.ids[0]]]
        copy = _Node(s.insns, s.positions, u_idx, _clobbers(s, ctx))
        for k in _positions_to_try(base, s.anchor):
            trial = base[:k] + [copy] + base[k:]
            if _valid(trial, ctx, units):
                seq, holders = trial, new_holders
                placed[u_idx] = True
                break
    out: list[Instruction] = []
    for node in seq:
        if node.unit is None:
            out.extend(node.insns)
        else:
            out.extend(units[node.unit].replacement)
    out = _drop_redundant(out, ctx)
    return Recomposition(dependency_order(out, ctx.entry_types, ctx.layout), placed)


def recompose(slices: Sequence[Slice]) -> list[Instruction]:
    return recompose_detailed(slices).insns


def _run_is_repeat(locs, j: int, i: int, k: int) -> bool:
    """True when insns[i:i+k] recompute exactly what insns[j:j+k] left behind."""
    external: list[Loc] = []
    own: list[Loc] = []
    for n in range(k):
        reads, writes = locs[i + n]
        # only registers are provably defined inside the run; memory reads stay external
        external += [a for a in reads if a[0] != "r" or a not in own]
        own += writes
    first_writes = [w for n in range(k) for w in locs[j + n][1]]
    between = [w for n in range(j + k, i) for w in locs[n][1]]
    if any(_may_alias(a, w) for a in external for w in first_writes + between):
        return False
    return not any(_may_alias(a, w) for a in own for w in between)


def _drop_redundant(insns: list[Instruction], ctx: BlockContext) -> list[Instruction]:
    """Remove structurally identical recomputations (single instructions or
    runs) whose inputs and outputs are untouched since the first copy."""
    changed = True
    while changed:
        changed = False
        states, _ = analyze(insns, ctx.entry_types, ctx.layout)
        locs = [insn_locations(x, states[n]) for n, x in enumerate(insns)]
        bare = [x.without_origin() for x in insns]
        for i in range(1, len(insns)):
            for k in range(len(insns) - i, 0, -1):
                hit = next(
                    (
                        j
                        for j in range(i - k, -1, -1)
                        if bare[j : j + k] == bare[i : i + k]
                        and locs[j : j + k] == locs[i : i + k]
                        and _run_is_repeat(locs, j, i, k)
                    ),
                    None,
                )
                if hit is not None:
                    insns = insns[:i] + insns[i + k :]
                    changed = True
                    break
            if changed:
                break
    return insns


def dependency_order(
    insns: Sequence[Instruction], entry_types: RegTypeMap | None = None, layout: Layout = DEFAULT_LAYOUT
) -> list[Instruction]:
    """Topological order of the def-use / anti / output dependence graph,
    ties broken by the incoming order."""
    states, _ = analyze(insns, entry_types, layout)
    locs = [insn_locations(i, states[k]) for k, i in enumerate(insns)]
    preds: list[set[int]] = [set() for _ in insns]
    succs: list[set[int]] = [set() for _ in insns]
    for b in range(len(insns)):
        rb, wb = locs[b]
        for a in range(b):
            ra, wa = locs[a]
            dep = (
                any(_may_alias(x, y) for x in wa for y in rb)
                or any(_may_alias(x, y) for x in ra for y in wb)
                or any(_may_alias(x, y) for x in wa for y in wb)
            )
            if dep:
                preds[b].add(a)
                succs[a].add(b)
    indeg = [len(p) for p in preds]
    ready = [k for k, d in enumerate(indeg) if d == 0]
    heapq.heapify(ready)
    out: list[Instruction] = []
    while ready:
        k = heapq.heappop(ready)
        out.append(insns[k])
        for s in succs[k]:
            indeg[s] -= 1
            if indeg[s] == 0:
                heapq.heappush(ready, s)
    if len(out) != len(insns):
        raise CyclicDependency("dependence graph has a cycle")
    return out


# -- program-level liveness and types -----------------------------------------------


def _join(a: RegType, b: RegType) -> RegType:
    if a == b:
        return a
    if a.kind == "UNINIT" or b.kind == "UNINIT":
        return UNINIT
    if a.is_ptr and b.is_ptr and a.kind == b.kind and a.region == b.region:
        return a.at(None)
    return UNKNOWN


def _successors(p: Program) -> dict[int, list[int]]:
    """Instruction-level successor map."""
    n = len(p.instructions)
    succ: dict[int, list[int]] = {}
    for pc, insn in enumerate(p.instructions):
        if isinstance(insn, ControlInsn):
            succ[pc] = [t for t in insn.targets(pc) if 0 <= t < n]
        else:
            succ[pc] = [pc + 1] if pc + 1 < n else []
    return succ


def block_entry_types(p: Program, layout: Layout = DEFAULT_LAYOUT) -> list[dict[int, RegType]]:
    """Entry register types per block: r1 is the context and r10 the frame at
    program entry; joins at merge points."""
    n = len(p.instructions)
    succ = _successors(p)
    entry = normalize_types({1: PTR_TO_CTX})
    at: dict[int, dict[int, RegType]] = {0: entry} if n else {}
    work = [0] if n else []
    while work:
        pc = work.pop()
        t = dict(at[pc])
        insn = p.instructions[pc]
        if isinstance(insn, ControlInsn):
            if insn.kind == "call":
                t[0] = SCALAR
                for r in range(1, 6):
                    t[r] = UNINIT
        else:
            t = analyze([insn], t, layout)[0][-1]
        for s in succ[pc]:
            old = at.get(s)
            new = t if old is None else {r: _join(old[r], t[r]) for r in range(NUM_REGS)}
            if old != new:
                at[s] = new
                work.append(s)
    out = []
    for start, _ in p.blocks:
        out.append(dict(at.get(start, normalize_types(None))))
    return out


def program_liveness(
    p: Program, layout: Layout = DEFAULT_LAYOUT, annotations: Mapping[int, Footprint] | None = None
) -> list[Footprint]:
    """Live-out footprint at the end of every block.

    ``exit`` reads r0 with the stack dead; ``call`` reads r1-r5 and may read the
    whole stack; non-stack memory is always live.  Annotations override the
    computed value for the blocks they name.
    """
    n = len(p.instructions)
    succ = _successors(p)
    types_at: dict[int, dict[int, RegType]] = {}
    for k, (start, end) in enumerate(p.blocks):
        states, _ = analyze(p.instructions[start:end], block_entry_types(p, layout)[k], layout)
        for i in range(start, end):
            types_at[i] = states[i - start]
    ALL = None
    live_in: dict[int, tuple[frozenset, frozenset | None]] = {pc: (frozenset(), frozenset()) for pc in range(n)}

    def union(a, b):
        regs = a[0] | b[0]
        stack = None if a[1] is ALL or b[1] is ALL else a[1] | b[1]
        return regs, stack

    def live_out_of(pc):
        acc = (frozenset(), frozenset())
        for s in succ[pc]:
            acc = union(acc, live_in[s])
        return acc

    changed = True
    while changed:
        changed = False
        for pc in reversed(range(n)):
            insn = p.instructions[pc]
            regs, stack = live_out_of(pc)
            if isinstance(insn, ControlInsn):
                if insn.kind == "exit":
                    regs, stack = frozenset(), frozenset()
                if insn.kind == "call":
                    regs = regs - {0, 1, 2, 3, 4, 5}
                    stack = ALL
                regs = regs | frozenset(insn.regs_read())
            else:
                rd, wr = insn_locations(insn, types_at[pc])
                regs = regs - {l[1] for l in wr if l[0] == "r"}
                if stack is not ALL:
                    stack = stack - {l[2] for l in wr if l[0] == "m" and l[1] == STACK and l[2] is not None}
                regs = regs | {l[1] for l in rd if l[0] == "r"}
                for l in rd:
                    if l[0] == "m" and l[1] in (STACK, "*"):
                        if l[2] is None:
                            stack = ALL
                        elif stack is not ALL:
                            stack = stack | {l[2]}
            new = (frozenset(regs), stack if stack is ALL else frozenset(stack))
            if new != live_in[pc]:
                live_in[pc] = new
                changed = True
    out = []
    for k, (start, end) in enumerate(p.blocks):
        if annotations and k in annotations:
            out.append(annotations[k])
            continue
        last = end - 1
        if end < n and isinstance(p.instructions[end], ControlInsn):
            regs, stack = live_in[end]
        else:
            regs, stack = live_out_of(last) if succ[last] else (frozenset(), frozenset())
        out.append(Footprint(frozenset(r for r in regs if r != FP), stack, True))
    return out


def parse_liveness(text: str) -> tuple[dict[int, Footprint], dict[int, dict[int, RegType]]]:
    """Sidecar annotations: ``block N live-out: r0,stack[-8..0)`` and optional
    ``block N types: r1=ctx,r2=scalar``."""
    live: dict[int, Footprint] = {}
    types: dict[int, dict[int, RegType]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, _, body = line.partition(":")
        words = head.split()
        if len(words) != 3 or words[0] != "block" or not words[1].isdigit():
            raise ValueError(f"line {lineno}: expected 'block N live-out: ...'")
        k = int(words[1])
        if words[2] == "live-out":
            live[k] = parse_footprint(body.strip())
        elif words[2] == "types":
            entry = {}
            for item in filter(None, (s.strip() for s in body.split(","))):
                reg, _, ty = item.partition("=")
                entry[int(reg.strip().lstrip("rw"))] = parse_type(ty.strip())
            types[k] = entry
        else:
            raise ValueError(f"line {lineno}: unknown annotation {words[2]!r}")
    return live, types
