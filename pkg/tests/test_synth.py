from __future__ import annotations

import itertools
import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bpfopt.corpus import FUZZ_TYPES, PRUNING_SUITE, random_block, random_liveness
from bpfopt.isa import Instruction, parse_asm
from bpfopt.machine import PTR_TO_CTX, SCALAR, make_state, parse_footprint
from bpfopt.synth import (
    Alphabet,
    CostModel,
    MissingLatency,
    NoneFound,
    PruneConfig,
    SearchBudget,
    SearchStats,
    SynthesisTimeout,
    alphabet_for,
    cost_of,
    iter_candidates,
    make_tests,
    parse_latency_table,
    prune_by_distance,
    redundant_def,
    synthesize,
)


def insns(text):
    return list(parse_asm(text).instructions)


def best(text, live, types, n_tests=4, **kw):
    orig = insns(text)
    tests = make_tests(orig, types, random.Random(0), n_tests, kw.pop("ranges", None))
    return synthesize(orig, parse_footprint(live), types, tests, **kw)


# -- golden rewrites ---------------------------------------------------------------


def test_load_merge():
    cand = best("r1 = *(u32 *)(r0 + 8)\nr2 = *(u32 *)(r0 + 12)\nr2 <<= 32\nr2 |= r1", "r2", {0: PTR_TO_CTX})
    assert cand.insns == tuple(insns("r2 = *(u64 *)(r0 + 8)")) and cand.cost == 1


def test_store_merge():
    cand = best("*(u32 *)(r10 - 8) = r1\nr1 >>= 32\n*(u32 *)(r10 - 4) = r1", "stack[-8..0)", {1: SCALAR})
    assert cand.insns == tuple(insns("*(u64 *)(r10 - 8) = r1"))


def test_packet_offset_fold():
    text = "r3 = r7\nr3 += r1\nr3 = *(u16 *)(r3 + 2)\nr1 = r4"
    types = {1: SCALAR, 4: SCALAR, 7: PTR_TO_CTX}
    cand = best(text, "r1,r3,r7", types, ranges={1: (0, 63)})
    assert len(cand.insns) == 3


def test_single_instruction_has_nothing_cheaper():
    with pytest.raises(NoneFound):
        best("r0 = 0", "r0", {})


def test_latency_mode_prefers_shift_over_multiply():
    lat = CostModel("latency")
    with pytest.raises(NoneFound):
        best("r1 *= 2", "r1", {1: SCALAR})
    cand = best("r1 *= 2", "r1", {1: SCALAR}, cost=lat)
    assert cand.cost == 1 and len(cand.insns) == 1 and cand.insns[0].op in ("lsh", "add")


def test_candidates_are_yielded_in_cost_order():
    orig = insns("r2 = r1\nr2 += 1\nr2 += 1\nr2 += 1")
    tests = make_tests(orig, {1: SCALAR}, random.Random(0), 4)
    found = iter_candidates(orig, parse_footprint("r2"), {1: SCALAR}, tests)
    costs = [c.cost for c in itertools.islice(found, 5)]
    assert costs == sorted(costs) and costs[0] == 3  # 3 is not in the immediate pool


def test_synthesis_needs_tests():
    with pytest.raises(ValueError):
        synthesize(insns("r0 = 1"), parse_footprint("r0"), {}, [])


def test_node_budget_raises_timeout():
    (s,) = [x for x in PRUNING_SUITE if x.name == "zext_add"]
    tests = make_tests(s.insns, s.types, random.Random(0), 4, s.ranges)
    with pytest.raises(SynthesisTimeout):
        synthesize(s.insns, s.footprint, s.types, tests, budget=SearchBudget(max_nodes=100))


# -- cost models --------------------------------------------------------------------


def test_size_cost_counts_instructions():
    three = insns("r1 = 1\nr2 = *(u32 *)(r10 - 4)\nr1 += r2")
    assert cost_of(three, CostModel()) == 3
    assert cost_of([], CostModel()) == 0


def test_latency_cost_uses_most_specific_key():
    three = insns("r1 = 1\nr2 = *(u32 *)(r10 - 4)\nr1 += r2")
    assert cost_of(three, CostModel("latency", {"ALU": 1, "LDX": 2})) == 4
    table = {"ALU": Fraction(1), "LDX": Fraction(2), "add64.x": Fraction(1, 2)}
    assert cost_of(three, CostModel("latency", table)) == Fraction(7, 2)


def test_missing_latency_entry():
    with pytest.raises(MissingLatency):
        cost_of(insns("*(u32 *)(r10 - 4) = r1"), CostModel("latency", {"ALU": 1}))


def test_cost_model_validation():
    with pytest.raises(ValueError):
        CostModel("speed")
    with pytest.raises(ValueError):
        CostModel("latency", {"ALU": 0})


def test_parse_latency_table():
    table = parse_latency_table("# ns\nALU 1\nLDX 4.5\nMUL 3/2\n")
    assert table == {"ALU": 1, "LDX": Fraction(9, 2), "MUL": Fraction(3, 2)}
    for bad in ("ALU", "ALU fast", "ALU -1"):
        with pytest.raises(ValueError):
            parse_latency_table(bad)


# -- pruning primitives ------------------------------------------------------------


def test_distance_prune_counts_differing_registers():
    t = {1: SCALAR, 2: SCALAR, 3: SCALAR}
    s = make_state(t, {1: 1, 2: 2, 3: 3})
    target = make_state(t, {1: 0, 2: 0, 3: 0})
    fp = parse_footprint("r1,r2,r3")
    assert prune_by_distance([s], [target], fp, 2)
    assert not prune_by_distance([s], [target], fp, 3)
    assert not prune_by_distance([target], [target], fp, 0)


@pytest.mark.parametrize(
    "partial, nxt, want",
    [
        ("r1 = 1", "r1 = 2", True),
        ("r1 = 1", "r1 += 1", False),
        ("r1 = 1\nr2 = r1", "r1 = 2", False),
        ("*(u32 *)(r10 - 4) = r1", "*(u64 *)(r10 - 8) = r2", True),
        ("*(u32 *)(r10 - 8) = r1", "*(u32 *)(r10 - 4) = r2", False),
        ("*(u32 *)(r10 - 4) = r1\nr3 = *(u8 *)(r10 - 4)", "*(u64 *)(r10 - 8) = r2", False),
    ],
)
def test_redundant_definitions(partial, nxt, want):
    (n,) = insns(nxt)
    assert redundant_def(insns(partial), n) is want


def test_memo_prunes_revisited_states():
    stats = SearchStats()
    best("r2 = r1\nr2 += 1\nr2 += 1\nr2 += 1", "r2", {1: SCALAR}, prune=PruneConfig(False, True, False), stats=stats)
    assert stats.pruned_memo > 0


@pytest.mark.parametrize("name", ["load_merge", "store_merge", "neg_sub", "scale"])
def test_pruning_never_changes_the_answer(name):
    (s,) = [x for x in PRUNING_SUITE if x.name == name]
    tests = make_tests(s.insns, s.types, random.Random(0), 4, s.ranges)
    found = {}
    nodes = {}
    for label, cfg in (("all", PruneConfig()), ("none", PruneConfig.none())):
        stats = SearchStats()
        found[label] = synthesize(s.insns, s.footprint, s.types, tests, prune=cfg, stats=stats).cost
        nodes[label] = stats.nodes_expanded
    assert found["all"] == found["none"]
    assert nodes["all"] <= nodes["none"]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32))
def test_pruned_search_finds_the_same_optimum(seed):
    rng = random.Random(seed)
    block = random_block(rng, 2)
    live = random_liveness(rng, block)
    tests = make_tests(block, FUZZ_TYPES, random.Random(seed), 4)
    if not tests:
        return
    out = []
    for cfg in (PruneConfig(), PruneConfig.none()):
        try:
            out.append(synthesize(block, live, FUZZ_TYPES, tests, prune=cfg).cost)
        except NoneFound:
            out.append(None)
    assert out[0] == out[1]


# -- alphabet -----------------------------------------------------------------------


def test_alphabet_follows_first_appearance():
    a = alphabet_for(insns("r3 = *(u32 *)(r7 + 4)\nr3 += r1\n*(u8 *)(r10 - 2) = 9"))
    assert a.regs == (7, 3, 1, 10)
    assert a.offsets == (4, -2)
    assert a.imms[0] == 9 and a.memory and not a.alu32 and not a.divmod


def test_restricted_alphabet_limits_search():
    alpha = Alphabet(regs=(1, 2), offsets=(), imms=(0,), memory=False, ops=("mov",))
    orig = insns("r2 = r1\nr2 += 0\nr2 |= 0")
    tests = make_tests(orig, {1: SCALAR}, random.Random(0), 4)
    cand = synthesize(orig, parse_footprint("r2"), {1: SCALAR}, tests, alphabet=alpha)
    assert cand.insns == (Instruction.alu("mov", 2, 1),)
