from __future__ import annotations

import json

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from bpfopt.isa import Instruction, format_insn, parse_asm
from bpfopt.machine import PTR_TO_CTX, SCALAR, parse_footprint
from bpfopt.rules import (
    CorruptRuleFile,
    NotAbstractable,
    RuleStore,
    abstract,
    abstract_insns,
    fingerprint,
    load_rules,
    match_and_apply,
    mine_rule,
    store_rules,
)
from bpfopt.slicer import extract_slices

from conftest import requires_solver


def insns(text):
    return list(parse_asm(text).instructions)


def text_of(seq):
    return [format_insn(i) for i in seq]


LOAD_PAIR = "r1 = *(u32 *)(r0 + 8)\nr2 = *(u32 *)(r0 + 12)\nr2 <<= 32\nr2 |= r1"
STORE_PAIR = "*(u32 *)(r10 - 8) = r1\nr1 >>= 32\n*(u32 *)(r10 - 4) = r1"


def load_rule(**kw):
    return abstract(insns(LOAD_PAIR), insns("r2 = *(u64 *)(r0 + 8)"), {2}, frozenset(), {0: PTR_TO_CTX}, **kw)


def store_rule():
    return abstract(insns(STORE_PAIR), insns("*(u64 *)(r10 - 8) = r1"), (), frozenset(range(-8, 0)), {1: SCALAR})


def single_slice(text, live, types):
    (s,) = extract_slices(insns(text), parse_footprint(live), types)
    return s


# -- abstraction --------------------------------------------------------------------


def test_load_merge_abstraction():
    r = load_rule()
    assert text_of(r.pattern) == ["r1 = *(u32 *)(r0 + 0)", "r2 = *(u32 *)(r0 + 4)", "r2 <<= 32", "r2 |= r1"]
    assert text_of(r.replacement) == ["r2 = *(u64 *)(r0 + 0)"]
    assert r.dead_regs == {1}
    assert r.entry_types == ((0, "PTR_TO_CTX"),)
    assert r.align_residues == ((0, 8, 0),)
    assert r.cost_delta_size == 3


def test_renamed_copies_abstract_identically():
    a = abstract_insns(insns(LOAD_PAIR))
    b = abstract_insns(insns("r6 = *(u32 *)(r8 + 40)\nr7 = *(u32 *)(r8 + 44)\nr7 <<= 32\nr7 |= r6"))
    assert a.insns == b.insns
    assert fingerprint(a.insns) == fingerprint(b.insns)


def test_frame_pointer_stays_put():
    a = abstract_insns(insns(STORE_PAIR))
    assert all(i.dst == 10 for i in a.insns if i.is_store)
    assert a.insns[0].off == 0 and a.insns[2].off == 4


def test_rewrite_reading_unknown_register_is_not_abstractable():
    with pytest.raises(NotAbstractable):
        abstract(insns("r1 = r2"), insns("r1 = r5"), {1}, (), {2: SCALAR, 5: SCALAR})


def test_mine_rule_from_slice():
    s = single_slice(LOAD_PAIR, "r2", {0: PTR_TO_CTX})
    r = mine_rule(s, insns("r2 = *(u64 *)(r0 + 8)"), origin="unit")
    assert r is not None and r.pattern == load_rule().pattern
    assert dict(r.provenance)["origin"] == "unit"


# -- matching -----------------------------------------------------------------------


@requires_solver
def test_renamed_instance_matches(session):
    s = single_slice("r6 = *(u32 *)(r8 + 40)\nr7 = *(u32 *)(r8 + 44)\nr7 <<= 32\nr7 |= r6", "r7", {8: PTR_TO_CTX})
    m = match_and_apply(s, RuleStore([load_rule()]), session=session)
    assert m is not None and text_of(m.insns) == ["r7 = *(u64 *)(r8 + 40)"]


@requires_solver
def test_live_scratch_register_blocks_match(session):
    (s,) = [x for x in extract_slices(insns(LOAD_PAIR), parse_footprint("r1,r2"), {0: PTR_TO_CTX}) if x.label() == "r2"]
    assert match_and_apply(s, RuleStore([load_rule()]), session=session) is None


@requires_solver
def test_misaligned_instance_does_not_match(session):
    s = single_slice("r6 = *(u32 *)(r8 + 44)\nr7 = *(u32 *)(r8 + 48)\nr7 <<= 32\nr7 |= r6", "r7", {8: PTR_TO_CTX})
    assert match_and_apply(s, RuleStore([load_rule()]), session=session) is None


@requires_solver
def test_wrong_entry_type_does_not_match(session):
    s = single_slice(LOAD_PAIR, "r2", {0: PTR_TO_CTX})
    other = single_slice(STORE_PAIR, "stack[-8..0)", {1: SCALAR})
    assert match_and_apply(other, RuleStore([load_rule()]), session=session) is None
    assert match_and_apply(s, RuleStore([store_rule()]), session=session) is None


@requires_solver
def test_empty_store_never_matches(session):
    assert match_and_apply(single_slice(LOAD_PAIR, "r2", {0: PTR_TO_CTX}), RuleStore(), session=session) is None


REGS = st.permutations(range(10))


@requires_solver
@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(REGS, st.integers(0, 60), st.booleans())
def test_rules_generalize_over_renaming_and_shifts(session, perm, slot, aligned):
    """A mined rule fires on any renamed copy at an 8-aligned offset and nowhere else."""
    base, lo, hi = perm[:3]
    off = 8 * slot + (0 if aligned else 4)
    text = f"r{lo} = *(u32 *)(r{base} + {off})\nr{hi} = *(u32 *)(r{base} + {off + 4})\nr{hi} <<= 32\nr{hi} |= r{lo}"
    s = single_slice(text, f"r{hi}", {base: PTR_TO_CTX})
    m = match_and_apply(s, RuleStore([load_rule()]), session=session)
    if aligned:
        assert m is not None and text_of(m.insns) == [f"r{hi} = *(u64 *)(r{base} + {off})"]
    else:
        assert m is None


@requires_solver
@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.sampled_from(range(10)), st.integers(1, 60))
def test_stack_rule_follows_the_frame(session, src, slot):
    low = 8 * slot
    text = f"*(u32 *)(r10 - {low}) = r{src}\nr{src} >>= 32\n*(u32 *)(r10 - {low - 4}) = r{src}"
    s = single_slice(text, f"stack[-{low}..-{low - 8})" if low > 8 else "stack[-8..0)", {src: SCALAR})
    m = match_and_apply(s, RuleStore([store_rule()]), session=session)
    assert m is not None and text_of(m.insns) == [f"*(u64 *)(r10 - {low}) = r{src}"]


# -- persistence --------------------------------------------------------------------


def test_store_round_trip(tmp_path):
    store = RuleStore([load_rule(origin="a.s", timestamp="2026-01-01T00:00:00+00:00"), store_rule()])
    path = tmp_path / "rules.jsonl"
    store_rules(store, path)
    again = load_rules(path)
    assert again == store
    assert [r.to_json() for r in again] == [r.to_json() for r in store]
    for line in path.read_text().splitlines():
        obj = json.loads(line)
        assert set(obj) == {"pattern", "replacement", "preconds", "costs", "provenance"}


def test_large_store_round_trip(tmp_path):
    rules = []
    for k in range(300):
        orig = insns(f"r1 = r2\nr1 += {k}\nr1 += 1")
        rules.append(abstract(orig, insns(f"r1 = r2\nr1 += {k + 1}"), {1}, (), {2: SCALAR}))
    store = RuleStore(rules)
    assert len(store) == 300
    store.save(tmp_path / "big.jsonl")
    assert RuleStore.load(tmp_path / "big.jsonl") == store


def test_empty_store_round_trip(tmp_path):
    path = tmp_path / "empty.jsonl"
    RuleStore().save(path)
    assert path.read_text() == "" and len(RuleStore.load(path)) == 0


def test_truncated_file_is_reported(tmp_path):
    path = tmp_path / "rules.jsonl"
    RuleStore([load_rule(), store_rule()]).save(path)
    text = path.read_text()
    path.write_text(text[: len(text) - 20])
    with pytest.raises(CorruptRuleFile) as info:
        RuleStore.load(path)
    assert info.value.line == 2


def test_garbage_line_is_reported(tmp_path):
    path = tmp_path / "rules.jsonl"
    path.write_text('{"pattern": ["r1 = = 2"], "replacement": []}\n')
    with pytest.raises(CorruptRuleFile):
        RuleStore.load(path)


def test_add_is_idempotent():
    store = RuleStore()
    assert store.add(load_rule()) is True
    assert store.add(load_rule()) is False
    assert len(store) == 1


def test_better_rule_replaces_weaker_one():
    weak = abstract(insns("r1 = r2\nr1 += 0\nr1 += 0"), insns("r1 = r2\nr1 |= 0"), {1}, (), {2: SCALAR})
    strong = abstract(insns("r1 = r2\nr1 += 0\nr1 += 0"), insns("r1 = r2"), {1}, (), {2: SCALAR})
    store = RuleStore([weak])
    assert store.add(strong) and len(store) == 1
    assert list(store)[0].replacement == (Instruction.alu("mov", 1, 0),)  # r2 is a0, r1 is a1
