"""Static checks mirroring the kernel verifier rules that matter for
straight-line rewrites: alignment, immediate stores into the context, register
initialization, stack bounds and pointer arithmetic."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .isa import FP, NUM_REGS, ControlInsn, Instruction
from .machine import (
    CTX,
    DEFAULT_LAYOUT,
    SCALAR,
    STACK,
    UNINIT,
    Layout,
    RegType,
    RegTypeMap,
    normalize_types,
)

RULES = {
    "align": "memory access not naturally aligned",
    "st_ctx": "immediate store through a context pointer",
    "uninit": "read of an uninitialized register",
    "fp_write": "write to the read-only frame pointer",
    "stack_bounds": "stack access outside [-512, 0)",
    "bounds": "access outside the region",
    "var_off": "variable-offset access to stack or context",
    "ptr_arith": "disallowed pointer arithmetic",
    "deref_scalar": "dereference of a non-pointer",
    "ptr_store": "pointer value stored to memory",
    "unknown_type": "register type unknown at this point",
    "opcode": "instruction outside the supported subset",
}


@dataclass(frozen=True)
class Violation:
    rule: str
    pc: int
    message: str


@dataclass
class SafetyVerdict:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        if self.ok:
            return "safe"
        return "; ".join(f"pc {v.pc}: [{v.rule}] {v.message}" for v in self.violations)


def _alu_result(insn: Instruction, types: list[RegType], flag) -> RegType:
    dst_t = types[insn.dst]
    src_t = types[insn.src] if insn.src_reg else SCALAR
    op = insn.op
    if insn.cls == "alu32":
        if (op != "mov" and dst_t.is_ptr) or src_t.is_ptr:
            flag("ptr_arith", "32-bit operation on a pointer")
        return SCALAR
    if op == "mov":
        return src_t if insn.src_reg else SCALAR
    if op in ("add", "sub"):
        if not insn.src_reg:
            if dst_t.is_ptr:
                delta = insn.imm if op == "add" else -insn.imm
                return dst_t.at(None if dst_t.off is None else dst_t.off + delta)
            return SCALAR
        if dst_t.is_ptr and src_t.is_ptr:
            if op == "sub" and dst_t.region == src_t.region:
                return SCALAR
            flag("ptr_arith", "pointer combined with pointer")
            return SCALAR
        if dst_t.is_ptr:
            return dst_t.at(None)
        if src_t.is_ptr:
            if op == "sub":
                flag("ptr_arith", "scalar minus pointer")
                return SCALAR
            return src_t.at(None)
        return SCALAR
    if dst_t.is_ptr or src_t.is_ptr:
        flag("ptr_arith", f"{op} on a pointer")
    return SCALAR


def _check_access(insn: Instruction, base: RegType, layout: Layout, flag) -> None:
    if not base.is_ptr:
        flag("deref_scalar", f"r{insn.base_reg()} is {base}")
        return
    if base.off is None:
        if base.region in (STACK, CTX):
            flag("var_off", f"r{insn.base_reg()} has a variable offset into {base.region}")
        return
    addr = base.off + insn.off
    if addr % insn.width:
        flag("align", f"{base.region}{addr:+d} is not {insn.width}-byte aligned")
    lo, hi = layout.bounds(base.region)
    if addr < lo or addr + insn.width > hi:
        flag("stack_bounds" if base.region == STACK else "bounds", f"{base.region}[{addr}..{addr + insn.width})")


def analyze(
    insns: Sequence[Instruction | ControlInsn],
    entry_types: RegTypeMap | None,
    layout: Layout = DEFAULT_LAYOUT,
) -> tuple[list[dict[int, RegType]], SafetyVerdict]:
    """Forward type dataflow plus rule checks.

    Returns the type map before each instruction (plus one after the last) and
    the verdict.
    """
    types = [normalize_types(entry_types)[r] for r in range(NUM_REGS)]
    states: list[dict[int, RegType]] = []
    verdict = SafetyVerdict()
    for pc, insn in enumerate(insns):
        states.append(dict(enumerate(types)))

        def flag(rule: str, msg: str, pc=pc) -> None:
            verdict.violations.append(Violation(rule, pc, msg))

        if not isinstance(insn, Instruction):
            flag("opcode", f"{insn} cannot appear inside a straight-line unit")
            continue
        base = types[insn.base_reg()] if insn.is_mem else None
        # (a) alignment, (d) bounds, (e) deref of scalars
        if insn.is_mem:
            _check_access(insn, base, layout, flag)
        # (b) immediate stores into the context
        if insn.cls == "st" and base.region == CTX:
            flag("st_ctx", f"BPF_ST through r{insn.dst} of type PTR_TO_CTX")
        # (c) initialization and the frame pointer
        for r in insn.regs_read():
            if types[r] is UNINIT or types[r].kind == "UNINIT":
                flag("uninit", f"r{r} read before initialization")
            elif types[r].kind == "UNKNOWN":
                flag("unknown_type", f"r{r} has unknown type")
        if insn.reg_written() == FP:
            flag("fp_write", "r10 is read-only")
        # (e) pointer arithmetic and pointer leaks
        if insn.cls == "stx" and types[insn.src].is_ptr:
            flag("ptr_store", f"r{insn.src} holds a pointer")
        if insn.is_alu:
            types[insn.dst] = _alu_result(insn, types, flag)
        elif insn.is_load:
            types[insn.dst] = SCALAR
    states.append(dict(enumerate(types)))
    return states, verdict


def check_safety(
    insns: Sequence[Instruction], entry_types: RegTypeMap | None, layout: Layout = DEFAULT_LAYOUT
) -> SafetyVerdict:
    return analyze(insns, entry_types, layout)[1]


def exit_types(
    insns: Sequence[Instruction], entry_types: RegTypeMap | None, layout: Layout = DEFAULT_LAYOUT
) -> dict[int, RegType]:
    return analyze(insns, entry_types, layout)[0][-1]
