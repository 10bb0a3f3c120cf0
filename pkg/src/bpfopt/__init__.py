"""bpfopt: a superoptimizer for straight-line eBPF code.

Enumerative synthesis proposes cheaper sequences for program slices, a
verifier-style type checker rejects unsafe ones, and an SMT solver proves
equivalence.  Proven rewrites can be abstracted into reusable rules.
"""

from __future__ import annotations

from .driver import OptimizationReport, PipelineConfig, cegis_optimize_slice, optimize_program
from .equiv import EquivQuery, EquivResult, check_equiv
from .isa import Instruction, Program, parse_asm, print_asm
from .rules import RewriteRule, RuleStore, load_rules, match_and_apply, store_rules
from .safety import check_safety
from .slicer import Slice, extract_slices, recompose
from .synth import CostModel, SearchBudget, SearchStats, synthesize

__version__ = "0.1.0"

__all__ = [
    "CostModel",
    "EquivQuery",
    "EquivResult",
    "Instruction",
    "OptimizationReport",
    "PipelineConfig",
    "Program",
    "RewriteRule",
    "RuleStore",
    "SearchBudget",
    "SearchStats",
    "Slice",
    "cegis_optimize_slice",
    "check_equiv",
    "check_safety",
    "extract_slices",
    "load_rules",
    "match_and_apply",
    "optimize_program",
    "parse_asm",
    "print_asm",
    "recompose",
    "store_rules",
    "synthesize",
]
