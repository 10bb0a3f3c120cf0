"""Command line entry point: ``bpfopt <subcommand> ...``.

Exit status is 0 on success, 1 on bad input or usage, 2 on internal errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from collections import Counter
from fractions import Fraction
from pathlib import Path
from typing import Sequence

from .driver import PipelineConfig, optimize_program
from .equiv import EquivQuery, check_equiv
from .isa import ControlInsn, IsaError, Program, decode_program, encode_program, parse_asm, print_asm
from .machine import Fault, format_state, parse_footprint, parse_state, parse_type, run_program
from .rules import CorruptRuleFile, RuleStore
from .slicer import parse_liveness
from .smt import SolverError, SolverSession, SolverUnavailable
from .synth import DEFAULT_LATENCY, CostModel, parse_latency_table

PROGRAM_SUFFIXES = (".s", ".asm", ".bpf", ".txt", ".bin", ".o")


class InputError(Exception):
    """Bad user input; maps to exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def load_program(path: str | Path) -> Program:
    data = Path(path).read_bytes()
    if str(path).endswith((".bin", ".o")):
        return decode_program(data)
    try:
        text = data.decode()
    except UnicodeDecodeError:
        return decode_program(data)
    return parse_asm(text)


def write_program(p: Program, path: str | None) -> None:
    if path is None or path == "-":
        sys.stdout.write(print_asm(p))
    elif path.endswith(".bin"):
        Path(path).write_bytes(encode_program(p))
    else:
        Path(path).write_text(print_asm(p))


def _straight_line(p: Program) -> list:
    insns = list(p.instructions)
    if insns and isinstance(insns[-1], ControlInsn) and insns[-1].kind == "exit":
        insns.pop()
    if any(isinstance(i, ControlInsn) for i in insns):
        raise InputError("verify-equiv takes straight-line code (a trailing exit is allowed)")
    return insns


def _parse_types(text: str | None) -> dict:
    out = {}
    for item in filter(None, (s.strip() for s in (text or "").split(","))):
        reg, _, ty = item.partition("=")
        out[int(reg.strip().lstrip("rw"))] = parse_type(ty.strip())
    return out


def _parse_ranges(text: str | None) -> dict:
    out = {}
    for item in filter(None, (s.strip() for s in (text or "").split(","))):
        reg, _, span = item.partition("=")
        lo, _, hi = span.partition("..")
        out[int(reg.strip().lstrip("rw"))] = (int(lo, 0), int(hi, 0))
    return out


def _config(args: argparse.Namespace, mode: str | None = None) -> PipelineConfig:
    table = dict(DEFAULT_LATENCY)
    if getattr(args, "latency_table", None):
        table.update(parse_latency_table(Path(args.latency_table).read_text()))
    liveness = types = None
    if getattr(args, "liveness", None):
        liveness, types = parse_liveness(Path(args.liveness).read_text())
    return PipelineConfig(
        mode=mode or args.mode,
        window=args.window,
        synth_timeout=args.timeout,
        cost=CostModel(args.cost, table),
        rules_in=getattr(args, "rules", None),
        rules_out=getattr(args, "emit_rules", None),
        solver=args.solver,
        solver_timeout=args.solver_timeout,
        seed=args.seed,
        report=getattr(args, "report", "text"),
        liveness=liveness,
        entry_types=types,
    )


def _emit_report(report, fmt: str, path: str | None) -> None:
    text = report.to_json() if fmt == "json" else report.to_text()
    if path:
        Path(path).write_text(text + "\n")
    else:
        sys.stderr.write(text + "\n")


# -- subcommands ---------------------------------------------------------------------


def cmd_optimize(args: argparse.Namespace, mode: str | None = None) -> int:
    config = _config(args, mode)
    p = load_program(args.program)
    out, report = optimize_program(p, config, origin=Path(args.program).name)
    write_program(out, args.output)
    _emit_report(report, args.report, args.report_file)
    return 0


def cmd_apply_rules(args: argparse.Namespace) -> int:
    return cmd_optimize(args, mode="online")


def cmd_mine_rules(args: argparse.Namespace) -> int:
    root = Path(args.corpus)
    if not root.is_dir():
        raise InputError(f"{root} is not a directory")
    files = sorted(f for f in root.rglob("*") if f.is_file() and f.suffix in PROGRAM_SUFFIXES)
    config = _config(args, mode="offline")
    config.rules_out = None
    store = RuleStore.load(args.rules) if args.rules else RuleStore()
    before = len(store)
    for f in files:
        _, report = optimize_program(load_program(f), config, store, origin=str(f.relative_to(root)))
        print(f"{f.relative_to(root)}: {report.insns_before} -> {report.insns_after}, mined {report.rules_mined}")
    store.save(args.emit_rules)
    print(f"{len(files)} programs, {len(store) - before} new rules, {len(store)} total -> {args.emit_rules}")
    return 0


def cmd_verify_equiv(args: argparse.Namespace) -> int:
    a = _straight_line(load_program(args.original))
    b = _straight_line(load_program(args.candidate))
    q = EquivQuery(
        a, b, parse_footprint(args.live_out), _parse_types(args.types) or None, _parse_ranges(args.ranges), args.solver_timeout
    )
    session = SolverSession(args.solver, timeout=args.solver_timeout)
    try:
        result = check_equiv(q, session)
    finally:
        session.close()
    print(result.verdict)
    if result.reason:
        print(f"reason: {result.reason}")
    if result.counterexample is not None:
        print("counterexample input:")
        sys.stdout.write(format_state(result.counterexample.state))
        if result.counterexample.mismatch:
            print(f"mismatch: {result.counterexample.mismatch}")
    return 0


def cmd_interp(args: argparse.Namespace) -> int:
    p = load_program(args.program)
    s0 = parse_state(Path(args.state).read_text()) if args.state else parse_state("")
    try:
        final = run_program(p, s0, max_steps=args.max_steps)
    except Fault as exc:
        print(f"fault: {exc}", file=sys.stderr)
        return 1
    sys.stdout.write(format_state(final))
    return 0


def cmd_stats(args: argparse.Namespace) -> int:
    store = RuleStore.load(args.rules)
    by_len = Counter(len(r.pattern) for r in store.rules)
    size = sum((r.cost_delta_size for r in store.rules), 0)
    lat = sum((Fraction(r.cost_delta_latency) for r in store.rules), Fraction(0))
    summary = {
        "rules": len(store),
        "by_pattern_length": {str(k): by_len[k] for k in sorted(by_len)},
        "total_size_delta": size,
        "total_latency_delta": str(lat),
    }
    if args.json:
        print(json.dumps(summary, indent=2, sort_keys=True))
    else:
        print(f"rules: {summary['rules']}")
        for k, v in summary["by_pattern_length"].items():
            print(f"  pattern length {k}: {v}")
        print(f"total size delta: {size}")
        print(f"total latency delta: {lat}")
    return 0


# -- argument parsing ----------------------------------------------------------------


def _pipeline_flags(sp: argparse.ArgumentParser, modes: bool = True) -> None:
    if modes:
        sp.add_argument("--mode", choices=("offline", "online", "hybrid"), default="offline")
    sp.add_argument("--window", type=int, default=6, help="max instructions per slice")
    sp.add_argument("--timeout", type=float, default=600.0, help="synthesis seconds per slice")
    sp.add_argument("--solver-timeout", type=float, default=10.0)
    sp.add_argument("--cost", choices=("size", "latency"), default="size")
    sp.add_argument("--latency-table", metavar="FILE")
    sp.add_argument("--solver", metavar="CMD", help="SMT solver command (default: z3 -in -smt2)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--liveness", metavar="FILE", help="per-block live-out and type annotations")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="bpfopt", description="Superoptimizer for straight-line eBPF code.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("optimize", help="optimize a program")
    sp.add_argument("program")
    _pipeline_flags(sp)
    sp.add_argument("--rules", metavar="FILE", help="rule file to read")
    sp.add_argument("--emit-rules", metavar="FILE", help="write the rule store here")
    sp.add_argument("--report", choices=("text", "json"), default="text")
    sp.add_argument("--report-file", metavar="FILE", help="write the report here instead of stderr")
    sp.add_argument("-o", "--output", metavar="FILE", help="output program (.bin for binary)")
    sp.set_defaults(func=cmd_optimize)

    sp = sub.add_parser("apply-rules", help="rewrite a program using stored rules only")
    sp.add_argument("program")
    sp.add_argument("--rules", metavar="FILE", required=True)
    _pipeline_flags(sp, modes=False)
    sp.add_argument("--report", choices=("text", "json"), default="text")
    sp.add_argument("--report-file", metavar="FILE")
    sp.add_argument("-o", "--output", metavar="FILE")
    sp.set_defaults(func=cmd_apply_rules, emit_rules=None)

    sp = sub.add_parser("mine-rules", help="mine rewrite rules from a corpus directory")
    sp.add_argument("corpus")
    sp.add_argument("--emit-rules", metavar="FILE", required=True)
    sp.add_argument("--rules", metavar="FILE", help="existing store to extend")
    _pipeline_flags(sp, modes=False)
    sp.set_defaults(func=cmd_mine_rules)

    sp = sub.add_parser("verify-equiv", help="check two straight-line sequences for equivalence")
    sp.add_argument("original")
    sp.add_argument("candidate")
    sp.add_argument("--live-out", required=True, help="e.g. r0,stack[-8..0)")
    sp.add_argument("--types", help="entry types, e.g. r1=ctx,r2=scalar")
    sp.add_argument("--ranges", help="scalar ranges, e.g. r1=0..63")
    sp.add_argument("--solver", metavar="CMD")
    sp.add_argument("--solver-timeout", type=float, default=10.0)
    sp.set_defaults(func=cmd_verify_equiv)

    sp = sub.add_parser("interp", help="run a program on a concrete state")
    sp.add_argument("program")
    sp.add_argument("--state", metavar="FILE")
    sp.add_argument("--max-steps", type=int, default=100_000)
    sp.set_defaults(func=cmd_interp)

    sp = sub.add_parser("stats", help="summarize a rule file")
    sp.add_argument("rules")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_stats)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else 1
    try:
        return args.func(args)
    except (InputError, IsaError, CorruptRuleFile, ValueError, OSError) as exc:
        print(f"bpfopt: error: {exc}", file=sys.stderr)
        return 1
    except (SolverUnavailable, SolverError) as exc:
        print(f"bpfopt: solver error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to exit 2
        print(f"bpfopt: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
