from __future__ import annotations

import json

import pytest

from bpfopt.cli import main
from bpfopt.isa import decode_program, encode_program, parse_asm

from conftest import requires_solver

LOAD_PAIR = "r2 = *(u32 *)(r1 + 8)\nr3 = *(u32 *)(r1 + 12)\nr3 <<= 32\nr3 |= r2\nr0 = r3\nexit\n"


@pytest.fixture
def prog(tmp_path):
    path = tmp_path / "prog.s"
    path.write_text(LOAD_PAIR)
    return path


@requires_solver
def test_optimize_writes_program_and_report(prog, tmp_path, capsys):
    rules = tmp_path / "rules.jsonl"
    rc = main(["optimize", str(prog), "--timeout", "30", "--report", "json", "--emit-rules", str(rules)])
    out, err = capsys.readouterr()
    assert rc == 0
    assert out == "r0 = *(u64 *)(r1 + 8)\nexit\n"
    report = json.loads(err)
    assert report["insns_before"] == 6 and report["insns_after"] == 2 and report["rules_mined"] == 1
    assert len(rules.read_text().splitlines()) == 1


@requires_solver
def test_optimize_binary_output_and_report_file(prog, tmp_path, capsys):
    binary, rep = tmp_path / "out.bin", tmp_path / "report.txt"
    rc = main(["optimize", str(prog), "--timeout", "30", "-o", str(binary), "--report-file", str(rep)])
    assert rc == 0 and capsys.readouterr().out == ""
    assert len(decode_program(binary.read_bytes()).instructions) == 2
    assert "instructions: 6 -> 2" in rep.read_text()


@requires_solver
def test_mine_then_apply_rules(tmp_path, capsys):
    corpus = tmp_path / "corpus"
    corpus.mkdir()
    (corpus / "a.s").write_text(LOAD_PAIR)
    (corpus / "notes.md").write_text("not a program")
    rules = tmp_path / "rules.jsonl"
    assert main(["mine-rules", str(corpus), "--emit-rules", str(rules), "--timeout", "30"]) == 0
    assert "1 programs, 1 new rules" in capsys.readouterr().out

    target = tmp_path / "b.s"
    target.write_text(LOAD_PAIR.replace("r2", "r6").replace("r3", "r7").replace("+ 8)", "+ 16)").replace("+ 12)", "+ 20)"))
    assert main(["apply-rules", str(target), "--rules", str(rules), "--report", "json"]) == 0
    out, err = capsys.readouterr()
    assert out == "r0 = *(u64 *)(r1 + 16)\nexit\n"
    assert json.loads(err)["rules_applied"] == 1

    assert main(["stats", str(rules), "--json"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["rules"] == 1 and summary["total_size_delta"] == 4
    assert main(["stats", str(rules)]) == 0
    assert "pattern length 5: 1" in capsys.readouterr().out


@requires_solver
def test_verify_equiv(tmp_path, capsys):
    a, b, c = tmp_path / "a.s", tmp_path / "b.s", tmp_path / "c.s"
    a.write_text("r1 = *(u32 *)(r0 + 8)\nr2 = *(u32 *)(r0 + 12)\nr2 <<= 32\nr2 |= r1\n")
    b.write_text("r2 = *(u64 *)(r0 + 8)\nexit\n")
    c.write_text("r2 = *(u64 *)(r0 + 12)\n")
    assert main(["verify-equiv", str(a), str(b), "--live-out", "r2", "--types", "r0=ctx"]) == 0
    assert capsys.readouterr().out.strip() == "Equivalent"
    assert main(["verify-equiv", str(a), str(c), "--live-out", "r2", "--types", "r0=ctx"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("NotEquivalent") and "counterexample input:" in out


def test_verify_equiv_rejects_branches(tmp_path, capsys):
    a = tmp_path / "a.s"
    a.write_text("if r1 == 0 goto +0\nexit\n")
    assert main(["verify-equiv", str(a), str(a), "--live-out", "r0"]) == 1
    assert "straight-line" in capsys.readouterr().err


def test_interp(tmp_path, capsys):
    p, state = tmp_path / "p.s", tmp_path / "state.txt"
    p.write_text("r0 = r1\nr0 <<= 2\nexit\n")
    state.write_text("r1 = 5\n")
    assert main(["interp", str(p), "--state", str(state)]) == 0
    assert "r0 = 0x14" in capsys.readouterr().out.splitlines()
    assert main(["interp", str(p)]) == 1
    assert "fault" in capsys.readouterr().err


def test_binary_input_is_accepted(tmp_path, capsys):
    p = tmp_path / "p.bin"
    p.write_bytes(encode_program(parse_asm("r0 = 3\nexit")))
    assert main(["interp", str(p)]) == 0


@pytest.mark.parametrize(
    "argv",
    [
        ["optimize", "/nonexistent/prog.s"],
        ["optimize"],
        ["optimize", "x.s", "--mode", "turbo"],
        ["frobnicate"],
        ["stats", "/nonexistent/rules.jsonl"],
    ],
)
def test_usage_and_input_errors_exit_1(argv, capsys):
    assert main(argv) == 1


def test_syntax_error_exits_1(tmp_path, capsys):
    p = tmp_path / "bad.s"
    p.write_text("r0 = = 1\n")
    assert main(["interp", str(p)]) == 1
    assert "line 1" in capsys.readouterr().err


def test_corrupt_rules_exit_1(tmp_path, capsys):
    rules = tmp_path / "rules.jsonl"
    rules.write_text('{"pattern": [')
    assert main(["stats", str(rules)]) == 1


def test_missing_solver_exits_2(prog, capsys):
    assert main(["optimize", str(prog), "--solver", "no-such-solver-binary"]) == 2
    assert "solver" in capsys.readouterr().err
