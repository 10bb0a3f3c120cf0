from __future__ import annotations

import pytest

from bpfopt.smt import SolverSession, SolverUnavailable, solver_command


def _solver_present() -> bool:
    try:
        solver_command(None)
    except SolverUnavailable:
        return False
    return True


HAVE_SOLVER = _solver_present()
requires_solver = pytest.mark.skipif(not HAVE_SOLVER, reason="SMT solver binary not found")


@pytest.fixture(scope="session")
def session():
    if not HAVE_SOLVER:
        pytest.skip("SMT solver binary not found")
    s = SolverSession()
    yield s
    s.close()


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
