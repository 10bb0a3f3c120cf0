"""Minimal SMT-LIB v2 client talking to a solver process over stdin/stdout."""

from __future__ import annotations

import os
import select
import shlex
import shutil
import subprocess
import time

DEFAULT_SOLVER = "z3 -in -smt2"


class SolverUnavailable(RuntimeError):
    pass


class SolverError(RuntimeError):
    pass


def solver_command(cmd: str | None = None) -> list[str]:
    text = cmd or os.environ.get("BPFOPT_SOLVER") or DEFAULT_SOLVER
    argv = shlex.split(text)
    if not argv or shutil.which(argv[0]) is None:
        raise SolverUnavailable(f"solver executable not found: {text!r}")
    return argv


def bv(value: int, width: int = 64) -> str:
    return f"#x{value & ((1 << width) - 1):0{width // 4}x}"


def parse_sexpr(text: str):
    tokens = text.replace("(", " ( ").replace(")", " ) ").split()
    pos = 0

    def read():
        nonlocal pos
        tok = tokens[pos]
        pos += 1
        if tok == "(":
            items = []
            while tokens[pos] != ")":
                items.append(read())
            pos += 1
            return items
        return tok

    return read()


def parse_value(tok) -> int:
    if isinstance(tok, list):
        # (_ bvN W)
        if len(tok) == 3 and tok[0] == "_" and tok[1].startswith("bv"):
            return int(tok[1][2:])
        raise SolverError(f"unexpected value {tok!r}")
    if tok.startswith("#x"):
        return int(tok[2:], 16)
    if tok.startswith("#b"):
        return int(tok[2:], 2)
    if tok in ("true", "false"):
        return int(tok == "true")
    return int(tok)


class SolverSession:
    """One solver child process.  Supports push/pop so a session can serve
    many queries."""

    def __init__(self, cmd: str | None = None, timeout: float = 10.0):
        self.argv = solver_command(cmd)
        self.timeout = timeout
        try:
            self.proc = subprocess.Popen(
                self.argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.STDOUT,
                text=True,
            )
        except OSError as exc:
            raise SolverUnavailable(str(exc)) from exc
        self._pending = ""
        self.send("(set-option :print-success false)")
        self.send("(set-option :produce-models true)")
        self.send("(set-logic QF_UFBV)")

    def __enter__(self) -> "SolverSession":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        if self.proc.poll() is None:
            try:
                self.proc.stdin.write("(exit)\n")
                self.proc.stdin.flush()
                self.proc.wait(timeout=1)
            except Exception:
                self.proc.kill()
                self.proc.wait()

    def send(self, text: str) -> None:
        try:
            self.proc.stdin.write(text + "\n")
            self.proc.stdin.flush()
        except BrokenPipeError as exc:
            raise SolverError("solver process died") from exc

    def _read_response(self, deadline: float) -> str:
        fd = self.proc.stdout.fileno()
        while True:
            text = self._pending.strip()
            if text and text.count("(") - text.count(")") <= 0 and self._pending.endswith("\n"):
                self._pending = ""
                return text
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TimeoutError
            ready, _, _ = select.select([fd], [], [], remaining)
            if not ready:
                raise TimeoutError
            chunk = os.read(fd, 65536)
            if not chunk:
                raise SolverError(f"solver exited: {self._pending!r}")
            self._pending += chunk.decode()

    def push(self) -> None:
        self.send("(push 1)")

    def pop(self) -> None:
        self.send("(pop 1)")

    def check(self, timeout: float | None = None) -> str:
        t = self.timeout if timeout is None else timeout
        self.send(f"(set-option :timeout {max(1, int(t * 1000))})")
        self.send("(check-sat)")
        try:
            out = self._read_response(time.monotonic() + t + 5.0)
        except TimeoutError:
            self.proc.kill()
            return "unknown"
        if out not in ("sat", "unsat", "unknown"):
            raise SolverError(out)
        return out

    def get_values(self, terms: list[str]) -> list[int]:
        if not terms:
            return []
        self.send(f"(get-value ({' '.join(terms)}))")
        out = self._read_response(time.monotonic() + self.timeout + 5.0)
        if out.startswith("(error"):
            raise SolverError(out)
        pairs = parse_sexpr(out)
        return [parse_value(p[1]) for p in pairs]
