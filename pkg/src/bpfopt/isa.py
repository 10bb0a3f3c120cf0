"""eBPF instruction subset: data types, text assembly and the 8-byte wire format.

The textual syntax is the kernel verifier's disassembly style::

    r1 = *(u32 *)(r10 - 4)
    *(u16 *)(r10 - 2) = r1
    r2 <<= 32
    w3 += w4
    r0 = -r0

Jumps, calls and ``exit`` are parsed into opaque :class:`ControlInsn` records.
They delimit basic blocks and are never rewritten.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence, Union

__all__ = [
    "ALU_OPS",
    "ControlInsn",
    "Instruction",
    "IsaError",
    "Program",
    "SyntaxError",
    "UnknownOpcode",
    "UnsupportedInstruction",
    "decode",
    "decode_program",
    "encode",
    "encode_program",
    "parse_asm",
    "parse_insn",
    "print_asm",
]

NUM_REGS = 11
FP = 10

# operation name -> (kernel op bits, assembly operator)
ALU_OPS: dict[str, tuple[int, str]] = {
    "add": (0x00, "+="),
    "sub": (0x10, "-="),
    "mul": (0x20, "*="),
    "div": (0x30, "/="),
    "or": (0x40, "|="),
    "and": (0x50, "&="),
    "lsh": (0x60, "<<="),
    "rsh": (0x70, ">>="),
    "neg": (0x80, None),
    "mod": (0x90, "%="),
    "xor": (0xA0, "^="),
    "mov": (0xB0, "="),
    "arsh": (0xC0, "s>>="),
}
_ALU_BY_CODE = {code: name for name, (code, _) in ALU_OPS.items()}
_ALU_BY_SYM = {sym: name for name, (_, sym) in ALU_OPS.items() if sym}
SHIFT_OPS = frozenset({"lsh", "rsh", "arsh"})

MEM_CLASSES = ("ldx", "stx", "st")
ALU_CLASSES = ("alu64", "alu32")

_CLASS_BITS = {"ldx": 0x01, "st": 0x02, "stx": 0x03, "alu32": 0x04, "alu64": 0x07}
_SIZE_BITS = {4: 0x00, 2: 0x08, 1: 0x10, 8: 0x18}
_SIZE_BY_BITS = {v: k for k, v in _SIZE_BITS.items()}
_MODE_MEM = 0x60

JMP_OPS: dict[str, tuple[int, str]] = {
    "jeq": (0x10, "=="),
    "jgt": (0x20, ">"),
    "jge": (0x30, ">="),
    "jset": (0x40, "&"),
    "jne": (0x50, "!="),
    "jsgt": (0x60, "s>"),
    "jsge": (0x70, "s>="),
    "jlt": (0xA0, "<"),
    "jle": (0xB0, "<="),
    "jslt": (0xC0, "s<"),
    "jsle": (0xD0, "s<="),
}
_JMP_BY_CODE = {code: name for name, (code, _) in JMP_OPS.items()}
_JMP_BY_SYM = {sym: name for name, (_, sym) in JMP_OPS.items()}


class IsaError(Exception):
    pass


class SyntaxError(IsaError):  # noqa: A001 - mirrors the assembler's error vocabulary
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class UnsupportedInstruction(IsaError):
    def __init__(self, line: int, text: str = ""):
        super().__init__(f"line {line}: unsupported instruction {text!r}")
        self.line = line
        self.text = text


class UnknownOpcode(IsaError):
    def __init__(self, byte: int):
        super().__init__(f"unknown opcode 0x{byte:02x}")
        self.byte = byte


def _s32(v: int) -> int:
    v &= 0xFFFFFFFF
    return v - (1 << 32) if v & 0x80000000 else v


@dataclass(frozen=True)
class Instruction:
    """One straight-line instruction.

    ``cls`` is one of ``alu64``, ``alu32``, ``ldx``, ``stx``, ``st``; ``op`` names
    the ALU operation and is ``None`` for memory instructions.  ``origin`` is the
    index in the parsed program and is ignored by equality and hashing.
    """

    cls: str
    dst: int
    op: str | None = None
    src_reg: bool = False
    src: int = 0
    imm: int = 0
    off: int = 0
    width: int | None = None
    origin: int | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.cls not in _CLASS_BITS:
            raise IsaError(f"bad instruction class {self.cls!r}")
        if not (0 <= self.dst < NUM_REGS and 0 <= self.src < NUM_REGS):
            raise IsaError("register index out of range")
        if not (-(1 << 31) <= self.imm < (1 << 31)):
            raise IsaError(f"immediate {self.imm} does not fit in 32 bits")
        if self.cls in ALU_CLASSES:
            if self.op not in ALU_OPS:
                raise IsaError(f"bad ALU operation {self.op!r}")
            if self.width is not None or self.off:
                raise IsaError("ALU instructions carry no width/offset")
            if self.dst == FP:
                raise IsaError("r10 is read-only")
            if self.op == "neg" and self.src_reg:
                raise IsaError("neg takes no source operand")
            if self.op in SHIFT_OPS and not self.src_reg:
                bits = 64 if self.cls == "alu64" else 32
                if not 0 <= self.imm < bits:
                    raise IsaError(f"shift amount {self.imm} out of range")
        else:
            if self.op is not None:
                raise IsaError("memory instructions carry no ALU op")
            if self.width not in _SIZE_BITS:
                raise IsaError(f"bad access width {self.width!r}")
            if not (-(1 << 15) <= self.off < (1 << 15)):
                raise IsaError(f"offset {self.off} does not fit in 16 bits")
            if self.cls == "ldx" and self.dst == FP:
                raise IsaError("r10 is read-only")
            if self.cls == "st" and self.src_reg:
                raise IsaError("st stores an immediate")
            if self.cls in ("ldx", "stx") and self.imm:
                raise IsaError("ldx/stx carry no immediate")

    # -- convenience constructors -------------------------------------------------
    @classmethod
    def alu(cls, op: str, dst: int, src: int | None = None, imm: int = 0, *, is32: bool = False) -> "Instruction":
        return cls("alu32" if is32 else "alu64", dst, op, src is not None, src or 0, imm)

    @classmethod
    def ldx(cls, width: int, dst: int, src: int, off: int) -> "Instruction":
        return cls("ldx", dst, None, True, src, 0, off, width)

    @classmethod
    def stx(cls, width: int, dst: int, off: int, src: int) -> "Instruction":
        return cls("stx", dst, None, True, src, 0, off, width)

    @classmethod
    def st(cls, width: int, dst: int, off: int, imm: int) -> "Instruction":
        return cls("st", dst, None, False, 0, imm, off, width)

    # -- queries ------------------------------------------------------------------
    @property
    def is_alu(self) -> bool:
        return self.cls in ALU_CLASSES

    @property
    def is_mem(self) -> bool:
        return self.cls in MEM_CLASSES

    @property
    def is_load(self) -> bool:
        return self.cls == "ldx"

    @property
    def is_store(self) -> bool:
        return self.cls in ("stx", "st")

    def regs_read(self) -> tuple[int, ...]:
        if self.is_alu:
            if self.op == "mov":
                return (self.src,) if self.src_reg else ()
            if self.src_reg:
                return (self.dst, self.src)
            return (self.dst,)
        if self.cls == "ldx":
            return (self.src,)
        if self.cls == "stx":
            return (self.dst, self.src)
        return (self.dst,)

    def reg_written(self) -> int | None:
        if self.is_store:
            return None
        return self.dst

    def base_reg(self) -> int | None:
        if self.cls == "ldx":
            return self.src
        if self.is_store:
            return self.dst
        return None

    def mnemonic(self) -> str:
        """Opcode mnemonic without operands, e.g. ``add64.x`` or ``ldx.u32``."""
        if self.is_alu:
            bits = "64" if self.cls == "alu64" else "32"
            if self.op == "neg":
                return f"neg{bits}"
            return f"{self.op}{bits}.{'x' if self.src_reg else 'k'}"
        return f"{self.cls}.u{self.width * 8}"

    def without_origin(self) -> "Instruction":
        return replace(self, origin=None) if self.origin is not None else self

    def __str__(self) -> str:
        return format_insn(self)


@dataclass(frozen=True)
class ControlInsn:
    """Jump, call or exit; carried through optimization untouched."""

    kind: str  # "ja", "jcond", "call", "exit"
    op: str | None = None
    is32: bool = False
    dst: int = 0
    src_reg: bool = False
    src: int = 0
    imm: int = 0
    off: int = 0
    origin: int | None = field(default=None, compare=False)

    def regs_read(self) -> tuple[int, ...]:
        if self.kind == "jcond":
            return (self.dst, self.src) if self.src_reg else (self.dst,)
        if self.kind == "call":
            return (1, 2, 3, 4, 5)
        if self.kind == "exit":
            return (0,)
        return ()

    def targets(self, pc: int) -> list[int]:
        if self.kind == "ja":
            return [pc + 1 + self.off]
        if self.kind == "jcond":
            return [pc + 1 + self.off, pc + 1]
        if self.kind == "call":
            return [pc + 1]
        return []

    def mnemonic(self) -> str:
        return self.op or self.kind

    def __str__(self) -> str:
        return format_insn(self)


Insn = Union[Instruction, ControlInsn]


@dataclass(frozen=True)
class Program:
    instructions: tuple[Insn, ...]
    blocks: tuple[tuple[int, int], ...]

    @classmethod
    def from_instructions(cls, insns: Iterable[Insn]) -> "Program":
        insns = tuple(insns)
        return cls(insns, compute_blocks(insns))

    def __len__(self) -> int:
        return len(self.instructions)

    def block_insns(self, k: int) -> list[Instruction]:
        start, end = self.blocks[k]
        return list(self.instructions[start:end])  # type: ignore[arg-type]


def compute_blocks(insns: Sequence[Insn]) -> tuple[tuple[int, int], ...]:
    """Maximal runs of straight-line instructions, also split at jump targets."""
    leaders = set()
    for pc, insn in enumerate(insns):
        if isinstance(insn, ControlInsn):
            for t in insn.targets(pc):
                leaders.add(t)
    blocks = []
    start = None
    for pc, insn in enumerate(insns):
        if isinstance(insn, ControlInsn):
            if start is not None:
                blocks.append((start, pc))
            start = None
            continue
        if start is not None and pc in leaders:
            blocks.append((start, pc))
            start = None
        if start is None:
            start = pc
    if start is not None:
        blocks.append((start, len(insns)))
    return tuple(blocks)


# -- text ---------------------------------------------------------------------------

_REG = r"([rw])(10|[0-9])"
_IMM = r"([-+]?(?:0[xX][0-9a-fA-F]+|\d+))"
_OFF = r"(?:\s*([-+])\s*(0[xX][0-9a-fA-F]+|\d+))?"
_SIZE = r"\*\(\s*u(8|16|32|64)\s*\*\s*\)"

_RE_PREFIX = re.compile(r"^\s*\d+\s*[.:]\s+")
_RE_LOAD = re.compile(rf"^r(10|[0-9])\s*=\s*{_SIZE}\s*\(\s*r(10|[0-9]){_OFF}\s*\)$")
_RE_STORE = re.compile(rf"^{_SIZE}\s*\(\s*r(10|[0-9]){_OFF}\s*\)\s*=\s*(?:r(10|[0-9])|{_IMM})$")
_RE_NEG = re.compile(rf"^{_REG}\s*=\s*-\s*{_REG}$")
_RE_ALU = re.compile(rf"^{_REG}\s*(\+|-|\*|/|%|&|\||\^|<<|>>|s>>)?=\s*(?:{_REG}|{_IMM})$")
_RE_GOTO = re.compile(r"^goto\s*([-+]\s*\d+)$")
_RE_IF = re.compile(
    rf"^if\s+{_REG}\s*(==|!=|>=|<=|>|<|s>=|s<=|s>|s<|&)\s*(?:{_REG}|{_IMM})\s+goto\s*([-+]\s*\d+)$"
)
_RE_CALL = re.compile(r"^call\s+(\d+)$")


def _int(text: str) -> int:
    return int(text.replace(" ", ""), 0)


def _imm32(text: str, line: int) -> int:
    v = _int(text)
    if not -(1 << 31) <= v < (1 << 32):
        raise SyntaxError(line, f"immediate {text} does not fit in 32 bits")
    return _s32(v)


def _off16(sign: str | None, digits: str | None, line: int) -> int:
    if digits is None:
        return 0
    v = _int(digits)
    v = -v if sign == "-" else v
    if not -(1 << 15) <= v < (1 << 15):
        raise SyntaxError(line, f"offset {v} does not fit in 16 bits")
    return v


def parse_insn(text: str, line: int = 1) -> Insn:
    s = _RE_PREFIX.sub("", text.strip())
    try:
        return _parse(s, line)
    except IsaError as exc:
        if isinstance(exc, (SyntaxError, UnsupportedInstruction)):
            raise
        raise SyntaxError(line, str(exc)) from None


def _parse(s: str, line: int) -> Insn:
    if m := _RE_LOAD.match(s):
        return Instruction.ldx(int(m[2]) // 8, int(m[1]), int(m[3]), _off16(m[4], m[5], line))
    if m := _RE_STORE.match(s):
        width, base, off = int(m[1]) // 8, int(m[2]), _off16(m[3], m[4], line)
        if m[5] is not None:
            return Instruction.stx(width, base, off, int(m[5]))
        return Instruction.st(width, base, off, _imm32(m[6], line))
    if m := _RE_NEG.match(s):
        if m[1] != m[3] or m[2] != m[4]:
            raise SyntaxError(line, "negation must be in place: rD = -rD")
        return Instruction.alu("neg", int(m[2]), is32=m[1] == "w")
    if m := _RE_ALU.match(s):
        kind, dst, sym = m[1], int(m[2]), (m[3] or "") + "="
        op = _ALU_BY_SYM[sym]
        if m[4] is not None:
            if m[4] != kind:
                raise SyntaxError(line, "mixed r/w register widths")
            return Instruction.alu(op, dst, int(m[5]), is32=kind == "w")
        return Instruction.alu(op, dst, imm=_imm32(m[6], line), is32=kind == "w")
    if s == "exit":
        return ControlInsn("exit")
    if m := _RE_CALL.match(s):
        return ControlInsn("call", imm=_imm32(m[1], line))
    if m := _RE_GOTO.match(s):
        return ControlInsn("ja", off=_off16(None, m[1], line))
    if m := _RE_IF.match(s):
        kind = m[1]
        if m[4] is not None and m[4] != kind:
            raise SyntaxError(line, "mixed r/w register widths")
        op = _JMP_BY_SYM[m[3]]
        off = _off16(None, m[7], line)
        if m[4] is not None:
            return ControlInsn("jcond", op, kind == "w", int(m[2]), True, int(m[5]), 0, off)
        return ControlInsn("jcond", op, kind == "w", int(m[2]), False, 0, _imm32(m[6], line), off)
    if _looks_like_insn(s):
        raise UnsupportedInstruction(line, s)
    raise SyntaxError(line, f"cannot parse {s!r}")


def _looks_like_insn(s: str) -> bool:
    # byte swaps, lddw, atomics, tail calls...
    return bool(re.match(r"^(r\d+\s*=\s*(be|le|bswap)\d+|r\d+\s*=\s*\S+\s+ll$|lock\b|call\b|callx\b|\S+\s*=\s*atomic)", s))


def parse_asm(text: str) -> Program:
    insns: list[Insn] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        stmt = re.split(r"[#;]", raw, maxsplit=1)[0].strip()
        if not stmt:
            continue
        insn = parse_insn(stmt, lineno)
        insns.append(replace(insn, origin=len(insns)))
    return Program.from_instructions(insns)


def _fmt_off(off: int) -> str:
    return f"- {-off}" if off < 0 else f"+ {off}"


def format_insn(insn: Insn) -> str:
    if isinstance(insn, ControlInsn):
        return _format_control(insn)
    if insn.is_alu:
        r = "w" if insn.cls == "alu32" else "r"
        if insn.op == "neg":
            return f"{r}{insn.dst} = -{r}{insn.dst}"
        operand = f"{r}{insn.src}" if insn.src_reg else str(insn.imm)
        return f"{r}{insn.dst} {ALU_OPS[insn.op][1]} {operand}"
    size = f"*(u{insn.width * 8} *)"
    if insn.cls == "ldx":
        return f"r{insn.dst} = {size}(r{insn.src} {_fmt_off(insn.off)})"
    value = f"r{insn.src}" if insn.cls == "stx" else str(insn.imm)
    return f"{size}(r{insn.dst} {_fmt_off(insn.off)}) = {value}"


def _format_control(c: ControlInsn) -> str:
    if c.kind == "exit":
        return "exit"
    if c.kind == "call":
        return f"call {c.imm}"
    target = f"{'+' if c.off >= 0 else '-'}{abs(c.off)}"
    if c.kind == "ja":
        return f"goto {target}"
    r = "w" if c.is32 else "r"
    rhs = f"{r}{c.src}" if c.src_reg else str(c.imm)
    return f"if {r}{c.dst} {JMP_OPS[c.op][1]} {rhs} goto {target}"


def print_asm(p: Program | Iterable[Insn]) -> str:
    insns = p.instructions if isinstance(p, Program) else p
    return "".join(format_insn(i) + "\n" for i in insns)


# -- binary -------------------------------------------------------------------------

_LAYOUT = struct.Struct("<BBhi")


def encode(insn: Insn) -> bytes:
    if isinstance(insn, ControlInsn):
        return _encode_control(insn)
    cls_bits = _CLASS_BITS[insn.cls]
    if insn.is_alu:
        opcode = cls_bits | ALU_OPS[insn.op][0] | (0x08 if insn.src_reg else 0)
        return _LAYOUT.pack(opcode, (insn.src << 4) | insn.dst, 0, insn.imm)
    opcode = cls_bits | _MODE_MEM | _SIZE_BITS[insn.width]
    return _LAYOUT.pack(opcode, (insn.src << 4) | insn.dst, insn.off, insn.imm)


def _encode_control(c: ControlInsn) -> bytes:
    if c.kind == "exit":
        return _LAYOUT.pack(0x95, 0, 0, 0)
    if c.kind == "call":
        return _LAYOUT.pack(0x85, 0, 0, c.imm)
    if c.kind == "ja":
        return _LAYOUT.pack(0x05, 0, c.off, 0)
    opcode = (0x06 if c.is32 else 0x05) | JMP_OPS[c.op][0] | (0x08 if c.src_reg else 0)
    return _LAYOUT.pack(opcode, (c.src << 4) | c.dst, c.off, c.imm)


def decode(data: bytes) -> Insn:
    if len(data) != 8:
        raise IsaError(f"instruction records are 8 bytes, got {len(data)}")
    opcode, regs, off, imm = _LAYOUT.unpack(data)
    dst, src = regs & 0x0F, regs >> 4
    cls = opcode & 0x07
    try:
        if cls in (0x04, 0x07):
            op = _ALU_BY_CODE.get(opcode & 0xF0)
            if op is None or off != 0:
                raise UnknownOpcode(opcode)
            src_reg = bool(opcode & 0x08)
            return Instruction(
                "alu64" if cls == 0x07 else "alu32", dst, op, src_reg, src if src_reg else 0, 0 if src_reg else imm
            )
        if cls in (0x01, 0x02, 0x03):
            if opcode & 0xE0 != _MODE_MEM:
                raise UnknownOpcode(opcode)
            width = _SIZE_BY_BITS[opcode & 0x18]
            name = {0x01: "ldx", 0x02: "st", 0x03: "stx"}[cls]
            if name == "st":
                return Instruction.st(width, dst, off, imm)
            if name == "ldx":
                return Instruction.ldx(width, dst, src, off)
            return Instruction.stx(width, dst, off, src)
        if cls in (0x05, 0x06):
            return _decode_control(opcode, dst, src, off, imm)
    except IsaError as exc:
        if isinstance(exc, UnknownOpcode):
            raise
        raise UnknownOpcode(opcode) from None
    raise UnknownOpcode(opcode)


def _decode_control(opcode: int, dst: int, src: int, off: int, imm: int) -> ControlInsn:
    if opcode == 0x95:
        return ControlInsn("exit")
    if opcode == 0x85:
        return ControlInsn("call", imm=imm)
    if opcode == 0x05:
        return ControlInsn("ja", off=off)
    op = _JMP_BY_CODE.get(opcode & 0xF0)
    if op is None:
        raise UnknownOpcode(opcode)
    src_reg = bool(opcode & 0x08)
    return ControlInsn("jcond", op, (opcode & 0x07) == 0x06, dst, src_reg, src if src_reg else 0, 0 if src_reg else imm, off)


def encode_program(p: Program | Iterable[Insn]) -> bytes:
    insns = p.instructions if isinstance(p, Program) else p
    return b"".join(encode(i) for i in insns)


def decode_program(data: bytes) -> Program:
    if len(data) % 8:
        raise IsaError("program length is not a multiple of 8 bytes")
    insns = [replace(decode(data[k : k + 8]), origin=k // 8) for k in range(0, len(data), 8)]
    return Program.from_instructions(insns)
