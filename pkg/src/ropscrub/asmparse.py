"""Line-oriented parser for compiler-emitted AT&T x86-64 assembly.

Every input line becomes exactly one record; untouched records re-emit their
original text byte for byte, so a parse-then-emit round trip is the identity.
Instruction lines the operand grammar cannot handle are kept as opaque
records (preserved verbatim, never transformed) rather than rejected --
mirroring how inline assembly survives a compiler pass untouched.

Functions are delimited by `.type name,@function` directives plus the
matching label, and closed by the `.size name, ...` directive when present.
"""

import re
from dataclasses import dataclass, field
from typing import Optional, Union

from .encoder import Reg, _REG_BY_NAME


class MalformedSource(Exception):
    """Structurally broken input (e.g. unterminated string literal)."""


RET_MNEMONICS = frozenset((
    "ret", "retq", "retw", "lret", "lretq", "iret", "iretq", "iretd"))

SETJMP_FAMILY = frozenset((
    "setjmp", "_setjmp", "sigsetjmp", "__sigsetjmp",
    "longjmp", "_longjmp", "siglongjmp"))

_PREFIX_MNEMONICS = frozenset((
    "rep", "repz", "repe", "repnz", "repne", "lock", "notrack", "data16"))

_SPLITTABLE = ("mov", "add", "sub", "and", "or", "xor", "cmp", "test", "movabs")
_WIDTH_SUFFIX = {"b": 8, "w": 16, "l": 32, "q": 64}


# -- operands -------------------------------------------------------------------

@dataclass(frozen=True)
class ImmOp:
    text: str
    value: Optional[int]  # None when symbolic (e.g. $.LC0)


@dataclass(frozen=True)
class RegOp:
    text: str
    reg: Optional[Reg]    # None for non-GP registers (%xmm0, %rip, ...)


@dataclass(frozen=True)
class MemOp:
    text: str
    segment: Optional[str] = None
    disp_text: str = ""
    disp: Optional[int] = 0       # None when the displacement is symbolic
    base: Optional[Reg] = None
    index: Optional[Reg] = None
    scale: int = 1

    def with_disp(self, disp: int) -> "MemOp":
        inner = ""
        if self.base or self.index:
            inner = "(" + (("%" + self.base.name) if self.base else "")
            if self.index:
                inner += f",%{self.index.name},{self.scale}"
            inner += ")"
        seg = f"%{self.segment}:" if self.segment else ""
        dtext = str(disp) if disp else ("0" if not inner else "")
        return MemOp(f"{seg}{dtext}{inner}", self.segment, dtext, disp,
                     self.base, self.index, self.scale)


@dataclass(frozen=True)
class SymOp:
    text: str             # direct branch target: a bare symbol or local label


@dataclass(frozen=True)
class StarOp:
    text: str             # indirect branch target: *%rax, *8(%rbx), ...


OperandT = Union[ImmOp, RegOp, MemOp, SymOp, StarOp]


@dataclass
class InstructionRecord:
    raw: str
    lineno: int = 0
    labels: list = field(default_factory=list)
    mnemonic: Optional[str] = None   # None for directive/blank/label-only lines
    prefixes: list = field(default_factory=list)
    operands: Optional[list] = None
    directive: bool = False
    opaque: bool = False
    synthetic: bool = False

    @property
    def is_instruction(self) -> bool:
        return self.mnemonic is not None

    @property
    def core_mnemonic(self) -> str:
        return self.mnemonic or ""

    def split_shape(self):
        """(mnemonic_base, width, imm, dst) when this record is an
        immediate-into-register form of the re-encodable instructions."""
        m = self.mnemonic
        if m is None or self.opaque or not self.operands or len(self.operands) != 2:
            return None
        src, dst = self.operands
        if not isinstance(src, ImmOp) or src.value is None:
            return None
        if not isinstance(dst, RegOp) or dst.reg is None:
            return None
        base, width = _mnemonic_width(m, dst.reg)
        if base is None:
            return None
        return base, width, src.value, dst.reg


def _mnemonic_width(mnemonic: str, dst_reg: Optional[Reg]):
    for name in _SPLITTABLE:
        if mnemonic == name:
            return ("mov" if name == "movabs" else name,
                    dst_reg.width if dst_reg else None)
        if mnemonic == name + "b":
            return ("mov" if name == "movabs" else name), 8
        if mnemonic == name + "w":
            return ("mov" if name == "movabs" else name), 16
        if mnemonic == name + "l":
            return ("mov" if name == "movabs" else name), 32
        if mnemonic == name + "q":
            return ("mov" if name == "movabs" else name), 64
    return None, None


@dataclass
class FunctionSpan:
    name: str
    records: list
    has_ret: bool = False
    calls_setjmp_family: bool = False
    tail_jumps: list = field(default_factory=list)
    local_labels: set = field(default_factory=set)

    def refresh(self):
        self.local_labels = set()
        for rec in self.records:
            self.local_labels.update(rec.labels)
        self.has_ret = False
        self.calls_setjmp_family = False
        self.tail_jumps = []
        for i, rec in enumerate(self.records):
            m = rec.mnemonic
            if m is None or rec.opaque:
                continue
            if m in RET_MNEMONICS:
                self.has_ret = True
            if m in ("call", "callq", "jmp", "jmpq") and rec.operands:
                tgt = rec.operands[0]
                if isinstance(tgt, SymOp):
                    base = tgt.text.split("@", 1)[0]
                    if base in SETJMP_FAMILY:
                        self.calls_setjmp_family = True
                    # .L labels are assembler-local: a jump to one is intra-
                    # function control flow even when the label lives in the
                    # function's cold-partition span, never a tail call
                    if m in ("jmp", "jmpq") and tgt.text not in self.local_labels \
                            and not tgt.text.startswith(".L"):
                        self.tail_jumps.append(i)
        return self

    @property
    def continuation_base(self) -> Optional[str]:
        """Base symbol when this span is a jump-entered continuation emitted
        by hot/cold partitioning (e.g. `work.cold` belongs to `work`)."""
        stem, dot, tail = self.name.rpartition(".cold")
        if dot and (tail == "" or tail.lstrip(".").isdigit()):
            return stem
        return None


@dataclass
class AsmDocument:
    items: list  # FunctionSpan or InstructionRecord, in file order

    def functions(self):
        return [it for it in self.items if isinstance(it, FunctionSpan)]

    def records(self):
        for it in self.items:
            if isinstance(it, FunctionSpan):
                yield from it.records
            else:
                yield it

    def emit(self) -> str:
        lines = [rec.raw for rec in self.records()]
        return "\n".join(lines) + ("\n" if lines else "")


# -- lexing ----------------------------------------------------------------------

_LABEL_RE = re.compile(r"^\s*([A-Za-z_.$][\w.$]*|\d+)\s*:")
_TYPE_RE = re.compile(r"^\s*\.type\s+([^\s,]+)\s*,\s*@function")
_SIZE_RE = re.compile(r"^\s*\.size\s+([^\s,]+)")


def strip_comment(line: str, lineno: int) -> str:
    """Drop a # comment, honouring double-quoted strings; reject an
    unterminated string."""
    if '"' not in line:
        return line.split("#", 1)[0] if "#" in line else line
    out = []
    in_str = False
    i = 0
    while i < len(line):
        c = line[i]
        if in_str:
            if c == "\\" and i + 1 < len(line):
                out.append(line[i:i + 2])
                i += 2
                continue
            if c == '"':
                in_str = False
        elif c == '"':
            in_str = True
        elif c == "#":
            break
        out.append(c)
        i += 1
    if in_str:
        raise MalformedSource(f"line {lineno}: unterminated string literal")
    return "".join(out)


def _split_operands(text: str) -> list[str]:
    parts = []
    depth = 0
    cur = []
    for c in text:
        if c == "(":
            depth += 1
        elif c == ")":
            depth -= 1
        if c == "," and depth == 0:
            parts.append("".join(cur).strip())
            cur = []
        else:
            cur.append(c)
    tail = "".join(cur).strip()
    if tail or parts:
        parts.append(tail)
    return parts


def _parse_int(text: str) -> Optional[int]:
    try:
        return int(text, 0)
    except ValueError:
        return None


_MEM_RE = re.compile(r"^(?:%([a-z]{2,3}):)?([^()]*)(?:\(([^)]*)\))?$")


def _parse_reg(tok: str) -> RegOp:
    name = tok[1:]
    return RegOp(tok, _REG_BY_NAME.get(name))


def _parse_operand(tok: str) -> Optional[OperandT]:
    if tok.startswith("$"):
        return ImmOp(tok, _parse_int(tok[1:]))
    if tok.startswith("*"):
        return StarOp(tok)
    if tok.startswith("%"):
        if ":" not in tok:
            return _parse_reg(tok)
        # segment-relative absolute, e.g. %fs:40
        seg, rest = tok[1:].split(":", 1)
        disp = _parse_int(rest)
        if disp is None:
            return None
        return MemOp(tok, segment=seg, disp_text=rest, disp=disp)
    m = _MEM_RE.match(tok)
    if m is None:
        return None
    seg, disp_text, inner = m.groups()
    disp_text = disp_text.strip()
    if inner is None:
        if seg is not None:
            return None
        # bare token: a direct branch target or symbol reference
        return SymOp(tok) if disp_text else None
    disp = _parse_int(disp_text) if disp_text else 0
    base = index = None
    scale = 1
    fields = [f.strip() for f in inner.split(",")] if inner.strip() else []
    if fields:
        if fields[0]:
            if not fields[0].startswith("%"):
                return None
            base = _REG_BY_NAME.get(fields[0][1:])
            if base is None and fields[0] != "%rip":
                return None
        if len(fields) >= 2 and fields[1]:
            if not fields[1].startswith("%"):
                return None
            index = _REG_BY_NAME.get(fields[1][1:])
            if index is None:
                return None
        if len(fields) == 3 and fields[2]:
            s = _parse_int(fields[2])
            if s not in (1, 2, 4, 8):
                return None
            scale = s
        if len(fields) > 3:
            return None
    return MemOp(tok, segment=seg, disp_text=disp_text, disp=disp,
                 base=base, index=index, scale=scale)


def parse_line(raw: str, lineno: int = 0) -> InstructionRecord:
    """One source line to one record; never raises except for MalformedSource."""
    rec = InstructionRecord(raw=raw, lineno=lineno)
    text = strip_comment(raw, lineno)
    while True:
        m = _LABEL_RE.match(text)
        if not m:
            break
        rec.labels.append(m.group(1))
        text = text[m.end():]
    text = text.strip()
    if not text:
        return rec
    if text.startswith("."):
        rec.directive = True
        return rec
    tokens = text.split(None, 1)
    mnemonic = tokens[0].lower()
    rest = tokens[1] if len(tokens) > 1 else ""
    while mnemonic in _PREFIX_MNEMONICS and rest:
        rec.prefixes.append(mnemonic)
        tokens = rest.split(None, 1)
        mnemonic = tokens[0].lower()
        rest = tokens[1] if len(tokens) > 1 else ""
    rec.mnemonic = mnemonic
    operands = []
    for tok in _split_operands(rest):
        op = _parse_operand(tok)
        if op is None:
            rec.opaque = True
            rec.operands = None
            return rec
        operands.append(op)
    rec.operands = operands
    return rec


def parse_assembly(source: str) -> AsmDocument:
    """Whole-file parse into interlude records and FunctionSpans."""
    records = []
    for lineno, raw in enumerate(source.splitlines(), 1):
        records.append(parse_line(raw, lineno))

    typed: set[str] = set()
    items: list = []
    current: Optional[FunctionSpan] = None

    def close(span):
        if span is not None:
            items.append(span.refresh())

    for rec in records:
        text = strip_comment(rec.raw, rec.lineno)
        tm = _TYPE_RE.match(text)
        if tm:
            typed.add(tm.group(1))
        starts = next((lb for lb in rec.labels if lb in typed), None)
        if starts is not None and (current is None or current.name != starts):
            close(current)
            current = FunctionSpan(starts, [])
        if current is None:
            items.append(rec)
            continue
        current.records.append(rec)
        sm = _SIZE_RE.match(text)
        if sm and sm.group(1) == current.name:
            close(current)
            current = None
    close(current)
    return AsmDocument(items)
