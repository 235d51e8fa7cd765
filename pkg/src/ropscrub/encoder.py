"""Subset x86-64 encoder for every byte sequence the rewriter emits.

Only the instruction forms the rewrite passes produce (plus the forms they
replace) are encodable; anything else raises UnsupportedInstruction rather
than guessing.  Encodings match GNU as choices byte for byte, including the
imm8 short forms (83 /n), the accumulator short forms (04/05/0c/... and
a8/a9), and the c7-vs-movabs selection for 64-bit mov, so that scanning an
encoded sequence for forbidden bytes tells the truth about the assembled
output.
"""

from dataclasses import dataclass, field
from typing import Optional, Union

from .forbidden import is_clean


class UnsupportedInstruction(Exception):
    """Instruction form outside the documented encoder table."""


# -- registers ----------------------------------------------------------------

_R64 = ["rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi",
        "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15"]
_R32 = ["eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi",
        "r8d", "r9d", "r10d", "r11d", "r12d", "r13d", "r14d", "r15d"]
_R16 = ["ax", "cx", "dx", "bx", "sp", "bp", "si", "di",
        "r8w", "r9w", "r10w", "r11w", "r12w", "r13w", "r14w", "r15w"]
_R8 = ["al", "cl", "dl", "bl", "spl", "bpl", "sil", "dil",
       "r8b", "r9b", "r10b", "r11b", "r12b", "r13b", "r14b", "r15b"]
_R8_HIGH = {"ah": 4, "ch": 5, "dh": 6, "bh": 7}


@dataclass(frozen=True)
class Reg:
    index: int          # 0..15
    width: int          # 8, 16, 32, 64
    high: bool = False  # ah/ch/dh/bh (index 4..7, width 8)

    @property
    def name(self) -> str:
        if self.high:
            return {4: "ah", 5: "ch", 6: "dh", 7: "bh"}[self.index]
        return {8: _R8, 16: _R16, 32: _R32, 64: _R64}[self.width][self.index]

    @property
    def family(self) -> int:
        """Index of the containing 64-bit register (ah lives in rax, not rsp)."""
        return self.index - 4 if self.high else self.index

    @property
    def needs_rex(self) -> bool:
        # spl/bpl/sil/dil are only addressable with a REX prefix present
        return (self.width == 8 and not self.high and 4 <= self.index <= 7) \
            or self.index >= 8

    def at_width(self, width: int) -> "Reg":
        return Reg(self.index, width)


_REG_BY_NAME = {}
for _tab, _w in ((_R8, 8), (_R16, 16), (_R32, 32), (_R64, 64)):
    for _i, _n in enumerate(_tab):
        _REG_BY_NAME[_n] = Reg(_i, _w)
for _n, _i in _R8_HIGH.items():
    _REG_BY_NAME[_n] = Reg(_i, 8, high=True)


def reg(name: str) -> Reg:
    """Look up a register by AT&T name without the % sigil."""
    try:
        return _REG_BY_NAME[name]
    except KeyError:
        raise UnsupportedInstruction(f"unknown register {name!r}") from None


@dataclass(frozen=True)
class Mem:
    base: Optional[Reg] = None
    index: Optional[Reg] = None
    scale: int = 1
    disp: int = 0


@dataclass(frozen=True)
class SegDisp:
    segment: str  # "fs" or "gs"
    disp: int


Operand = Union[Reg, Mem, SegDisp, int]


@dataclass(frozen=True)
class SubsetInstruction:
    mnemonic: str
    width: int = 64
    dst: Optional[Operand] = None
    src: Optional[Operand] = None

    def text(self) -> str:
        """AT&T source line for this instruction (tab-indented)."""
        return _render_text(self)


@dataclass(frozen=True)
class EncodedInstruction:
    data: bytes
    source: Optional[SubsetInstruction] = field(default=None, compare=False)

    @property
    def length(self) -> int:
        return len(self.data)

    def __post_init__(self):
        if not 1 <= len(self.data) <= 15:
            raise UnsupportedInstruction(
                f"encoding of {len(self.data)} bytes outside 1..15")


# -- immediate helpers ---------------------------------------------------------


def _fits_signed(value: int, bits: int) -> bool:
    return -(1 << (bits - 1)) <= value < (1 << (bits - 1))


def _as_signed(value: int, bits: int) -> int:
    value &= (1 << bits) - 1
    if value >= 1 << (bits - 1):
        value -= 1 << bits
    return value


def _imm_bytes(value: int, size: int) -> bytes:
    return (value & ((1 << (8 * size)) - 1)).to_bytes(size, "little")


def render_immediate(value: int, width: int) -> bytes:
    """Little-endian two's-complement rendering of value at width bits."""
    return _imm_bytes(value, width // 8)


# -- encoding internals ---------------------------------------------------------

_ARITH_DIGIT = {"add": 0, "or": 1, "and": 4, "sub": 5, "xor": 6, "cmp": 7}
_RR_OPBASE = {"add": 0x00, "or": 0x08, "and": 0x20, "sub": 0x28,
              "xor": 0x30, "cmp": 0x38, "mov": 0x88, "test": 0x84}
_SEG_PREFIX = {"fs": 0x64, "gs": 0x65}


class _Asm:
    """Accumulates one instruction's bytes and REX requirements."""

    def __init__(self, width: int):
        self.legacy: list[int] = []
        self.rex_w = width == 64
        self.rex_r = False
        self.rex_x = False
        self.rex_b = False
        self.force_rex = False
        self.no_rex = False
        self.opcode: list[int] = []
        self.tail: list[int] = []
        if width == 16:
            self.legacy.append(0x66)

    def use_reg(self, r: Reg, slot: str) -> int:
        if r.high:
            self.no_rex = True
        elif r.needs_rex:
            self.force_rex = True
        if r.index >= 8:
            setattr(self, "rex_" + slot, True)
        return r.index & 7

    def finish(self) -> bytes:
        need = self.rex_w or self.rex_r or self.rex_x or self.rex_b or self.force_rex
        if need and self.no_rex:
            raise UnsupportedInstruction(
                "ah/bh/ch/dh cannot combine with a REX-requiring operand")
        out = bytearray(self.legacy)
        if need:
            out.append(0x40 | (self.rex_w << 3) | (self.rex_r << 2)
                       | (self.rex_x << 1) | self.rex_b)
        out.extend(self.opcode)
        out.extend(self.tail)
        return bytes(out)


def _modrm_reg_reg(a: _Asm, regfield: Reg, rm: Reg):
    r = a.use_reg(regfield, "r")
    b = a.use_reg(rm, "b")
    a.tail.append(0xC0 | (r << 3) | b)


def _modrm_digit_reg(a: _Asm, digit: int, rm: Reg):
    b = a.use_reg(rm, "b")
    a.tail.append(0xC0 | (digit << 3) | b)


def _modrm_mem(a: _Asm, regfield_bits: int, mem: Mem):
    disp = mem.disp
    if mem.base is None and mem.index is None:
        # absolute disp32 (SIB form, base=101 with mod=00)
        a.tail.append((regfield_bits << 3) | 0x04)
        a.tail.append(0x25)
        a.tail.extend(_imm_bytes(disp, 4))
        return
    if mem.base is None:
        raise UnsupportedInstruction("index-only memory operands not in table")
    if mem.base.width != 64:
        raise UnsupportedInstruction("memory base must be a 64-bit register")
    base_low = a.use_reg(mem.base, "b")
    need_sib = mem.index is not None or base_low == 4
    if disp == 0 and base_low != 5:
        mod, dbytes = 0x00, b""
    elif _fits_signed(disp, 8):
        mod, dbytes = 0x40, _imm_bytes(disp, 1)
    else:
        mod, dbytes = 0x80, _imm_bytes(disp, 4)
    if need_sib:
        a.tail.append(mod | (regfield_bits << 3) | 0x04)
        if mem.index is not None:
            if mem.index.width != 64 or mem.index.index == 4:
                raise UnsupportedInstruction("bad index register")
            idx = a.use_reg(mem.index, "x")
            ss = {1: 0, 2: 1, 4: 2, 8: 3}.get(mem.scale)
            if ss is None:
                raise UnsupportedInstruction(f"bad scale {mem.scale}")
        else:
            idx, ss = 4, 0
        a.tail.append((ss << 6) | (idx << 3) | base_low)
    else:
        a.tail.append(mod | (regfield_bits << 3) | base_low)
    a.tail.extend(dbytes)


def _check_width(instr: SubsetInstruction, r: Reg):
    if r.width != instr.width:
        raise UnsupportedInstruction(
            f"{r.name} does not match operand width {instr.width}")


def _encode_mov_imm(instr: SubsetInstruction) -> bytes:
    dst, value, w = instr.dst, instr.src, instr.width
    _check_width(instr, dst)
    if w == 64:
        value &= (1 << 64) - 1
        if _fits_signed(_as_signed(value, 64), 32):
            a = _Asm(64)
            a.opcode.append(0xC7)
            _modrm_digit_reg(a, 0, dst)
            a.tail.extend(_imm_bytes(value, 4))
            return a.finish()
        a = _Asm(64)  # movabs
        low = a.use_reg(dst, "b")
        a.opcode.append(0xB8 | low)
        a.tail.extend(_imm_bytes(value, 8))
        return a.finish()
    size = w // 8
    if not (_fits_signed(value, w) or 0 <= value < (1 << w)):
        raise UnsupportedInstruction(f"immediate {value:#x} too wide for {w}-bit mov")
    a = _Asm(w)
    low = a.use_reg(dst, "b")
    a.opcode.append((0xB0 if w == 8 else 0xB8) | low)
    a.tail.extend(_imm_bytes(value, size))
    return a.finish()


def _encode_arith_imm(instr: SubsetInstruction) -> bytes:
    dst, value, w = instr.dst, instr.src, instr.width
    _check_width(instr, dst)
    signed = _as_signed(value, w if w < 64 else 64)
    if w == 64 and not _fits_signed(signed, 32):
        raise UnsupportedInstruction(f"immediate {value:#x} needs imm64; only mov has one")
    if not (_fits_signed(value, w) or 0 <= value < (1 << min(w, 64))):
        raise UnsupportedInstruction(f"immediate {value:#x} too wide for width {w}")
    digit = _ARITH_DIGIT[instr.mnemonic]
    opbase = _RR_OPBASE[instr.mnemonic]
    a = _Asm(w)
    if w == 8:
        if dst.index == 0 and not dst.high:  # %al
            a.opcode.append(opbase + 4)
        else:
            a.opcode.append(0x80)
            _modrm_digit_reg(a, digit, dst)
        a.tail.extend(_imm_bytes(value, 1))
    elif _fits_signed(signed, 8):
        a.opcode.append(0x83)
        _modrm_digit_reg(a, digit, dst)
        a.tail.extend(_imm_bytes(value, 1))
    else:
        isize = 2 if w == 16 else 4
        if dst.index == 0:  # accumulator short form
            a.opcode.append(opbase + 5)
        else:
            a.opcode.append(0x81)
            _modrm_digit_reg(a, digit, dst)
        a.tail.extend(_imm_bytes(value, isize))
    return a.finish()


def _encode_test_imm(instr: SubsetInstruction) -> bytes:
    dst, value, w = instr.dst, instr.src, instr.width
    _check_width(instr, dst)
    if w == 64 and not _fits_signed(_as_signed(value, 64), 32):
        raise UnsupportedInstruction("64-bit test immediate must fit imm32")
    if not (_fits_signed(value, w) or 0 <= value < (1 << min(w, 64))):
        raise UnsupportedInstruction(f"immediate {value:#x} too wide for width {w}")
    isize = 1 if w == 8 else (2 if w == 16 else 4)
    a = _Asm(w)
    if dst.index == 0 and not dst.high:
        a.opcode.append(0xA8 if w == 8 else 0xA9)
    else:
        a.opcode.append(0xF6 if w == 8 else 0xF7)
        _modrm_digit_reg(a, 0, dst)
    a.tail.extend(_imm_bytes(value, isize))
    return a.finish()


def _encode_rr(instr: SubsetInstruction) -> bytes:
    dst, src, w = instr.dst, instr.src, instr.width
    _check_width(instr, dst)
    _check_width(instr, src)
    a = _Asm(w)
    a.opcode.append(_RR_OPBASE[instr.mnemonic] + (0 if w == 8 else 1))
    _modrm_reg_reg(a, src, dst)
    return a.finish()


def _encode_push_pop(instr: SubsetInstruction) -> bytes:
    r = instr.dst
    if r.width != 64:
        raise UnsupportedInstruction("push/pop only encoded for 64-bit registers")
    a = _Asm(32)  # push/pop default to 64-bit operand; no REX.W
    low = a.use_reg(r, "b")
    a.opcode.append((0x50 if instr.mnemonic == "push" else 0x58) | low)
    return a.finish()


def _encode_xor_mem(instr: SubsetInstruction) -> bytes:
    mem, src, w = instr.dst, instr.src, instr.width
    if not isinstance(mem, Mem) or not isinstance(src, Reg):
        raise UnsupportedInstruction("xor_mem takes a memory dst and register src")
    _check_width(instr, src)
    a = _Asm(w)
    a.opcode.append(0x30 if w == 8 else 0x31)
    regbits = a.use_reg(src, "r")
    _modrm_mem(a, regbits, mem)
    return a.finish()


def _encode_mov_fs(instr: SubsetInstruction) -> bytes:
    dst, seg = instr.dst, instr.src
    if not isinstance(dst, Reg) or not isinstance(seg, SegDisp):
        raise UnsupportedInstruction("mov_fs takes a register dst and segment src")
    _check_width(instr, dst)
    a = _Asm(instr.width)
    a.legacy.insert(0, _SEG_PREFIX[seg.segment])
    a.opcode.append(0x8A if instr.width == 8 else 0x8B)
    regbits = a.use_reg(dst, "r")
    _modrm_mem(a, regbits, Mem(disp=seg.disp))
    return a.finish()


_NO_OPERAND = {"nop": b"\x90", "ret": b"\xc3", "pushfq": b"\x9c", "popfq": b"\x9d"}


def encode(instr: SubsetInstruction) -> EncodedInstruction:
    """Canonical machine-code bytes for a table instruction; deterministic."""
    m = instr.mnemonic
    if m in _NO_OPERAND:
        return EncodedInstruction(_NO_OPERAND[m], instr)
    if m in ("push", "pop"):
        data = _encode_push_pop(instr)
    elif m == "mov_fs":
        data = _encode_mov_fs(instr)
    elif m == "xor_mem":
        data = _encode_xor_mem(instr)
    elif m == "mov" and isinstance(instr.src, int):
        data = _encode_mov_imm(instr)
    elif m == "mov" and isinstance(instr.src, Reg):
        data = _encode_rr(instr)
    elif m == "test" and isinstance(instr.src, int):
        data = _encode_test_imm(instr)
    elif m in _ARITH_DIGIT and isinstance(instr.src, int):
        data = _encode_arith_imm(instr)
    elif m in _RR_OPBASE and isinstance(instr.src, Reg):
        data = _encode_rr(instr)
    else:
        raise UnsupportedInstruction(f"no encoding for {instr}")
    return EncodedInstruction(data, instr)


def encode_sequence(instrs) -> bytes:
    return b"".join(encode(i).data for i in instrs)


def sequence_is_clean(instrs) -> bool:
    """True iff the concatenated encoding carries no forbidden byte."""
    return is_clean(encode_sequence(instrs))


# -- AT&T text rendering --------------------------------------------------------

_SUFFIX = {8: "b", 16: "w", 32: "l", 64: "q"}


def _operand_text(op: Operand) -> str:
    if isinstance(op, Reg):
        return "%" + op.name
    if isinstance(op, int):
        return f"${op:#x}" if op >= 0 else f"$-{-op:#x}"
    if isinstance(op, SegDisp):
        return f"%{op.segment}:{op.disp:#x}"
    if isinstance(op, Mem):
        parts = ""
        if op.disp:
            parts += f"{op.disp:#x}" if op.disp > 0 else f"-{-op.disp:#x}"
        inner = "%" + op.base.name if op.base else ""
        if op.index:
            inner += f", %{op.index.name}, {op.scale}"
        return f"{parts}({inner})"
    raise UnsupportedInstruction(f"cannot render operand {op!r}")


def _render_text(instr: SubsetInstruction) -> str:
    m = instr.mnemonic
    if m in _NO_OPERAND:
        return "\t" + m
    if m in ("push", "pop"):
        return f"\t{m}q\t{_operand_text(instr.dst)}"
    if m == "mov_fs":
        return f"\tmov{_SUFFIX[instr.width]}\t{_operand_text(instr.src)}, {_operand_text(instr.dst)}"
    if m == "xor_mem":
        return f"\txor{_SUFFIX[instr.width]}\t{_operand_text(instr.src)}, {_operand_text(instr.dst)}"
    base = m
    if m == "mov" and isinstance(instr.src, int) and instr.width == 64 \
            and not _fits_signed(_as_signed(instr.src & ((1 << 64) - 1), 64), 32):
        base = "movabs"
    return f"\t{base}{_SUFFIX[instr.width]}\t{_operand_text(instr.src)}, {_operand_text(instr.dst)}"
