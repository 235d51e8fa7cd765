"""Table-driven x86-64 instruction-length decoder.

Computes architectural instruction lengths (plus a coarse mnemonic) for a
documented subset of the ISA: legacy prefixes, REX, the one-byte opcode map
and a common slice of the 0f two-byte map, with full ModRM/SIB/displacement
rules.  Anything outside the table -- VEX/EVEX, the 0f38/0f3a maps, opcodes
undefined in 64-bit mode -- decodes to Undecodable rather than a guess, so a
Decoded result is always the exact length.

The opcode table ships as a data file next to this module (opcode_table.txt,
format documented inside it); set ROPSCRUB_DATA_DIR to load a replacement
table from another directory.
"""

import os
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Optional

MAX_INSTRUCTION_LENGTH = 15

_LEGACY_PREFIXES = frozenset(
    (0x26, 0x2E, 0x36, 0x3E, 0x64, 0x65, 0x66, 0x67, 0xF0, 0xF2, 0xF3))

_GRP1 = ["add", "or", "adc", "sbb", "and", "sub", "xor", "cmp"]
_GRP2 = ["rol", "ror", "rcl", "rcr", "shl", "shr", "sal", "sar"]


@dataclass(frozen=True)
class DecodeResult:
    decoded: bool
    length: Optional[int] = None
    summary: Optional[str] = None

    @classmethod
    def ok(cls, length: int, summary: str) -> "DecodeResult":
        assert 1 <= length <= MAX_INSTRUCTION_LENGTH
        return cls(True, length, summary)


UNDECODABLE = DecodeResult(False)


@dataclass(frozen=True)
class _Entry:
    has_modrm: bool
    imm: str  # "-", "imm8", "imm16", "imm32", "immz", "immv", "moffs"
    mnemonic: str
    mem_only: bool = False  # mod == 11 is an invalid encoding (e.g. lea)


_IMM_CODES = ("-", "imm8", "imm16", "imm32", "immz", "immv", "moffs")


def _parse_table(text: str) -> dict:
    table: dict[int, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split(None, 3)
        if len(fields) < 3:
            raise ValueError(f"opcode table line {lineno}: too few fields: {raw!r}")
        key, modrm, imm = fields[:3]
        mnemonic = fields[3] if len(fields) == 4 else "?"
        digit = None
        if "/" in key:
            key, d = key.split("/", 1)
            digit = int(d)
            if not 0 <= digit <= 7:
                raise ValueError(f"opcode table line {lineno}: bad digit {d}")
        opcode = int(key, 16)
        if len(key) == 4 and key.startswith("0f"):
            pass  # two-byte opcode keyed as 0x0fxx
        elif len(key) != 2:
            raise ValueError(f"opcode table line {lineno}: bad opcode {key!r}")
        if modrm not in ("modrm", "modrm!", "-") or imm not in _IMM_CODES:
            raise ValueError(f"opcode table line {lineno}: bad flags: {raw!r}")
        entry = _Entry(modrm.startswith("modrm"), imm, mnemonic,
                       mem_only=modrm == "modrm!")
        if digit is None:
            if opcode in table:
                raise ValueError(f"opcode table line {lineno}: duplicate {key}")
            table[opcode] = entry
        else:
            if not entry.has_modrm:
                raise ValueError(f"opcode table line {lineno}: /digit needs modrm")
            slot = table.setdefault(opcode, {})
            if not isinstance(slot, dict) or digit in slot:
                raise ValueError(f"opcode table line {lineno}: duplicate {key}/{digit}")
            slot[digit] = entry
    return table


@lru_cache(maxsize=1)
def _table() -> dict:
    override = os.environ.get("ROPSCRUB_DATA_DIR")
    if override:
        with open(os.path.join(override, "opcode_table.txt")) as f:
            return _parse_table(f.read())
    text = resources.files(__package__).joinpath("opcode_table.txt").read_text()
    return _parse_table(text)


def _imm_size(code: str, has66: bool, has67: bool, rex_w: bool) -> int:
    if code == "-":
        return 0
    if code == "imm8":
        return 1
    if code == "imm16":
        return 2
    if code == "imm32":
        return 4
    if code == "immz":
        return 2 if has66 else 4
    if code == "immv":
        return 8 if rex_w else (2 if has66 else 4)
    if code == "moffs":
        return 4 if has67 else 8
    raise AssertionError(code)


def decode_length(buf: bytes, offset: int) -> DecodeResult:
    """Length and coarse mnemonic of the instruction starting at offset.

    Pure function; returns UNDECODABLE for anything outside the table, for
    truncated buffers, and for encodings longer than 15 bytes.
    """
    n = len(buf)
    if not 0 <= offset < n:
        raise IndexError(f"offset {offset} outside buffer of {n} bytes")
    i = offset
    has66 = has67 = rex_w = False
    limit = offset + MAX_INSTRUCTION_LENGTH
    while True:
        if i >= n or i >= limit:
            return UNDECODABLE
        b = buf[i]
        if b in _LEGACY_PREFIXES:
            has66 |= b == 0x66
            has67 |= b == 0x67
            rex_w = False  # a REX not immediately before the opcode is ignored
            i += 1
            continue
        if 0x40 <= b <= 0x4F:
            # A REX byte followed by another prefix is not a position the
            # architecture defines cleanly and disassemblers disagree on it;
            # real compiler output never produces one, so refuse it.
            if i + 1 >= n:
                return UNDECODABLE
            nxt = buf[i + 1]
            if nxt in _LEGACY_PREFIXES or 0x40 <= nxt <= 0x4F:
                return UNDECODABLE
            rex_w = bool(b & 0x08)
            i += 1
            continue
        break

    opcode = buf[i]
    i += 1
    if opcode == 0x0F:
        if i >= n:
            return UNDECODABLE
        opcode = 0x0F00 | buf[i]
        i += 1

    entry = _table().get(opcode)
    if entry is None:
        return UNDECODABLE

    digit = None
    if isinstance(entry, dict) or entry.has_modrm:
        if i >= n:
            return UNDECODABLE
        modrm = buf[i]
        i += 1
        digit = (modrm >> 3) & 7
        if isinstance(entry, dict):
            entry = entry.get(digit)
            if entry is None:
                return UNDECODABLE
        mod = modrm >> 6
        rm = modrm & 7
        if mod == 3 and entry.mem_only:
            return UNDECODABLE
        if mod != 3:
            if rm == 4:  # SIB
                if i >= n:
                    return UNDECODABLE
                sib_base = buf[i] & 7
                i += 1
                if mod == 0 and sib_base == 5:
                    i += 4
            elif mod == 0 and rm == 5:  # RIP-relative
                i += 4
            i += {0: 0, 1: 1, 2: 4}[mod]

    i += _imm_size(entry.imm, has66, has67, rex_w)
    if i > n or i - offset > MAX_INSTRUCTION_LENGTH:
        return UNDECODABLE

    mnemonic = entry.mnemonic
    if mnemonic == "grp1":
        mnemonic = _GRP1[digit]
    elif mnemonic == "grp2":
        mnemonic = _GRP2[digit]
    return DecodeResult.ok(i - offset, mnemonic)
