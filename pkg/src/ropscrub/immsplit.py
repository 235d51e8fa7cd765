"""Split immediates whose byte rendering contains a forbidden byte.

An immediate like 0xc3 bakes a ret opcode into the instruction stream.  The
fix is two parts that wrap-add back to the original value at runtime in a
scratch register, where neither part's rendering -- nor any other byte of
the replacement sequence -- is a forbidden byte.  Halving is not enough
(0x2ac385 halves to 0x1561c2/0x1561c3, both dirty), so parts come from a
deterministic seeded search with a constructive byte-at-a-time fallback.

Reconstruction semantics by width:

  8/16/32          mov $a, scratch; add $b, scratch   (wraps mod 2**w)
  64 via imm32     both parts are sign-extended imm32s; parts are chosen in
                   signed space so sx(a) + sx(b) equals sx(value) exactly
  64 via imm64     mov is the only imm64-capable load, and add only takes
                   imm32, so part_b can only perturb value by +/-2**31; a
                   dirty byte high in value that neighbouring carries cannot
                   fix is reported as NoCleanSplit
"""

import random
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

from .encoder import (Reg, SubsetInstruction, encode, encode_sequence, reg,
                      UnsupportedInstruction)
from .forbidden import FORBIDDEN_BYTES, is_clean

# ModRM of `add $imm, %reg` and `mov $imm64sx, %reg` is 0xC0 | reg&7, so rdx,
# rbx, r10 and r11 (low bits 2 and 3) would render 0xc2/0xc3 themselves.
DEFAULT_SCRATCH_ORDER = ("r8", "r9", "rcx", "rax", "rsi", "rdi")

_SEARCH_SEED = 0x5C2B
_SEARCH_TRIES = 4096

_CLEAN_BYTES = [b for b in range(256) if b not in FORBIDDEN_BYTES]


class NoCleanSplit(Exception):
    """The part search space was exhausted for this request."""


class ScratchExhausted(Exception):
    """No scratch register yields a clean emitted sequence."""


def _render(value: int, width: int) -> bytes:
    return (value & ((1 << width) - 1)).to_bytes(width // 8, "little")


def needs_split(value: int, width: int) -> bool:
    """True iff the width-bit little-endian rendering has a forbidden byte."""
    if width not in (8, 16, 32, 64):
        raise ValueError(f"bad width {width}")
    return not is_clean(_render(value, width))


@dataclass(frozen=True)
class SplitRequest:
    value: int
    width: int                      # 8, 16, 32 or 64
    signedness: bool = False        # 64-bit consumer sign-extends an imm32
    context: Optional[SubsetInstruction] = None

    def __post_init__(self):
        v, w = self.value, self.width
        if w not in (8, 16, 32, 64):
            raise ValueError(f"bad width {w}")
        if not (-(1 << (w - 1)) <= v < (1 << w)):
            raise ValueError(f"value {v:#x} does not fit {w} bits")
        if w == 64 and self.signedness and not _fits_s32(v & ((1 << 64) - 1)):
            raise ValueError(f"value {v:#x} does not fit a sign-extended imm32")


@dataclass(frozen=True)
class SplitPlan:
    part_a: int
    part_b: int
    width: int                      # reconstruction width
    scratch: Optional[Reg]
    emitted: tuple = field(default_factory=tuple)
    trivial: bool = False


def _sx(value: int, bits: int) -> int:
    value &= (1 << bits) - 1
    return value - (1 << bits) if value >= (1 << (bits - 1)) else value


def _fits_s32(value64: int) -> bool:
    return -(1 << 31) <= _sx(value64, 64) < (1 << 31)


@lru_cache(maxsize=None)
def _offset_sequence(bits: int) -> tuple:
    """Fixed seeded offset permutation shared by every request (deterministic)."""
    rng = random.Random(_SEARCH_SEED + bits)
    if bits == 8:
        offs = list(range(256))
        rng.shuffle(offs)
        return tuple(offs)
    return tuple(rng.getrandbits(bits) for _ in range(_SEARCH_TRIES))


def _greedy_parts(value: int, nbytes: int) -> int:
    """Byte-at-a-time part_a so that both parts are clean; always succeeds.

    At each byte there are 251 clean choices for a's byte and at most 5 of
    them make b's byte dirty, so a clean pair exists whatever the borrow.
    """
    a = 0
    borrow = 0
    for i in range(nbytes):
        vi = (value >> (8 * i)) & 0xFF
        for ai in _CLEAN_BYTES:
            t = vi - ai - borrow
            if (t & 0xFF) not in FORBIDDEN_BYTES:
                a |= ai << (8 * i)
                borrow = 1 if t < 0 else 0
                break
    return a


def _iter_parts(req: SplitRequest):
    """Candidate (part_a, part_b) pairs; renders at each case's immediate width.

    The even halving of Fig-5 style values is tried first (0xc3 gives
    0x62/0x61), then the fixed seeded permutation, then the constructive
    byte-wise fallback that makes widths 8/16/32 complete.
    """
    w = req.width
    if w in (8, 16, 32):
        mask = (1 << w) - 1
        v = req.value & mask
        half = v >> 1
        yield v - half, half
        for off in _offset_sequence(w):
            a = (half + off) & mask
            yield a, (v - a) & mask
        a = _greedy_parts(v, w // 8)
        yield a, (v - a) & mask
    elif req.signedness:
        # sign-extended imm32 pair reconstructed at 64 bits: work in signed
        # space so the exact-sum law holds by construction
        s = _sx(req.value, 64)
        half = s // 2
        lim = 1 << 31
        for a_s in (s - half, *(half + _sx(off, 32) for off in _offset_sequence(32))):
            b_s = s - a_s
            if -lim <= a_s < lim and -lim <= b_s < lim:
                yield a_s & 0xFFFFFFFF, b_s & 0xFFFFFFFF
        a = _greedy_parts(s & 0xFFFFFFFF, 4)
        b = s - _sx(a, 32)
        if -lim <= b < lim:
            yield a, b & 0xFFFFFFFF
    else:
        # true imm64 load; the add can only contribute a sign-extended imm32
        v = req.value & ((1 << 64) - 1)
        for off in _offset_sequence(32):
            delta = _sx(off, 32)
            yield (v - delta) & ((1 << 64) - 1), off


def _case_widths(req: SplitRequest) -> tuple[int, int]:
    """Bit widths of part_a's and part_b's immediate renderings."""
    if req.width in (8, 16, 32):
        return req.width, req.width
    return (32, 32) if req.signedness else (64, 32)


def _law_holds(req: SplitRequest, a: int, b: int) -> bool:
    if req.width in (8, 16, 32):
        mask = (1 << req.width) - 1
        return (a + b) & mask == req.value & mask
    mask = (1 << 64) - 1
    target = req.value & mask if not req.signedness else _sx(req.value, 64) & mask
    ext_a = a if not req.signedness else _sx(a, 32) & mask
    return (ext_a + (_sx(b, 32) & mask)) & mask == target


def _load_add_values(req: SplitRequest, a: int, b: int) -> tuple[int, int]:
    """Integers to hand the encoder for `mov $a` and `add $b`."""
    if req.width in (8, 16, 32):
        return a, b
    if req.signedness:
        return _sx(a, 32), _sx(b, 32)
    return a, _sx(b, 32)


@lru_cache(maxsize=4096)
def _scratch_for(mnemonic: Optional[str], width: int, dst: Optional[Reg],
                 order: tuple) -> tuple[Reg, tuple]:
    """First scratch whose fixed scaffolding encodes cleanly, plus that
    scaffolding.  Value-independent, so cacheable per instruction shape."""
    for name in order:
        cand = reg(name)
        if dst is not None and cand.index == dst.family:
            continue
        scratch_w = cand.at_width(width)
        fixed = [
            SubsetInstruction("push", 64, cand),
            SubsetInstruction("pushfq"),
            SubsetInstruction("popfq"),
        ]
        if mnemonic is not None:
            fixed.append(SubsetInstruction(mnemonic, width, dst, scratch_w))
        fixed.append(SubsetInstruction("pop", 64, cand))
        try:
            if all(is_clean(encode(i).data) for i in fixed):
                return cand, tuple(fixed)
        except UnsupportedInstruction:
            continue
    raise ScratchExhausted(
        f"no scratch register in {order} gives a clean sequence for "
        f"{mnemonic} at width {width} into {dst.name if dst else '?'}")


def split_immediate(req: SplitRequest,
                    scratch_order=DEFAULT_SCRATCH_ORDER) -> SplitPlan:
    """Clean two-part decomposition of a dirty immediate, plus the replacement
    instruction sequence.  Deterministic for equal requests."""
    if not needs_split(req.value, req.width):
        warnings.warn(f"immediate {req.value:#x} is already clean; trivial plan",
                      stacklevel=2)
        return SplitPlan(req.value & ((1 << req.width) - 1), 0, req.width,
                         None, (), trivial=True)

    ctx = req.context
    scratch, fixed = _scratch_for(ctx.mnemonic if ctx else None,
                                  ctx.width if ctx else req.width,
                                  ctx.dst if ctx else None,
                                  tuple(scratch_order))
    w = req.width
    scratch_w = scratch.at_width(w)
    wa, wb = _case_widths(req)

    for a, b in _iter_parts(req):
        if not (is_clean(_render(a, wa)) and is_clean(_render(b, wb))):
            continue
        if not _law_holds(req, a, b):
            continue
        mov_v, add_v = _load_add_values(req, a, b)
        load = SubsetInstruction("mov", w, scratch_w, mov_v)
        add = SubsetInstruction("add", w, scratch_w, add_v)
        emitted = (fixed[0], fixed[1], load, add, *fixed[2:])
        # belt and braces: the whole replacement must scan clean end to end
        if not is_clean(encode_sequence(emitted)):
            continue
        return SplitPlan(a, b, w, scratch, emitted)

    raise NoCleanSplit(f"search exhausted for {req}")
