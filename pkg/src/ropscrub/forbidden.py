"""The ret-family free-branch opcode bytes and scans for them.

Any of these five byte values, at any offset inside an instruction stream
(opcode, ModRM, SIB, displacement or immediate), can serve as the final
free branch of a ROP gadget when execution enters misaligned.
"""

import enum


class FreeBranchKind(enum.Enum):
    RET = 0xC3
    RET_IMM16 = 0xC2
    RETF = 0xCB
    RETF_IMM16 = 0xCA
    IRET = 0xCF

    @property
    def opcode_byte(self) -> int:
        return self.value

    @classmethod
    def from_byte(cls, b: int) -> "FreeBranchKind":
        return cls(b)


FORBIDDEN_BYTES = frozenset(k.value for k in FreeBranchKind)

_BY_BYTE = {k.value: k for k in FreeBranchKind}


def forbidden_bytes() -> frozenset:
    """The five ret-family opcode byte values: {0xc3, 0xc2, 0xcb, 0xca, 0xcf}."""
    return FORBIDDEN_BYTES


def is_clean(data: bytes) -> bool:
    """True iff no byte of data is a ret-family opcode byte."""
    return FORBIDDEN_BYTES.isdisjoint(data)


def contains_forbidden(data: bytes) -> list[tuple[int, FreeBranchKind]]:
    """All (offset, kind) pairs where a ret-family byte occurs, ascending."""
    return [(i, _BY_BYTE[b]) for i, b in enumerate(data) if b in _BY_BYTE]
