"""Scan-target loading: executable sections out of ELF64 files, plus flat
binary blobs.

Only 64-bit little-endian ELF is accepted (the rewriter targets x86-64
Linux).  Section headers drive extraction; binaries stripped of section
headers fall back to executable PT_LOAD program-header segments.  All header
arithmetic is bounds-checked so truncated or hostile inputs raise the typed
errors below instead of crashing.
"""

import struct
from dataclasses import dataclass

ELF_MAGIC = b"\x7fELF"
SHT_NOBITS = 8
SHF_EXECINSTR = 0x4
PT_LOAD = 1
PF_X = 0x1


class NotElf(Exception):
    pass


class UnsupportedClass(Exception):
    pass


class TruncatedFile(Exception):
    pass


class MalformedHeader(Exception):
    pass


class IoFailure(Exception):
    pass


@dataclass(frozen=True)
class Section:
    name: str
    file_offset: int
    virtual_address: int
    data: bytes
    executable: bool


def _read(path: str) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as exc:
        raise IoFailure(f"{path}: {exc.strerror or exc}") from None


def load_flat(path: str) -> Section:
    """Whole file as a single executable pseudo-section."""
    return Section("flat", 0, 0, _read(path), True)


def _u16(blob: bytes, off: int) -> int:
    return struct.unpack_from("<H", blob, off)[0]


def _u64(blob: bytes, off: int) -> int:
    return struct.unpack_from("<Q", blob, off)[0]


def _strz(blob: bytes, start: int, limit: int) -> str:
    end = blob.find(b"\0", start, limit)
    if end < 0:
        raise MalformedHeader("section name not NUL-terminated inside strtab")
    return blob[start:end].decode("latin-1")


def _segments(blob: bytes) -> list[Section]:
    phoff = _u64(blob, 0x20)
    phentsize = _u16(blob, 0x36)
    phnum = _u16(blob, 0x38)
    if phnum == 0:
        return []
    if phentsize < 56:
        raise MalformedHeader(f"e_phentsize {phentsize} too small")
    if phoff + phnum * phentsize > len(blob):
        raise TruncatedFile("program header table extends past end of file")
    out = []
    for i in range(phnum):
        base = phoff + i * phentsize
        p_type, p_flags = struct.unpack_from("<II", blob, base)
        p_offset = _u64(blob, base + 0x08)
        p_vaddr = _u64(blob, base + 0x10)
        p_filesz = _u64(blob, base + 0x20)
        if p_type != PT_LOAD or not p_flags & PF_X:
            continue
        if p_offset + p_filesz > len(blob):
            raise TruncatedFile(f"segment {i} extends past end of file")
        out.append(Section(f"load{i}", p_offset, p_vaddr,
                           blob[p_offset:p_offset + p_filesz], True))
    return out


def load_elf_exec_sections(path: str) -> list[Section]:
    """Every section with SHF_EXECINSTR, byte-exact; falls back to executable
    PT_LOAD segments when the section header table is absent."""
    blob = _read(path)
    if len(blob) < 4:
        raise TruncatedFile(f"{path}: {len(blob)} bytes is not even an ELF magic")
    if blob[:4] != ELF_MAGIC:
        raise NotElf(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 64:
        raise TruncatedFile(f"{path}: ELF header truncated at {len(blob)} bytes")
    if blob[4] != 2:
        raise UnsupportedClass(f"{path}: not a 64-bit ELF (EI_CLASS={blob[4]})")
    if blob[5] != 1:
        raise UnsupportedClass(f"{path}: not little-endian (EI_DATA={blob[5]})")

    shoff = _u64(blob, 0x28)
    shentsize = _u16(blob, 0x3A)
    shnum = _u16(blob, 0x3C)
    shstrndx = _u16(blob, 0x3E)
    if shoff == 0 or shnum == 0:
        return _segments(blob)
    if shentsize < 64:
        raise MalformedHeader(f"e_shentsize {shentsize} too small")
    if shoff + shnum * shentsize > len(blob):
        raise TruncatedFile("section header table extends past end of file")
    if shstrndx >= shnum:
        raise MalformedHeader(f"e_shstrndx {shstrndx} out of range ({shnum} sections)")

    def header(i: int) -> tuple:
        base = shoff + i * shentsize
        sh_name, sh_type = struct.unpack_from("<II", blob, base)
        sh_flags = _u64(blob, base + 0x08)
        sh_addr = _u64(blob, base + 0x10)
        sh_offset = _u64(blob, base + 0x18)
        sh_size = _u64(blob, base + 0x20)
        return sh_name, sh_type, sh_flags, sh_addr, sh_offset, sh_size

    _, str_type, _, _, str_off, str_size = header(shstrndx)
    if str_off + str_size > len(blob):
        raise TruncatedFile("string table extends past end of file")

    sections = []
    for i in range(shnum):
        sh_name, sh_type, sh_flags, sh_addr, sh_offset, sh_size = header(i)
        if not sh_flags & SHF_EXECINSTR:
            continue
        if sh_type == SHT_NOBITS:
            continue
        if sh_offset + sh_size > len(blob):
            raise TruncatedFile(f"section {i} extends past end of file")
        if sh_name >= str_size:
            raise MalformedHeader(f"section {i} name offset outside strtab")
        name = _strz(blob, str_off + sh_name, str_off + str_size)
        sections.append(Section(name, sh_offset, sh_addr,
                                blob[sh_offset:sh_offset + sh_size], True))
    return sections
