"""Ret-family gadget enumeration, alignment classification and before/after
comparison over raw byte buffers.

A gadget is every decodable suffix that lands exactly on a free-branch byte
within a bounded backward window -- the standard Ropper-style construction,
deduplicated by byte string.  Candidate walks that hit an undecodable byte
are skipped: the scan may undercount, never miscount.  Absolute counts are
therefore tool-relative; before/after deltas are the meaningful signal.
"""

from dataclasses import dataclass, field
from typing import Optional

from . import __version__
from .decoder import decode_length
from .forbidden import FreeBranchKind, contains_forbidden

ALIGNED = "aligned"
UNALIGNED = "unaligned"
UNKNOWN = "unknown"


class SectionMismatch(Exception):
    """Reports being compared describe different sections."""


@dataclass(frozen=True)
class ScanOptions:
    max_instructions: int = 6   # instructions allowed before the free branch
    max_window: int = 20        # bytes scanned backward from each free branch
    dedupe: bool = True

    def __post_init__(self):
        if self.max_instructions < 1 or self.max_window < 1:
            raise ValueError("max_instructions and max_window must be >= 1")


@dataclass(frozen=True)
class GadgetRecord:
    start_offset: int
    end_offset: int             # last byte of the free-branch instruction
    data: bytes
    instructions: tuple         # mnemonic summaries, free branch included
    starts: tuple               # instruction start offsets within the buffer
    kind: FreeBranchKind
    aligned: str = UNKNOWN

    def with_alignment(self, aligned: str) -> "GadgetRecord":
        return GadgetRecord(self.start_offset, self.end_offset, self.data,
                            self.instructions, self.starts, self.kind, aligned)


@dataclass(frozen=True)
class BoundaryMap:
    starts: tuple

    def __post_init__(self):
        s = tuple(self.starts)
        if list(s) != sorted(set(s)):
            raise ValueError("boundary map offsets must be strictly ascending")
        object.__setattr__(self, "starts", s)

    def to_dict(self) -> dict:
        return {"starts": list(self.starts)}

    @classmethod
    def from_dict(cls, d: dict) -> "BoundaryMap":
        return cls(tuple(d["starts"]))


@dataclass
class ScanReport:
    section_name: str
    section_file_offset: int
    section_virtual_address: int
    section_size: int
    total_free_branch_bytes: int = 0
    gadget_count: int = 0
    per_kind: dict = field(default_factory=dict)
    aligned_count: int = 0
    unaligned_count: int = 0
    unknown_count: int = 0
    tool_version: str = __version__

    _FIELDS = ("total_free_branch_bytes", "gadget_count", "aligned_count",
               "unaligned_count", "unknown_count")

    def to_dict(self) -> dict:
        return {
            "section": {
                "name": self.section_name,
                "file_offset": self.section_file_offset,
                "virtual_address": self.section_virtual_address,
                "size": self.section_size,
            },
            "total_free_branch_bytes": self.total_free_branch_bytes,
            "gadget_count": self.gadget_count,
            "per_kind": dict(self.per_kind),
            "aligned_count": self.aligned_count,
            "unaligned_count": self.unaligned_count,
            "unknown_count": self.unknown_count,
            "tool_version": self.tool_version,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScanReport":
        try:
            sec = d["section"]
            return cls(
                section_name=sec["name"],
                section_file_offset=sec["file_offset"],
                section_virtual_address=sec["virtual_address"],
                section_size=sec["size"],
                total_free_branch_bytes=d["total_free_branch_bytes"],
                gadget_count=d["gadget_count"],
                per_kind=dict(d["per_kind"]),
                aligned_count=d["aligned_count"],
                unaligned_count=d["unaligned_count"],
                unknown_count=d["unknown_count"],
                tool_version=d.get("tool_version", "?"),
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"not a scan report: missing {exc}") from None


@dataclass
class DiffReport:
    section_name: str
    before: dict
    after: dict
    deltas: dict
    per_kind_deltas: dict
    reduction_percent: float
    regression: bool

    def to_dict(self) -> dict:
        return {
            "section": self.section_name,
            "before": dict(self.before),
            "after": dict(self.after),
            "deltas": dict(self.deltas),
            "per_kind_deltas": dict(self.per_kind_deltas),
            "reduction_percent": self.reduction_percent,
            "regression": self.regression,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiffReport":
        return cls(d["section"], dict(d["before"]), dict(d["after"]),
                   dict(d["deltas"]), dict(d["per_kind_deltas"]),
                   d["reduction_percent"], d["regression"])


def _walk(buf: bytes, start: int, target: int, max_instructions: int):
    """Linear decode from start; returns (summaries, starts) when the walk
    lands exactly on target within the instruction budget, else None."""
    summaries = []
    starts = []
    pos = start
    while pos < target:
        if len(summaries) >= max_instructions:
            return None
        d = decode_length(buf, pos)
        if not d.decoded:
            return None
        summaries.append(d.summary)
        starts.append(pos)
        pos += d.length
    return (summaries, starts) if pos == target else None


def enumerate_gadgets(buf: bytes, opts: ScanOptions = ScanOptions()) -> list:
    """Every bounded-window decodable suffix ending in a ret-family
    instruction, in (free-branch offset, start offset) order."""
    found = []
    seen = set()
    for fb_offset, kind in contains_forbidden(buf):
        branch = decode_length(buf, fb_offset)
        if not branch.decoded:
            continue  # e.g. ret imm16 truncated by the buffer end
        end = fb_offset + branch.length - 1
        for start in range(max(0, fb_offset - opts.max_window), fb_offset + 1):
            walk = _walk(buf, start, fb_offset, opts.max_instructions)
            if walk is None:
                continue
            summaries, starts = walk
            data = buf[start:end + 1]
            if opts.dedupe:
                if data in seen:
                    continue
                seen.add(data)
            found.append(GadgetRecord(
                start_offset=start,
                end_offset=end,
                data=data,
                instructions=(*summaries, branch.summary),
                starts=(*starts, fb_offset),
                kind=kind,
            ))
    return found


def classify(gadgets: list, boundary_map: Optional[BoundaryMap]) -> list:
    """Aligned iff the gadget's start and every instruction start lie on true
    instruction boundaries; unknown when no boundary map is supplied."""
    if boundary_map is None:
        return [g.with_alignment(UNKNOWN) for g in gadgets]
    starts = set(boundary_map.starts)
    out = []
    for g in gadgets:
        ok = g.start_offset in starts and all(s in starts for s in g.starts)
        out.append(g.with_alignment(ALIGNED if ok else UNALIGNED))
    return out


def linear_boundaries(buf: bytes, entry: int = 0) -> BoundaryMap:
    """Instruction starts from a single linear sweep, stopping at the first
    undecodable byte."""
    if buf and not 0 <= entry < len(buf):
        raise IndexError(f"entry {entry} outside buffer of {len(buf)} bytes")
    starts = []
    pos = entry
    while pos < len(buf):
        d = decode_length(buf, pos)
        if not d.decoded:
            break
        starts.append(pos)
        pos += d.length
    return BoundaryMap(tuple(starts))


def build_report(section_name: str, buf: bytes, *,
                 file_offset: int = 0, virtual_address: int = 0,
                 opts: ScanOptions = ScanOptions(),
                 boundary_map: Optional[BoundaryMap] = None
                 ) -> tuple[ScanReport, list]:
    """Scan one buffer into a ScanReport plus its classified gadget list."""
    gadgets = classify(enumerate_gadgets(buf, opts), boundary_map)
    report = ScanReport(section_name, file_offset, virtual_address, len(buf))
    report.total_free_branch_bytes = len(contains_forbidden(buf))
    report.gadget_count = len(gadgets)
    report.per_kind = {k.name.lower(): 0 for k in FreeBranchKind}
    for g in gadgets:
        report.per_kind[g.kind.name.lower()] += 1
        if g.aligned == ALIGNED:
            report.aligned_count += 1
        elif g.aligned == UNALIGNED:
            report.unaligned_count += 1
        else:
            report.unknown_count += 1
    return report, gadgets


def compare(before: ScanReport, after: ScanReport) -> DiffReport:
    """Per-field deltas and percent reduction; flags any count increase."""
    if before.section_name != after.section_name:
        raise SectionMismatch(
            f"cannot compare {before.section_name!r} with {after.section_name!r}")
    deltas = {}
    regression = False
    bvals, avals = {}, {}
    for name in ScanReport._FIELDS:
        b, a = getattr(before, name), getattr(after, name)
        bvals[name], avals[name] = b, a
        deltas[name] = a - b
        if name != "aligned_count" and a > b:
            regression = True
    per_kind_deltas = {}
    for key in sorted(set(before.per_kind) | set(after.per_kind)):
        d = after.per_kind.get(key, 0) - before.per_kind.get(key, 0)
        per_kind_deltas[key] = d
        if d > 0:
            regression = True
    if before.gadget_count > 0:
        reduction = 100.0 * (before.gadget_count - after.gadget_count) \
            / before.gadget_count
    else:
        reduction = 0.0
    return DiffReport(before.section_name, bvals, avals, deltas,
                      per_kind_deltas, round(reduction, 1), regression)
