"""Command-line interface: scan, rewrite, split and report verbs.

Exit codes are a stable contract for CI: 0 success, 2 input/parse error,
3 regression flagged by the report verb.  Machine-readable JSON is available
everywhere via --json.  Two environment variables apply: ROPSCRUB_DATA_DIR
(alternate opcode-table directory, see decoder) and ROPSCRUB_COLOR (0/1
forces color off/on; default is tty detection).
"""

import argparse
import json
import os
import re
import shutil
import subprocess
import sys
import tempfile
import warnings

from . import __version__
from .asmparse import MalformedSource, parse_line
from .elffile import (IoFailure, MalformedHeader, NotElf, Section,
                      TruncatedFile, UnsupportedClass, load_elf_exec_sections,
                      load_flat)
from .encoder import SegDisp, SubsetInstruction, encode, reg
from .forbidden import is_clean
from .gadgets import (BoundaryMap, DiffReport, ScanOptions, ScanReport,
                      SectionMismatch, build_report, compare,
                      linear_boundaries)
from .immsplit import (NoCleanSplit, ScratchExhausted, SplitRequest,
                       needs_split, split_immediate)
from .rewrite import (AlreadyRewritten, RewriteError, RewriteOptions,
                      rewrite_file)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_REGRESSION = 3


def _color_enabled() -> bool:
    env = os.environ.get("ROPSCRUB_COLOR")
    if env is not None:
        return env not in ("0", "", "no", "off")
    return sys.stdout.isatty()


def _paint(text: str, code: str) -> str:
    return f"\x1b[{code}m{text}\x1b[0m" if _color_enabled() else text


def _err(msg: str):
    print(f"error: {msg}", file=sys.stderr)


def _warn(msg: str):
    print(f"warning: {msg}", file=sys.stderr)


# -- scan -------------------------------------------------------------------------

# Left column of a gas listing line: line number, then optionally a hex
# offset and the opcode bytes.  The source column follows the first tab;
# continuation lines (opcode bytes that overflowed) carry no tab at all.
_LISTING_LHS_RE = re.compile(r"^\s*\d+\s*(?:([0-9A-Fa-f]{4,})\s+[0-9A-F ]+?)?\s*$")


def _assemble_with_boundaries(path: str) -> tuple[bytes, BoundaryMap]:
    """Assemble a .s file with the system assembler and recover the true
    .text instruction starts from its listing."""
    gas = shutil.which("as")
    if gas is None:
        raise IoFailure("system assembler 'as' not found; --asm needs one")
    with tempfile.TemporaryDirectory() as tmp:
        obj = os.path.join(tmp, "out.o")
        proc = subprocess.run(
            [gas, "--listing-lhs-width=5", "-al", "-o", obj, path],
            capture_output=True, text=True)
        if proc.returncode != 0:
            raise IoFailure(f"assembler failed:\n{proc.stderr.strip()}")
        starts = []
        section = ".text"
        for line in proc.stdout.splitlines():
            left, tab, source = line.partition("\t")
            if not tab:
                continue  # byte-continuation rows and page banners
            m = _LISTING_LHS_RE.match(left)
            if m is None:
                continue
            stripped = source.strip()
            if stripped.startswith(".text"):
                section = ".text"
                continue
            if stripped.startswith((".section", ".data", ".bss", ".rodata")):
                section = stripped.split()[0]
                continue
            if m.group(1) is None or section != ".text":
                continue
            rec = parse_line(source)
            if rec.is_instruction:
                starts.append(int(m.group(1), 16))
        text = next((s for s in load_elf_exec_sections(obj)
                     if s.name == ".text"), None)
        if text is None:
            raise IoFailure("assembled object has no .text section")
        return text.data, BoundaryMap(tuple(dict.fromkeys(starts)))


def _scan_sections(args) -> list[tuple[Section, BoundaryMap | None]]:
    if args.flat and args.asm:
        raise IoFailure("--flat and --asm are mutually exclusive")
    if args.asm:
        data, bmap = _assemble_with_boundaries(args.target)
        return [(Section(".text", 0, 0, data, True), bmap)]
    if args.flat:
        sec = load_flat(args.target)
    else:
        sections = load_elf_exec_sections(args.target)
        if not sections:
            return []
        bmap = _load_boundary_map(args)
        return [(s, bmap if bmap or not args.linear_sweep
                 else linear_boundaries(s.data)) for s in sections]
    bmap = _load_boundary_map(args)
    if bmap is None and args.linear_sweep:
        bmap = linear_boundaries(sec.data)
    return [(sec, bmap)]


def _load_boundary_map(args) -> BoundaryMap | None:
    if not args.boundary_map:
        return None
    with open(args.boundary_map) as f:
        return BoundaryMap.from_dict(json.load(f))


def _print_report_table(rep: ScanReport):
    head = f"{rep.section_name} ({rep.section_size} bytes)"
    print(_paint(head, "1"))
    print(f"  free-branch bytes : {rep.total_free_branch_bytes}")
    print(f"  gadgets           : {rep.gadget_count}")
    print(f"  aligned/unaligned : {rep.aligned_count}/{rep.unaligned_count}"
          f" (+{rep.unknown_count} unknown)")
    kinds = ", ".join(f"{k}={v}" for k, v in rep.per_kind.items() if v)
    print(f"  per kind          : {kinds or 'none'}")


def cmd_scan(args) -> int:
    opts = ScanOptions(max_instructions=args.max_instructions,
                       max_window=args.max_window,
                       dedupe=not args.no_dedupe)
    pairs = _scan_sections(args)
    reports = []
    for sec, bmap in pairs:
        rep, gadget_list = build_report(
            sec.name, sec.data, file_offset=sec.file_offset,
            virtual_address=sec.virtual_address, opts=opts, boundary_map=bmap)
        reports.append((rep, gadget_list))
    if args.json:
        if len(reports) == 1 and (args.flat or args.asm):
            payload = reports[0][0].to_dict()
        else:
            payload = {"reports": [r.to_dict() for r, _ in reports]}
        json.dump(payload, sys.stdout, indent=2)
        print()
    else:
        for rep, gadget_list in reports:
            _print_report_table(rep)
            if args.verbose:
                for g in gadget_list:
                    insns = "; ".join(g.instructions)
                    print(f"    {g.start_offset:#06x}  {g.data.hex():<24} "
                          f"{insns}  [{g.aligned}]")
    return EXIT_OK


# -- rewrite ----------------------------------------------------------------------

def _parse_canary(text: str) -> SegDisp:
    m = re.fullmatch(r"%?(fs|gs):(.+)", text)
    if not m:
        raise IoFailure(f"bad canary location {text!r}; expected fs:0x28 form")
    return SegDisp(m.group(1), int(m.group(2), 0))


def cmd_rewrite(args) -> int:
    opts = RewriteOptions(
        enable_encrypt=not args.no_encrypt,
        enable_sled=not args.no_sled,
        enable_imm=not args.no_imm,
        sled_length=args.sled_length,
        canary_location=_parse_canary(args.canary),
    )
    with open(args.input) as f:
        source = f.read()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        text, stats = rewrite_file(source, opts)
    if args.output:
        with open(args.output, "w") as f:
            f.write(text)
        out = sys.stdout
    else:
        sys.stdout.write(text)
        out = sys.stderr
    for w in stats.warnings:
        _warn(w)
    if args.json:
        json.dump(stats.to_dict(), out, indent=2)
        print(file=out)
    else:
        print(f"split {stats.immediates_split} immediates, instrumented "
              f"{stats.functions_instrumented} functions, protected "
              f"{stats.rets_protected} rets and {stats.tail_jumps_protected} "
              f"tail jumps", file=out)
    return EXIT_OK


# -- split ------------------------------------------------------------------------

def cmd_split(args) -> int:
    value = int(args.value, 0)
    width = args.width
    if not needs_split(value, width):
        _warn(f"immediate {value:#x} renders no forbidden byte at width "
              f"{width}; no split needed")
        if args.json:
            json.dump({"trivial": True, "part_a": value, "part_b": 0,
                       "width": width}, sys.stdout, indent=2)
            print()
        return EXIT_OK
    fits_s32 = -(1 << 31) <= (value - (1 << 64) if value >= (1 << 63) else value) < (1 << 31)
    req = SplitRequest(value, width,
                       signedness=width == 64 and fits_s32,
                       context=SubsetInstruction("mov", width,
                                                 reg("rax").at_width(width), value))
    plan = split_immediate(req)
    if args.json:
        json.dump({
            "trivial": False,
            "part_a": plan.part_a,
            "part_b": plan.part_b,
            "width": plan.width,
            "scratch": plan.scratch.name,
            "emitted": [i.text().strip() for i in plan.emitted],
        }, sys.stdout, indent=2)
        print()
    else:
        print(f"part_a = {plan.part_a:#x}")
        print(f"part_b = {plan.part_b:#x}")
        print(f"scratch = %{plan.scratch.name}")
        print("sequence:")
        for i in plan.emitted:
            data = encode(i).data
            assert is_clean(data)
            print(f"  {i.text().strip():<28} # {data.hex()}")
    return EXIT_OK


# -- report -----------------------------------------------------------------------

def _load_reports(path: str) -> list[ScanReport]:
    with open(path) as f:
        payload = json.load(f)
    if isinstance(payload, dict) and "reports" in payload:
        return [ScanReport.from_dict(d) for d in payload["reports"]]
    if isinstance(payload, list):
        return [ScanReport.from_dict(d) for d in payload]
    return [ScanReport.from_dict(payload)]


def _print_diff(diff: DiffReport):
    sign = lambda n: f"+{n}" if n > 0 else str(n)
    print(_paint(f"section {diff.section_name}", "1"))
    for name, delta in diff.deltas.items():
        b, a = diff.before[name], diff.after[name]
        print(f"  {name:<24} {b:>8} -> {a:<8} ({sign(delta)})")
    kinds = ", ".join(f"{k}:{sign(v)}" for k, v in diff.per_kind_deltas.items() if v)
    if kinds:
        print(f"  per-kind deltas          {kinds}")
    pct = f"-{diff.reduction_percent}%" if diff.reduction_percent >= 0 \
        else f"+{-diff.reduction_percent}%"
    if diff.regression:
        print("  " + _paint(f"gadgets {pct} REGRESSION", "31"))
    else:
        print("  " + _paint(f"gadgets {pct}", "32"))


def cmd_report(args) -> int:
    before = _load_reports(args.before)
    after = _load_reports(args.after)
    by_name = {r.section_name: r for r in after}
    regression = False
    compared = 0
    results = []
    for b in before:
        a = by_name.get(b.section_name)
        if a is None:
            continue
        diff = compare(b, a)
        results.append(diff)
        regression |= diff.regression
        compared += 1
    if compared == 0:
        raise SectionMismatch("no section name appears in both reports")
    if args.json:
        payload = [d.to_dict() for d in results]
        json.dump(payload[0] if len(payload) == 1 else payload,
                  sys.stdout, indent=2)
        print()
    else:
        for d in results:
            _print_diff(d)
    return EXIT_REGRESSION if regression else EXIT_OK


# -- driver -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="ropscrub",
        description="Remove ret-family ROP gadgets from x86-64 assembly and "
                    "audit binaries for them.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="verb", required=True)

    scan = sub.add_parser("scan", help="enumerate ret-family gadgets")
    scan.add_argument("target")
    scan.add_argument("--flat", action="store_true",
                      help="treat target as a raw byte blob")
    scan.add_argument("--asm", action="store_true",
                      help="assemble target with the system assembler; "
                           "instruction boundaries become known")
    scan.add_argument("--boundary-map", metavar="FILE",
                      help="JSON {\"starts\": [...]} of true instruction starts")
    scan.add_argument("--linear-sweep", action="store_true",
                      help="derive boundaries by linear sweep from offset 0")
    scan.add_argument("--max-instructions", type=int, default=6)
    scan.add_argument("--max-window", type=int, default=20)
    scan.add_argument("--no-dedupe", action="store_true")
    scan.add_argument("--verbose", "-v", action="store_true",
                      help="list individual gadgets")
    scan.add_argument("--json", action="store_true")
    scan.set_defaults(func=cmd_scan)

    rw = sub.add_parser("rewrite", help="apply the protection passes")
    rw.add_argument("input")
    rw.add_argument("-o", "--output", help="output path (default stdout)")
    rw.add_argument("--no-encrypt", action="store_true",
                    help="skip return-address encryption")
    rw.add_argument("--no-sled", action="store_true",
                    help="skip nop sleds before rets")
    rw.add_argument("--no-imm", action="store_true",
                    help="skip immediate re-encoding")
    rw.add_argument("--sled-length", type=int, default=16)
    rw.add_argument("--canary", default="fs:0x28",
                    help="segment:offset holding the XOR key (default fs:0x28)")
    rw.add_argument("--json", action="store_true")
    rw.set_defaults(func=cmd_rewrite)

    sp = sub.add_parser("split", help="split one immediate into clean parts")
    sp.add_argument("value")
    sp.add_argument("--width", type=int, choices=(8, 16, 32, 64), default=32)
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_split)

    rp = sub.add_parser("report", help="diff two scan-report JSON files")
    rp.add_argument("before")
    rp.add_argument("after")
    rp.add_argument("--json", action="store_true")
    rp.set_defaults(func=cmd_report)
    return ap


_INPUT_ERRORS = (NotElf, UnsupportedClass, TruncatedFile, MalformedHeader,
                 IoFailure, MalformedSource, AlreadyRewritten, RewriteError,
                 NoCleanSplit, ScratchExhausted, SectionMismatch,
                 FileNotFoundError, IsADirectoryError, PermissionError,
                 json.JSONDecodeError, ValueError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except RewriteError as exc:
        for lineno, line, message in exc.failures:
            _err(f"line {lineno}: {message}\n  {line.strip()}")
        return EXIT_INPUT
    except _INPUT_ERRORS as exc:
        _err(str(exc))
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
