import pathlib
import re
import shutil
import subprocess

import pytest

FIXTURES = pathlib.Path(__file__).parent / "fixtures"
ASM_DIR = FIXTURES / "asm"

# corpus .s files that are complete programs with deterministic output
RUNNABLE = ["arith", "bits", "coldsplit", "flags", "floats", "protector",
            "recurse", "strings", "switchy", "tailcall", "tworets"]

GCC = shutil.which("gcc") or shutil.which("cc")
GAS = shutil.which("as")

requires_toolchain = pytest.mark.skipif(
    GCC is None or GAS is None,
    reason="system assembler/linker not found; criterion skipped")


def corpus_files():
    return sorted(ASM_DIR.glob("*.s"))


def compile_program(sources, out, flags=()):
    proc = subprocess.run([GCC, *flags, *map(str, sources), "-o", str(out)],
                          capture_output=True, text=True)
    if proc.returncode != 0:
        raise AssertionError(f"gcc failed for {sources}:\n{proc.stderr}")
    return out


def run_program(path):
    proc = subprocess.run([str(path)], capture_output=True, timeout=30)
    return proc.stdout, proc.returncode


def parse_objdump_listing(path) -> list[tuple[int, int]]:
    """(offset, length) per instruction from an `objdump -d` capture,
    merging byte rows that overflowed onto continuation lines."""
    insns = []
    for line in pathlib.Path(path).read_text().splitlines():
        m = re.match(r"^\s+([0-9a-f]+):\t([0-9a-f ]+?)(\t|$)", line)
        if not m:
            continue
        addr = int(m.group(1), 16)
        nbytes = len(m.group(2).split())
        if m.group(3) != "\t" and insns and sum(insns[-1]) == addr:
            insns[-1][1] += nbytes
        else:
            insns.append([addr, nbytes])
    return [(a, n) for a, n in insns]


# -- acceptance summary -------------------------------------------------------

_ACCEPT_RE = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")
_acceptance: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    m = _ACCEPT_RE.search(report.nodeid)
    if not m:
        return
    num = int(m.group(1))
    if report.when == "call":
        _acceptance[num] = (report.outcome, report.nodeid)
    elif report.when == "setup" and report.outcome == "skipped":
        reason = ""
        if isinstance(report.longrepr, tuple):
            reason = report.longrepr[2]
        _acceptance[num] = (f"skipped ({reason})", report.nodeid)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for num in sorted(_acceptance):
        outcome, nodeid = _acceptance[num]
        label = outcome.upper() if outcome in ("passed", "failed") else outcome
        name = nodeid.split("::")[-1]
        terminalreporter.write_line(f"criterion {num:>2} {name:<44} {label}")
