"""The protection passes: immediate re-encoding, return-address encryption,
and nop-sled realignment over parsed AT&T assembly.

Pass order is fixed: immediates are re-encoded first, then ret sites are
instrumented, so the protection scaffolding itself is never re-scanned.  A
rewritten file starts with a version header and the rewriter refuses input
that already carries one -- encrypting a return address twice would undo the
protection.
"""

from dataclasses import dataclass, field, asdict

from . import REWRITE_HEADER, REWRITE_HEADER_PREFIX
from .asmparse import (AsmDocument, FunctionSpan, InstructionRecord,
                       RET_MNEMONICS, parse_assembly, parse_line)
from .encoder import Mem, SegDisp, SubsetInstruction, encode_sequence, reg
from .forbidden import is_clean
from .immsplit import (DEFAULT_SCRATCH_ORDER, NoCleanSplit, ScratchExhausted,
                       SplitRequest, needs_split, split_immediate)


class AlreadyRewritten(Exception):
    """Input already carries the rewrite header; refusing to double-encrypt."""


class RewriteError(Exception):
    """One or more records could not be transformed."""

    def __init__(self, failures):
        self.failures = list(failures)  # (lineno, source_line, message)
        lines = "; ".join(f"line {n}: {m}" for n, _, m in self.failures)
        super().__init__(lines)


@dataclass(frozen=True)
class RewriteOptions:
    enable_encrypt: bool = True
    enable_sled: bool = True
    enable_imm: bool = True
    sled_length: int = 16
    canary_location: SegDisp = SegDisp("fs", 0x28)
    scratch_order: tuple = DEFAULT_SCRATCH_ORDER
    pair_scratch: str = "r11"

    def __post_init__(self):
        if self.sled_length < 1:
            raise ValueError("sled_length must be >= 1")

    def crypt_pair(self) -> tuple:
        """The two instructions that XOR the word at (%rsp) with the canary;
        applying them twice is the identity, so one pair serves as both the
        encrypt and the decrypt subroutine."""
        scratch = reg(self.pair_scratch)
        return (
            SubsetInstruction("mov_fs", 64, scratch, self.canary_location),
            SubsetInstruction("xor_mem", 64, Mem(base=reg("rsp")), scratch),
        )


@dataclass
class RewriteStats:
    immediates_split: int = 0
    functions_instrumented: int = 0
    rets_protected: int = 0
    tail_jumps_protected: int = 0
    opaque_lines: int = 0
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _synthetic(text: str, lineno: int = 0) -> InstructionRecord:
    rec = parse_line(text, lineno)
    rec.synthetic = True
    return rec


def _label_record(labels, lineno) -> InstructionRecord:
    rec = InstructionRecord(raw=" ".join(f"{lb}:" for lb in labels),
                            lineno=lineno, labels=list(labels), synthetic=True)
    return rec


def _strip_labels(rec: InstructionRecord) -> InstructionRecord:
    """Record re-rendered without its inline labels (they move elsewhere)."""
    body = rec.raw
    for lb in rec.labels:
        head, _, body = body.partition(lb + ":")
    new = parse_line("\t" + body.strip(), rec.lineno)
    new.synthetic = True
    return new


def _fits_s32(value: int) -> bool:
    v = value & ((1 << 64) - 1)
    s = v - (1 << 64) if v >= (1 << 63) else v
    return -(1 << 31) <= s < (1 << 31)


def _uses_red_zone(fn: FunctionSpan) -> bool:
    from .asmparse import MemOp
    for rec in fn.records:
        for op in rec.operands or ():
            if isinstance(op, MemOp) and op.base is not None \
                    and op.base.name == "rsp" and (op.disp or 0) < 0:
                return True
    return False


def pass_reencode_immediates(fn: FunctionSpan, opts: RewriteOptions,
                             stats: RewriteStats | None = None) -> FunctionSpan:
    """Replace every imm-into-register add/sub/and/or/xor/cmp/test/mov whose
    immediate renders a forbidden byte with its split-reconstruction sequence."""
    stats = stats if stats is not None else RewriteStats()
    failures = []
    out = []
    red_zone_warned = False
    for rec in fn.records:
        shape = rec.split_shape()
        if shape is None:
            out.append(rec)
            continue
        base, width, value, dst = shape
        if not needs_split(value, width):
            out.append(rec)
            continue
        if dst.family == 4:  # %rsp: push/pop scratch would race the operation
            stats.warnings.append(
                f"line {rec.lineno}: immediate {value:#x} into %{dst.name} "
                "left unsplit (stack-pointer destination)")
            out.append(rec)
            continue
        if width == 64 and base != "mov" and not _fits_s32(value):
            stats.warnings.append(
                f"line {rec.lineno}: {value:#x} does not fit a 64-bit "
                "immediate operand; left for the assembler to reject")
            out.append(rec)
            continue
        signed = width == 64 and _fits_s32(value)
        req = SplitRequest(value, width, signedness=signed,
                           context=SubsetInstruction(base, width, dst, value))
        try:
            plan = split_immediate(req, opts.scratch_order)
        except (NoCleanSplit, ScratchExhausted) as exc:
            failures.append((rec.lineno, rec.raw, str(exc)))
            out.append(rec)
            continue
        if rec.labels:
            out.append(_label_record(rec.labels, rec.lineno))
        for instr in plan.emitted:
            out.append(_synthetic(instr.text(), rec.lineno))
        stats.immediates_split += 1
        if not red_zone_warned and _uses_red_zone(fn):
            stats.warnings.append(
                f"{fn.name}: split scaffolding pushes below %rsp but the "
                "function addresses the red zone; verify no live slot in "
                "the top 16 bytes")
            red_zone_warned = True
    if failures:
        raise RewriteError(failures)
    return FunctionSpan(fn.name, out).refresh()


def pass_protect_returns(fn: FunctionSpan, opts: RewriteOptions,
                         stats: RewriteStats | None = None, *,
                         encrypt_entry: bool | None = None,
                         protect_exits: bool | None = None) -> FunctionSpan:
    """Instrument every ret-containing function: encrypt the return address at
    entry, realign and decrypt immediately before every ret and before every
    terminal tail jump.  Functions without a ret pass through untouched.

    A hot/cold-partition continuation (`foo.cold`) is entered by jump with
    its parent's frame, so the caller sets encrypt_entry=False for it and
    decides both flags from the logical parent+continuation function."""
    stats = stats if stats is not None else RewriteStats()
    if encrypt_entry is None:
        encrypt_entry = fn.has_ret
    if protect_exits is None:
        protect_exits = fn.has_ret
    if not protect_exits or not (opts.enable_encrypt or opts.enable_sled):
        return fn

    pair = opts.crypt_pair()
    pair_bytes = encode_sequence(pair)
    if not is_clean(pair_bytes):
        raise ValueError(
            f"encrypt/decrypt pair encodes forbidden bytes ({pair_bytes.hex()}); "
            "adjust canary_location or pair_scratch")

    def decrypt_sequence(lineno):
        recs = []
        if opts.enable_sled:
            recs.extend(_synthetic("\tnop", lineno)
                        for _ in range(opts.sled_length))
        if opts.enable_encrypt:
            recs.extend(_synthetic(i.text(), lineno) for i in pair)
        return recs

    out = []
    first_insn_done = not encrypt_entry
    tail_idx = set(fn.tail_jumps)
    for idx, rec in enumerate(fn.records):
        if not first_insn_done and rec.is_instruction and opts.enable_encrypt:
            # the pair goes before the record, labels included: a label here
            # is a loop target, and looping back must not re-encrypt
            out.extend(_synthetic(i.text(), rec.lineno) for i in pair)
            stats.functions_instrumented += 1
            first_insn_done = True
        if rec.mnemonic in RET_MNEMONICS or idx in tail_idx:
            if rec.labels:
                out.append(_label_record(rec.labels, rec.lineno))
                rec = _strip_labels(rec)
            out.extend(decrypt_sequence(rec.lineno))
            if rec.mnemonic in RET_MNEMONICS:
                stats.rets_protected += 1
            else:
                stats.tail_jumps_protected += 1
        out.append(rec)

    if fn.calls_setjmp_family:
        stats.warnings.append(
            f"{fn.name}: calls a setjmp/longjmp-family function; the saved "
            "return address will be encrypted and a longjmp will not restore "
            "it correctly")
    for rec in fn.records:
        if rec.mnemonic and rec.mnemonic.startswith("j") \
                and rec.mnemonic not in ("jmp", "jmpq") and rec.operands:
            tgt = rec.operands[0]
            from .asmparse import SymOp
            if isinstance(tgt, SymOp) and tgt.text not in fn.local_labels \
                    and not tgt.text.startswith(".L"):
                stats.warnings.append(
                    f"{fn.name} line {rec.lineno}: conditional jump to "
                    f"{tgt.text} looks like a conditional tail call and is "
                    "not decrypted")
    return FunctionSpan(fn.name, out).refresh()


def rewrite_document(doc: AsmDocument, opts: RewriteOptions,
                     stats: RewriteStats) -> AsmDocument:
    spans = doc.functions()
    names = {fn.name for fn in spans}

    # a function and its jump-entered cold continuations protect as one unit:
    # encrypt once at the parent entry, decrypt at every exit of any part
    logical_has_ret = {fn.name: fn.has_ret for fn in spans}
    for fn in spans:
        base = fn.continuation_base
        if base in names and fn.has_ret:
            logical_has_ret[base] = True

    items = []
    failures = []
    for item in doc.items:
        if not isinstance(item, FunctionSpan):
            items.append(item)
            continue
        fn = item
        if opts.enable_imm:
            try:
                fn = pass_reencode_immediates(fn, opts, stats)
            except RewriteError as exc:
                failures.extend(exc.failures)
        base = fn.continuation_base
        if base in names:
            fn = pass_protect_returns(fn, opts, stats, encrypt_entry=False,
                                      protect_exits=logical_has_ret[base])
        else:
            fn = pass_protect_returns(fn, opts, stats,
                                      encrypt_entry=logical_has_ret[fn.name],
                                      protect_exits=logical_has_ret[fn.name])
        items.append(fn)
    if failures:
        raise RewriteError(failures)
    return AsmDocument(items)


def rewrite_file(source: str, opts: RewriteOptions = RewriteOptions()) -> tuple:
    """Transform a whole assembly file; returns (text, RewriteStats)."""
    if source.startswith(REWRITE_HEADER_PREFIX):
        raise AlreadyRewritten(
            "input already carries a rewrite header; rewriting it again "
            "would double-encrypt return addresses")
    stats = RewriteStats()
    doc = parse_assembly(source)
    stats.opaque_lines = sum(1 for r in doc.records() if r.opaque)
    if stats.opaque_lines:
        stats.warnings.append(
            f"{stats.opaque_lines} line(s) not parseable; passed through "
            "unverified (inline-assembly style limitation)")
    doc = rewrite_document(doc, opts, stats)
    return REWRITE_HEADER + "\n" + doc.emit(), stats
