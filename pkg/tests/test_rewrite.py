"""Rewrite-pass behavior: pass mechanics on small functions, the layout of
inserted sequences, ablation flags, stats, and error aggregation."""

import pytest

from conftest import ASM_DIR
from ropscrub.asmparse import parse_assembly
from ropscrub.encoder import encode_sequence
from ropscrub.forbidden import is_clean
from ropscrub.rewrite import (AlreadyRewritten, RewriteError, RewriteOptions,
                              RewriteStats, pass_protect_returns,
                              pass_reencode_immediates, rewrite_file)


def fn_of(src):
    return parse_assembly(src).functions()[0]


def instruction_lines(span):
    return [r.raw.strip() for r in span.records if r.is_instruction]


WRAP = "\t.type\t{0}, @function\n{0}:\n{1}\t.size\t{0}, .-{0}\n"


def make_fn(name, *body):
    return fn_of(WRAP.format(name, "".join(f"\t{line}\n" for line in body)))


class TestReencodePass:
    def test_dirty_mov_is_replaced(self):
        fn = make_fn("f", "movq\t$0xc3, %rax", "ret")
        out = pass_reencode_immediates(fn, RewriteOptions())
        lines = instruction_lines(out)
        assert lines == [
            "pushq\t%r8",
            "pushfq",
            "movq\t$0x62, %r8",
            "addq\t$0x61, %r8",
            "popfq",
            "movq\t%r8, %rax",
            "popq\t%r8",
            "ret",
        ]

    def test_clean_immediates_unchanged(self):
        fn = make_fn("f", "movq\t$0x10, %rax", "ret")
        out = pass_reencode_immediates(fn, RewriteOptions())
        assert instruction_lines(out) == ["movq\t$0x10, %rax", "ret"]

    def test_cmp_flags_scaffolding_order(self):
        """pushfq/popfq bracket only the reconstruction add; the rewritten
        cmp runs after popfq so its flags are the visible result."""
        fn = make_fn("f", "cmpq\t$0xc3, %rdi", "ret")
        lines = instruction_lines(pass_reencode_immediates(fn, RewriteOptions()))
        assert lines.index("popfq") < lines.index("cmpq\t%r8, %rdi")
        assert lines[-2] == "popq\t%r8"

    def test_non_target_mnemonics_untouched(self):
        fn = make_fn("f", "imull\t$451, %eax, %edx", "pushq\t$451", "ret")
        out = pass_reencode_immediates(fn, RewriteOptions())
        assert instruction_lines(out)[:2] == ["imull\t$451, %eax, %edx",
                                              "pushq\t$451"]

    def test_rsp_destination_skipped_with_warning(self):
        stats = RewriteStats()
        fn = make_fn("f", "subq\t$451, %rsp", "addq\t$451, %rsp", "ret")
        out = pass_reencode_immediates(fn, RewriteOptions(), stats)
        assert instruction_lines(out)[0] == "subq\t$451, %rsp"
        assert len(stats.warnings) == 2
        assert stats.immediates_split == 0

    def test_labels_move_to_sequence_head(self):
        fn = make_fn("f", ".Ltop: movl\t$195, %eax", "ret")
        out = pass_reencode_immediates(fn, RewriteOptions())
        recs = [r for r in out.records if r.labels or r.is_instruction]
        assert recs[0].labels == ["f"]  # the function label line
        assert recs[1].labels == [".Ltop"] and not recs[1].is_instruction
        assert recs[2].raw.strip() == "pushq\t%r8"

    def test_unsplittable_imm64_raises_with_position(self):
        fn = make_fn("f", "movabsq\t$0x00c3000000000000, %rax", "ret")
        with pytest.raises(RewriteError) as exc:
            pass_reencode_immediates(fn, RewriteOptions())
        (lineno, line, message), = exc.value.failures
        assert "movabsq" in line

    def test_every_inserted_sequence_encodes_clean(self):
        stats = RewriteStats()
        fn = make_fn("f", "movw\t$0xc2c2, %dx", "xorb\t$-0x35, %r9b",
                     "andl\t$0x00c300c3, %ebp", "ret")
        pass_reencode_immediates(fn, RewriteOptions(), stats)
        assert stats.immediates_split == 3


class TestProtectPass:
    def test_single_ret_shape(self):
        fn = make_fn("f", "movl\t%edi, %eax", "ret")
        out = pass_protect_returns(fn, RewriteOptions())
        lines = instruction_lines(out)
        assert lines[0] == "movq\t%fs:0x28, %r11"
        assert lines[1] == "xorq\t%r11, (%rsp)"
        assert lines[3:19] == ["nop"] * 16
        assert lines[19] == "movq\t%fs:0x28, %r11"
        assert lines[20] == "xorq\t%r11, (%rsp)"
        assert lines[21] == "ret"

    def test_retless_function_untouched(self):
        fn = make_fn("spin", ".Lt: jmp\t.Lt")
        out = pass_protect_returns(fn, RewriteOptions())
        assert instruction_lines(out) == instruction_lines(fn)

    def test_two_rets_one_encrypt(self):
        fn = make_fn("f", "testl\t%edi, %edi", "je\t.La", "ret",
                     ".La: movl\t$1, %eax", "ret")
        stats = RewriteStats()
        out = pass_protect_returns(fn, RewriteOptions(), stats)
        lines = instruction_lines(out)
        assert stats.rets_protected == 2
        assert stats.functions_instrumented == 1
        assert lines.count("xorq\t%r11, (%rsp)") == 3  # 1 encrypt + 2 decrypts

    def test_tail_jump_gets_decrypt(self):
        fn = make_fn("f", "testl\t%edi, %edi", "je\t.Lb", "ret",
                     ".Lb: jmp\tother")
        stats = RewriteStats()
        out = pass_protect_returns(fn, RewriteOptions(), stats)
        lines = instruction_lines(out)
        assert stats.tail_jumps_protected == 1
        idx = lines.index("jmp\tother")
        assert lines[idx - 1] == "xorq\t%r11, (%rsp)"
        assert lines[idx - 2] == "movq\t%fs:0x28, %r11"
        assert lines[idx - 18:idx - 2] == ["nop"] * 16

    def test_ret_imm16_and_rep_ret_protected(self):
        fn = make_fn("f", "cmpl\t$2, %edi", "je\t.Lc", "ret\t$16",
                     ".Lc: rep ret")
        stats = RewriteStats()
        pass_protect_returns(fn, RewriteOptions(), stats)
        assert stats.rets_protected == 2

    def test_loop_target_on_first_instruction_not_reencrypted(self):
        """A local label on the first instruction is a loop target; looping
        back must skip the encrypt pair or the address would double-encrypt."""
        fn = make_fn("f", ".Ltop: decl\t%edi", "jne\t.Ltop", "ret")
        out = pass_protect_returns(fn, RewriteOptions())
        texts = [r.raw.strip() for r in out.records
                 if r.is_instruction or r.labels]
        assert texts.index("movq\t%fs:0x28, %r11") < texts.index(".Ltop: decl\t%edi")

    def test_setjmp_warning(self):
        fn = make_fn("f", "call\tsetjmp@PLT", "ret")
        stats = RewriteStats()
        pass_protect_returns(fn, RewriteOptions(), stats)
        assert any("setjmp" in w for w in stats.warnings)

    def test_sled_length_and_ablation(self):
        fn = make_fn("f", "ret")
        out = pass_protect_returns(fn, RewriteOptions(sled_length=3))
        assert instruction_lines(out).count("nop") == 3
        out = pass_protect_returns(fn, RewriteOptions(enable_sled=False))
        lines = instruction_lines(out)
        assert "nop" not in lines and lines.count("xorq\t%r11, (%rsp)") == 2
        out = pass_protect_returns(fn, RewriteOptions(enable_encrypt=False))
        lines = instruction_lines(out)
        assert lines.count("nop") == 16 and "xorq\t%r11, (%rsp)" not in lines

    def test_dirty_canary_location_rejected(self):
        fn = make_fn("f", "ret")
        from ropscrub.encoder import SegDisp
        with pytest.raises(ValueError):
            pass_protect_returns(fn, RewriteOptions(
                canary_location=SegDisp("fs", 0xC3)))

    def test_crypt_pair_is_involution_safe_bytes(self):
        pair = RewriteOptions().crypt_pair()
        data = encode_sequence(pair)
        assert data.hex() == "644c8b1c25280000004c311c24"
        assert is_clean(data)


class TestRewriteFile:
    def test_header_and_idempotence(self):
        src = WRAP.format("f", "\tret\n")
        text, _ = rewrite_file(src)
        assert text.startswith("# ropscrub-rewritten v")
        with pytest.raises(AlreadyRewritten):
            rewrite_file(text)

    def test_empty_file(self):
        text, stats = rewrite_file("")
        assert text == "# ropscrub-rewritten v0.1.0\n"
        assert stats.to_dict()["immediates_split"] == 0

    def test_all_passes_disabled_identity_modulo_header(self):
        src = (ASM_DIR / "flags.s").read_text()
        opts = RewriteOptions(enable_encrypt=False, enable_sled=False,
                              enable_imm=False)
        text, stats = rewrite_file(src, opts)
        assert text.split("\n", 1)[1] == src
        assert stats.immediates_split == 0
        assert stats.rets_protected == 0

    def test_stats_instrumented_matches_ret_functions(self):
        src = (ASM_DIR / "edgecases.s").read_text()
        text, stats = rewrite_file(src)
        doc = parse_assembly(src)
        expected = sum(1 for f in doc.functions() if f.has_ret)
        assert stats.functions_instrumented == expected

    def test_nothing_to_do_identity_modulo_header(self):
        # clean immediates, no ret anywhere: default passes change nothing
        src = ("\t.text\n\t.type\tspin, @function\nspin:\n"
               "\tmovl\t$0x10, %eax\n.Lt:\n\tjmp\t.Lt\n\t.size\tspin, .-spin\n")
        text, stats = rewrite_file(src)
        assert text.split("\n", 1)[1] == src
        assert stats.immediates_split == 0
        assert stats.functions_instrumented == 0

    def test_error_aggregation_collects_all_lines(self):
        src = WRAP.format("f",
                          "\tmovabsq\t$0x00c3000000000000, %rax\n"
                          "\tmovabsq\t$0x00cb000000000000, %rbx\n"
                          "\tret\n")
        with pytest.raises(RewriteError) as exc:
            rewrite_file(src)
        assert len(exc.value.failures) == 2

    def test_opaque_lines_counted(self):
        src = WRAP.format("f", "\taddl\t$1, 8(%rax,%rbx,3)\n\tret\n")
        text, stats = rewrite_file(src)
        assert stats.opaque_lines == 1  # scale 3 is outside the grammar
        assert "8(%rax,%rbx,3)" in text
        assert any("unverified" in w for w in stats.warnings)
