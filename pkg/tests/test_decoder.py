"""Length-decoder behavior: spec'd byte sequences, table hygiene, and the
pure-function/result-bounds properties."""

import pytest
from hypothesis import given, strategies as st

from ropscrub.decoder import MAX_INSTRUCTION_LENGTH, decode_length, _table


def d(hexstr, offset=0):
    return decode_length(bytes.fromhex(hexstr), offset)


def test_bare_ret():
    r = d("c3")
    assert r.decoded and r.length == 1 and r.summary == "ret"


def test_mov_imm32_into_r11():
    r = d("49c7c3c3000000")
    assert r.decoded and r.length == 7 and r.summary == "mov"


def test_ret_imm16():
    r = d("c205c3")
    assert r.decoded and r.length == 3 and r.summary == "ret imm16"


def test_ret_family_one_byte_opcodes():
    assert d("cb").summary == "retf"
    assert d("ca1234").length == 3
    assert d("cf").summary == "iret"


@pytest.mark.parametrize("hexstr,length,summary", [
    ("4883ec10", 4, "sub"),          # REX.W 83 /5 ib
    ("81f6c3030000", 6, "xor"),      # group-1 digit resolution
    ("c0c205", 3, "rol"),            # group-2 digit resolution
    ("0f1f440000", 5, "nop"),        # multi-byte nop
    ("660f1f440000", 6, "nop"),
    ("f30f1efa", 4, "endbr"),
    ("64488b042528000000", 9, "mov"),
    ("488d3500000000", 7, "lea"),
    ("e8deadbeef", 5, "call"),
    ("0f84deadbeef", 6, "je"),
    ("66e9deadbeef", 6, "jmp"),      # 0x66 does not shrink rel32
    ("66b8dead", 4, "mov"),          # but does shrink immv
    ("48b8deadbeefdeadbeef", 10, "mov"),  # REX.W widens immv to 8
    ("a90000c300", 5, "test"),
    ("f7c1c3000000", 6, "test"),
    ("ff5042", 3, "call"),           # ff /2 with disp8
    ("41ffd3", 3, "call"),           # call *%r11
    ("f20f100d00000000", 8, "movups"),  # movsd: prefix + 0f10 + RIP disp32
    ("a0deadbeefdeadbeef", 9, "mov"),   # moffs64
    ("67a0deadbeef", 6, "mov"),         # 0x67 shrinks moffs
])
def test_table_lengths(hexstr, length, summary):
    r = d(hexstr)
    assert r.decoded, hexstr
    assert r.length == length
    assert r.summary == summary


@pytest.mark.parametrize("hexstr", [
    "0f38f0c0",   # three-byte map
    "c5f877",     # VEX
    "62f17c48",   # EVEX
    "8dc0",       # lea with register operand
    "ff38",       # ff /7 undefined
    "6a",         # truncated push imm8
    "48",         # bare REX at end of buffer
    "4066b8dead", # REX followed by another prefix
    "9a11223344556677",  # callf ptr16:32, invalid in 64-bit mode
    "d6",         # salc, undefined in 64-bit mode
    "c8112233",   # enter, deliberately outside the table
])
def test_undecodable(hexstr):
    r = d(hexstr)
    assert not r.decoded
    assert r.length is None


def test_offset_bounds():
    with pytest.raises(IndexError):
        decode_length(b"\x90", 1)
    with pytest.raises(IndexError):
        decode_length(b"\x90", -1)


def test_fifteen_byte_cap():
    # 14 prefixes + ret is exactly the architectural limit
    r = d("66" * 14 + "c3")
    assert r.decoded and r.length == 15
    # one more prefix pushes past 15 bytes: undecodable
    assert not d("66" * 15 + "c3").decoded


def test_purity():
    buf = bytes.fromhex("4883ec10c3")
    assert decode_length(buf, 0) == decode_length(buf, 0)


@given(st.binary(min_size=1, max_size=64), st.data())
def test_result_bounds_and_purity(buf, data):
    offset = data.draw(st.integers(min_value=0, max_value=len(buf) - 1))
    r1 = decode_length(buf, offset)
    r2 = decode_length(buf, offset)
    assert r1 == r2
    if r1.decoded:
        assert 1 <= r1.length <= MAX_INSTRUCTION_LENGTH
        assert offset + r1.length <= len(buf)
    else:
        assert r1.length is None and r1.summary is None


def test_table_loads_and_is_sane():
    table = _table()
    assert 0xC3 in table and 0x0F1F in table
    # /digit groups are dicts keyed by reg-field value
    assert isinstance(table[0xF7], dict) and set(table[0xF7]) == set(range(8))
    assert 7 not in table.get(0xFF, {})


def test_data_dir_override(tmp_path, monkeypatch):
    """ROPSCRUB_DATA_DIR swaps in an alternate opcode table."""
    (tmp_path / "opcode_table.txt").write_text("c3 - - homebrew ret\n")
    monkeypatch.setenv("ROPSCRUB_DATA_DIR", str(tmp_path))
    _table.cache_clear()
    try:
        assert decode_length(b"\xc3", 0).summary == "homebrew ret"
        assert not decode_length(b"\x90", 0).decoded
    finally:
        monkeypatch.delenv("ROPSCRUB_DATA_DIR")
        _table.cache_clear()
