import struct

import numpy as np
import pytest

from aqkit.container import (HEADER, BadMagicError, CorruptPackError, DuplicateNameError,
                             OverlapError, PackError, TruncationError, UnknownTypeTagError,
                             UnsupportedVersionError, compression_ratio, inspect_pack,
                             model_memory_report, read_directory, read_pack, write_pack)
from aqkit.quantcore import BIT_WIDTHS, QuantType, dequantize, quantize_rtn

COMBOS = [(b, B, S, cb) for b in BIT_WIDTHS for B in (16, 32, 64) for S in (0, 4, 8)
          for cb in ("symmetric", "asymmetric")]


def small_pack(rng, bits=(2, 4), meta=None):
    ts = [quantize_rtn(rng.normal(size=(8, 40)), QuantType(b), f"t{b}") for b in bits]
    return write_pack(ts, meta or {"k": "v"}), ts


def test_empty_pack_fixed_length():
    buf = write_pack([])
    assert len(buf) == HEADER.size == 16
    assert read_pack(buf) == ([], {})


@pytest.mark.parametrize("b,B,S,cb", COMBOS)
def test_round_trip_bit_exact(b, B, S, cb):
    rng = np.random.default_rng(b * 1000 + B * 10 + S)
    qt = quantize_rtn(rng.normal(size=(7, 45)) * rng.uniform(0.1, 3), QuantType(b, cb, B, S), "w")
    (back,), _ = read_pack(write_pack([qt]))
    assert back.same_as(qt)
    assert np.array_equal(dequantize(back), dequantize(qt))


def test_deterministic_and_sorted(rng):
    a, ts = small_pack(rng, bits=(4, 2, 3))
    assert a == write_pack(list(reversed(ts)), {"k": "v"})
    _, entries, _ = read_directory(a)
    assert [e.name for e in entries] == ["t2", "t3", "t4"]


def test_metadata_round_trip(rng):
    buf, _ = small_pack(rng, meta={"achieved_bpw": "3.0", "note": "héllo"})
    _, meta = read_pack(buf)
    assert meta == {"achieved_bpw": "3.0", "note": "héllo"}


def test_duplicate_names_rejected(rng):
    qt = quantize_rtn(rng.normal(size=(2, 32)), QuantType(4), "w")
    with pytest.raises(DuplicateNameError):
        write_pack([qt, qt])


def test_named_errors(rng):
    buf, _ = small_pack(rng)
    with pytest.raises(BadMagicError):
        read_pack(b"GGUF" + buf[4:])
    with pytest.raises(UnsupportedVersionError):
        read_pack(buf[:4] + struct.pack("<H", 9) + buf[6:])
    with pytest.raises(TruncationError, match="t4"):
        read_pack(buf[:-8])
    _, entries, hdr = read_directory(buf)
    # point the second payload at the first one
    e0, e1 = entries
    off1 = buf.index(struct.pack("<QQ", e1.offset, e1.length))
    bad = buf[:off1] + struct.pack("<Q", e0.offset) + buf[off1 + 8:]
    with pytest.raises(OverlapError):
        read_pack(bad)
    # bit width 7 is not a known tag
    tag = buf.index(struct.pack("<QQ", e0.offset, e0.length)) - 14   # B, S, pad, codebook, bits
    bad = buf[:tag] + bytes([7]) + buf[tag + 1:]
    with pytest.raises(UnknownTypeTagError):
        read_pack(bad)


def test_fuzz_ten_thousand_mutations():
    rng = np.random.default_rng(99)
    buf, _ = small_pack(rng, bits=(2, 3))
    outcomes = {"ok": 0}
    for _ in range(10_000):
        b = bytearray(buf)
        kind = rng.integers(3)
        if kind == 0:
            for _ in range(int(rng.integers(1, 4))):
                b[int(rng.integers(len(b)))] = int(rng.integers(256))
        elif kind == 1:
            b = b[:int(rng.integers(len(b)))]
        else:
            i = int(rng.integers(len(b)))
            b[i] ^= 1 << int(rng.integers(8))
        try:
            ts, _ = read_pack(bytes(b))
            for t in ts:
                assert np.all(np.isfinite(dequantize(t)))
            outcomes["ok"] += 1
        except PackError as e:
            outcomes[type(e).__name__] = outcomes.get(type(e).__name__, 0) + 1
    print(outcomes)
    assert sum(outcomes.values()) == 10_000


def test_memory_report_examples(rng):
    t8 = [quantize_rtn(rng.normal(size=(4, 64)), QuantType(8), f"a{i}") for i in range(3)]
    rep = model_memory_report(write_pack(t8), overhead="zero")
    assert rep.effective_bpw == 8.0 and rep.compression_ratio == 2.0
    t3 = [quantize_rtn(rng.normal(size=(4, 64)), QuantType(3, block_size=32, superblock_size=0), "b")]
    rep = model_memory_report(write_pack(t3), overhead="storage")
    assert rep.effective_bpw == 4.0 and rep.compression_ratio == 4.0
    assert rep.code_bpw == 3.0


def test_compression_ratio_14_3_gb_to_2_7_gb():
    assert round(compression_ratio(14.3, 2.7), 1) == 5.3


def test_inspect_lists_tensors(rng):
    buf, _ = small_pack(rng)
    text = inspect_pack(buf)
    assert "t2" in text and "t4" in text and "meta k = v" in text


def test_mixed_pack_bpw_matches_allocator(trained, calib):
    from aqkit.harness.pipeline import allocate, quantize_policy
    from aqkit.sensitivity import build_table
    a = allocate(build_table(calib), 2.5, menu=(2, 4))
    assert set(a.bits().values()) == {2, 4}
    qts = quantize_policy(trained, a.types, "rtn")
    rep = model_memory_report(write_pack(list(qts.values())), overhead="zero")
    assert abs(rep.code_bpw - a.achieved_bpw) <= 1e-9
