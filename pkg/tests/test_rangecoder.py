import math
import random
import struct
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ipcodec.entropy import gaussian_table, quantize_pmf
from ipcodec.rangecoder import (HEADER_SIZE, TOTAL, ArchitectureMismatch, CheckpointMismatch, ContainerMeta,
                                MagicMismatch, PMFTable, RangeCoderError, TruncatedContainer, TruncatedStream,
                                VersionMismatch, ec_decode, ec_encode, pack_container, unpack_container)

UNIFORM = PMFTable(0, tuple(range(0, TOTAL + 1, 256)))


def cross_entropy_bits(symbols, tables):
    return -sum(math.log2(t.freq(s) / TOTAL) for s, t in zip(symbols, tables))


def test_empty_sequence():
    data = ec_encode([], [])
    assert len(data) <= 4
    assert ec_decode(data, [], 0) == []


def test_uniform_thousand_symbols():
    r = random.Random(0)
    syms = [r.randrange(256) for _ in range(1000)]
    data = ec_encode(syms, [UNIFORM] * 1000)
    assert abs(len(data) - 1000) <= 5
    assert ec_decode(data, [UNIFORM] * 1000, 1000) == syms


def test_deterministic():
    syms = list(range(200)) * 3
    assert ec_encode(syms, [UNIFORM] * 600) == ec_encode(syms, [UNIFORM] * 600)


def test_out_of_support_symbol():
    with pytest.raises(RangeCoderError, match="clamp"):
        ec_encode([256], [UNIFORM])
    with pytest.raises(ValueError):
        ec_encode([1, 2], [UNIFORM])


def test_truncated_stream():
    r = random.Random(1)
    syms = [r.randrange(256) for _ in range(500)]
    data = ec_encode(syms, [UNIFORM] * 500)
    with pytest.raises(TruncatedStream):
        ec_decode(data[:-20], [UNIFORM] * 500, 500)


def test_wrong_table_gives_different_symbols():
    tables = [gaussian_table(1.0)] * 300
    r = random.Random(2)
    syms = [max(-3, min(3, round(r.gauss(0, 1)))) for _ in range(300)]
    data = ec_encode(syms, tables)
    wrong = [gaussian_table(5.0)] * 300
    try:
        decoded = ec_decode(data, wrong, 300)
    except RangeCoderError:
        decoded = None
    assert decoded != syms


def test_pmf_table_validation():
    with pytest.raises(ValueError):
        PMFTable(0, (0, 10, 10, TOTAL))
    with pytest.raises(ValueError):
        PMFTable(0, (0, TOTAL - 1))
    t = PMFTable(-1, (0, 100, TOTAL - 5, TOTAL))
    assert (t.lower, t.upper, t.size) == (-1, 1, 3)
    assert sum(int(p * TOTAL) for p in t.probabilities()) == TOTAL


def _random_case(r: random.Random, n: int):
    tables, syms = [], []
    for _ in range(n):
        kind = r.random()
        if kind < 0.6:
            t = gaussian_table(r.choice([0.11, 0.3, 1.0, 2.5, 8.0, 40.0]))
        else:
            m = r.randint(1, 40)
            pmf = np.array([r.random() ** 3 + 1e-6 for _ in range(m)])
            t = quantize_pmf(pmf, r.randint(-20, 5))
        tables.append(t)
        if r.random() < 0.1:
            syms.append(r.randint(t.lower, t.upper))
        else:
            cdf = t.cdf
            u = r.randrange(TOTAL)
            syms.append(t.lower + next(i for i in range(t.size) if cdf[i + 1] > u))
    return syms, tables


def test_thousand_random_latent_tensors_roundtrip_and_bound():
    r = random.Random(7)
    t0 = time.perf_counter()
    for _ in range(1000):
        syms, tables = _random_case(r, r.randint(0, 64))
        data = ec_encode(syms, tables)
        assert ec_decode(data, tables, len(syms)) == syms
        ce = cross_entropy_bits(syms, tables)
        assert 8 * len(data) <= ce + 32 + 0.001 * ce
    assert time.perf_counter() - t0 < 10


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-12, 12), max_size=300), st.floats(0.11, 30.0))
def test_roundtrip_property(values, sigma):
    t = gaussian_table(sigma)
    syms = [min(max(v, t.lower), t.upper) for v in values]
    tables = [t] * len(syms)
    data = ec_encode(syms, tables)
    assert ec_decode(data, tables, len(syms)) == syms
    ce = cross_entropy_bits(syms, tables)
    assert 8 * len(data) <= ce + 32 + 0.001 * ce


META = ContainerMeta(64, 64, b"A" * 8, b"C" * 8)


def test_container_size_and_roundtrip():
    bz, by = bytes(range(20)), bytes(range(100))
    data = pack_container(META, bz, by)
    # magic 4 + version 1 + width 4 + height 4 + two 8-byte hashes + two 4-byte lengths
    assert HEADER_SIZE == 37
    assert len(data) == 37 + 120
    meta, bz2, by2 = unpack_container(data, META.arch_hash, META.checkpoint_hash)
    assert (meta, bz2, by2) == (META, bz, by)
    assert pack_container(meta, bz2, by2) == data


def test_container_layout_little_endian():
    data = pack_container(ContainerMeta(300, 17, b"\x01" * 8, b"\x02" * 8), b"z", b"yy")
    assert data[:4] == b"IPC1" and data[4] == 1
    assert struct.unpack_from("<II", data, 5) == (300, 17)
    assert data[13:21] == b"\x01" * 8 and data[21:29] == b"\x02" * 8
    assert struct.unpack_from("<I", data, 29) == (1,) and data[33:34] == b"z"
    assert struct.unpack_from("<I", data, 34) == (2,) and data[38:] == b"yy"


@pytest.mark.parametrize("mutate,exc,code", [
    (lambda d: b"X" + d[1:], MagicMismatch, 11),
    (lambda d: d[:4] + b"\x02" + d[5:], VersionMismatch, 12),
    (lambda d: d[:-1], TruncatedContainer, 15),
    (lambda d: d[:20], TruncatedContainer, 15),
])
def test_container_errors(mutate, exc, code):
    data = pack_container(META, b"abc", b"defg")
    with pytest.raises(exc) as info:
        unpack_container(mutate(data))
    assert info.value.code == code


def test_container_hash_checks():
    data = pack_container(META, b"", b"")
    with pytest.raises(ArchitectureMismatch) as a:
        unpack_container(data, arch_hash=b"B" * 8)
    with pytest.raises(CheckpointMismatch) as c:
        unpack_container(data, checkpoint_hash=b"D" * 8)
    assert {a.value.code, c.value.code} == {13, 14}
