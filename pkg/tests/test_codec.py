import itertools

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from conftest import random_quantized
from mega.codec import (
    DEFAULT_LENGTHS,
    HEADER_BITS,
    Package,
    PackageStream,
    bitindex_to_row_indices,
    check_lengths,
    decode,
    encode,
    encode_fixed,
    from_bytes,
    read_stream,
    storage_report,
    to_bytes,
    write_stream,
)
from mega.errors import ConfigError, CorruptStreamError, EncodeError
from mega.quant import QuantizedFeatures

HEADER = 18  # magic, N, F, three lengths


def _assert_lossless(q, s):
    r = decode(s)
    assert np.array_equal(r.values, q.values)
    assert np.array_equal(r.node_bitwidth, q.node_bitwidth)
    assert np.array_equal(r.node_scale, q.node_scale)


@pytest.mark.parametrize("sparsity", [0.0, 0.5, 0.9, 0.99])
def test_roundtrip_random(rng, sparsity):
    for _ in range(10):
        q = random_quantized(rng, int(rng.integers(1, 40)), int(rng.integers(1, 70)), sparsity)
        _assert_lossless(q, encode(q))
        _assert_lossless(q, encode_fixed(q))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(1, 24), st.floats(0, 1), st.integers(0, 2**31),
       st.sampled_from([(64, 128, 192), (8, 16, 24), (128, 256, 384)]))
def test_roundtrip_property(n, f, sparsity, seed, lengths):
    q = random_quantized(np.random.default_rng(seed), n, f, sparsity)
    _assert_lossless(q, encode(q, lengths))


def test_roundtrip_exhaustive_tiny():
    # every 2x2 matrix of 2-bit codes, under every bitwidth pairing that holds it
    for vals in itertools.product([-1, 0, 1], repeat=4):
        for bits in itertools.product([2, 3], repeat=2):
            q = QuantizedFeatures(np.array(vals, dtype=np.int8).reshape(2, 2), np.ones(2), np.array(bits))
            _assert_lossless(q, encode(q, (8, 16, 24)))


def test_serialized_roundtrip_values(rng, tmp_path):
    q = random_quantized(rng, 30, 50, 0.7, bit_choices=(2, 3, 4, 8))
    s = encode(q)
    path = tmp_path / "feat.megp"
    write_stream(path, s)
    r = read_stream(path)
    assert len(to_bytes(s)) == HEADER + s.nbytes()
    assert to_bytes(r) == to_bytes(s)
    d = decode(r)
    assert np.array_equal(d.values, q.values)
    # nodes with non-zeros recover their bitwidth from the package headers
    has = q.node_nnz() > 0
    assert np.array_equal(d.node_bitwidth[has], q.node_bitwidth[has])


def test_package_layout_bits():
    q = QuantizedFeatures(np.array([[1, 0, -1]], dtype=np.int8), np.ones(1), np.array([2]))
    s = encode(q)
    assert s.bitmaps.tolist() == [[True, False, True]]
    (pkg,) = s.packages
    assert (pkg.mode, pkg.bitwidth, pkg.count) == (0, 2, 2)
    # sign-magnitude, LSB-first: +1 -> 01, -1 -> 11
    assert pkg.payload == 0b11_01
    raw = to_bytes(s)[HEADER:]
    assert raw[0] == 0b101
    word = int.from_bytes(raw[1:], "little")
    assert word & 0b11 == 0 and (word >> 2) & 0b111 == 1
    assert word >> HEADER_BITS == 0b1101


def test_bitmap_region_packing():
    q = QuantizedFeatures(np.array([[1, 0, -1]], dtype=np.int8), np.ones(1), np.array([2]))
    assert to_bytes(encode(q))[HEADER] == 0b101


def test_first_package_closes_at_62_bits():
    # 31 two-bit values, then a 3-bit node forces the package closed
    vals = np.zeros((2, 40), dtype=np.int8)
    vals[0, :31] = 1
    vals[1, :5] = 2
    q = QuantizedFeatures(vals, np.ones(2), np.array([2, 3]))
    adaptive = encode(q)
    fixed = encode_fixed(q, 192)
    first = adaptive.packages[0]
    assert first.used_bits == 62
    assert first.mode == 0
    assert DEFAULT_LENGTHS[first.mode] - first.used_bits == 2
    fixed_pad = 192 - fixed.packages[0].used_bits
    assert fixed_pad == 130
    assert fixed_pad > 2
    assert adaptive.packages[1].bitwidth == 3 and adaptive.packages[1].mode == 0


def test_mode_selection_and_long_split():
    vals = np.ones((1, 100), dtype=np.int8)
    q = QuantizedFeatures(vals, np.ones(1), np.array([2]))
    s = encode(q)
    # 96 two-bit slots fill a long package; the last 4 values go short
    assert [(p.mode, p.count) for p in s.packages] == [(2, 96), (0, 4)]
    q = QuantizedFeatures(np.ones((1, 40), dtype=np.int8), np.ones(1), np.array([2]))
    assert [p.mode for p in encode(q).packages] == [1]


def test_zero_rows_only_store_bitmaps():
    q = QuantizedFeatures(np.zeros((5, 9), dtype=np.int8), np.ones(5), np.full(5, 3))
    s = encode(q)
    assert s.packages == []
    assert s.nbytes() == (45 + 7) // 8
    _assert_lossless(q, s)


def test_bitwidth_change_skips_empty_nodes():
    vals = np.zeros((3, 4), dtype=np.int8)
    vals[0, 0] = 1
    vals[2, 1] = 1
    q = QuantizedFeatures(vals, np.ones(3), np.array([2, 5, 2]))
    # node 1 has no non-zeros, so nodes 0 and 2 share a package
    assert len(encode(q).packages) == 1


def test_encode_rejects_out_of_range():
    q = QuantizedFeatures(np.array([[2]], dtype=np.int8), np.ones(1), np.array([2]))
    with pytest.raises(EncodeError):
        encode(q)
    q = QuantizedFeatures(np.array([[0]], dtype=np.int8), np.ones(1), np.array([9]))
    with pytest.raises(EncodeError):
        encode(q)


@pytest.mark.parametrize("lengths", [(64, 64, 192), (60, 128, 192), (0, 128, 192), (64, 128), (8, 16, 70000)])
def test_check_lengths_rejects(lengths):
    with pytest.raises(ConfigError):
        check_lengths(lengths)


def _bytes_for(rng):
    return to_bytes(encode(random_quantized(rng, 6, 20, 0.4, bit_choices=(2, 3))))


def test_invalid_mode_rejected(rng):
    data = bytearray(_bytes_for(rng))
    off = HEADER + (6 * 20 + 7) // 8
    data[off] |= 0b11
    with pytest.raises(CorruptStreamError, match="11"):
        from_bytes(bytes(data))


@pytest.mark.parametrize("cut", [3, 19, 25, 1])
def test_truncated_stream_rejected(rng, cut):
    data = _bytes_for(rng)
    with pytest.raises(CorruptStreamError):
        s = from_bytes(data[:cut] if cut != 1 else data[:-1])
        decode(s)


def test_bad_magic_rejected(rng):
    data = b"XXXX" + _bytes_for(rng)[4:]
    with pytest.raises(CorruptStreamError):
        from_bytes(data)


def test_missing_values_rejected():
    bitmaps = np.array([[True, True]])
    s = PackageStream([Package(0, 2, 0b01, 1)], bitmaps)
    with pytest.raises(CorruptStreamError):
        decode(s)


def test_unclaimed_values_rejected():
    s = PackageStream([Package(0, 2, 0b0101, 2)], np.array([[True, False]]))
    with pytest.raises(CorruptStreamError):
        decode(s)


def test_negative_zero_rejected():
    s = PackageStream([Package(0, 2, 0b10, 1)], np.array([[True]]))
    with pytest.raises(CorruptStreamError):
        decode(s)


@pytest.mark.parametrize("bitmap,expected", [
    (0b1011, [0, 1, 3]),
    (0, []),
    (1 << 7, [7]),
    ([1, 0, 1, 1, 0, 0, 0, 1], [0, 2, 3, 7]),
])
def test_bitindex_to_row_indices(bitmap, expected):
    assert bitindex_to_row_indices(bitmap, 8) == expected


@settings(max_examples=100)
@given(st.lists(st.booleans(), max_size=64))
def test_bitindex_matches_flatnonzero(bits):
    assert bitindex_to_row_indices(bits) == np.flatnonzero(bits).tolist()


def test_storage_ordering_mixed_low_bits():
    rng = np.random.default_rng(4)
    n = 400
    bits = np.where(np.arange(n) < 260, 2, 3)
    vals = np.zeros((n, 128), dtype=np.int8)
    mask = rng.random((n, 128)) >= 0.85
    mag = rng.integers(1, 2 ** (bits[:, None] - 1), size=(n, 128))
    vals[mask] = (mag * rng.choice([-1, 1], size=(n, 128)))[mask]
    q = QuantizedFeatures(vals, np.ones(n), bits)
    r = storage_report(q)
    assert r.bits_ideal <= r.bits_adaptive < min(r.bits_bitmap, r.bits_csr, r.bits_fixed_package) < r.bits_dense
    ratios = r.ratios()
    assert ratios["dense"] == 1.0
    assert r.to_csv("x").splitlines()[0] == "label,format,bits,ratio_to_dense"


def test_dense_high_bitwidth_flags_overhead(rng):
    q = random_quantized(rng, 10, 16, 0.0, bits=8)
    assert storage_report(q).adaptive_exceeds_dense


def test_storage_report_accounting():
    vals = np.array([[1, 0, 0, -1], [0, 0, 0, 0]], dtype=np.int8)
    q = QuantizedFeatures(vals, np.ones(2), np.array([2, 3]))
    r = storage_report(q, (8, 16, 24))
    assert r.bits_dense == 64
    assert r.bits_bitmap == 8 + 2 * 2
    assert r.bits_csr == 2 * (2 + 2) + 3 * 2
    assert r.bits_ideal == 4
    assert r.bits_adaptive == 8 + HEADER_BITS + 8
    assert r.bits_fixed_package == 8 + HEADER_BITS + 24
    assert r.padding_bits == 4


def test_empty_matrix():
    q = QuantizedFeatures(np.zeros((0, 16), dtype=np.int8), np.ones(0), np.zeros(0, dtype=np.int64))
    s = encode(q)
    assert s.packages == [] and s.bitmaps.shape == (0, 16)
    assert decode(s).values.shape == (0, 16)


def test_all_ones_bitindex():
    assert bitindex_to_row_indices(np.ones(37, dtype=bool)) == list(range(37))


def test_two_then_three_bits_closes_package():
    q = QuantizedFeatures(np.array([[1, 1], [1, 1]], dtype=np.int8), np.ones(2), np.array([2, 3]))
    pkgs = encode(q).packages
    assert [(p.bitwidth, p.count) for p in pkgs] == [(2, 2), (3, 2)]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_packages_never_mix_bitwidths(seed):
    q = random_quantized(np.random.default_rng(seed), 30, 20, 0.6)
    s = encode(q)
    owners = []
    for i in range(q.num_nodes):
        owners += [int(q.node_bitwidth[i])] * int(q.node_nnz()[i])
    k = 0
    for p in s.packages:
        assert set(owners[k:k + p.count]) == {p.bitwidth}
        assert p.count <= s.lengths[p.mode] // p.bitwidth
        k += p.count
    assert k == len(owners)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.floats(0, 0.99))
def test_padding_bound_per_package(seed, sparsity):
    q = random_quantized(np.random.default_rng(seed), 40, 64, sparsity, bit_choices=(2, 3, 5, 8))
    s = encode(q)
    for p in s.packages:
        pad = s.lengths[p.mode] - p.used_bits
        if p.count == s.lengths[2] // p.bitwidth:
            assert pad < p.bitwidth  # closed full
        else:
            below = s.lengths[p.mode - 1] if p.mode else 0
            assert p.used_bits > below  # smallest mode that fits
            assert pad < s.lengths[p.mode] - below
