"""Adaptive-Package storage format and baseline storage accounting.

A package is ``mode(2) | bitwidth-1(3) | val array`` where the val array is
64, 128 or 192 bits (by default) of same-bitwidth sign-magnitude values. The
non-zero positions of every node live in a separate bitmap region, so a
package carries values only.

Bit order is LSB-first everywhere: within a value (magnitude bits, then the
sign as the top bit), within the val array (slot 0 occupies the lowest
bits) and within a serialized package (mode, bitwidth, val array).
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, CorruptStreamError, EncodeError
from .quant import MAX_BITS, MIN_BITS, QuantizedFeatures, qmax

DEFAULT_LENGTHS = (64, 128, 192)
HEADER_BITS = 5
MODE_NAMES = ("short", "medium", "long")
STREAM_MAGIC = b"MEGP"
_STREAM_HEADER = struct.Struct("<4sIIHHH")


def check_lengths(lengths: Sequence[int]) -> tuple:
    lengths = tuple(int(x) for x in lengths)
    if len(lengths) != 3:
        raise ConfigError("need exactly (short, medium, long) lengths")
    if any(x <= 0 or x % 8 for x in lengths):
        raise ConfigError(f"lengths must be positive multiples of 8, got {lengths}")
    if not lengths[0] < lengths[1] < lengths[2]:
        raise ConfigError(f"lengths must be strictly increasing, got {lengths}")
    if lengths[2] > 0xFFFF:
        raise ConfigError("lengths must fit in 16 bits")
    return lengths


@dataclass(frozen=True)
class Package:
    mode: int
    bitwidth: int
    payload: int  # val array bits, slot k at bits [k*b, (k+1)*b)
    count: int    # occupied slots

    @property
    def used_bits(self) -> int:
        return self.count * self.bitwidth

    def val_bits(self, lengths) -> np.ndarray:
        n = lengths[self.mode]
        return np.array([(self.payload >> k) & 1 for k in range(n)], dtype=np.uint8)

    def codes(self) -> list:
        mask = (1 << self.bitwidth) - 1
        return [(self.payload >> (k * self.bitwidth)) & mask for k in range(self.count)]


@dataclass(eq=False)
class PackageStream:
    """Packages plus per-node bitmaps.

    ``node_bitwidth``/``node_scale`` are side metadata (the hardware keeps
    them with the degree tables); they are not part of the serialized form.
    """

    packages: list
    bitmaps: np.ndarray
    lengths: tuple = DEFAULT_LENGTHS
    node_bitwidth: Optional[np.ndarray] = None
    node_scale: Optional[np.ndarray] = None
    node_order: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.node_order is None:
            self.node_order = np.arange(self.bitmaps.shape[0])

    @property
    def num_nodes(self) -> int:
        return int(self.bitmaps.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.bitmaps.shape[1])

    @property
    def length_profile(self) -> tuple:
        return self.lengths

    def package_bits(self) -> int:
        """Header plus val array bits of every package (no byte alignment)."""
        return sum(HEADER_BITS + self.lengths[p.mode] for p in self.packages)

    def padding_bits(self) -> int:
        return sum(self.lengths[p.mode] - p.used_bits for p in self.packages)

    def package_nbytes(self) -> np.ndarray:
        return np.array([package_nbytes(p.mode, self.lengths) for p in self.packages], dtype=np.int64)

    def bitmap_nbytes(self) -> int:
        return (self.num_nodes * self.feature_dim + 7) // 8

    def nbytes(self) -> int:
        """Serialized size excluding the file header."""
        return self.bitmap_nbytes() + int(self.package_nbytes().sum())

    def package_first_node(self) -> np.ndarray:
        """Node whose value occupies slot 0 of each package."""
        popc = self.bitmaps.sum(axis=1).astype(np.int64)[self.node_order]
        ends = np.cumsum(popc)
        starts = np.cumsum([0] + [p.count for p in self.packages[:-1]])
        pos = np.searchsorted(ends, starts, side="right")
        return self.node_order[np.minimum(pos, max(len(popc) - 1, 0))] if len(popc) else pos


def package_nbytes(mode: int, lengths) -> int:
    return (HEADER_BITS + lengths[mode] + 7) // 8


def _sign_magnitude(v: np.ndarray, bits: int) -> np.ndarray:
    return np.abs(v) | ((v < 0).astype(np.int64) << (bits - 1))


def _pack_codes(codes, bits: int, start_slot: int) -> int:
    word = 0
    shift = start_slot * bits
    for c in codes:
        word |= int(c) << shift
        shift += bits
    return word


def _encode(q: QuantizedFeatures, lengths: tuple, fixed: bool) -> PackageStream:
    values = np.asarray(q.values)
    n, f = values.shape
    bitwidth = np.asarray(q.node_bitwidth, dtype=np.int64)
    if n and (bitwidth.min() < MIN_BITS or bitwidth.max() > MAX_BITS):
        raise EncodeError("node bitwidth outside [1, 8]")
    limits = qmax(bitwidth)
    if n and np.any(np.abs(values.astype(np.int64)) > limits[:, None]):
        bad = int(np.flatnonzero(np.any(np.abs(values.astype(np.int64)) > limits[:, None], axis=1))[0])
        raise EncodeError(f"node {bad} holds a value outside its {bitwidth[bad]}-bit range")

    bitmaps = values != 0
    long_len = lengths[2]
    packages = []
    cur_b, cur_count, cur_word = 0, 0, 0

    def close():
        used = cur_count * cur_b
        if fixed:
            mode = 2
        else:
            mode = next(m for m, ln in enumerate(lengths) if ln >= used)
        packages.append(Package(mode, cur_b, cur_word, cur_count))

    for i in range(n):
        pos = np.flatnonzero(bitmaps[i])
        if pos.size == 0:
            continue
        b = int(bitwidth[i])
        codes = _sign_magnitude(values[i, pos].astype(np.int64), b).tolist()
        if cur_count and b != cur_b:
            close()
            cur_count, cur_word = 0, 0
        cur_b = b
        cap = long_len // b
        k = 0
        while k < len(codes):
            if cur_count == cap:
                close()
                cur_count, cur_word = 0, 0
            take = min(cap - cur_count, len(codes) - k)
            cur_word |= _pack_codes(codes[k:k + take], b, cur_count)
            cur_count += take
            k += take
    if cur_count:
        close()
    return PackageStream(
        packages=packages,
        bitmaps=bitmaps,
        lengths=lengths,
        node_bitwidth=bitwidth.copy(),
        node_scale=np.asarray(q.node_scale, dtype=np.float64).copy(),
    )


def encode(q: QuantizedFeatures, lengths: Sequence[int] = DEFAULT_LENGTHS) -> PackageStream:
    """Greedy package encoder.

    Nodes are visited in ascending ID. Non-zero values accumulate in one
    package until the long-mode capacity is reached or the next node that
    has any non-zero value uses a different bitwidth; the package then takes
    the shortest mode that holds its bits and is zero padded. Nodes without
    non-zeros contribute only their bitmap.
    """
    return _encode(q, check_lengths(lengths), fixed=False)


def encode_fixed(q: QuantizedFeatures, length: int = DEFAULT_LENGTHS[2]) -> PackageStream:
    """Same greedy rule with every package padded to ``length`` bits."""
    lengths = (length, length, length)
    if length <= 0 or length % 8:
        raise ConfigError("length must be a positive multiple of 8")
    return _encode(q, lengths, fixed=True)


def decode(s: PackageStream, feature_dim: Optional[int] = None) -> QuantizedFeatures:
    """Rebuild QuantizedFeatures from packages and bitmaps.

    Without bitwidth metadata, an all-zero slot marks the padded tail of a
    package (non-zero values never encode to zero bits); nodes without any
    non-zero value then report bitwidth 1 and every scale defaults to 1.
    """
    bitmaps = np.asarray(s.bitmaps, dtype=bool)
    n, f = bitmaps.shape
    if feature_dim is not None and feature_dim != f:
        raise CorruptStreamError(f"bitmap width {f} != feature dim {feature_dim}")
    lengths = s.lengths
    meta_bits = s.node_bitwidth
    values = np.zeros((n, f), dtype=np.int8)
    node_bits = np.ones(n, dtype=np.int64) if meta_bits is None else np.asarray(meta_bits, dtype=np.int64).copy()
    pkgs = s.packages

    p, slot = 0, 0

    def slot_code(pkg, k):
        return (pkg.payload >> (k * pkg.bitwidth)) & ((1 << pkg.bitwidth) - 1)

    def capacity(pkg):
        if pkg.mode not in (0, 1, 2):
            raise CorruptStreamError(f"package {p}: invalid mode code {pkg.mode:02b}")
        return lengths[pkg.mode] // pkg.bitwidth

    def rest_is_padding(pkg, k):
        return (pkg.payload >> (k * pkg.bitwidth)) == 0

    for i in s.node_order.tolist():
        pos = np.flatnonzero(bitmaps[i])
        if pos.size == 0:
            continue
        want = None if meta_bits is None else int(meta_bits[i])
        out = []
        while len(out) < pos.size:
            if p >= len(pkgs):
                raise CorruptStreamError(f"node {i}: bitmap needs {pos.size} values, stream ran out")
            pkg = pkgs[p]
            cap = capacity(pkg)
            if want is not None and pkg.bitwidth != want:
                if not rest_is_padding(pkg, slot):
                    raise CorruptStreamError(f"package {p}: {pkg.bitwidth}-bit values where node {i} expects {want}")
                p, slot = p + 1, 0
                continue
            if slot >= cap:
                p, slot = p + 1, 0
                continue
            code = slot_code(pkg, slot)
            if code == 0:
                if not rest_is_padding(pkg, slot):
                    raise CorruptStreamError(f"package {p}: non-zero bits after padding")
                p, slot = p + 1, 0
                continue
            b = pkg.bitwidth
            if out and meta_bits is None and b != node_bits[i]:
                raise CorruptStreamError(f"node {i}: values of mixed bitwidth")
            mag = code & ((1 << (b - 1)) - 1)
            if mag == 0:
                raise CorruptStreamError(f"package {p} slot {slot}: negative zero")
            out.append(-mag if code >> (b - 1) else mag)
            if meta_bits is None:
                node_bits[i] = b
            slot += 1
        values[i, pos] = out

    while p < len(pkgs):
        pkg = pkgs[p]
        capacity(pkg)
        if not rest_is_padding(pkg, slot):
            raise CorruptStreamError(f"package {p}: values not claimed by any bitmap")
        p, slot = p + 1, 0

    scale = np.ones(n) if s.node_scale is None else np.asarray(s.node_scale, dtype=np.float64).copy()
    return QuantizedFeatures(values=values, node_scale=scale, node_bitwidth=node_bits)


def bitindex_to_row_indices(bitmap, width: Optional[int] = None) -> list:
    """Ascending positions of the set bits (LSB = position 0).

    Mirrors a parallel prefix sum: each set bit's output slot is the count
    of set bits below it.
    """
    if isinstance(bitmap, (int, np.integer)):
        value = int(bitmap)
        if value < 0:
            raise ValueError("bitmap must be non-negative")
        width = value.bit_length() if width is None else width
        bits = np.array([(value >> k) & 1 for k in range(width)], dtype=np.int64)
    else:
        bits = np.asarray(bitmap).astype(np.int64).ravel()
    slots = np.cumsum(bits) - bits
    out = np.zeros(int(bits.sum()), dtype=np.int64)
    set_pos = np.flatnonzero(bits)
    out[slots[set_pos]] = set_pos
    return out.tolist()


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------

def to_bytes(s: PackageStream) -> bytes:
    n, f = s.bitmaps.shape
    out = io.BytesIO()
    out.write(_STREAM_HEADER.pack(STREAM_MAGIC, n, f, *s.lengths))
    out.write(np.packbits(np.asarray(s.bitmaps, dtype=bool).ravel(), bitorder="little").tobytes())
    for pkg in s.packages:
        word = pkg.mode | ((pkg.bitwidth - 1) << 2) | (pkg.payload << HEADER_BITS)
        out.write(word.to_bytes(package_nbytes(pkg.mode, s.lengths), "little"))
    return out.getvalue()


def from_bytes(data: bytes) -> PackageStream:
    if len(data) < _STREAM_HEADER.size:
        raise CorruptStreamError("truncated stream header")
    magic, n, f, *lengths = _STREAM_HEADER.unpack_from(data)
    if magic != STREAM_MAGIC:
        raise CorruptStreamError(f"bad magic {magic!r}")
    try:
        lengths = check_lengths(lengths)
    except ConfigError as exc:
        raise CorruptStreamError(str(exc)) from None
    off = _STREAM_HEADER.size
    nbm = (n * f + 7) // 8
    if len(data) < off + nbm:
        raise CorruptStreamError("truncated bitmap region")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8, count=nbm, offset=off), bitorder="little")
    bitmaps = bits[: n * f].astype(bool).reshape(n, f)
    off += nbm
    packages = []
    while off < len(data):
        mode = data[off] & 0b11
        if mode == 3:
            raise CorruptStreamError(f"package at byte {off}: invalid mode code 11")
        size = package_nbytes(mode, lengths)
        if off + size > len(data):
            raise CorruptStreamError(f"package at byte {off}: truncated ({len(data) - off} of {size} bytes)")
        word = int.from_bytes(data[off:off + size], "little")
        b = ((word >> 2) & 0b111) + 1
        vlen = lengths[mode]
        payload = (word >> HEADER_BITS) & ((1 << vlen) - 1)
        if word >> (HEADER_BITS + vlen):
            raise CorruptStreamError(f"package at byte {off}: non-zero alignment bits")
        count = 0
        mask = (1 << b) - 1
        while count < vlen // b and (payload >> (count * b)) & mask:
            count += 1
        packages.append(Package(mode, b, payload, count))
        off += size
    return PackageStream(packages=packages, bitmaps=bitmaps, lengths=lengths)


def write_stream(path, s: PackageStream) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(s))


def read_stream(path) -> PackageStream:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


# --------------------------------------------------------------------------
# Storage accounting
# --------------------------------------------------------------------------

FORMATS = ("dense", "bitmap", "csr", "fixed_package", "adaptive", "ideal")


@dataclass(frozen=True)
class StorageReport:
    bits_dense: int
    bits_bitmap: int
    bits_csr: int
    bits_fixed_package: int
    bits_adaptive: int
    bits_ideal: int
    padding_bits: int
    fixed_padding_bits: int
    num_packages: int

    @property
    def adaptive_exceeds_dense(self) -> bool:
        """True in the dense high-bitwidth regime where bitmap/header overhead dominates."""
        return self.bits_adaptive >= self.bits_dense

    def bits(self, fmt: str) -> int:
        return getattr(self, f"bits_{fmt}")

    def ratios(self) -> dict:
        base = self.bits_dense or 1
        return {fmt: self.bits(fmt) / base for fmt in FORMATS}

    def to_csv(self, label: str = "") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label", "format", "bits", "ratio_to_dense"])
        for fmt, ratio in self.ratios().items():
            w.writerow([label, fmt, self.bits(fmt), f"{ratio:.6f}"])
        return buf.getvalue()


def storage_report(q: QuantizedFeatures, lengths: Sequence[int] = DEFAULT_LENGTHS,
                   dense_bits: int = MAX_BITS) -> StorageReport:
    """Storage cost of ``q`` in every format, index overheads included.

    dense: ``N*F*dense_bits``. bitmap: ``N*F`` mask bits plus every non-zero
    at the largest bitwidth present. csr: non-zeros at the largest bitwidth
    plus a ``ceil(log2 F)``-bit column index each, and ``N+1`` row pointers
    of ``ceil(log2(nnz+1))`` bits. fixed_package/adaptive: package headers
    and val arrays plus the ``N*F`` bitmap. ideal: each non-zero at its own
    node's bitwidth.
    """
    lengths = check_lengths(lengths)
    n, f = q.values.shape
    nnz_node = q.node_nnz().astype(np.int64)
    nnz = int(nnz_node.sum())
    bmax = int(q.node_bitwidth[nnz_node > 0].max()) if nnz else 0
    idx_bits = max(1, math.ceil(math.log2(f))) if f > 1 else 1
    ptr_bits = max(1, math.ceil(math.log2(nnz + 1)))

    adaptive = encode(q, lengths)
    fixed = encode_fixed(q, lengths[2])
    return StorageReport(
        bits_dense=n * f * dense_bits,
        bits_bitmap=n * f + nnz * bmax,
        bits_csr=nnz * (bmax + idx_bits) + (n + 1) * ptr_bits,
        bits_fixed_package=fixed.package_bits() + n * f,
        bits_adaptive=adaptive.package_bits() + n * f,
        bits_ideal=int(np.dot(nnz_node, q.node_bitwidth)),
        padding_bits=adaptive.padding_bits(),
        fixed_padding_bits=fixed.padding_bits(),
        num_packages=len(adaptive.packages),
    )
