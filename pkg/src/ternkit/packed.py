"""Two-bitplane storage for ternary tensors.

Every element in {-1, 0, +1} is stored as a (sign, value) bit pair:

    +1 -> v=1, s=1
    -1 -> v=1, s=0
     0 -> v=0, s=0

The innermost axis is the packing axis. Each row is padded to a whole number
of 64-bit words; element ``j`` of a row lives in bit ``j % 64`` (LSB first) of
word ``j // 64``. Padding lanes are canonical zeros, so they drop out of any
masked popcount.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, IntegrityError

WORD_BITS = 64


def words_for(length: int) -> int:
    return -(-length // WORD_BITS)


@dataclass(frozen=True, eq=False)
class PackedTernaryTensor:
    shape: tuple[int, ...]
    sign_words: np.ndarray
    value_words: np.ndarray
    scales: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        if not self.shape:
            raise DomainError("packed tensors need at least one axis")
        expected = (self.rows, words_for(self.row_length))
        for name in ("sign_words", "value_words"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.uint64)
            if arr.shape != expected:
                raise DomainError(f"{name} has shape {arr.shape}, expected {expected}")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if self.scales is not None:
            scales = np.array(self.scales, dtype=np.float64).reshape(-1)
            scales.flags.writeable = False
            object.__setattr__(self, "scales", scales)

    @property
    def row_length(self) -> int:
        return self.shape[-1]

    @property
    def rows(self) -> int:
        return math.prod(self.shape[:-1])

    @property
    def words_per_row(self) -> int:
        return words_for(self.row_length)

    @property
    def payload_bytes(self) -> int:
        """Bytes taken by both bitplanes (scales excluded)."""
        return 2 * self.rows * self.words_per_row * 8

    def row(self, i: int) -> "PackedTernaryTensor":
        if not -self.rows <= i < self.rows:
            raise IndexError(f"row {i} out of range for {self.rows} rows")
        i %= self.rows
        # slices of already-checked planes: skip __post_init__
        out = object.__new__(PackedTernaryTensor)
        for name, val in (("shape", (self.row_length,)), ("sign_words", self.sign_words[i : i + 1]),
                          ("value_words", self.value_words[i : i + 1]), ("scales", None)):
            object.__setattr__(out, name, val)
        return out

    def nonzero_count(self) -> int:
        return int(np.bitwise_count(self.value_words).sum())

    def __eq__(self, other) -> bool:
        if not isinstance(other, PackedTernaryTensor):
            return NotImplemented
        if self.shape != other.shape:
            return False
        if not (
            np.array_equal(self.sign_words, other.sign_words)
            and np.array_equal(self.value_words, other.value_words)
        ):
            return False
        if self.scales is None or other.scales is None:
            return self.scales is None and other.scales is None
        return self.scales.tobytes() == other.scales.tobytes()

    __hash__ = None


def _bits_to_words(bits: np.ndarray, n_words: int) -> np.ndarray:
    # bits: (rows, n) bool -> (rows, n_words) uint64, lane j -> bit j%64 of word j//64
    rows = bits.shape[0]
    packed = np.packbits(bits, axis=1, bitorder="little")
    if packed.shape[1] != n_words * 8:
        full = np.zeros((rows, n_words * 8), dtype=np.uint8)
        full[:, : packed.shape[1]] = packed
        packed = full
    return packed.view("<u8").astype(np.uint64, copy=False)


def _words_to_bits(words: np.ndarray) -> np.ndarray:
    as_bytes = np.ascontiguousarray(words.astype("<u8")).view(np.uint8)
    return np.unpackbits(as_bytes, axis=1, bitorder="little").astype(bool)


def pack(codes, scales=None) -> PackedTernaryTensor:
    """Pack an integer array with entries in {-1, 0, +1}."""
    arr = np.asarray(codes)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.size and arr.dtype.kind == "f" and not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise DomainError(f"non-ternary entry at index {tuple(int(i) for i in bad)}")
    in_range = arr.dtype.kind in "iub" and (arr.size == 0 or (arr.min() >= -1 and arr.max() <= 1))
    bad_mask = None if in_range else (arr != -1) & (arr != 0) & (arr != 1)
    if bad_mask is not None and bad_mask.any():
        bad = tuple(int(i) for i in np.argwhere(bad_mask)[0])
        raise DomainError(f"non-ternary entry {arr[bad]!r} at index {bad}")
    if scales is not None:
        scales = np.asarray(scales, dtype=np.float64).reshape(-1)
    n = arr.shape[-1]
    flat = arr.reshape(-1, n) if arr.size else np.zeros((math.prod(arr.shape[:-1]), n))
    nw = words_for(n)
    return PackedTernaryTensor(
        arr.shape,
        sign_words=_bits_to_words(flat > 0, nw),
        value_words=_bits_to_words(flat != 0, nw),
        scales=scales,
    )


def validate(t: PackedTernaryTensor) -> str | None:
    """Return a description of the first violated invariant, or None when canonical."""
    n = t.row_length
    multi = t.rows > 1
    bad = t.sign_words & ~t.value_words
    if bad.any():
        r, w = (int(i) for i in np.argwhere(bad)[0])
        word = int(bad[r, w])
        lane = w * WORD_BITS + (word & -word).bit_length() - 1
        where = f"lane {lane}" + (f" of row {r}" if multi else "")
        return f"sign bit on zero element, {where}"
    tail = n % WORD_BITS
    if tail and t.rows:
        pad_mask = np.uint64(~((1 << tail) - 1) & ((1 << 64) - 1))
        dirty = ((t.sign_words[:, -1] | t.value_words[:, -1]) & pad_mask) != 0
        if dirty.any():
            r = int(np.argmax(dirty))
            return "padding lane nonzero" + (f" in row {r}" if multi else "")
    if t.scales is not None:
        if t.scales.size != t.rows:
            return f"scale count {t.scales.size} does not match {t.rows} rows"
        # a zero scale is only legal on an all-zero channel
        empty = ~t.value_words.any(axis=1)
        bad_scale = ~(t.scales > 0) & ~(empty & (t.scales == 0))
        if bad_scale.any():
            idx = int(np.argmax(bad_scale))
            return f"non-positive scale {t.scales[idx]!r} at channel {idx}"
    return None


def unpack(t: PackedTernaryTensor) -> np.ndarray:
    """Inverse of :func:`pack`; returns an int8 array of ``t.shape``."""
    bad = t.sign_words & ~t.value_words
    if bad.any():
        raise IntegrityError(validate(t))
    n = t.row_length
    if t.rows == 0:
        return np.zeros(t.shape, dtype=np.int8)
    v = _words_to_bits(t.value_words)[:, :n]
    s = _words_to_bits(t.sign_words)[:, :n]
    out = v.astype(np.int8) * np.where(s, 1, -1).astype(np.int8)
    return out.reshape(t.shape)


def as_dense(x, dtype=np.float64) -> np.ndarray:
    """Row-major real tensor with the finiteness check applied."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if not np.all(np.isfinite(arr)):
        raise DomainError("dense tensor contains non-finite values")
    return arr
