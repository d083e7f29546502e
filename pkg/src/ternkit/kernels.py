"""Multiplication-free inner products, packed GEMM, im2col and 2-D convolutions.

Patch rows are laid out channel-major, then row-major over the kernel taps:
column ``c * kH * kW + ky * kW + kx``. The same layout is used by the float
and the packed paths, and matches ``weights.reshape(out_channels, -1)`` for a
``(out_channels, in_channels, kH, kW)`` filter bank.
"""

from __future__ import annotations

from dataclasses import dataclass

import functools

import numba
import numpy as np
from llvmlite import ir
from numba import njit, prange, types
from numba.extending import intrinsic
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DomainError
from .packed import PackedTernaryTensor, pack, unpack
from .quantize import QuantResult

# TBB is often present but too old; prefer the layers that need nothing extra
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]


@intrinsic
def _popcnt(typingctx, x):
    sig = types.int64(types.uint64)

    def codegen(context, builder, signature, args):
        fn = builder.module.declare_intrinsic("llvm.ctpop", [ir.IntType(64)])
        return builder.call(fn, args)

    return sig, codegen


# ---------------------------------------------------------------------------
# inner products

def _row_words(t: PackedTernaryTensor, name: str):
    if t.rows != 1:
        raise DomainError(f"{name} must be a single packed row, got shape {t.shape}")
    return t.sign_words[0], t.value_words[0]


@functools.lru_cache(maxsize=64)
def _lane_mask(c: int, n_words: int) -> np.ndarray:
    mask = np.zeros(n_words, dtype=np.uint64)
    full, tail = divmod(c, 64)
    mask[:full] = np.uint64(0xFFFFFFFFFFFFFFFF)
    if tail:
        mask[full] = np.uint64((1 << tail) - 1)
    mask.flags.writeable = False
    return mask


def _check_lengths(a: PackedTernaryTensor, b: PackedTernaryTensor, c: int | None) -> int:
    if a.row_length != b.row_length:
        raise DomainError(f"length mismatch: {a.row_length} vs {b.row_length}")
    if c is None:
        return a.row_length
    if c != a.row_length:
        raise DomainError(f"length c={c} does not match packed rows of {a.row_length}")
    return c


@njit(cache=True)
def _binary_dot_words(a_s, a_v, b_s, b_v, lanes):
    # returns (ok, popcount of sign XOR); ok is False when a lane holds a zero
    diff = 0
    for w in range(a_s.size):
        if a_v[w] != lanes[w] or b_v[w] != lanes[w]:
            return False, 0
        diff += _popcnt(a_s[w] ^ b_s[w])
    return True, diff


@njit(cache=True)
def _ternary_dot_words(a_s, a_v, b_s, b_v):
    acc = 0
    for w in range(a_s.size):
        both = a_v[w] & b_v[w]
        differ = a_s[w] ^ b_s[w]
        acc += _popcnt(~differ & both) - _popcnt(differ & both)
    return acc


def binary_dot(a: PackedTernaryTensor, b: PackedTernaryTensor, c: int | None = None) -> int:
    """Dot product of two +/-1 rows as ``c - 2 * popcount(a_s XOR b_s)``."""
    c = _check_lengths(a, b, c)
    a_s, a_v = _row_words(a, "a")
    b_s, b_v = _row_words(b, "b")
    ok, diff = _binary_dot_words(a_s, a_v, b_s, b_v, _lane_mask(c, a_s.size))
    if not ok:
        raise DomainError("binary_dot operands contain zeros; use ternary_dot")
    return c - 2 * diff


def ternary_dot(a: PackedTernaryTensor, b: PackedTernaryTensor, c: int | None = None) -> int:
    """Dot product of two ternary rows from two masked popcounts.

    Lanes where either operand is zero are masked out; the remaining lanes
    count +1 when the signs agree and -1 when they differ.
    """
    _check_lengths(a, b, c)
    a_s, a_v = _row_words(a, "a")
    b_s, b_v = _row_words(b, "b")
    return int(_ternary_dot_words(a_s, a_v, b_s, b_v))


# ---------------------------------------------------------------------------
# GEMM kernels

@njit(cache=True)
def _ternary_gemm_serial(i_s, i_v, w_s, w_v, out):
    rows, nw = i_s.shape
    filters = w_s.shape[0]
    for i in range(rows):
        for j in range(filters):
            acc = 0
            for k in range(nw):
                m = i_v[i, k] & w_v[j, k]
                x = i_s[i, k] ^ w_s[j, k]
                acc += _popcnt(~x & m) - _popcnt(x & m)
            out[i, j] = acc


@njit(cache=True, parallel=True)
def _ternary_gemm_parallel(i_s, i_v, w_s, w_v, out):
    rows, nw = i_s.shape
    filters = w_s.shape[0]
    for i in prange(rows):
        for j in range(filters):
            acc = 0
            for k in range(nw):
                m = i_v[i, k] & w_v[j, k]
                x = i_s[i, k] ^ w_s[j, k]
                acc += _popcnt(~x & m) - _popcnt(x & m)
            out[i, j] = acc


@njit(cache=True)
def _binary_gemm_serial(i_s, w_s, c, out):
    rows, nw = i_s.shape
    filters = w_s.shape[0]
    for i in range(rows):
        for j in range(filters):
            acc = 0
            for k in range(nw):
                acc += _popcnt(i_s[i, k] ^ w_s[j, k])
            out[i, j] = c - 2 * acc


@njit(cache=True)
def _float_gemm_serial(a, b, out):
    rows, c = a.shape
    filters = b.shape[0]
    for i in range(rows):
        for j in range(filters):
            acc = np.float32(0.0)
            for k in range(c):
                acc += a[i, k] * b[j, k]
            out[i, j] = acc


@njit(cache=True, parallel=True)
def _float_gemm_parallel(a, b, out):
    rows, c = a.shape
    filters = b.shape[0]
    for i in prange(rows):
        for j in range(filters):
            acc = np.float32(0.0)
            for k in range(c):
                acc += a[i, k] * b[j, k]
            out[i, j] = acc


def _as_packed_rows(x) -> PackedTernaryTensor:
    if isinstance(x, PatchMatrix):
        x = x.packed()
    if not isinstance(x, PackedTernaryTensor):
        raise DomainError(f"expected packed rows, got {type(x).__name__}")
    return x


def ternary_gemm_int(I, W, threads: int = 1) -> np.ndarray:
    """Exact integer products ``I @ W.T`` of packed ternary row sets."""
    I = _as_packed_rows(I)
    W = _as_packed_rows(W)
    if I.row_length != W.row_length:
        raise DomainError(f"inner dimension mismatch: {I.row_length} vs {W.row_length}")
    out = np.empty((I.rows, W.rows), dtype=np.int32)
    kernel = _ternary_gemm_parallel if threads > 1 else _ternary_gemm_serial
    kernel(I.sign_words, I.value_words, W.sign_words, W.value_words, out)
    return out


def ternary_gemm(I, W, alphas=None, threads: int = 1) -> np.ndarray:
    """``out[i, j] = alphas[j] * ternary_dot(I[i], W[j])``.

    ``alphas`` defaults to the scales stored on ``W``. Accumulation is integer;
    the scale is applied once per output.
    """
    W = _as_packed_rows(W)
    if alphas is None:
        alphas = W.scales if W.scales is not None else np.ones(W.rows)
    alphas = np.asarray(alphas, dtype=np.float64).reshape(-1)
    if alphas.size != W.rows:
        raise DomainError(f"{alphas.size} scales for {W.rows} filters")
    return ternary_gemm_int(I, W, threads) * alphas


def binary_gemm_int(I, W) -> np.ndarray:
    """Integer products of +/-1 row sets through XOR + popcount."""
    I = _as_packed_rows(I)
    W = _as_packed_rows(W)
    c = I.row_length
    if c != W.row_length:
        raise DomainError(f"inner dimension mismatch: {c} vs {W.row_length}")
    lanes = _lane_mask(c, I.words_per_row)
    if np.any(I.value_words != lanes) or np.any(W.value_words != lanes):
        raise DomainError("binary_gemm operands contain zeros; use ternary_gemm")
    out = np.empty((I.rows, W.rows), dtype=np.int32)
    _binary_gemm_serial(I.sign_words, W.sign_words, c, out)
    return out


def float_gemm(a, b, threads: int = 1) -> np.ndarray:
    """Scalar triple-loop ``a @ b.T`` in float32 (no BLAS); the benchmark baseline."""
    a = np.ascontiguousarray(a, dtype=np.float32)
    b = np.ascontiguousarray(b, dtype=np.float32)
    if a.shape[1] != b.shape[1]:
        raise DomainError(f"inner dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    out = np.empty((a.shape[0], b.shape[0]), dtype=np.float32)
    (_float_gemm_parallel if threads > 1 else _float_gemm_serial)(a, b, out)
    return out


def set_threads(n: int) -> None:
    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


# ---------------------------------------------------------------------------
# im2col and convolution

@dataclass(frozen=True)
class ConvGeometry:
    in_channels: int
    in_h: int
    in_w: int
    kh: int
    kw: int
    stride: int = 1
    dilation: int = 1
    padding: int = 0

    @property
    def out_h(self) -> int:
        return (self.in_h + 2 * self.padding - self.dilation * (self.kh - 1) - 1) // self.stride + 1

    @property
    def out_w(self) -> int:
        return (self.in_w + 2 * self.padding - self.dilation * (self.kw - 1) - 1) // self.stride + 1

    @property
    def patch_size(self) -> int:
        return self.in_channels * self.kh * self.kw

    def check(self) -> None:
        if min(self.kh, self.kw, self.stride, self.dilation) < 1 or self.padding < 0:
            raise DomainError(f"invalid convolution geometry {self}")
        if self.out_h < 1 or self.out_w < 1:
            raise DomainError(
                f"kernel {self.kh}x{self.kw} (dilation {self.dilation}) larger than "
                f"padded input {self.in_h + 2 * self.padding}x{self.in_w + 2 * self.padding}"
            )


@dataclass(frozen=True, eq=False)
class PatchMatrix:
    """Receptive-field patches, one row per output position."""

    geometry: ConvGeometry
    data: np.ndarray | PackedTernaryTensor

    @property
    def rows(self) -> int:
        return self.geometry.out_h * self.geometry.out_w

    @property
    def cols(self) -> int:
        return self.geometry.patch_size

    @property
    def is_packed(self) -> bool:
        return isinstance(self.data, PackedTernaryTensor)

    def dense(self) -> np.ndarray:
        return unpack(self.data) if self.is_packed else self.data

    def packed(self) -> PackedTernaryTensor:
        return self.data if self.is_packed else pack(self.data)


def im2col(x, kh: int, kw: int, stride: int = 1, dilation: int = 1, padding: int = 0) -> PatchMatrix:
    """Unfold a ``(C, H, W)`` map into a ``(outH * outW, C * kh * kw)`` patch matrix."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise DomainError(f"im2col expects a (C, H, W) map, got shape {x.shape}")
    geo = ConvGeometry(x.shape[0], x.shape[1], x.shape[2], kh, kw, stride, dilation, padding)
    geo.check()
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    span_h = dilation * (kh - 1) + 1
    span_w = dilation * (kw - 1) + 1
    win = sliding_window_view(x, (span_h, span_w), axis=(1, 2))
    win = win[:, ::stride, ::stride, ::dilation, ::dilation][:, : geo.out_h, : geo.out_w]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(geo.out_h * geo.out_w, geo.patch_size)
    return PatchMatrix(geo, np.ascontiguousarray(cols))


def _batched(fn):
    def wrapper(x, *args, **kwargs):
        if isinstance(x, np.ndarray) and x.ndim == 4:
            return np.stack([fn(xi, *args, **kwargs) for xi in x])
        return fn(x, *args, **kwargs)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_batched
def conv2d_float(x, weights, stride: int = 1, dilation: int = 1, padding: int = 0, bias=None):
    """Dense cross-correlation of a ``(C, H, W)`` map (or a batch of them)."""
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 4 or weights.shape[1] != x.shape[0]:
        raise DomainError(f"weights {weights.shape} do not fit input {x.shape}")
    cout, _, kh, kw = weights.shape
    pm = im2col(x, kh, kw, stride, dilation, padding)
    out = pm.data @ weights.reshape(cout, -1).T
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64)
    return np.ascontiguousarray(out.T).reshape(cout, pm.geometry.out_h, pm.geometry.out_w)


def _packed_filters(weights) -> tuple[PackedTernaryTensor, np.ndarray, tuple[int, int, int]]:
    if isinstance(weights, QuantResult):
        if weights.codes.ndim != 4:
            raise DomainError("conv weights must be shaped (Cout, Cin, kH, kW)")
        cout, cin, kh, kw = weights.codes.shape
        return weights.packed(), weights.alpha, (cin, kh, kw)
    raise DomainError(f"unsupported weight container {type(weights).__name__}")


@_batched
def conv2d_ternary(x, weights, kernel=None, stride: int = 1, dilation: int = 1,
                   padding: int = 0, threads: int = 1) -> np.ndarray:
    """Ternary convolution through packed patches and masked popcounts.

    ``x`` holds activation codes in {-1, 0, +1} as an array or a packed
    ``(C, H, W)`` tensor. ``weights`` is a :class:`QuantResult` or a packed
    ``(Cout, Cin*kH*kW)`` filter bank with scales, in which case ``kernel``
    gives ``(Cin, kH, kW)``. Output values are alpha-scaled integers.
    """
    if isinstance(x, PackedTernaryTensor):
        x = unpack(x)
    x = np.asarray(x)
    if isinstance(weights, PackedTernaryTensor):
        if kernel is None:
            raise DomainError("packed filter banks need kernel=(Cin, kH, kW)")
        bank, alpha = weights, weights.scales
        if alpha is None:
            raise DomainError("packed filter bank carries no scales")
        cin, kh, kw = kernel
        if cin * kh * kw != bank.row_length:
            raise DomainError(f"kernel {kernel} does not match packed rows of {bank.row_length}")
    else:
        bank, alpha, (cin, kh, kw) = _packed_filters(weights)
    if x.ndim != 3 or x.shape[0] != cin:
        raise DomainError(f"input {x.shape} does not match {cin} input channels")
    pm = im2col(x.astype(np.int8), kh, kw, stride, dilation, padding)
    out = ternary_gemm(pm.packed(), bank, alpha, threads=threads)
    g = pm.geometry
    return np.ascontiguousarray(out.T).reshape(bank.rows, g.out_h, g.out_w)
