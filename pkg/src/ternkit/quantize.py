"""Weight ternarisation/binarisation and hard activation quantisers.

Filter banks are shaped ``(out_channels, ...)``; every output channel is one
filter of ``n`` weights and gets its own threshold and scale. A 1-D input is
treated as a single filter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import DomainError
from .packed import PackedTernaryTensor, pack

TWN_FACTOR = 0.7


@dataclass(frozen=True, eq=False)
class QuantResult:
    codes: np.ndarray  # int8, shaped like the filter bank
    alpha: np.ndarray  # (out_channels,)
    delta: np.ndarray  # (out_channels,)

    @property
    def out_channels(self) -> int:
        return self.alpha.shape[0]

    def dense(self) -> np.ndarray:
        """The approximation alpha * codes, shaped like the original weights."""
        scale = self.alpha.reshape((-1,) + (1,) * (self.codes.ndim - 1))
        return scale * self.codes

    def packed(self) -> PackedTernaryTensor:
        return pack(_filters(self.codes), scales=self.alpha)

    def zero_fraction(self) -> float:
        return float(np.mean(self.codes == 0)) if self.codes.size else 0.0


def _filters(W: np.ndarray) -> np.ndarray:
    if W.ndim == 1:
        return W.reshape(1, -1)
    return W.reshape(W.shape[0], -1)


def _finite_bank(W) -> np.ndarray:
    arr = np.asarray(W, dtype=np.float64)
    if arr.ndim == 0 or arr.size == 0:
        raise DomainError("filter bank must be a non-empty array")
    if not np.all(np.isfinite(arr)):
        raise DomainError("filter bank contains non-finite values")
    return arr


def _survivor_scale(flat: np.ndarray, codes: np.ndarray) -> np.ndarray:
    n_delta = np.abs(codes).sum(axis=1)
    kept = (np.abs(flat) * np.abs(codes)).sum(axis=1)
    alpha = np.zeros(flat.shape[0])
    np.divide(kept, n_delta, out=alpha, where=n_delta > 0)
    return alpha


def ternarize_weights(W) -> QuantResult:
    """Threshold each filter at 0.7 * mean|W| and fit the least-squares scale."""
    arr = _finite_bank(W)
    flat = _filters(arr)
    n = flat.shape[1]
    mag = np.abs(flat)
    delta = TWN_FACTOR / n * mag.sum(axis=1)
    d = delta[:, None]
    codes = np.where(flat > d, 1, np.where(flat < -d, -1, 0)).astype(np.int8)
    alpha = _survivor_scale(flat, codes)
    return QuantResult(codes.reshape(arr.shape), alpha, delta)


def ternarize_sparse(W, sparsity: float = 0.5) -> QuantResult:
    """Ternarise with exactly ``ceil(sparsity * n)`` zeros per filter.

    The smallest magnitudes are zeroed; equal magnitudes are zeroed in
    ascending index order.
    """
    if not (0.0 <= sparsity < 1.0):
        raise DomainError(f"sparsity must lie in [0, 1), got {sparsity!r}")
    arr = _finite_bank(W)
    flat = _filters(arr)
    rows, n = flat.shape
    k = math.ceil(Fraction(sparsity) * n)
    mag = np.abs(flat)
    order = np.argsort(mag, axis=1, kind="stable")
    keep = np.ones_like(flat, dtype=bool)
    delta = np.zeros(rows)
    if k:
        np.put_along_axis(keep, order[:, :k], False, axis=1)
        delta = np.take_along_axis(mag, order[:, k - 1 : k], axis=1)[:, 0]
    codes = np.where(keep, sign_hard(flat), 0).astype(np.int8)
    alpha = _survivor_scale(flat, codes)
    return QuantResult(codes.reshape(arr.shape), alpha, delta)


def binarize_weights(W) -> tuple[np.ndarray, np.ndarray]:
    """Sign codes (0 maps to +1) and the per-filter mean absolute weight."""
    arr = _finite_bank(W)
    alpha = np.abs(_filters(arr)).mean(axis=1)
    return sign_hard(arr), alpha


def tern_hard(x) -> np.ndarray:
    """Step quantiser: +1 above 0.5, -1 below -0.5, 0 on the closed plateau."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DomainError("tern_hard input contains non-finite values")
    return np.where(arr > 0.5, 1, np.where(arr < -0.5, -1, 0)).astype(np.int8)


def sign_hard(x) -> np.ndarray:
    arr = np.asarray(x)
    return np.where(arr >= 0, 1, -1).astype(np.int8)


def approximation_error(W, codes, alpha) -> np.ndarray:
    """Per-filter squared error ||W - alpha * codes||^2."""
    flat = _filters(np.asarray(W, dtype=np.float64))
    c = _filters(np.asarray(codes, dtype=np.float64))
    return ((flat - np.asarray(alpha)[:, None] * c) ** 2).sum(axis=1)
