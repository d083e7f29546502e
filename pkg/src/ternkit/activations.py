"""Smooth quantiser surrogates and the slope schedule used for continuation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .quantize import sign_hard


def _check_beta(beta: float) -> None:
    if not np.all(np.asarray(beta) > 0):
        raise DomainError(f"beta must be positive, got {beta!r}")


def _real(x) -> np.ndarray:
    # keep float32/float64 inputs as they are; everything else goes to float64
    x = np.asarray(x)
    return x if x.dtype.kind == "f" else x.astype(np.float64)


def _sech2(z: np.ndarray) -> np.ndarray:
    # 4 e^{-2|z|} / (1 + e^{-2|z|})^2, stable for large |z|
    e = np.exp(-2.0 * np.abs(z))
    return 4.0 * e / (1.0 + e) ** 2


def tern_tanh(x, beta: float) -> np.ndarray:
    """Sum of two shifted tanh steps with plateaus at -1, 0 and +1.

    ``beta`` sets the slope; as it grows the function approaches
    :func:`ternkit.quantize.tern_hard`.
    """
    _check_beta(beta)
    x = _real(x)
    return 0.5 * np.tanh(2 * beta * x - beta) - 0.5 * np.tanh(-2 * beta * x - beta)


def tern_tanh_grad(x, beta: float) -> np.ndarray:
    _check_beta(beta)
    x = _real(x)
    return beta * (_sech2(2 * beta * x - beta) + _sech2(2 * beta * x + beta))


def tanh_beta(x, beta: float) -> np.ndarray:
    """tanh(beta * x), the binary continuation towards sign(x)."""
    _check_beta(beta)
    x = _real(x)
    return np.tanh(beta * x)


def tanh_beta_grad(x, beta: float) -> np.ndarray:
    _check_beta(beta)
    x = _real(x)
    return beta * _sech2(beta * x)


def boxcar_ste(x) -> tuple[np.ndarray, np.ndarray]:
    """Sign forward pass plus the boxcar gradient gate (1 where |x| <= 1).

    Forward and backward deliberately disagree: callers multiply the incoming
    gradient by the returned mask.
    """
    x = np.asarray(x)
    return sign_hard(x), (np.abs(x) <= 1).astype(x.dtype if x.dtype.kind == "f" else np.float64)


@dataclass(frozen=True)
class ContinuationSchedule:
    beta_start: float = 3.0
    beta_end: float = 8.0
    total_epochs: int = 40

    def __post_init__(self):
        if self.total_epochs < 1:
            raise DomainError("total_epochs must be >= 1")
        if not (0 < self.beta_start <= self.beta_end):
            raise DomainError(
                f"need 0 < beta_start <= beta_end, got {self.beta_start}, {self.beta_end}"
            )

    @classmethod
    def fixed(cls, beta: float, total_epochs: int = 40) -> "ContinuationSchedule":
        return cls(beta, beta, total_epochs)

    def beta(self, epoch: int) -> float:
        return beta_at(self, epoch)


def beta_at(schedule: ContinuationSchedule, epoch: int) -> float:
    """Slope for ``epoch``: linear from beta_start (first) to beta_end (last)."""
    if not (0 <= epoch < schedule.total_epochs):
        raise DomainError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    if schedule.total_epochs == 1:
        return float(schedule.beta_end)
    frac = epoch / (schedule.total_epochs - 1)
    return schedule.beta_start + (schedule.beta_end - schedule.beta_start) * frac
