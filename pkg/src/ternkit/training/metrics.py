from __future__ import annotations

import numpy as np

from ..errors import DomainError
from .layers import softmax_ce_forward


def weighted_cross_entropy(scores, target, w_bg: float = 0.5, w_fg: float = 2.5) -> float:
    """Mean over pixels of ``w[class] * -log softmax(scores)[class]`` for 2-class scores."""
    scores = np.asarray(scores, dtype=np.float64)
    target = np.asarray(target)
    if scores.ndim == 3:
        scores, target = scores[None], target[None]
    if scores.ndim != 4 or scores.shape[1] != 2:
        raise DomainError(f"expected (B, 2, H, W) scores, got {scores.shape}")
    if target.shape != (scores.shape[0],) + scores.shape[2:]:
        raise DomainError(f"target {target.shape} does not match scores {scores.shape}")
    loss, _ = softmax_ce_forward(scores, target, (w_bg, w_fg))
    return loss


def dice(pred, target) -> float:
    """2|A & B| / (|A| + |B|); 1.0 when both masks are empty."""
    a = np.asarray(pred).astype(bool)
    b = np.asarray(target).astype(bool)
    if a.shape != b.shape:
        raise DomainError(f"mask shapes differ: {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def mean_dice(preds, targets) -> float:
    return float(np.mean([dice(p, t) for p, t in zip(preds, targets)]))
