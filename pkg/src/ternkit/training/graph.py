"""Differentiable execution of a :class:`NetworkSpec` for training.

Activations are kept channels-last internally; inputs and scores use the
``(B, C, H, W)`` layout of the inference path. Parameters live in flat dicts keyed ``"<layer>.<field>"``: ``conv3.w``,
``bn3.gain``, ``bn3.shift``, ``prediction.w``, ``prediction.b``. Batch-norm
running statistics are buffers (``bn3.mean``, ``bn3.var``) and are never
touched by the optimiser.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DomainError
from ..network.spec import NetworkSpec, canonical_mode
from ..quantize import binarize_weights, ternarize_sparse, ternarize_weights
from . import layers as F

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass(frozen=True)
class Policy:
    """How weights and activations are treated in the training forward pass."""

    weights: str = "float"  # float | ternary | binary
    activation: str = "tanh"  # tanh | tern_tanh | tanh_beta | boxcar
    sparsity: float | None = None


def policy_for(mode: str, binary_grad: str = "continuation", sparsity: float | None = None) -> Policy:
    mode = canonical_mode(mode)
    if mode == "float":
        return Policy("float", "tanh")
    if mode in ("ternary-weights-only", "ternary-full"):
        return Policy("ternary", "tern_tanh", sparsity)
    if binary_grad not in ("continuation", "boxcar"):
        raise DomainError(f"unknown binary gradient rule {binary_grad!r}")
    return Policy("binary", "tanh_beta" if binary_grad == "continuation" else "boxcar")


def quantised_filters(w: np.ndarray, policy: Policy) -> tuple[np.ndarray, np.ndarray | None]:
    """(effective weights, per-filter alpha) used by the forward pass."""
    if policy.weights == "float":
        return w, None
    if policy.weights == "ternary":
        q = ternarize_weights(w) if policy.sparsity is None else ternarize_sparse(w, policy.sparsity)
        codes, alpha = q.codes, q.alpha
    else:
        codes, alpha = binarize_weights(w)
    alpha = alpha.astype(w.dtype)
    return (alpha[:, None, None, None] * codes).astype(w.dtype), alpha


def init_params(spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32):
    params, buffers = {}, {}
    for layer in spec.layers:
        if layer.has_weights:
            fan_in = layer.in_channels * layer.kernel[0] * layer.kernel[1]
            bound = np.sqrt(6.0 / fan_in)
            params[f"{layer.name}.w"] = rng.uniform(-bound, bound, layer.weight_shape).astype(dtype)
        if layer.kind == "prediction":
            params[f"{layer.name}.b"] = np.zeros(layer.out_channels, dtype=dtype)
        if layer.kind == "batchnorm":
            c = layer.out_channels
            params[f"{layer.name}.gain"] = np.ones(c, dtype=dtype)
            params[f"{layer.name}.shift"] = np.zeros(c, dtype=dtype)
            buffers[f"{layer.name}.mean"] = np.zeros(c, dtype=dtype)
            buffers[f"{layer.name}.var"] = np.ones(c, dtype=dtype)
    return params, buffers


def forward(spec: NetworkSpec, params, buffers, x, policy: Policy, beta: float,
            train: bool = True, weights_override=None):
    """Scores and a tape for :func:`backward`.

    With ``train`` batch norm uses batch statistics and updates the running
    buffers in place. ``weights_override`` maps conv names to effective weights
    that bypass the quantiser (used to check the quantised forward pass).
    """
    tape = []
    outputs = {}
    h = np.ascontiguousarray(np.moveaxis(x, 1, -1))
    for layer in spec.layers:
        name = layer.name
        if layer.has_weights:
            w = params[f"{name}.w"]
            alpha = None
            if weights_override and name in weights_override:
                w_eff = weights_override[name]
            elif layer.kind == "conv":
                w_eff, alpha = quantised_filters(w, policy)
            else:
                w_eff = w
            if layer.stride != 1:
                raise DomainError("training supports stride 1 only")
            h, cache = F.conv_forward(h, w_eff, layer.padding, layer.dilation,
                                      params.get(f"{name}.b"))
            tape.append((layer, "conv", (cache, alpha)))
        elif layer.kind == "batchnorm":
            gain, shift = params[f"{name}.gain"], params[f"{name}.shift"]
            if train:
                h, cache, mu, var = F.bn_forward_train(h, gain, shift, BN_EPS)
                n = h.shape[0] * h.shape[1] * h.shape[2]
                unbiased = var * n / max(n - 1, 1)
                buffers[f"{name}.mean"] *= 1 - BN_MOMENTUM
                buffers[f"{name}.mean"] += BN_MOMENTUM * mu.astype(h.dtype)
                buffers[f"{name}.var"] *= 1 - BN_MOMENTUM
                buffers[f"{name}.var"] += BN_MOMENTUM * unbiased.astype(h.dtype)
                tape.append((layer, "bn", cache))
            else:
                h = F.bn_forward_eval(h, gain, shift, buffers[f"{name}.mean"],
                                      buffers[f"{name}.var"], BN_EPS).astype(h.dtype)
                tape.append((layer, "bn_eval", None))
        elif layer.kind == "activation":
            h, cache = F.activation_forward(h, policy.activation, beta)
            tape.append((layer, "act", cache))
        elif layer.kind == "avgpool":
            h, shape = F.avgpool_forward(h)
            tape.append((layer, "pool", shape))
        elif layer.kind == "upsample":
            h = F.upsample_forward(h)
            tape.append((layer, "up", None))
        elif layer.kind == "concat":
            skip = outputs[layer.skip]
            if skip.shape[1:3] != h.shape[1:3]:
                raise DomainError(f"{name}: cannot concatenate {h.shape[1:3]} with {skip.shape[1:3]}")
            tape.append((layer, "cat", h.shape[-1]))
            h = np.concatenate([h, skip], axis=-1)
        outputs[name] = h
    return np.moveaxis(h, -1, 1), (tape, beta, policy)


def backward(tape_state, grad_scores, input_grad: bool = False):
    """Parameter gradients (and optionally the input gradient) from a tape.

    Gradients reaching quantised weights pass straight through to the
    full-precision master: the gradient w.r.t. the codes, ``alpha * dL/dW_eff``,
    is used as is, with alpha held constant.
    """
    tape, beta, policy = tape_state
    grads = {}
    pending: dict[str, np.ndarray] = {}
    g = np.ascontiguousarray(np.moveaxis(grad_scores, 1, -1))
    for layer, kind, cache in reversed(tape):
        if layer.name in pending:
            g = g + pending.pop(layer.name)
        if kind == "conv":
            conv_cache, alpha = cache
            g, dw, db = F.conv_backward(g, conv_cache)
            if alpha is not None:
                dw = dw * alpha[:, None, None, None]
            grads[f"{layer.name}.w"] = dw
            if layer.kind == "prediction":
                grads[f"{layer.name}.b"] = db
        elif kind == "bn":
            g, dgain, dshift = F.bn_backward(g, cache)
            grads[f"{layer.name}.gain"] = dgain
            grads[f"{layer.name}.shift"] = dshift
        elif kind == "act":
            g = F.activation_backward(g, policy.activation, cache, beta)
        elif kind == "pool":
            g = F.avgpool_backward(g, cache)
        elif kind == "up":
            g = F.upsample_backward(g)
        elif kind == "cat":
            main = cache
            skip_grad = g[..., main:]
            pending[layer.skip] = pending.get(layer.skip, 0) + skip_grad
            g = np.ascontiguousarray(g[..., :main])
        else:
            raise DomainError(f"cannot backpropagate through {kind} ({layer.name})")
    if input_grad:
        grads["input"] = np.moveaxis(g, -1, 1)
    return grads
