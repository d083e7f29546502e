"""Model parameters, weight quantisation for deployment, and inference."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..activations import tanh_beta, tern_tanh
from ..errors import DomainError
from ..kernels import conv2d_float, conv2d_ternary
from ..packed import PackedTernaryTensor, pack, unpack
from ..quantize import QuantResult, binarize_weights, sign_hard, tern_hard, ternarize_sparse, ternarize_weights
from .spec import LayerSpec, NetworkSpec, canonical_mode

PRECISIONS = ("float32", "ternary", "binary")
DEFAULT_EVAL_BETA = 8.0


class ModeMismatchError(DomainError):
    """The requested execution mode needs weights the model no longer has."""


@dataclass(eq=False)
class BNParams:
    gain: np.ndarray
    shift: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        for name in ("gain", "shift", "mean", "var"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float32))
        if np.any(self.var < 0):
            raise DomainError("batch-norm variance must be non-negative")
        if not self.eps > 0:
            raise DomainError("batch-norm epsilon must be positive")

    @classmethod
    def identity(cls, channels: int, eps: float = 1e-5) -> "BNParams":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels), eps)

    def fold(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel (scale, offset) with ``bn(x) == scale * x + offset``."""
        scale = self.gain.astype(np.float64) / np.sqrt(self.var.astype(np.float64) + self.eps)
        return scale, self.shift - scale * self.mean

    def apply(self, x: np.ndarray) -> np.ndarray:
        c = (1, -1) + (1,) * (x.ndim - 2)
        mean, var = self.mean.astype(np.float64), self.var.astype(np.float64)
        return (x - mean.reshape(c)) / np.sqrt(var.reshape(c) + self.eps) * self.gain.reshape(c) + self.shift.reshape(c)

    def same_as(self, other: "BNParams") -> bool:
        return self.eps == other.eps and all(
            getattr(self, n).tobytes() == getattr(other, n).tobytes()
            for n in ("gain", "shift", "mean", "var")
        )


@dataclass(eq=False)
class Model:
    """A network spec plus parameters.

    ``weights`` maps each weighted layer to either a float32 array shaped
    ``(Cout, Cin, kH, kW)`` or a packed ``(Cout, Cin*kH*kW)`` filter bank whose
    ``scales`` are the per-channel alphas. ``precision`` says which.
    """

    spec: NetworkSpec
    weights: dict[str, np.ndarray | PackedTernaryTensor]
    precision: dict[str, str]
    bn: dict[str, BNParams]
    bias: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def weight_format(self) -> str:
        kinds = {self.precision[l.name] for l in self.spec.conv_layers}
        return kinds.pop() if len(kinds) == 1 else "mixed"

    def codes_and_alpha(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        layer = self.spec.layer(name)
        w = self.weights[name]
        if not isinstance(w, PackedTernaryTensor):
            raise DomainError(f"{name} holds float weights")
        return unpack(w).reshape(layer.weight_shape), w.scales

    def same_as(self, other: "Model") -> bool:
        if self.spec != other.spec or self.precision != other.precision:
            return False
        for name, w in self.weights.items():
            o = other.weights.get(name)
            if isinstance(w, PackedTernaryTensor):
                if not (isinstance(o, PackedTernaryTensor) and w == o):
                    return False
            elif not (isinstance(o, np.ndarray) and o.dtype == w.dtype and w.tobytes() == o.tobytes()):
                return False
        if set(self.bn) != set(other.bn) or not all(self.bn[k].same_as(other.bn[k]) for k in self.bn):
            return False
        return set(self.bias) == set(other.bias) and all(
            self.bias[k].tobytes() == other.bias[k].tobytes() for k in self.bias
        )


def init_model(spec: NetworkSpec, seed: int | np.random.Generator = 0) -> Model:
    """Float model with uniform fan-in initialisation and identity batch norms."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights, precision, bn, bias = {}, {}, {}, {}
    for layer in spec.layers:
        if layer.has_weights:
            fan_in = layer.in_channels * layer.kernel[0] * layer.kernel[1]
            bound = np.sqrt(6.0 / fan_in)
            weights[layer.name] = rng.uniform(-bound, bound, layer.weight_shape).astype(np.float32)
            precision[layer.name] = "float32"
        if layer.kind == "prediction":
            bias[layer.name] = np.zeros(layer.out_channels, dtype=np.float32)
        if layer.kind == "batchnorm":
            bn[layer.name] = BNParams.identity(layer.out_channels)
    return Model(spec, weights, precision, bn, bias)


def quantize_weights(w: np.ndarray, scheme: str, sparsity: float | None = None) -> PackedTernaryTensor:
    """Pack one float filter bank as ternary (optionally fixed-sparsity) or binary."""
    if scheme == "ternary":
        q = ternarize_weights(w) if sparsity is None else ternarize_sparse(w, sparsity)
        return pack(q.codes.reshape(q.codes.shape[0], -1), scales=q.alpha.astype(np.float32))
    if scheme == "binary":
        codes, alpha = binarize_weights(w)
        return pack(codes.reshape(codes.shape[0], -1), scales=alpha.astype(np.float32))
    raise DomainError(f"unknown quantisation scheme {scheme!r}")


def quantize_model(model: Model, scheme: str = "ternary", sparsity: float | None = None) -> Model:
    """Replace every hidden convolution's float weights by packed codes and scales.

    The prediction layer stays full precision.
    """
    if scheme not in ("ternary", "binary"):
        raise DomainError(f"unknown quantisation scheme {scheme!r}")
    weights, precision = dict(model.weights), dict(model.precision)
    for layer in model.spec.conv_layers:
        if precision[layer.name] != "float32":
            raise DomainError(f"{layer.name} is already quantised ({precision[layer.name]})")
        weights[layer.name] = quantize_weights(model.weights[layer.name], scheme, sparsity)
        precision[layer.name] = scheme
    mode = "ternary-full" if scheme == "ternary" else "binary-full"
    return replace(model, spec=model.spec.with_mode(mode), weights=weights, precision=precision)


# ---------------------------------------------------------------------------
# inference

def _conv_weights(model: Model, layer: LayerSpec, mode: str, sparsity):
    """(float weights, None) or (codes, alpha) for one conv under ``mode``."""
    prec = model.precision[layer.name]
    if layer.kind == "prediction" or mode == "float":
        if prec != "float32":
            raise ModeMismatchError(f"{layer.name} stores {prec} weights; mode {mode!r} needs floats")
        return model.weights[layer.name].astype(np.float64), None
    wanted = "binary" if mode == "binary-full" else "ternary"
    if prec == "float32":
        packed = quantize_weights(model.weights[layer.name], wanted, sparsity)
        return unpack(packed).reshape(layer.weight_shape), packed.scales
    if prec != wanted:
        raise ModeMismatchError(f"{layer.name} stores {prec} weights; mode {mode!r} needs {wanted}")
    return model.codes_and_alpha(layer.name)


def _activate(x, mode: str, hard: bool, beta: float):
    if mode == "float":
        return np.tanh(x)
    if mode == "ternary-weights-only":
        return tern_tanh(x, beta)
    if mode == "ternary-full":
        return tern_hard(x) if hard else tern_tanh(x, beta)
    return sign_hard(x) if hard else tanh_beta(x, beta)


def avgpool2(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    return x[:, :, : 2 * h2, : 2 * w2].reshape(b, c, h2, 2, w2, 2).mean(axis=(3, 5))


def upsample2(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=2).repeat(2, axis=3)


def forward(model: Model, x, mode: str | None = None, beta: float | None = None,
            hard: bool = True, dense_sim: bool = False, fold_bn: bool = False,
            sparsity: float | None = None, threads: int = 1) -> np.ndarray:
    """Per-class scores for a ``(B, slices, H, W)`` (or single ``(slices, H, W)``) input.

    Blocks run convolution, batch norm and activation. With ternary (or binary)
    weights and hard activations every convolution after the first consumes
    activation codes through the packed popcount kernel; ``dense_sim`` swaps in
    a dense convolution over the same codes, scaled by alpha afterwards, which
    must agree exactly. The prediction layer is always full precision.
    """
    mode = canonical_mode(mode or model.spec.mode)
    beta = DEFAULT_EVAL_BETA if beta is None else beta
    h = np.asarray(x, dtype=np.float64)
    single = h.ndim == 3
    if single:
        h = h[None]
    spec = model.spec
    if h.shape[1] != spec.in_slices:
        raise DomainError(f"input has {h.shape[1]} slices, network expects {spec.in_slices}")
    codes_mode = hard and mode in ("ternary-full", "binary-full")
    if codes_mode and spec.ternarize_input:
        h = (tern_hard(h) if mode == "ternary-full" else sign_hard(h))
    outputs: dict[str, np.ndarray] = {}
    is_codes = codes_mode and spec.ternarize_input
    for layer in spec.layers:
        if layer.has_weights:
            w, alpha = _conv_weights(model, layer, mode, sparsity)
            geo = dict(stride=layer.stride, dilation=layer.dilation, padding=layer.padding)
            if alpha is None:
                h = conv2d_float(h, w, bias=model.bias.get(layer.name), **geo)
            elif is_codes and not dense_sim:
                q = QuantResult(w.astype(np.int8), np.asarray(alpha, np.float64), np.zeros(len(alpha)))
                h = conv2d_ternary(h.astype(np.int8), q, threads=threads, **geo)
            else:
                h = conv2d_float(h, w, **geo) * np.asarray(alpha, np.float64)[:, None, None]
            is_codes = False
        elif layer.kind == "batchnorm":
            bn = model.bn[layer.name]
            if fold_bn:
                a, b = bn.fold()
                h = h * a[:, None, None] + b[:, None, None]
            else:
                h = bn.apply(h)
        elif layer.kind == "activation":
            h = _activate(h, mode, hard, beta)
            is_codes = codes_mode
        elif layer.kind == "avgpool":
            h = avgpool2(np.asarray(h, dtype=np.float64))
            is_codes = False
        elif layer.kind == "upsample":
            h = upsample2(h)
        elif layer.kind == "concat":
            skip = outputs[layer.skip]
            if skip.shape[2:] != h.shape[2:]:
                raise DomainError(
                    f"{layer.name}: cannot concatenate {h.shape[2:]} with skip {skip.shape[2:]}"
                )
            h = np.concatenate([h, skip], axis=1)
        outputs[layer.name] = h
    h = np.asarray(h, dtype=np.float64)
    return h[0] if single else h


def predict_mask(scores: np.ndarray) -> np.ndarray:
    """Foreground where the class-1 score beats class 0."""
    return (scores[..., 1, :, :] > scores[..., 0, :, :]).astype(np.uint8)
