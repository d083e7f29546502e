"""Declarative layer graphs: the Table-style U-Net and its desk-scale analog."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from ..errors import DomainError

LAYER_KINDS = ("conv", "avgpool", "upsample", "concat", "batchnorm", "activation", "prediction")
MODES = ("float", "ternary-weights-only", "ternary-full", "binary-full")
MODE_ALIASES = {"ternary": "ternary-full", "binary": "binary-full", "weights-only": "ternary-weights-only"}


def canonical_mode(mode: str) -> str:
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise DomainError(f"unknown mode {mode!r}; expected one of {MODES}")
    return mode


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    in_channels: int = 0
    out_channels: int = 0
    out_size: tuple[int, int] | None = None
    skip: str | None = None
    # Geometry the MFlops figure is evaluated at, when it differs from out_size/kernel.
    flops_size: tuple[int, int] | None = None
    flops_kernel: tuple[int, int] | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise DomainError(f"unknown layer kind {self.kind!r}")
        if self.out_size is not None and min(self.out_size) < 1:
            raise DomainError(f"{self.name}: declared output size must be positive")

    @property
    def has_weights(self) -> bool:
        return self.kind in ("conv", "prediction")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, *self.kernel)

    @property
    def param_count(self) -> int:
        kh, kw = self.kernel
        return kh * kw * self.in_channels * self.out_channels if self.has_weights else 0


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    input_size: tuple[int, int]
    in_slices: int
    width: int = 1
    mode: str = "float"
    ternarize_input: bool = False
    name: str = "custom"
    num_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "mode", canonical_mode(self.mode))
        seen: set[str] = set()
        for layer in self.layers:
            if layer.name in seen:
                raise DomainError(f"duplicate layer name {layer.name!r}")
            if layer.kind == "concat" and layer.skip not in seen:
                raise DomainError(f"skip source {layer.skip!r} must precede {layer.name!r}")
            seen.add(layer.name)
        preds = [l for l in self.layers if l.kind == "prediction"]
        if len(preds) != 1:
            raise DomainError(f"expected exactly one prediction layer, found {len(preds)}")
        if self.layers[-1].kind != "prediction":
            raise DomainError("the prediction layer must come last")

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    @property
    def weighted_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.has_weights]

    @property
    def conv_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind == "conv"]

    @property
    def first_conv(self) -> LayerSpec:
        return self.conv_layers[0]

    def with_mode(self, mode: str) -> "NetworkSpec":
        return replace(self, mode=canonical_mode(mode))


def _block(name, kernel, cin, cout, size, padding=0, **extra):
    conv = LayerSpec("conv", f"conv{name}", kernel=kernel, padding=padding,
                     in_channels=cin, out_channels=cout, out_size=size, **extra)
    return conv, LayerSpec("batchnorm", f"bn{name}", in_channels=cout, out_channels=cout,
                           out_size=size)


def _act(name, channels, size):
    return LayerSpec("activation", f"act{name}", in_channels=channels, out_channels=channels,
                     out_size=size)


def _pool(name, channels, size):
    return LayerSpec("avgpool", name, kernel=(2, 2), stride=2, in_channels=channels,
                     out_channels=channels, out_size=size)


def _up(name, channels, size):
    return LayerSpec("upsample", name, kernel=(2, 2), in_channels=channels,
                     out_channels=channels, out_size=size)


def _concat(name, channels, skip, size):
    return LayerSpec("concat", name, in_channels=channels, out_channels=2 * channels,
                     skip=skip, out_size=size)


def build_table1() -> NetworkSpec:
    """The four-level U-Net of the baseline architecture table.

    Sizes, kernels and channels are copied row by row. Convolutions use valid
    padding and dilation 1; the declared sizes are kept for accounting only
    because they are not consistent with any single uniform geometry.
    ``flops_size``/``flops_kernel`` record the evaluation geometry implied by
    the printed MFlops entries wherever it differs from the size column.
    """
    L: list[LayerSpec] = []

    def conv(idx, kernel, cin, cout, size, pool_after=None, **extra):
        c, bn = _block(idx, kernel, cin, cout, size, **extra)
        L.extend([c, bn])
        if pool_after is not None:
            L.append(_pool(f"pool{idx}", cout, pool_after))
            L.append(_act(idx, cout, pool_after))
        else:
            L.append(_act(idx, cout, size))

    k3, k1 = (3, 3), (1, 1)
    conv(1, k3, 15, 32, (234, 170))
    conv(2, k3, 32, 64, (232, 168))
    # printed MFlops of the three pre-pool convolutions match the pooled grid
    conv(3, k3, 64, 64, (228, 164), pool_after=(114, 82), flops_size=(114, 82))
    conv(4, k3, 64, 128, (112, 80))
    conv(5, k3, 128, 128, (108, 76), pool_after=(54, 38), flops_size=(54, 38))
    conv(6, k3, 128, 256, (52, 36))
    conv(7, k1, 256, 256, (52, 36), pool_after=(26, 18), flops_size=(26, 18))
    conv(8, k1, 256, 256, (26, 18))
    L.append(_up("up8", 256, (52, 38)))
    L.append(_concat("cat9", 256, "act6", (52, 38)))
    conv(9, k3, 512, 256, (50, 34))
    conv(10, k3, 256, 128, (48, 32))
    L.append(_up("up10", 128, (96, 64)))
    L.append(_concat("cat11", 128, "act4", (96, 64)))
    conv(11, k3, 256, 128, (94, 62))
    conv(12, k3, 128, 64, (92, 60))
    L.append(_up("up12", 64, (184, 118)))
    L.append(_concat("cat13", 64, "act2", (184, 118)))
    conv(13, k3, 128, 64, (180, 116), flops_size=(182, 118))
    conv(14, k3, 64, 64, (176, 110), flops_size=(180, 116))
    L.append(LayerSpec("prediction", "prediction", kernel=k3, in_channels=64, out_channels=2,
                       out_size=(176, 110), flops_kernel=k1))
    return NetworkSpec(tuple(L), input_size=(236, 172), in_slices=15, width=32, name="table1")


def build_toy(width: int = 8, in_slices: int = 3, levels: int = 3,
              size: int | tuple[int, int] = 64, mode: str = "float",
              ternarize_input: bool = False) -> NetworkSpec:
    """A reduced-width U-Net with the block pattern of :func:`build_table1`.

    Convolutions are zero-padded so every level keeps its spatial size, and the
    prediction map matches the input. Spatial sizes must be divisible by
    ``2 ** (levels - 1)``.
    """
    if width < 1 or in_slices < 1 or levels < 2:
        raise DomainError("need width >= 1, in_slices >= 1 and levels >= 2")
    h, w = (size, size) if isinstance(size, int) else size
    step = 2 ** (levels - 1)
    if h % step or w % step or h < step or w < step:
        raise DomainError(f"input {h}x{w} not divisible by {step} for {levels} levels")
    L: list[LayerSpec] = []
    counter = iter(range(1, 10_000))
    k3, k1 = (3, 3), (1, 1)

    def conv(kernel, cin, cout, hw, pool_to=None):
        idx = next(counter)
        pad = kernel[0] // 2
        c, bn = _block(idx, kernel, cin, cout, hw, padding=pad)
        L.extend([c, bn])
        if pool_to is not None:
            L.append(_pool(f"pool{idx}", cout, pool_to))
            L.append(_act(idx, cout, pool_to))
        else:
            L.append(_act(idx, cout, hw))
        return f"act{idx}"

    chans = [2 * width * 2**l for l in range(levels - 1)]
    sizes = [(h // 2**l, w // 2**l) for l in range(levels)]
    skips = []
    cin = in_slices
    for lvl in range(levels - 1):
        hw = sizes[lvl]
        if lvl == 0:
            conv(k3, cin, width, hw)
            cin = width
        skips.append(conv(k3, cin, chans[lvl], hw))
        last = lvl == levels - 2
        conv(k1 if last and levels > 2 else k3, chans[lvl], chans[lvl], hw, pool_to=sizes[lvl + 1])
        cin = chans[lvl]
    conv(k1, cin, cin, sizes[-1])
    for lvl in reversed(range(levels - 1)):
        hw = sizes[lvl]
        L.append(_up(f"up{lvl}", cin, hw))
        L.append(_concat(f"cat{lvl}", cin, skips[lvl], hw))
        if cin != chans[lvl]:
            raise DomainError("decoder channels out of step with the encoder")
        conv(k3, 2 * cin, chans[lvl], hw)
        nxt = chans[lvl - 1] if lvl > 0 else chans[0]
        conv(k3, chans[lvl], nxt, hw)
        cin = nxt
    L.append(LayerSpec("prediction", "prediction", kernel=k3, padding=1, in_channels=cin,
                       out_channels=2, out_size=sizes[0]))
    return NetworkSpec(tuple(L), input_size=(h, w), in_slices=in_slices, width=width,
                       mode=mode, ternarize_input=ternarize_input, name="toy")


def skip_pairs(net: NetworkSpec) -> list[tuple[str, str]]:
    """(source layer, first convolution consuming the concatenation) pairs."""
    pairs = []
    for i, layer in enumerate(net.layers):
        if layer.kind == "concat":
            consumer = next(l for l in net.layers[i + 1 :] if l.has_weights)
            pairs.append((layer.skip, consumer.name))
    return pairs
