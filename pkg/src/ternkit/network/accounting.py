"""Multiply-add and weight-memory accounting from declared layer geometry."""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import DomainError
from .spec import NetworkSpec

BYTES_PER_WEIGHT = {"float32": 4.0, "ternary2bit": 2 / 8, "binary1bit": 1 / 8}


@dataclass(frozen=True)
class LayerFlops:
    name: str
    macs: int
    declared_macs: int

    @property
    def mflops(self) -> float:
        return self.macs / 1e6

    @property
    def declared_mflops(self) -> float:
        return self.declared_macs / 1e6


def count_flops(net: NetworkSpec) -> list[LayerFlops]:
    """Fused multiply-adds per weighted layer: outH * outW * kH * kW * Cin * Cout.

    ``macs`` uses a layer's ``flops_size``/``flops_kernel`` override when set;
    ``declared_macs`` always uses the declared output size and kernel.
    """
    rows = []
    for layer in net.weighted_layers:
        if layer.out_size is None:
            raise DomainError(f"{layer.name}: no declared output size")
        kh, kw = layer.kernel
        declared = layer.out_size[0] * layer.out_size[1] * kh * kw * layer.in_channels * layer.out_channels
        oh, ow = layer.flops_size or layer.out_size
        fh, fw = layer.flops_kernel or layer.kernel
        macs = oh * ow * fh * fw * layer.in_channels * layer.out_channels
        rows.append(LayerFlops(layer.name, macs, declared))
    return rows


def count_params(net: NetworkSpec) -> int:
    return sum(l.param_count for l in net.weighted_layers)


def count_params_memory(net: NetworkSpec, precision: str = "float32") -> tuple[int, float]:
    """(parameter count, weight payload bytes) at the given storage precision.

    Per-channel scales are not included; see :func:`scale_bytes`.
    """
    if precision not in BYTES_PER_WEIGHT:
        raise DomainError(f"unknown precision {precision!r}")
    params = count_params(net)
    return params, params * BYTES_PER_WEIGHT[precision]


def scale_bytes(net: NetworkSpec) -> int:
    """float32 scale storage: one value per output channel of every quantised conv."""
    return 4 * sum(l.out_channels for l in net.conv_layers)
