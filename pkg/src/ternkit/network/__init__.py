from .accounting import count_flops, count_params, count_params_memory, scale_bytes
from .model import (
    BNParams,
    Model,
    ModeMismatchError,
    forward,
    init_model,
    predict_mask,
    quantize_model,
)
from .serialize import deserialize, serialize
from .spec import MODES, LayerSpec, NetworkSpec, build_table1, build_toy, skip_pairs

__all__ = [
    "BNParams", "LayerSpec", "MODES", "Model", "ModeMismatchError", "NetworkSpec",
    "build_table1", "build_toy", "count_flops", "count_params", "count_params_memory",
    "deserialize", "forward", "init_model", "predict_mask", "quantize_model",
    "scale_bytes", "serialize", "skip_pairs",
]
