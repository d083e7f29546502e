"""Ternary quantisation and popcount convolutions for segmentation networks."""

from .activations import ContinuationSchedule, beta_at, boxcar_ste, tanh_beta, tern_tanh, tern_tanh_grad
from .kernels import (
    PatchMatrix,
    binary_dot,
    conv2d_float,
    conv2d_ternary,
    float_gemm,
    im2col,
    ternary_dot,
    ternary_gemm,
)
from .packed import PackedTernaryTensor, pack, unpack, validate
from .quantize import (
    QuantResult,
    binarize_weights,
    sign_hard,
    tern_hard,
    ternarize_sparse,
    ternarize_weights,
)

__version__ = "0.1.0"
