"""Token-sensitivity-weighted post-training quantization for small transformer blocks."""

from .attribution import (
    AttributionResult,
    DistortionError,
    completeness_check,
    distortion_error,
    integrated_gradients,
    leave_one_out_sensitivity,
    qig,
)
from .equalization import (
    EqualizationResult,
    equalize_and_quantize,
    search_scales,
    weighted_objective_wa,
    weighted_objective_weight_only,
)
from .gptq import WeightedHessian, gptq_quantize, rtn_quantize, weighted_hessian
from .quantizers import (
    QuantConfig,
    QuantizedTensor,
    dequantize,
    fake_quantize,
    quantize,
    quantize_asymmetric_grouped,
    quantize_symmetric,
)
from .toyblock import (
    BlockModel,
    QuantizedBlock,
    QuantizedExecution,
    block_forward,
    block_forward_quantized,
    grad_input,
    grad_input_fd,
)
from .weighting import SensitivityVector, build_sensitivity, iqr_clip, normalize_lambda

__version__ = "0.1.0"

__all__ = [
    "AttributionResult",
    "BlockModel",
    "DistortionError",
    "EqualizationResult",
    "QuantConfig",
    "QuantizedBlock",
    "QuantizedExecution",
    "QuantizedTensor",
    "SensitivityVector",
    "WeightedHessian",
    "block_forward",
    "block_forward_quantized",
    "build_sensitivity",
    "completeness_check",
    "dequantize",
    "distortion_error",
    "equalize_and_quantize",
    "fake_quantize",
    "gptq_quantize",
    "grad_input",
    "grad_input_fd",
    "integrated_gradients",
    "iqr_clip",
    "leave_one_out_sensitivity",
    "normalize_lambda",
    "qig",
    "quantize",
    "quantize_asymmetric_grouped",
    "quantize_symmetric",
    "rtn_quantize",
    "search_scales",
    "weighted_hessian",
    "weighted_objective_wa",
    "weighted_objective_weight_only",
]

