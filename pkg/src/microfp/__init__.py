"""microfp: microscaling FP4 quantization toolkit.

Bit-exact MXFP4/NVFP4 codecs and containers, block-diagonal orthogonal
transforms, RTN and GPTQ quantization pipelines with MSE scale search and
static activation reordering, plus a Monte Carlo harness for quantization
error analysis.
"""

from .analysis import (
    KurtosisReport,
    MetricsReport,
    ModelGrid,
    RateTable,
    Sampler,
    estimate_metrics,
    kurtosis_report,
    model_quantize_block,
    outlier_mape,
    rate_experiment,
    sample_blocks,
    sweep_group_sizes,
    sweep_scale_formats,
)
from .errors import DataError, NumericalError
from .formats import (
    FormatSpec,
    MfpTensor,
    ScaleFormat,
    ScaleKind,
    dequantize,
    e8m0_decode,
    e8m0_encode,
    fp4_decode,
    fp4_encode,
    fp4_round,
    fp_scale_decode,
    fp_scale_encode,
    pack_tensor,
    unpack_tensor,
)
from .gptq import (
    GptqConfig,
    Hessian,
    accumulate_hessian,
    gptq_quantize,
    mr_gptq,
    obq_fixed_order,
    proxy_loss,
    static_act_order,
)
from .quantizers import (
    QuantResult,
    ScaleMode,
    ScalePolicy,
    absmax_group_scale,
    fit_e8m0_range,
    mse_optimize_scales,
    quantize_rtn,
    reconstruct,
)
from .transforms import TransformKind, TransformSpec, apply_blockwise, fuse_into_weights, transform_matrix

__version__ = "0.1.0"
