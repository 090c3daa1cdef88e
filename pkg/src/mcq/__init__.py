"""Monte Carlo quantization of feed-forward networks.

Normalizes weights and activations into probability distributions,
draws jittered equidistant samples against the cumulative distribution,
and replaces each value by its signed hit count.  Includes an integer
inference engine and a CLI for quantization, evaluation, and sweeps.
"""

from .container import (
    Dataset,
    load_dataset,
    load_model,
    save_dataset,
    save_model,
    save_quantized,
)
from .inference import (
    AccumulatorOverflowError,
    ActivationStats,
    EvalResult,
    OverflowBudget,
    evaluate_full_precision,
    evaluate_quantized,
    expected_activation_magnitude,
    forward_full_precision,
    forward_quantized,
    scale_bias,
)
from .model import (
    Layer,
    ModelFormatError,
    ModelGraph,
    QuantizedTensor,
    bit_width,
    fold_batchnorm,
    infer_shapes,
    validate_model,
)
from .normalize import (
    DegenerateDistributionError,
    NormalizedView,
    normalize,
    output_rescale_factor,
)
from .quantize import LayerReport, QuantReport, SamplingConfig, quantize_model, quantize_tensor
from .sampling import (
    STREAM_ACTIVATIONS,
    STREAM_WEIGHTS,
    CdfPartition,
    SampleStream,
    SplitMix64,
    build_cdf,
    count_hits,
    rng_for_sample,
    rng_from,
    sample_stream,
)

__version__ = "0.1.0"

__all__ = [
    "AccumulatorOverflowError",
    "ActivationStats",
    "CdfPartition",
    "Dataset",
    "DegenerateDistributionError",
    "EvalResult",
    "Layer",
    "LayerReport",
    "ModelFormatError",
    "ModelGraph",
    "NormalizedView",
    "OverflowBudget",
    "QuantReport",
    "QuantizedTensor",
    "SampleStream",
    "SamplingConfig",
    "SplitMix64",
    "STREAM_ACTIVATIONS",
    "STREAM_WEIGHTS",
    "bit_width",
    "build_cdf",
    "count_hits",
    "evaluate_full_precision",
    "evaluate_quantized",
    "expected_activation_magnitude",
    "fold_batchnorm",
    "forward_full_precision",
    "forward_quantized",
    "infer_shapes",
    "load_dataset",
    "load_model",
    "normalize",
    "output_rescale_factor",
    "quantize_model",
    "quantize_tensor",
    "rng_for_sample",
    "rng_from",
    "sample_stream",
    "save_dataset",
    "save_model",
    "save_quantized",
    "validate_model",
    "__version__",
]
