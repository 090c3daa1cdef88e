"""Forward passes: full precision reference and integer execution.

The quantized engine has two modes.  The default rescales each
layer's integer accumulator back to real values before the bias is
added.  The deferred mode keeps activations as integer hit counts and
folds every rescale factor into one scalar carried to the logits;
biases are injected into the accumulator domain via scale_bias.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .container import Dataset
from .model import (
    BATCHNORM,
    CONV2D,
    DENSE,
    FLATTEN,
    MAXPOOL2D,
    RELU,
    Layer,
    ModelGraph,
    QuantizedTensor,
    bit_width,
)
from .quantize import SamplingConfig, quantize_tensor
from .sampling import rng_for_sample

# Predictive budget: expected accumulator magnitude times the worst
# count product must leave >= 8 bits of headroom below 2^63.
_BUDGET_LIMIT = 1 << 55
# Hard bound: fan_in * max|w| * max|a| must stay below 2^62 or the
# int64 MAC could wrap.
_HARD_LIMIT = 1 << 62


class AccumulatorOverflowError(OverflowError):
    """An integer MAC could exceed the 64-bit accumulator budget."""


@dataclass(frozen=True)
class OverflowBudget:
    """Accumulator headroom check for one integer layer."""

    fan_in: int
    k_weights: float
    k_activations: float
    accumulator_bits: int = 64

    def expected_magnitude(self) -> float:
        return expected_activation_magnitude(
            self.fan_in, self.k_weights, self.k_activations
        )

    def check(self, max_weight_count: int, max_activation_count: int, name: str) -> None:
        predicted = self.expected_magnitude() * max_weight_count * max_activation_count
        if predicted > _BUDGET_LIMIT:
            raise AccumulatorOverflowError(
                f"{name}: predicted accumulator magnitude {predicted:.3g} "
                f"exceeds the {self.accumulator_bits}-bit budget"
            )
        worst = self.fan_in * max_weight_count * max_activation_count
        if worst > _HARD_LIMIT:
            raise AccumulatorOverflowError(
                f"{name}: worst-case accumulator magnitude {worst:.3g} "
                f"could wrap the {self.accumulator_bits}-bit accumulator"
            )


def expected_activation_magnitude(fan_in: int, k_weights: float, k_activations: float) -> float:
    """Expected integer pre-activation magnitude of one neuron.

    fan_in incoming connections, each holding on average k_weights
    weight samples times k_activations activation samples.
    """
    if fan_in < 1 or k_weights <= 0 or k_activations <= 0:
        raise ValueError("fan_in and sampling ratios must be positive")
    return fan_in * k_weights * k_activations


def scale_bias(bias, scale_f: float, n_samples: int, fan_in_scale) -> np.ndarray | float:
    """Convert a real bias into the deferred integer accumulator domain.

    The accumulator holds values n_samples/scale_f times the weight
    scale and 1/fan_in_scale times the activation scale away from real
    units, so the bias is multiplied by (n_samples / scale_f) *
    (1 / fan_in_scale).  fan_in_scale is the scale of the incoming
    activation counts; budgeting hardware ahead of time would use the
    receptive-field size as its expectation-level stand-in.
    """
    return bias * (n_samples / scale_f) * (1.0 / fan_in_scale)


@dataclass
class ActivationStats:
    """Online-quantization statistics accumulated over eval samples."""

    bits: dict[str, list[int]] = field(default_factory=dict)
    nonzero: dict[str, list[float]] = field(default_factory=dict)

    def observe(self, name: str, counts: np.ndarray) -> None:
        signed = bool(np.min(counts) < 0)
        self.bits.setdefault(name, []).append(bit_width(counts, signed=signed))
        self.nonzero.setdefault(name, []).append(
            float(np.count_nonzero(counts) / counts.size)
        )

    @property
    def avg_bits(self) -> float | None:
        """Unweighted layer mean of the per-sample mean bit-width."""
        if not self.bits:
            return None
        return float(np.mean([np.mean(v) for v in self.bits.values()]))

    @property
    def nonzero_fraction(self) -> float | None:
        if not self.nonzero:
            return None
        return float(np.mean([np.mean(v) for v in self.nonzero.values()]))


def _fan_in(layer: Layer) -> int:
    shape = layer.quantized.shape if layer.quantized is not None else layer.weights.shape
    if layer.kind == DENSE:
        return int(shape[0])
    out_c, in_c, kh, kw = shape
    return int(in_c * kh * kw)


def _dense_real(x: np.ndarray, w: np.ndarray, b) -> np.ndarray:
    out = x @ w
    return out if b is None else out + b


def _conv_real(x: np.ndarray, w: np.ndarray, b, stride: int, padding: int) -> np.ndarray:
    """Direct batched convolution, zero padding, (B, C, H, W) layout."""
    batch, in_c, h, wd = x.shape
    out_c, _, kh, kw = w.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((batch, out_c, h_out, w_out), dtype=x.dtype)
    for dy in range(kh):
        for dx in range(kw):
            patch = x[
                :,
                :,
                dy : dy + stride * h_out : stride,
                dx : dx + stride * w_out : stride,
            ]
            out += np.einsum("oc,bchw->bohw", w[:, :, dy, dx], patch)
    if b is not None:
        out = out + b[np.newaxis, :, np.newaxis, np.newaxis]
    return out


def _maxpool(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    _, _, h, wd = x.shape
    h_out = (h - window) // stride + 1
    w_out = (wd - window) // stride + 1
    out = None
    for dy in range(window):
        for dx in range(window):
            patch = x[
                :,
                :,
                dy : dy + stride * h_out : stride,
                dx : dx + stride * w_out : stride,
            ]
            out = patch.copy() if out is None else np.maximum(out, patch)
    return out


def _batchnorm(x: np.ndarray, layer: Layer) -> np.ndarray:
    eps = float(layer.attrs.get("epsilon", 1e-5))
    gamma = layer.attrs["gamma"].astype(np.float64)
    beta = layer.attrs["beta"].astype(np.float64)
    mean = layer.attrs["mean"].astype(np.float64)
    var = layer.attrs["var"].astype(np.float64)
    scale = gamma / np.sqrt(var + eps)
    if x.ndim == 2:
        return (x - mean) * scale + beta
    return (x - mean[:, None, None]) * scale[:, None, None] + beta[:, None, None]


def forward_batch_full_precision(model: ModelGraph, inputs: np.ndarray) -> np.ndarray:
    """Real-valued forward pass over a batch; returns logits."""
    x = np.asarray(inputs, dtype=np.float64)
    batch = x.shape[0]
    if tuple(x.shape[1:]) != tuple(model.input_shape):
        raise ValueError(
            f"input shape {x.shape[1:]} does not match model {model.input_shape}"
        )
    for layer in model.layers:
        if layer.kind == DENSE:
            x = _dense_real(x, layer.weights.astype(np.float64), layer.bias)
        elif layer.kind == CONV2D:
            x = _conv_real(
                x,
                layer.weights.astype(np.float64),
                layer.bias,
                int(layer.attrs.get("stride", 1)),
                int(layer.attrs.get("padding", 0)),
            )
        elif layer.kind == RELU:
            x = np.maximum(x, 0.0)
        elif layer.kind == MAXPOOL2D:
            x = _maxpool(x, int(layer.attrs["window"]), int(layer.attrs.get("stride", layer.attrs["window"])))
        elif layer.kind == FLATTEN:
            x = x.reshape(batch, -1)
        elif layer.kind == BATCHNORM:
            x = _batchnorm(x, layer)
    return x


def forward_full_precision(model: ModelGraph, x: np.ndarray) -> np.ndarray:
    """Real-valued forward pass for a single input; returns logits."""
    return forward_batch_full_precision(model, np.asarray(x)[np.newaxis])[0]


def _exact_proxy_counts(values: np.ndarray, n_samples: int) -> tuple[np.ndarray, float, int]:
    """Infinite-sampling stand-in: counts replaced by exact N * p."""
    flat = values.reshape(-1).astype(np.float64)
    f = float(np.abs(flat).sum())
    return (flat * (n_samples / f)).reshape(values.shape), f, n_samples


def _quantize_activations(
    a: np.ndarray,
    cfg: SamplingConfig,
    seed: int,
    q_index: int,
    sample_index: int,
    exact: bool,
) -> tuple[np.ndarray, float, int]:
    """Hit counts plus (scale, samples) for one activation tensor."""
    if exact:
        return _exact_proxy_counts(a, math.ceil(a.size * cfg.k_activations))
    rng = rng_for_sample(seed, q_index, sample_index)
    qt = quantize_tensor(a, cfg, rng, kind="activations")
    return qt.counts, float(qt.scales[0]), int(qt.sample_counts[0])


def _weight_counts(layer: Layer, exact: bool) -> tuple[np.ndarray, float, int]:
    qt = layer.quantized
    if exact:
        return _exact_proxy_counts(layer.weights, qt.total_samples)
    return qt.counts, float(qt.scales[0]), qt.total_samples


def _mac(layer: Layer, w_counts: np.ndarray, a_counts: np.ndarray) -> np.ndarray:
    """Multiply-accumulate of count tensors (single sample, no bias)."""
    if layer.kind == DENSE:
        return a_counts @ w_counts
    stride = int(layer.attrs.get("stride", 1))
    padding = int(layer.attrs.get("padding", 0))
    return _conv_real(a_counts[np.newaxis], w_counts, None, stride, padding)[0]


def forward_quantized(
    model: ModelGraph,
    x: np.ndarray,
    cfg: SamplingConfig,
    seed: int,
    sample_index: int = 0,
    quantize_activations: bool = True,
    quantize_input: bool = False,
    deferred: bool = False,
    stats: ActivationStats | None = None,
    _exact_counts: bool = False,
) -> np.ndarray:
    """Run one input through the quantized network; returns real logits.

    Quantized layers multiply-accumulate integer weight counts against
    integer activation counts (the incoming tensor is quantized online,
    one jitter per (layer, sample)).  Full-precision layers run as-is
    with conversion at the boundary.  With quantize_activations False,
    integer weights meet real activations and only the weight rescale
    applies.  Only interior activations are quantized unless
    quantize_input is set; raw network inputs stay real by default.
    Overflow is checked before every integer MAC.
    """
    if deferred and not quantize_activations:
        raise ValueError("the deferred pipeline requires activation quantization")
    x = np.asarray(x, dtype=np.float64)
    if tuple(x.shape) != tuple(model.input_shape):
        raise ValueError(
            f"input shape {x.shape} does not match model {model.input_shape}"
        )
    model_has_quantized = any(l.quantized is not None for l in model.layers)

    state = x
    lam = 1.0  # real value = state * lam; 1.0 whenever state is real
    q_index = -1
    interior = quantize_input  # raw input counts as interior only on request
    for layer in model.layers:
        if layer.kind == RELU:
            state = np.maximum(state, 0.0)
            interior = True
            continue
        if layer.kind == MAXPOOL2D:
            state = _maxpool(
                state[np.newaxis],
                int(layer.attrs["window"]),
                int(layer.attrs.get("stride", layer.attrs["window"])),
            )[0]
            interior = True
            continue
        if layer.kind == FLATTEN:
            # A pure reshape does not make the input interior.
            state = state.reshape(-1)
            continue
        if layer.kind == BATCHNORM:
            if lam != 1.0:
                state = state * lam
                lam = 1.0
            state = _batchnorm(state[np.newaxis], layer)[0]
            interior = True
            continue

        # dense / conv2d
        q_index += 1
        quantize_incoming = quantize_activations and interior
        interior = True
        if layer.quantized is None:
            # Skipped layer: full precision with conversion at the boundary.
            if lam != 1.0:
                state = state * lam
                lam = 1.0
            a_in = state
            if quantize_incoming and not model_has_quantized and np.any(a_in):
                # Activation-only quantization of a full-precision model:
                # inject the sampling noise, then proceed in real values.
                counts, f_a, n_a = _quantize_activations(
                    a_in, cfg, seed, q_index, sample_index, _exact_counts
                )
                if stats is not None and not _exact_counts:
                    stats.observe(layer.name, counts)
                a_in = counts.astype(np.float64) * (f_a / n_a)
            w = layer.weights.astype(np.float64)
            if layer.kind == DENSE:
                state = _dense_real(a_in, w, layer.bias)
            else:
                state = _conv_real(
                    a_in[np.newaxis],
                    w,
                    layer.bias,
                    int(layer.attrs.get("stride", 1)),
                    int(layer.attrs.get("padding", 0)),
                )[0]
            continue

        qt = layer.quantized
        if qt.n_groups != 1:
            raise ValueError(
                f"{layer.name}: integer inference supports layer-granularity "
                "quantization only"
            )
        w_counts, f_w, n_w = _weight_counts(layer, _exact_counts)
        bias = layer.bias.astype(np.float64) if layer.bias is not None else None

        if quantize_incoming and np.any(state):
            counts, f_a, n_a = _quantize_activations(
                state, cfg, seed, q_index, sample_index, _exact_counts
            )
            if stats is not None and not _exact_counts:
                stats.observe(layer.name, counts)
            if not _exact_counts:
                budget = OverflowBudget(
                    fan_in=_fan_in(layer),
                    k_weights=qt.total_samples / qt.counts.size,
                    k_activations=cfg.k_activations,
                )
                budget.check(
                    int(np.max(np.abs(w_counts))),
                    int(np.max(np.abs(counts))),
                    layer.name,
                )
            acc = _mac(layer, w_counts, counts)
            layer_scale = (f_w / n_w) * (f_a / n_a)
            if deferred:
                new_lam = layer_scale * lam
                if bias is not None:
                    bias_counts = scale_bias(bias, f_w, n_w, (f_a / n_a) * lam)
                    if layer.kind == CONV2D:
                        bias_counts = bias_counts[:, None, None]
                    state = acc.astype(np.float64) + bias_counts
                else:
                    state = acc.astype(np.float64)
                lam = new_lam
            else:
                pre = acc.astype(np.float64) * layer_scale
                if bias is not None:
                    pre = pre + (bias if layer.kind == DENSE else bias[:, None, None])
                state = pre
                lam = 1.0
        else:
            # Real (or all-zero) activations against integer weights.
            if lam != 1.0:
                state = state * lam
                lam = 1.0
            acc = _mac(layer, w_counts.astype(np.float64), state)
            pre = acc * (f_w / n_w)
            if bias is not None:
                pre = pre + (bias if layer.kind == DENSE else bias[:, None, None])
            state = pre
    return state * lam if lam != 1.0 else state


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    n_samples: int
    avg_activation_bits: float | None = None
    activation_nonzero_fraction: float | None = None

    @property
    def accuracy_pct(self) -> float:
        return 100.0 * self.accuracy


def evaluate_full_precision(model: ModelGraph, dataset: Dataset) -> EvalResult:
    """Top-1 accuracy of the real-valued model."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    logits = forward_batch_full_precision(model, dataset.inputs)
    predictions = np.argmax(logits, axis=1)
    accuracy = float(np.mean(predictions == dataset.labels))
    return EvalResult(accuracy=accuracy, n_samples=len(dataset))


def evaluate_quantized(
    model: ModelGraph,
    dataset: Dataset,
    cfg: SamplingConfig,
    seed: int,
    quantize_activations: bool = True,
    quantize_input: bool = False,
    deferred: bool = False,
) -> EvalResult:
    """Top-1 accuracy of the quantized model on a dataset.

    Activation sampling is scoped per (layer, sample), so the result
    does not depend on evaluation order.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    stats = ActivationStats() if quantize_activations else None
    correct = 0
    for i in range(len(dataset)):
        logits = forward_quantized(
            model,
            dataset.inputs[i],
            cfg,
            seed,
            sample_index=i,
            quantize_activations=quantize_activations,
            quantize_input=quantize_input,
            deferred=deferred,
            stats=stats,
        )
        if int(np.argmax(logits)) == int(dataset.labels[i]):
            correct += 1
    return EvalResult(
        accuracy=correct / len(dataset),
        n_samples=len(dataset),
        avg_activation_bits=stats.avg_bits if stats else None,
        activation_nonzero_fraction=stats.nonzero_fraction if stats else None,
    )
