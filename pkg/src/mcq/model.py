"""Model graph representation: a linear sequence of layers.

Supported layer kinds: dense, conv2d, relu, maxpool2d, flatten,
batchnorm.  Dense weights are (in_features, out_features) with one
neuron per column; conv2d weights are (out_channels, in_channels, kh,
kw).  Weights are stored single precision; quantized layers carry an
extra QuantizedTensor of signed integer hit counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

DENSE = "dense"
CONV2D = "conv2d"
RELU = "relu"
MAXPOOL2D = "maxpool2d"
FLATTEN = "flatten"
BATCHNORM = "batchnorm"

LAYER_KINDS = (DENSE, CONV2D, RELU, MAXPOOL2D, FLATTEN, BATCHNORM)
QUANTIZABLE_KINDS = (DENSE, CONV2D)


class ModelFormatError(ValueError):
    """A container or graph violates the model format contract."""


@dataclass(frozen=True)
class QuantizedTensor:
    """Signed integer hit counts replacing a full-precision tensor.

    counts has the shape of the original tensor.  Each normalization
    group g drew sample_counts[g] samples against a distribution with
    1-norm scales[g]; for layer granularity there is exactly one group
    covering the whole tensor.  bit_width covers the largest absolute
    count including its sign bit.
    """

    shape: tuple[int, ...]
    counts: np.ndarray
    scales: np.ndarray
    sample_counts: np.ndarray
    bit_width: int
    group_offsets: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.group_offsets is None:
            n = int(np.prod(self.shape))
            object.__setattr__(
                self, "group_offsets", np.array([0, n], dtype=np.intp)
            )

    @property
    def n_groups(self) -> int:
        return len(self.scales)

    @property
    def scale_f(self) -> float:
        if self.n_groups != 1:
            raise ValueError("scale_f is only defined for single-group tensors")
        return float(self.scales[0])

    @property
    def total_samples(self) -> int:
        return int(self.sample_counts.sum())

    def dequantize(self) -> np.ndarray:
        """Approximate reconstruction counts * (f / N), in float64."""
        flat = self.counts.reshape(-1).astype(np.float64)
        if self.n_groups == 1:
            return (flat * (self.scales[0] / self.sample_counts[0])).reshape(self.shape)
        factors = np.empty(flat.size, dtype=np.float64)
        for g in range(self.n_groups):
            lo, hi = int(self.group_offsets[g]), int(self.group_offsets[g + 1])
            factors[lo:hi] = self.scales[g] / self.sample_counts[g]
        return (flat * factors).reshape(self.shape)


@dataclass(frozen=True)
class Layer:
    kind: str
    name: str
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None
    attrs: dict = field(default_factory=dict)
    quantized: QuantizedTensor | None = None

    @property
    def is_quantizable(self) -> bool:
        return self.kind in QUANTIZABLE_KINDS


@dataclass(frozen=True)
class ModelGraph:
    layers: tuple[Layer, ...]
    input_shape: tuple[int, ...]

    def quantizable_layers(self) -> list[tuple[int, Layer]]:
        """(graph position, layer) for each dense/conv2d layer, in order."""
        return [(i, l) for i, l in enumerate(self.layers) if l.is_quantizable]

    def replace_layer(self, index: int, layer: Layer) -> "ModelGraph":
        layers = list(self.layers)
        layers[index] = layer
        return replace(self, layers=tuple(layers))


def _pool_out(size: int, window: int, stride: int) -> int:
    if size < window:
        raise ModelFormatError(f"pool window {window} exceeds input size {size}")
    return (size - window) // stride + 1


def _conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ModelFormatError("conv2d output would be empty")
    return out


def infer_shapes(model: ModelGraph) -> list[tuple[int, ...]]:
    """Shapes flowing through the graph, starting with the input shape.

    Raises ModelFormatError on any incompatibility; checking shapes is
    how a freshly loaded container gets validated.
    """
    shape = tuple(model.input_shape)
    shapes = [shape]
    for layer in model.layers:
        if layer.kind == DENSE:
            if len(shape) != 1:
                raise ModelFormatError(
                    f"{layer.name}: dense expects a vector input, got {shape}"
                )
            if layer.weights.ndim != 2:
                raise ModelFormatError(f"{layer.name}: dense weights must be 2-D")
            n_in, n_out = layer.weights.shape
            if shape[0] != n_in:
                raise ModelFormatError(
                    f"{layer.name}: dense expects {n_in} inputs, got {shape[0]}"
                )
            if layer.bias is not None and layer.bias.shape != (n_out,):
                raise ModelFormatError(f"{layer.name}: bias length must be {n_out}")
            shape = (n_out,)
        elif layer.kind == CONV2D:
            if len(shape) != 3:
                raise ModelFormatError(
                    f"{layer.name}: conv2d expects (C, H, W) input, got {shape}"
                )
            if layer.weights.ndim != 4:
                raise ModelFormatError(f"{layer.name}: conv2d weights must be 4-D")
            out_c, in_c, kh, kw = layer.weights.shape
            if shape[0] != in_c:
                raise ModelFormatError(
                    f"{layer.name}: conv2d expects {in_c} channels, got {shape[0]}"
                )
            if layer.bias is not None and layer.bias.shape != (out_c,):
                raise ModelFormatError(f"{layer.name}: bias length must be {out_c}")
            stride = int(layer.attrs.get("stride", 1))
            padding = int(layer.attrs.get("padding", 0))
            shape = (
                out_c,
                _conv_out(shape[1], kh, stride, padding),
                _conv_out(shape[2], kw, stride, padding),
            )
        elif layer.kind == MAXPOOL2D:
            if len(shape) != 3:
                raise ModelFormatError(
                    f"{layer.name}: maxpool2d expects (C, H, W) input, got {shape}"
                )
            window = int(layer.attrs["window"])
            stride = int(layer.attrs.get("stride", window))
            shape = (
                shape[0],
                _pool_out(shape[1], window, stride),
                _pool_out(shape[2], window, stride),
            )
        elif layer.kind == FLATTEN:
            shape = (int(np.prod(shape)),)
        elif layer.kind == RELU:
            pass
        elif layer.kind == BATCHNORM:
            n_features = shape[0]
            for key in ("gamma", "beta", "mean", "var"):
                param = layer.attrs.get(key)
                if param is None or param.shape != (n_features,):
                    raise ModelFormatError(
                        f"{layer.name}: batchnorm parameter {key} must have "
                        f"shape ({n_features},)"
                    )
        else:
            raise ModelFormatError(f"{layer.name}: unknown layer kind {layer.kind!r}")
        shapes.append(shape)
    return shapes


def validate_model(model: ModelGraph) -> None:
    """Check shape compatibility and finiteness of every tensor."""
    infer_shapes(model)
    for layer in model.layers:
        tensors = [layer.weights, layer.bias]
        if layer.kind == BATCHNORM:
            tensors += [layer.attrs.get(k) for k in ("gamma", "beta", "mean", "var")]
        for t in tensors:
            if t is not None and not np.all(np.isfinite(t)):
                raise ModelFormatError(f"{layer.name}: non-finite values in tensor")


def fold_batchnorm(model: ModelGraph) -> ModelGraph:
    """Absorb every batchnorm layer into its preceding dense/conv2d.

    With s = gamma / sqrt(var + eps), the predecessor becomes
    w' = w * s (per output feature) and b' = (b - mean) * s + beta.
    The returned graph has no batchnorm layers and computes the same
    function up to float rounding.
    """
    layers: list[Layer] = []
    for layer in model.layers:
        if layer.kind != BATCHNORM:
            layers.append(layer)
            continue
        if not layers or layers[-1].kind not in QUANTIZABLE_KINDS:
            raise ModelFormatError(
                f"{layer.name}: batchnorm must directly follow dense or conv2d"
            )
        prev = layers[-1]
        eps = float(layer.attrs.get("epsilon", 1e-5))
        gamma = layer.attrs["gamma"].astype(np.float64)
        beta = layer.attrs["beta"].astype(np.float64)
        mean = layer.attrs["mean"].astype(np.float64)
        var = layer.attrs["var"].astype(np.float64)
        scale = gamma / np.sqrt(var + eps)

        w = prev.weights.astype(np.float64)
        if prev.kind == DENSE:
            w_folded = w * scale[np.newaxis, :]
        else:
            w_folded = w * scale[:, np.newaxis, np.newaxis, np.newaxis]
        b = prev.bias.astype(np.float64) if prev.bias is not None else 0.0
        b_folded = (b - mean) * scale + beta
        layers[-1] = replace(
            prev,
            weights=w_folded.astype(np.float32),
            bias=b_folded.astype(np.float32),
        )
    return replace(model, layers=tuple(layers))


def bit_width(counts: np.ndarray, signed: bool = True) -> int:
    """Bits needed for the largest absolute hit count.

    Weights carry a sign bit on top of the magnitude bits; post-ReLU
    activation counts are non-negative so the sign bit is dropped.
    """
    counts = np.asarray(counts)
    if counts.size == 0 or not np.any(counts):
        raise ValueError("empty quantization: all hit counts are zero")
    max_abs = int(np.max(np.abs(counts)))
    # bit_length is exactly 1 + floor(log2(max_abs)) for positive ints.
    magnitude_bits = max_abs.bit_length()
    return magnitude_bits + 1 if signed else magnitude_bits
