"""Whole-model quantization: normalize, sample, count, report."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .model import ModelGraph, QuantizedTensor, bit_width
from .normalize import (
    GRANULARITY_LAYER,
    GRANULARITY_NEURON,
    DegenerateDistributionError,
    normalize,
)
from .sampling import (
    STREAM_WEIGHTS,
    SampleStream,
    SplitMix64,
    build_cdf,
    count_hits,
    rng_from,
)


@dataclass(frozen=True)
class SamplingConfig:
    """Knobs of the quantization run.

    k_weights and k_activations are samples drawn per value; seed feeds
    every derived generator; sort arranges each distribution ascending
    by magnitude before sampling; granularity selects whole-layer or
    per-neuron normalization; the skip flags keep the first/last
    quantizable layer in full precision.
    """

    k_weights: float = 1.0
    k_activations: float = 1.0
    seed: int = 0
    sort: bool = True
    granularity: str = GRANULARITY_LAYER
    skip_first_layer: bool = False
    skip_last_layer: bool = False

    def __post_init__(self):
        if self.k_weights <= 0 or self.k_activations <= 0:
            raise ValueError("sampling ratios must be > 0")
        if self.granularity not in (GRANULARITY_LAYER, GRANULARITY_NEURON):
            raise ValueError(f"unknown granularity {self.granularity!r}")


@dataclass(frozen=True)
class LayerReport:
    name: str
    kind: str
    quantized: bool
    n_values: int = 0
    sample_count: int = 0
    scale_f: float | None = None
    bit_width: int | None = None
    nonzero_fraction: float | None = None
    max_abs_count: int | None = None

    def to_dict(self) -> dict:
        if not self.quantized:
            return {
                "name": self.name,
                "kind": self.kind,
                "weights": "fp32",
            }
        return {
            "name": self.name,
            "kind": self.kind,
            "n_values": self.n_values,
            "sample_count": self.sample_count,
            "scale_f": self.scale_f,
            "bit_width": self.bit_width,
            "nonzero_fraction": self.nonzero_fraction,
            "max_abs_count": self.max_abs_count,
        }


@dataclass
class QuantReport:
    """Per-layer quantization statistics plus network-level aggregates."""

    config: SamplingConfig
    layers: list[LayerReport] = field(default_factory=list)
    avg_activation_bits: float | None = None
    activation_nonzero_fraction: float | None = None

    @property
    def quantized_layers(self) -> list[LayerReport]:
        return [l for l in self.layers if l.quantized]

    @property
    def avg_weight_bits(self) -> float | None:
        """Unweighted mean bit-width over quantized layers."""
        quantized = self.quantized_layers
        if not quantized:
            return None
        return float(np.mean([l.bit_width for l in quantized]))

    @property
    def weight_nonzero_fraction(self) -> float | None:
        quantized = self.quantized_layers
        if not quantized:
            return None
        nonzero = sum(l.nonzero_fraction * l.n_values for l in quantized)
        total = sum(l.n_values for l in quantized)
        return float(nonzero / total)

    @property
    def weight_sparsity(self) -> float | None:
        nz = self.weight_nonzero_fraction
        return None if nz is None else 1.0 - nz

    def to_dict(self) -> dict:
        cfg = self.config
        return {
            "config": {
                "k_weights": cfg.k_weights,
                "k_activations": cfg.k_activations,
                "seed": cfg.seed,
                "sort": cfg.sort,
                "granularity": cfg.granularity,
                "skip_first_layer": cfg.skip_first_layer,
                "skip_last_layer": cfg.skip_last_layer,
            },
            "layers": [l.to_dict() for l in self.layers],
            "aggregates": {
                "avg_weight_bits": self.avg_weight_bits,
                "avg_activation_bits": self.avg_activation_bits,
                "weight_nonzero_fraction": self.weight_nonzero_fraction,
                "weight_sparsity": self.weight_sparsity,
                "activation_nonzero_fraction": self.activation_nonzero_fraction,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def quantize_tensor(
    values: np.ndarray,
    cfg: SamplingConfig,
    rng: SplitMix64,
    kind: str = "weights",
) -> QuantizedTensor:
    """Replace a tensor by signed hit counts (the original is untouched).

    One jitter is drawn from rng and shared by all normalization groups
    of the tensor; each group is sampled against its own cumulative
    partition with ceil(k * group_size) samples.
    """
    values = np.asarray(values)
    k = cfg.k_weights if kind == "weights" else cfg.k_activations
    granularity = cfg.granularity if kind == "weights" else GRANULARITY_LAYER
    view = normalize(values, granularity)
    xi = rng.next_uniform()

    grouped_counts = np.empty(values.size, dtype=np.int64)
    sample_counts = np.empty(view.n_groups, dtype=np.int64)
    for g in range(view.n_groups):
        sl = view.group_slice(g)
        probs = view.probs[sl]
        cdf = build_cdf(probs, sort=cfg.sort)
        stream = SampleStream(n_samples=math.ceil(probs.size * k), xi=xi)
        grouped_counts[sl] = count_hits(cdf, stream, view.signs[sl])
        sample_counts[g] = stream.n_samples

    counts = view.scatter_to_original(grouped_counts).reshape(values.shape)
    return QuantizedTensor(
        shape=tuple(values.shape),
        counts=counts,
        scales=view.scales.copy(),
        sample_counts=sample_counts,
        bit_width=bit_width(counts, signed=True),
        group_offsets=view.group_offsets.copy() if view.n_groups > 1 else None,
    )


def _skipped_positions(model: ModelGraph, cfg: SamplingConfig) -> set[int]:
    quantizable = model.quantizable_layers()
    skipped: set[int] = set()
    if quantizable and cfg.skip_first_layer:
        skipped.add(quantizable[0][0])
    if quantizable and cfg.skip_last_layer:
        skipped.add(quantizable[-1][0])
    return skipped


def quantize_model(
    model: ModelGraph, cfg: SamplingConfig
) -> tuple[ModelGraph, QuantReport]:
    """Quantize every dense/conv2d layer not excluded by the skip flags.

    Each layer derives its own generator from (seed, quantizable-layer
    index), so layers are independent and inserting activation-only
    layers never shifts the sampling of the others.  Skipped layers are
    returned bitwise-unchanged.  Batchnorm must be folded beforehand.
    """
    for layer in model.layers:
        if layer.kind == "batchnorm":
            raise ValueError(
                f"{layer.name}: fold batchnorm before quantizing (see fold_batchnorm)"
            )
    skipped = _skipped_positions(model, cfg)
    report = QuantReport(config=cfg)
    out = model
    for q_index, (position, layer) in enumerate(model.quantizable_layers()):
        if position in skipped:
            report.layers.append(
                LayerReport(name=layer.name, kind=layer.kind, quantized=False)
            )
            continue
        rng = rng_from(cfg.seed, q_index, STREAM_WEIGHTS)
        try:
            qt = quantize_tensor(layer.weights, cfg, rng, kind="weights")
        except DegenerateDistributionError as e:
            raise DegenerateDistributionError(f"{layer.name}: {e}") from e
        out = out.replace_layer(position, replace(layer, quantized=qt))
        report.layers.append(
            LayerReport(
                name=layer.name,
                kind=layer.kind,
                quantized=True,
                n_values=int(qt.counts.size),
                sample_count=qt.total_samples,
                scale_f=float(qt.scales[0]) if qt.n_groups == 1 else None,
                bit_width=qt.bit_width,
                nonzero_fraction=float(np.count_nonzero(qt.counts) / qt.counts.size),
                max_abs_count=int(np.max(np.abs(qt.counts))),
            )
        )
    return out, report
