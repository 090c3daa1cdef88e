"""1-norm normalization of tensors into probability distributions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GRANULARITY_LAYER = "layer"
GRANULARITY_NEURON = "neuron"


class DegenerateDistributionError(ValueError):
    """A normalization group contains only zeros."""


@dataclass(frozen=True)
class NormalizedView:
    """A tensor rewritten as per-group probability distributions.

    probs and signs are stored group-contiguously; group g occupies
    positions group_offsets[g]:group_offsets[g+1] and sums to 1.
    perm maps each stored position back to the flat index of the
    original tensor (None means identity).  scales[g] is the 1-norm
    the group was divided by.
    """

    probs: np.ndarray
    signs: np.ndarray
    scales: np.ndarray
    group_offsets: np.ndarray
    granularity: str
    perm: np.ndarray | None = None

    @property
    def n_groups(self) -> int:
        return len(self.scales)

    @property
    def scale_f(self) -> float:
        """The single scale factor of a layer-granularity view."""
        if self.n_groups != 1:
            raise ValueError("scale_f is only defined for single-group views")
        return float(self.scales[0])

    def group_slice(self, g: int) -> slice:
        return slice(int(self.group_offsets[g]), int(self.group_offsets[g + 1]))

    def scatter_to_original(self, grouped: np.ndarray) -> np.ndarray:
        """Reorder a group-contiguous vector back to original flat order."""
        if self.perm is None:
            return grouped
        out = np.empty_like(grouped)
        out[self.perm] = grouped
        return out


def _neuron_groups(values: np.ndarray) -> tuple[np.ndarray, np.ndarray | None, int]:
    """Flatten so each neuron's incoming weights are contiguous.

    Dense weights are (in, out) with one neuron per column; conv
    weights are (out, in, kh, kw) with one neuron per output channel,
    already contiguous in row-major order.
    """
    if values.ndim == 2:
        n_in, n_out = values.shape
        flat = values.T.reshape(-1)
        perm = np.arange(values.size, dtype=np.intp).reshape(n_in, n_out).T.reshape(-1)
        return flat, perm, n_out
    if values.ndim == 4:
        return values.reshape(-1), None, values.shape[0]
    raise ValueError(
        f"neuron granularity needs a 2-D or 4-D tensor, got {values.ndim}-D"
    )


def normalize(values: np.ndarray, granularity: str = GRANULARITY_LAYER) -> NormalizedView:
    """Turn a tensor into per-group probability distributions.

    Layer granularity treats the whole tensor as one distribution;
    neuron granularity normalizes each neuron's incoming weights
    independently.  Sums are accumulated in double precision.  A group
    that is entirely zero raises DegenerateDistributionError.
    """
    values = np.asarray(values)
    if granularity == GRANULARITY_LAYER:
        flat = values.reshape(-1).astype(np.float64)
        perm = None
        n_groups = 1
    elif granularity == GRANULARITY_NEURON:
        flat, perm, n_groups = _neuron_groups(values)
        flat = flat.astype(np.float64)
    else:
        raise ValueError(f"unknown granularity {granularity!r}")

    if flat.size == 0:
        raise DegenerateDistributionError("degenerate distribution: empty tensor")

    group_size = flat.size // n_groups
    offsets = np.arange(n_groups + 1, dtype=np.intp) * group_size
    magnitudes = np.abs(flat)
    scales = magnitudes.reshape(n_groups, group_size).sum(axis=1)
    if not np.all(scales > 0):
        bad = int(np.flatnonzero(scales <= 0)[0])
        raise DegenerateDistributionError(
            f"degenerate distribution: group {bad} is all zeros"
        )
    probs = magnitudes / np.repeat(scales, group_size)
    signs = np.sign(flat).astype(np.int8)
    return NormalizedView(
        probs=probs,
        signs=signs,
        scales=scales,
        group_offsets=offsets,
        granularity=granularity,
        perm=perm,
    )


def output_rescale_factor(view: NormalizedView, n_samples: int) -> float:
    """Factor restoring integer hit counts to the original value range."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    return view.scale_f / n_samples
