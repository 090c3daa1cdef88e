"""Stratified sampling of discrete probability distributions.

A normalized weight (or activation) vector defines a partition of the
unit interval; drawing jittered equidistant samples against that
partition and counting hits per interval yields the signed integer
codes used everywhere else in this package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_SAMPLE_MIX = 0xD1B54A32D192ED03

STREAM_WEIGHTS = 0
STREAM_ACTIVATIONS = 1


class SplitMix64:
    """SplitMix64 generator; identical output streams on every platform."""

    __slots__ = ("state",)

    def __init__(self, state: int):
        self.state = state & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN_GAMMA) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def next_uniform(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0**-53


def rng_from(seed: int, layer_index: int, stream_tag: int) -> SplitMix64:
    """Derive the generator for one (layer, stream) pair.

    Streams for different layers and for weights vs activations must
    never collide, so the layer index is spread with the 64-bit golden
    gamma before mixing.
    """
    state = (seed ^ ((layer_index * _GOLDEN_GAMMA) & _MASK64) ^ stream_tag) & _MASK64
    return SplitMix64(state)


def rng_for_sample(seed: int, layer_index: int, sample_index: int) -> SplitMix64:
    """Activation-stream generator for one input sample.

    Scoping the jitter to (layer, sample) keeps batch evaluation
    deterministic and independent of evaluation order.
    """
    mixed = seed ^ ((sample_index * _SAMPLE_MIX) & _MASK64)
    return rng_from(mixed, layer_index, STREAM_ACTIVATIONS)


@dataclass(frozen=True)
class CdfPartition:
    """Partition of [0, 1] into one half-open interval per value.

    boundaries[m] is the cumulative probability after the first m
    values in scan order; the final boundary is forced to exactly 1.0.
    index_map[m] gives the original index of the value occupying scan
    position m (a non-trivial permutation only when sorted).
    """

    boundaries: np.ndarray
    index_map: np.ndarray

    @property
    def n_values(self) -> int:
        return len(self.boundaries) - 1


@dataclass(frozen=True)
class SampleStream:
    """N jittered equidistant points x_i = (i + xi) / N, all in [0, 1)."""

    n_samples: int
    xi: float

    def positions(self) -> np.ndarray:
        return (np.arange(self.n_samples, dtype=np.float64) + self.xi) / self.n_samples


def build_cdf(probs: np.ndarray, sort: bool) -> CdfPartition:
    """Build the cumulative partition for a probability vector.

    With sort=True the values are arranged ascending by probability
    (stable, so ties keep their original relative order) before the
    cumulative sum is taken; index_map records the arrangement.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if sort:
        index_map = np.argsort(probs, kind="stable")
        ordered = probs[index_map]
    else:
        index_map = np.arange(len(probs), dtype=np.intp)
        ordered = probs
    boundaries = np.empty(len(probs) + 1, dtype=np.float64)
    boundaries[0] = 0.0
    np.cumsum(ordered, out=boundaries[1:])
    # Guard against cumulative rounding: no boundary may pass 1.0, and a
    # sample just below 1.0 must land inside the last interval.
    np.minimum(boundaries, 1.0, out=boundaries)
    boundaries[-1] = 1.0
    return CdfPartition(boundaries=boundaries, index_map=index_map)


def sample_stream(n_values: int, k: float, rng: SplitMix64) -> SampleStream:
    """Stream of ceil(n_values * k) samples with one jitter drawn from rng."""
    if n_values < 1:
        raise ValueError("n_values must be >= 1")
    if k <= 0:
        raise ValueError("sampling ratio k must be > 0")
    n = math.ceil(n_values * k)
    return SampleStream(n_samples=n, xi=rng.next_uniform())


def count_hits(cdf: CdfPartition, stream: SampleStream, signs: np.ndarray) -> np.ndarray:
    """Count signed sample hits per value in a single forward scan.

    A sample x hits scan position m when boundaries[m] <= x <
    boundaries[m+1]; zero-width intervals can never be hit.  Samples
    are visited in increasing order so the interval cursor only moves
    forward, making the scan O(N + n) rather than O(N log n).
    Returns counts indexed by original value position, each carrying
    the sign of its original value.
    """
    n = cdf.n_values
    boundaries = cdf.boundaries.tolist()
    positions = stream.positions().tolist()
    hits = [0] * n
    cursor = 0
    for x in positions:
        while boundaries[cursor + 1] <= x:
            cursor += 1
        hits[cursor] += 1
    counts = np.zeros(n, dtype=np.int64)
    counts[cdf.index_map] = hits
    return counts * np.asarray(signs, dtype=np.int64)
