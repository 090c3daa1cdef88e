"""Sampler tests: generator reference vectors, CDF construction, and
the monotone-scan hit counter against independent oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcq.sampling import (
    STREAM_ACTIVATIONS,
    STREAM_WEIGHTS,
    SampleStream,
    SplitMix64,
    build_cdf,
    count_hits,
    rng_for_sample,
    rng_from,
    sample_stream,
)

MASK = (1 << 64) - 1


def reference_splitmix64(seed, n):
    """Independent straight port of the published generator."""
    state = seed & MASK
    out = []
    for _ in range(n):
        state = (state + 0x9E3779B97F4A7C15) & MASK
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        out.append(z ^ (z >> 31))
    return out


class TestSplitMix64:
    def test_published_vectors_seed_zero(self):
        """First outputs for state 0 match the published test vectors."""
        rng = SplitMix64(0)
        assert [rng.next_u64() for _ in range(3)] == [
            0xE220A8397B1DCDAF,
            0x6E789E6AA1B965F4,
            0x06C45D188009454F,
        ]

    @pytest.mark.parametrize("seed", [1, 42, 0x123456789ABCDEF, 2**64 - 1])
    def test_matches_independent_reference(self, seed):
        rng = SplitMix64(seed)
        assert [rng.next_u64() for _ in range(20)] == reference_splitmix64(seed, 20)

    def test_uniform_range_and_mapping(self):
        ref = reference_splitmix64(0, 100)
        rng = SplitMix64(0)
        for expected in ref:
            u = rng.next_uniform()
            assert u == (expected >> 11) * 2.0**-53
            assert 0.0 <= u < 1.0

    def test_rng_from_is_deterministic(self):
        a = rng_from(123, 4, STREAM_WEIGHTS)
        b = rng_from(123, 4, STREAM_WEIGHTS)
        assert [a.next_u64() for _ in range(5)] == [b.next_u64() for _ in range(5)]

    def test_rng_from_seed_zero_layer_zero_weights_is_raw_stream(self):
        rng = rng_from(0, 0, STREAM_WEIGHTS)
        assert rng.next_u64() == 0xE220A8397B1DCDAF

    def test_stream_tags_differ(self):
        w = rng_from(7, 0, STREAM_WEIGHTS)
        a = rng_from(7, 0, STREAM_ACTIVATIONS)
        assert w.next_u64() != a.next_u64()

    def test_layers_differ(self):
        l0 = rng_from(7, 0, STREAM_WEIGHTS)
        l1 = rng_from(7, 1, STREAM_WEIGHTS)
        assert l0.next_u64() != l1.next_u64()

    def test_sample_scoping_differs_and_is_stable(self):
        s0 = rng_for_sample(7, 0, 0)
        s1 = rng_for_sample(7, 0, 1)
        s0_again = rng_for_sample(7, 0, 0)
        v0 = s0.next_u64()
        assert v0 != s1.next_u64()
        assert v0 == s0_again.next_u64()


class TestBuildCdf:
    def test_unsorted_boundaries(self):
        cdf = build_cdf(np.array([0.5, 0.3, 0.2]), sort=False)
        np.testing.assert_allclose(cdf.boundaries, [0.0, 0.5, 0.8, 1.0], atol=1e-15)
        assert list(cdf.index_map) == [0, 1, 2]

    def test_sorted_boundaries_and_index_map(self):
        cdf = build_cdf(np.array([0.5, 0.3, 0.2]), sort=True)
        np.testing.assert_allclose(cdf.boundaries, [0.0, 0.2, 0.5, 1.0], atol=1e-15)
        assert list(cdf.index_map) == [2, 1, 0]

    def test_sort_is_stable_on_ties(self):
        cdf = build_cdf(np.array([0.25, 0.25, 0.5]), sort=True)
        assert list(cdf.index_map) == [0, 1, 2]

    def test_final_boundary_exactly_one(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            probs = rng.random(17)
            probs /= probs.sum()
            for sort in (True, False):
                cdf = build_cdf(probs, sort=sort)
                assert cdf.boundaries[-1] == 1.0
                assert np.all(np.diff(cdf.boundaries) >= 0)

    def test_interval_lengths_match_probs(self):
        """Every interval length equals its probability within 1e-12."""
        rng = np.random.default_rng(42)
        probs = rng.random(1000)
        probs /= probs.sum()
        for sort in (False, True):
            cdf = build_cdf(probs, sort=sort)
            lengths = np.diff(cdf.boundaries)
            np.testing.assert_allclose(lengths, probs[cdf.index_map], atol=1e-12)


class TestSampleStream:
    def test_counts_from_ratio(self):
        rng = SplitMix64(0)
        assert sample_stream(10, 1.0, rng).n_samples == 10
        assert sample_stream(10, 0.25, rng).n_samples == 3
        assert sample_stream(7, 2.0, rng).n_samples == 14

    def test_positions_zero_jitter(self):
        stream = SampleStream(n_samples=4, xi=0.0)
        np.testing.assert_array_equal(stream.positions(), [0.0, 0.25, 0.5, 0.75])

    def test_positions_strictly_increasing_in_unit_interval(self):
        stream = SampleStream(n_samples=97, xi=0.53)
        pos = stream.positions()
        assert np.all(np.diff(pos) > 0)
        assert pos[0] >= 0.0 and pos[-1] < 1.0

    def test_rejects_bad_arguments(self):
        rng = SplitMix64(0)
        with pytest.raises(ValueError):
            sample_stream(0, 1.0, rng)
        with pytest.raises(ValueError):
            sample_stream(5, 0.0, rng)


def binary_search_hits(cdf, stream, signs):
    """Oracle: locate every sample with an independent binary search."""
    boundaries = cdf.boundaries
    hits = np.zeros(cdf.n_values, dtype=np.int64)
    for x in stream.positions():
        lo, hi = 0, len(boundaries) - 1
        # find smallest j with x < boundaries[j]; value index is j - 1
        while lo < hi:
            mid = (lo + hi) // 2
            if x < boundaries[mid]:
                hi = mid
            else:
                lo = mid + 1
        hits[lo - 1] += 1
    counts = np.zeros(cdf.n_values, dtype=np.int64)
    counts[cdf.index_map] = hits
    return counts * np.asarray(signs, dtype=np.int64)


class TestCountHits:
    def test_hand_enumerated_counts(self):
        """probs [.5, .3, .2], N=10: five, three, and two hits."""
        probs = np.array([0.5, 0.3, 0.2])
        signs = np.array([1, -1, 1])
        for xi in (0.0, 0.5):
            cdf = build_cdf(probs, sort=False)
            stream = SampleStream(n_samples=10, xi=xi)
            np.testing.assert_array_equal(count_hits(cdf, stream, signs), [5, -3, 2])

    def test_single_value_takes_all_samples(self):
        cdf = build_cdf(np.array([1.0]), sort=False)
        for n, sign in ((1, 1), (17, -1)):
            stream = SampleStream(n_samples=n, xi=0.31)
            np.testing.assert_array_equal(count_hits(cdf, stream, [sign]), [sign * n])

    def test_small_weights_get_no_hits_when_sorted(self):
        """One sample per value leaves the smallest values unsampled,
        which is where the sparsity comes from."""
        magnitudes = np.array([10, 9, 8, 7, 6, 5, 4, 0.01, 0.01, 0.01])
        probs = magnitudes / magnitudes.sum()
        cdf = build_cdf(probs, sort=True)
        stream = SampleStream(n_samples=10, xi=0.5)
        counts = count_hits(cdf, stream, np.ones(10, dtype=np.int64))
        assert counts[7] == counts[8] == counts[9] == 0
        assert np.abs(counts).sum() == 10
        assert np.count_nonzero(counts) < 10

    def test_zero_probability_values_never_hit(self):
        probs = np.array([0.5, 0.0, 0.5, 0.0])
        cdf = build_cdf(probs, sort=False)
        stream = SampleStream(n_samples=64, xi=0.77)
        counts = count_hits(cdf, stream, np.ones(4, dtype=np.int64))
        assert counts[1] == 0 and counts[3] == 0
        assert np.abs(counts).sum() == 64

    @pytest.mark.parametrize("sort", [False, True])
    def test_matches_binary_search_oracle(self, sort):
        rng = np.random.default_rng(7)
        for _ in range(200):
            n = int(rng.integers(1, 60))
            probs = rng.random(n)
            probs /= probs.sum()
            signs = rng.choice([-1, 1], size=n)
            k = float(rng.uniform(0.1, 3.0))
            cdf = build_cdf(probs, sort=sort)
            stream = SampleStream(n_samples=math.ceil(n * k), xi=float(rng.random()))
            np.testing.assert_array_equal(
                count_hits(cdf, stream, signs), binary_search_hits(cdf, stream, signs)
            )

    @settings(max_examples=200, deadline=None)
    @given(
        magnitudes=st.lists(
            st.floats(min_value=1e-6, max_value=1e6, allow_nan=False),
            min_size=1,
            max_size=64,
        ),
        k=st.floats(min_value=0.05, max_value=4.0),
        xi=st.floats(min_value=0.0, max_value=0.999999),
        sort=st.booleans(),
    )
    def test_conservation_and_stratification(self, magnitudes, k, xi, sort):
        """Total |counts| equals N exactly; every count is within one
        of N times its interval length; reconstruction is within f/N."""
        values = np.array(magnitudes)
        f = values.sum()
        probs = values / f
        cdf = build_cdf(probs, sort=sort)
        n_samples = math.ceil(len(values) * k)
        stream = SampleStream(n_samples=n_samples, xi=xi)
        counts = count_hits(cdf, stream, np.ones(len(values), dtype=np.int64))

        assert counts.sum() == n_samples
        # Exact floor/ceil bound holds for the realized interval lengths;
        # versus n * p it can shift by one ulp of cumulative rounding when
        # n * p sits exactly on an integer, hence the spacing slack.
        lengths = np.empty_like(probs)
        lengths[cdf.index_map] = np.diff(cdf.boundaries)
        scaled = n_samples * lengths
        assert np.all(counts >= np.floor(scaled)) and np.all(counts <= np.ceil(scaled))
        expected = n_samples * probs
        slack = 4 * np.spacing(expected)
        assert np.all(counts >= np.floor(expected - slack))
        assert np.all(counts <= np.ceil(expected + slack))
        reconstructed = counts * (f / n_samples)
        assert np.all(np.abs(reconstructed - values) <= f / n_samples * (1 + 1e-12))

    def test_approximation_bound_against_activations(self):
        """The counted approximation of a dot product is off by at most
        (f/N) times the 1-norm of the activations."""
        rng = np.random.default_rng(3)
        for _ in range(100):
            n = int(rng.integers(1, 100))
            w = rng.normal(size=n)
            if not np.any(w):
                continue
            a = rng.normal(size=n)
            f = np.abs(w).sum()
            probs = np.abs(w) / f
            signs = np.sign(w)
            n_samples = math.ceil(n * float(rng.uniform(0.2, 3.0)))
            cdf = build_cdf(probs, sort=True)
            stream = SampleStream(n_samples=n_samples, xi=float(rng.random()))
            counts = count_hits(cdf, stream, signs)
            exact = w @ a
            approx = (f / n_samples) * (counts @ a)
            assert abs(exact - approx) <= (f / n_samples) * np.abs(a).sum() * (1 + 1e-9)
