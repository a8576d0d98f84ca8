from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from logitfuse.errors import NumericError, SamplingError
from logitfuse.sampling import (
    SamplingConfig,
    make_rng,
    sample,
    stream_seed,
    to_probabilities,
    top_p_filter,
)

from oracles import brute_force_top_p, naive_softmax


class TestToProbabilities:
    def test_uniform_by_symmetry(self):
        probs = to_probabilities([0.0, 0.0, 0.0], 1.0)
        assert np.allclose(probs, [1 / 3] * 3, atol=1e-12)

    def test_analytic_two_to_one(self):
        probs = to_probabilities([math.log(2), 0.0], 1.0)
        assert np.allclose(probs, [2 / 3, 1 / 3], atol=1e-12)

    def test_large_logits_stabilized(self):
        # exp(1)/(exp(1)+1) computed in extended precision: logistic(1).
        probs = to_probabilities([1000.0, 999.0], 1.0)
        assert np.all(np.isfinite(probs))
        assert abs(probs[0] - 0.7310585786300049) < 1e-12
        assert abs(probs[1] - 0.2689414213699951) < 1e-12

    def test_sums_to_one(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            probs = to_probabilities(rng.normal(size=17) * 5, 0.6)
            assert abs(probs.sum() - 1.0) < 1e-6

    def test_matches_naive_softmax(self):
        logits = [1.25, -0.5, 0.0, 2.0]
        assert np.allclose(to_probabilities(logits, 0.6), naive_softmax(logits, 0.6), atol=1e-12)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            to_probabilities([0.0], 0.0)
        with pytest.raises(NumericError):
            to_probabilities([0.0, np.nan], 1.0)


class TestTopPFilter:
    def test_full_nucleus_unchanged(self):
        probs = np.array([0.5, 0.3, 0.2])
        out = top_p_filter(probs, 1.0)
        assert np.allclose(out, probs, atol=1e-9)

    def test_derived_smallest_covering_set(self):
        kept, renorm = brute_force_top_p([Fraction(1, 2), Fraction(3, 10), Fraction(1, 5)], Fraction(7, 10))
        assert kept == {0, 1}
        out = top_p_filter([0.5, 0.3, 0.2], 0.7)
        assert np.allclose(out, [float(x) for x in renorm], atol=1e-12)
        assert np.allclose(out, [0.625, 0.375, 0.0], atol=1e-12)

    def test_tie_break_by_ascending_id(self):
        out = top_p_filter([0.25, 0.25, 0.25, 0.25], 0.5)
        assert np.allclose(out, [0.5, 0.5, 0.0, 0.0], atol=1e-12)

    def test_boundary_token_included(self):
        # The token crossing the threshold stays in the nucleus.
        out = top_p_filter([0.6, 0.4], 0.7)
        assert np.allclose(out, [0.6, 0.4], atol=1e-12)

    def test_identity_at_p_one_noise_bound(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            probs = to_probabilities(rng.normal(size=23) * 4, 0.7)
            out = top_p_filter(probs, 1.0)
            assert np.max(np.abs(out - probs)) <= 1e-9

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            top_p_filter([0.5, 0.5], 0.0)
        with pytest.raises(ValueError):
            top_p_filter([0.5, 0.4], 0.9)  # does not sum to 1


class TestSample:
    def test_degenerate_distribution(self):
        rng = make_rng(0)
        for _ in range(5):
            assert sample([1.0, 0.0, 0.0], rng) == 0

    def test_greedy_argmax(self):
        rng = make_rng(0)
        assert sample([0.2, 0.5, 0.3], rng, greedy=True) == 1

    def test_greedy_tie_lowest_id(self):
        rng = make_rng(0)
        assert sample([0.4, 0.4, 0.2], rng, greedy=True) == 0

    def test_all_zero_rejected(self):
        with pytest.raises(SamplingError):
            sample([0.0, 0.0], make_rng(0))

    def test_monte_carlo_frequency(self):
        rng = make_rng(123)
        draws = [sample([0.5, 0.5], rng) for _ in range(10_000)]
        freq0 = draws.count(0) / len(draws)
        assert abs(freq0 - 0.5) < 0.02

    def test_zero_probability_token_never_drawn(self):
        rng = make_rng(9)
        probs = [0.5, 0.0, 0.5]
        assert all(sample(probs, rng) != 1 for _ in range(2000))

    def test_determinism_across_generators(self):
        a = [sample([0.3, 0.3, 0.4], make_rng(77)) for _ in range(1)]
        seq1 = []
        rng = make_rng(77)
        for _ in range(50):
            seq1.append(sample([0.3, 0.3, 0.4], rng))
        rng = make_rng(77)
        seq2 = [sample([0.3, 0.3, 0.4], rng) for _ in range(50)]
        assert seq1 == seq2
        assert seq1[0] == a[0]


def test_stream_seed_scheme():
    assert stream_seed(10, 3) == 13
    assert stream_seed(2**64 - 1, 2) == 1  # wraps in u64 space


def test_config_validation():
    config = SamplingConfig()
    assert config.temperature == 0.6 and config.top_p == 0.95
    with pytest.raises(ValueError):
        SamplingConfig(temperature=0.0)
    with pytest.raises(ValueError):
        SamplingConfig(top_p=0.0)
    with pytest.raises(ValueError):
        SamplingConfig(top_p=1.5)


grid_probs = st.integers(1, 5).flatmap(
    lambda n: st.lists(st.integers(0, 16), min_size=n, max_size=n).filter(lambda w: sum(w) > 0)
)


@given(weights=grid_probs, p_num=st.integers(1, 16))
@settings(max_examples=200, deadline=None)
def test_filter_matches_subset_enumeration(weights, p_num):
    total = sum(weights)
    fracs = [Fraction(w, total) for w in weights]
    p = Fraction(p_num, 16)
    kept_oracle, renorm_oracle = brute_force_top_p(fracs, p)
    out = top_p_filter([float(f) for f in fracs], float(p))
    assert set(np.nonzero(out)[0].tolist()) == kept_oracle
    assert np.allclose(out, [float(x) for x in renorm_oracle], atol=1e-9)


@given(data=st.data())
@settings(max_examples=150, deadline=None)
def test_pipeline_greedy_matches_raw_argmax(data):
    n = data.draw(st.integers(2, 12))
    logits = np.array(
        data.draw(
            st.lists(st.floats(-5, 5, allow_nan=False), min_size=n, max_size=n).filter(
                lambda xs: sorted(xs)[-1] - sorted(xs)[-2] > 1e-6  # unique max survives softmax rounding
            )
        )
    )
    probs = to_probabilities(logits, 0.6)
    p = data.draw(st.floats(float(probs.max()), 1.0))
    filtered = top_p_filter(probs, p)
    assert np.count_nonzero(filtered) >= 1  # support never empty
    greedy_token = sample(filtered, make_rng(0), greedy=True)
    assert greedy_token == int(np.argmax(logits))


@given(data=st.data())
@settings(max_examples=100, deadline=None)
def test_filtered_support_never_empty(data):
    n = data.draw(st.integers(1, 10))
    logits = np.array(
        data.draw(st.lists(st.floats(-8, 8, allow_nan=False), min_size=n, max_size=n))
    )
    p = data.draw(st.floats(0.01, 1.0))
    filtered = top_p_filter(to_probabilities(logits, 1.0), p)
    assert np.count_nonzero(filtered) >= 1
    assert abs(filtered.sum() - 1.0) < 1e-9
