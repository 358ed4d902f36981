"""Span-masking combinatorics against brute-force and Monte-Carlo oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from magnet.spans import (
    SpanPartition,
    enumerate_mask_rate,
    expected_mask_rate,
    sample_training_spans,
    select_spans_to_mask,
    solve_num_spans,
    span_len_from_ms,
    span_scores,
)


class TestExpectedMaskRate:
    def test_zero_spans(self):
        assert expected_mask_rate(10, 3, 0) == 0.0

    def test_single_span_on_circle(self):
        """One span of l covers exactly l of T cells wherever it lands."""
        assert expected_mask_rate(10, 3, 1) == pytest.approx(0.3, abs=1e-15)

    def test_two_spans_small_case(self):
        # all C(4,2)=6 placements of 2 spans of length 2 on a 4-circle
        # cover 20 of 24 cells in total
        assert expected_mask_rate(4, 2, 2) == pytest.approx(5.0 / 6.0, abs=1e-15)

    def test_matches_enumeration_small(self):
        for t in range(2, 9):
            for l in range(1, t + 1):
                for u in range(t + 1):
                    assert expected_mask_rate(t, l, u) == pytest.approx(
                        enumerate_mask_rate(t, l, u), abs=1e-12
                    )

    def test_monotone_in_span_count(self):
        for t in range(4, 65, 6):
            for l in range(1, 9):
                if l > t:
                    continue
                rates = [expected_mask_rate(t, l, u) for u in range(t + 1)]
                assert all(a <= b + 1e-15 for a, b in zip(rates, rates[1:]))

    def test_no_overflow_at_large_length(self):
        r = expected_mask_rate(100_000, 3, 50_000)
        assert 0.0 < r < 1.0

    def test_rejects_bad_args(self):
        with pytest.raises(ValueError):
            expected_mask_rate(10, 0, 1)
        with pytest.raises(ValueError):
            expected_mask_rate(10, 11, 1)
        with pytest.raises(ValueError):
            expected_mask_rate(10, 3, 11)


class TestSolveNumSpans:
    def test_exact_meeting_point(self):
        assert solve_num_spans(10, 3, 0.3) == 1

    def test_zero_target(self):
        assert solve_num_spans(10, 3, 0.0) == 0
        assert solve_num_spans(7, 2, 0.0) == 0

    def test_full_coverage_target(self):
        # rate(8) = 1 exactly (C(7,8)=0), rate(7) = 1 - 1/120 < 1
        assert solve_num_spans(10, 3, 1.0) == 8
        assert expected_mask_rate(10, 3, 7) < 1.0

    @given(
        t=st.integers(2, 40),
        l=st.integers(1, 8),
        target=st.floats(0.0, 1.0, allow_nan=False),
    )
    @settings(max_examples=200, deadline=None)
    def test_minimality(self, t, l, target):
        """solve returns the smallest count whose rate reaches the target."""
        if l > t:
            l = t
        u = solve_num_spans(t, l, target)
        assert 0 <= u <= t - l + 1
        assert expected_mask_rate(t, l, u) >= target - 1e-12
        if u > 0:
            assert expected_mask_rate(t, l, u - 1) < target


class TestSampleTrainingSpans:
    def test_boundaries(self):
        rng = np.random.default_rng(0)
        assert not sample_training_spans(10, 3, 0, rng).any()
        assert sample_training_spans(10, 1, 10, rng).all()

    def test_circular_coverage_matches_formula(self):
        """Monte-Carlo mean coverage equals the closed form on the circle."""
        rng = np.random.default_rng(7)
        t, l, u, n = 10, 3, 1, 100_000
        total = sum(
            sample_training_spans(t, l, u, rng, circular=True).sum() for _ in range(n)
        )
        mean = total / (n * t)
        assert abs(mean - expected_mask_rate(t, l, u)) <= 0.005

    def test_circular_coverage_two_spans_within_3_sigma(self):
        rng = np.random.default_rng(11)
        t, l, u, n = 12, 3, 2, 100_000
        draws = np.array(
            [sample_training_spans(t, l, u, rng, circular=True).sum() / t for _ in range(n)]
        )
        rate = expected_mask_rate(t, l, u)
        sigma = draws.std(ddof=1) / np.sqrt(n)
        assert abs(draws.mean() - rate) <= 3 * sigma + 1e-12

    def test_truncated_coverage_within_edge_tolerance(self):
        """Truncation at the right edge biases coverage by at most l/T."""
        rng = np.random.default_rng(3)
        t, l, u, n = 10, 3, 1, 20_000
        mean = sum(sample_training_spans(t, l, u, rng).sum() for _ in range(n)) / (n * t)
        assert abs(mean - expected_mask_rate(t, l, u)) <= l / t

    def test_start_positions_are_distinct(self):
        rng = np.random.default_rng(5)
        row = sample_training_spans(20, 1, 20, rng)
        assert row.all()  # u=T, l=1 forces every start exactly once


class TestSpanPartition:
    def test_covers_exactly_once(self):
        p = SpanPartition(10, 3)
        assert p.n_spans == 4
        seen = np.zeros(10, dtype=int)
        for j in range(p.n_spans):
            lo, hi = p.bounds(j)
            seen[lo:hi] += 1
        assert np.all(seen == 1)
        assert p.bounds(3) == (9, 10)  # remainder span is short

    def test_member_of(self):
        p = SpanPartition(7, 3)
        np.testing.assert_array_equal(p.member_of(), [0, 0, 0, 1, 1, 1, 2])

    def test_rows_for(self):
        p = SpanPartition(7, 3)
        np.testing.assert_array_equal(
            p.rows_for(np.array([0, 2])), [True, True, True, False, False, False, True]
        )


class TestSpanScores:
    def test_max_within_each_span(self):
        p = SpanPartition(4, 2)
        np.testing.assert_allclose(
            span_scores(np.array([0.1, 0.9, 0.2, 0.3]), p), [0.9, 0.3]
        )

    def test_singleton_spans_identity(self):
        p = SpanPartition(5, 1)
        probs = np.array([0.5, 0.1, 0.9, 0.0, 1.0])
        np.testing.assert_allclose(span_scores(probs, p), probs)

    def test_constant_input(self):
        p = SpanPartition(9, 4)
        np.testing.assert_allclose(span_scores(np.full(9, 0.25), p), [0.25] * 3)

    def test_rejects_bad_probs(self):
        p = SpanPartition(4, 2)
        with pytest.raises(ValueError):
            span_scores(np.array([0.1, 0.2, 0.3]), p)
        with pytest.raises(ValueError):
            span_scores(np.array([0.1, 0.2, 0.3, 1.5]), p)


class TestSelectSpansToMask:
    def test_unique_minimum(self):
        sel = select_spans_to_mask(np.array([0.2, 0.9, 0.5]), np.zeros(3, bool), 1)
        np.testing.assert_array_equal(sel, [0])

    def test_fixed_span_excluded(self):
        sel = select_spans_to_mask(
            np.array([0.2, 0.9, 0.5]), np.array([True, False, False]), 1
        )
        np.testing.assert_array_equal(sel, [2])

    def test_tie_break_by_index(self):
        sel = select_spans_to_mask(np.full(4, 0.5), np.zeros(4, bool), 2)
        np.testing.assert_array_equal(sel, [0, 1])

    def test_never_returns_fixed(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            n = rng.integers(2, 12)
            scores = rng.random(n)
            fixed = rng.random(n) < 0.4
            avail = int((~fixed).sum())
            if avail == 0:
                continue
            k = int(rng.integers(0, avail + 1))
            sel = select_spans_to_mask(scores, fixed, k)
            assert len(sel) == k
            assert not fixed[sel].any()

    def test_rejects_overdraw(self):
        with pytest.raises(ValueError):
            select_spans_to_mask(np.array([0.1, 0.2]), np.array([True, False]), 2)


def test_span_len_from_ms():
    assert span_len_from_ms(60.0, 50.0) == 3
    assert span_len_from_ms(1.0, 50.0) == 1  # floors at one token
