"""Synthetic task: chain statistics, hash locality, scoring functions."""

import dataclasses

import numpy as np
import pytest
from scipy import stats

from magnet.grids import TokenGrid
from magnet.synth import (
    SynthTask,
    consistency_score,
    derive_level,
    entropy_rate,
    generate,
    level1_nll,
    make_default_task,
)


@pytest.fixture(scope="module")
def task():
    return make_default_task(seed=0)


class TestTaskConstruction:
    def test_default_geometry(self, task):
        assert (task.num_levels, task.length, task.vocab, task.cond_count) == (4, 64, 32, 4)
        assert task.window == 2
        assert len(task.hash_bases) == 3
        assert len(task.hash_salts) == 3

    def test_rows_are_stochastic_and_strictly_positive(self, task):
        sums = task.transitions.sum(axis=2)
        np.testing.assert_allclose(sums, 1.0, atol=1e-9)
        assert task.transitions.min() > 0

    def test_conditions_differ(self, task):
        assert not np.allclose(task.transitions[0], task.transitions[1])

    def test_rejects_non_stochastic_rows(self, task):
        bad = task.transitions.copy()
        bad[0, 0, 0] += 0.1
        with pytest.raises(ValueError):
            dataclasses.replace(task, transitions=bad)

    def test_rejects_negative_probabilities(self, task):
        bad = task.transitions.copy()
        bad[1, 2, 3] -= 2 * bad[1, 2, 3]
        bad[1, 2] /= bad[1, 2].sum()
        with pytest.raises(ValueError):
            dataclasses.replace(task, transitions=bad)

    def test_hash_coefficients_vanish_outside_support(self, task):
        """Base 8 over vocab 32 keeps only the two rightmost window slots."""
        coeffs = task.hash_coeffs(1)
        np.testing.assert_array_equal(coeffs, [0, 0, 0, 8, 1])

    def test_seed_changes_matrices(self):
        a = make_default_task(seed=0)
        b = make_default_task(seed=1)
        assert not np.allclose(a.transitions, b.transitions)

    def test_support_stays_inside_the_residue_class(self, task):
        """Each row's 4-way support shares the row's residue modulo 4.

        The rolling hash keeps exactly this residue of its off-center
        input, so clean sequences keep the hash inputs on a small covered
        set; that is what couples fine-level consistency to coarse-level
        sample quality.
        """
        n_classes = task.vocab // 8
        for ci in range(task.cond_count):
            for state in range(task.vocab):
                support = np.argsort(-task.transitions[ci, state])[:4]
                assert set(support % n_classes) == {state % n_classes}

    def test_rows_of_one_class_share_their_support(self, task):
        n_classes = task.vocab // 8
        for ci in range(task.cond_count):
            for g in range(n_classes):
                members = np.arange(g, task.vocab, n_classes)
                supports = [
                    frozenset(np.argsort(-task.transitions[ci, m])[:4]) for m in members
                ]
                assert len(set(supports)) == 1


class TestDeriveLevel:
    def test_hand_computed_row(self, task):
        lower = np.array([3, 7, 1, 0, 9], dtype=np.int64)
        out = derive_level(task, lower, 1)
        # reflect-padded: [1, 7, 3, 7, 1, 0, 9, 0, 1]; H = (8*w[t+1] + w[t+2] + 5) % 32
        expected = [(8 * 7 + 1 + 5) % 32, (8 * 1 + 0 + 5) % 32, (8 * 0 + 9 + 5) % 32,
                    (8 * 9 + 0 + 5) % 32, (8 * 0 + 1 + 5) % 32]
        np.testing.assert_array_equal(out, expected)

    def test_locality_of_perturbations(self, task):
        rng = np.random.default_rng(3)
        lower = rng.integers(0, 32, size=100)
        base = derive_level(task, lower, 2)
        for t in (0, 1, 37, 96, 98, 99):
            poked = lower.copy()
            poked[t] = (poked[t] + 13) % 32
            diff = np.flatnonzero(derive_level(task, poked, 2) != base)
            assert diff.size <= 2 * task.window + 1
            assert np.all(np.abs(diff - t) <= task.window)

    def test_out_of_vocab_rejected(self, task):
        with pytest.raises(ValueError):
            derive_level(task, np.array([0, 40]), 1)

    def test_level_bounds(self, task):
        row = np.zeros(8, dtype=np.int64)
        with pytest.raises(ValueError):
            derive_level(task, row, 0)
        with pytest.raises(ValueError):
            derive_level(task, row, 4)


class TestGenerate:
    def test_deterministic_under_seed(self, task):
        a = generate(task, 2, np.random.default_rng(5))
        b = generate(task, 2, np.random.default_rng(5))
        np.testing.assert_array_equal(a.cells, b.cells)

    def test_grid_is_complete_and_in_vocab(self, task):
        g = generate(task, 0, np.random.default_rng(0))
        assert g.cells.shape == (4, 64)
        assert g.cells.min() >= 0
        assert g.cells.max() < 32

    def test_fine_levels_reproduce_from_coarse(self, task):
        g = generate(task, 1, np.random.default_rng(7))
        for level in range(1, 4):
            np.testing.assert_array_equal(
                g.cells[level], derive_level(task, g.cells[level - 1], level)
            )

    def test_invalid_condition(self, task):
        with pytest.raises(ValueError):
            generate(task, 4, np.random.default_rng(0))

    def test_bigram_frequencies_match_the_chain(self, task):
        """Chi-squared on row-conditional successor counts at T = 10^4."""
        long_task = dataclasses.replace(task, length=10_000)
        g = generate(long_task, 0, np.random.default_rng(11))
        row = g.cells[0]
        p = task.transitions[0]
        pvals = []
        for state in range(32):
            nxt = row[1:][row[:-1] == state]
            if nxt.size < 200:
                continue
            support = np.argsort(-p[state])[:4]
            rest = np.setdiff1d(np.arange(32), support)
            observed = [(nxt == s).sum() for s in support] + [np.isin(nxt, rest).sum()]
            expected = [p[state, s] * nxt.size for s in support] + [p[state, rest].sum() * nxt.size]
            pvals.append(stats.chisquare(observed, expected).pvalue)
        assert len(pvals) >= 10
        assert min(pvals) > 1e-4
        assert np.median(pvals) > 0.05


class TestConsistencyScore:
    def test_generated_grid_scores_one(self, task):
        g = generate(task, 3, np.random.default_rng(2))
        assert consistency_score(g, task) == 1.0

    def test_random_fine_levels_score_near_chance(self, task):
        wide = dataclasses.replace(task, length=2000)
        rng = np.random.default_rng(9)
        g = generate(wide, 0, rng)
        cells = g.cells.copy()
        cells[1:] = rng.integers(0, 32, size=(3, 2000))
        score = consistency_score(TokenGrid(32, cells), wide)
        assert score == pytest.approx(1 / 32, abs=0.01)

    def test_single_corruption_has_local_blast_radius(self, task):
        long_task = dataclasses.replace(task, length=100)
        g = generate(long_task, 0, np.random.default_rng(4))
        cells = g.cells.copy()
        cells[1, 50] = (cells[1, 50] + 1) % 32
        expected3 = derive_level(long_task, cells[1], 2)
        mism = np.flatnonzero(expected3 != cells[2])
        assert mism.size <= 2 * long_task.window + 1

    def test_masked_cells_rejected(self, task):
        g = generate(task, 0, np.random.default_rng(0))
        cells = g.cells.copy()
        cells[2, 5] = g.mask_id
        with pytest.raises(ValueError):
            consistency_score(TokenGrid(32, cells), task)

    def test_geometry_mismatch_rejected(self, task):
        g = TokenGrid(32, np.zeros((2, 64), dtype=np.int64))
        with pytest.raises(ValueError):
            consistency_score(g, task)


class TestEntropyAndNll:
    def test_two_state_symmetric_chain(self):
        trans = np.array([[[0.5, 0.5], [0.5, 0.5]]])
        t = SynthTask(
            num_levels=2, length=8, vocab=2, cond_count=1, transitions=trans,
            hash_bases=(1,), hash_salts=(0,),
        )
        assert entropy_rate(t, 0) == pytest.approx(np.log(2), abs=1e-12)

    def test_skewed_chain_entropy_below_uniform(self, task):
        for cond in range(4):
            h = entropy_rate(task, cond)
            assert 0 < h < np.log(32)

    def test_generated_sequences_achieve_the_entropy_rate(self, task):
        """Long samples' per-token NLL converges to the entropy rate."""
        long_task = dataclasses.replace(task, length=10_000)
        for cond in (0, 2):
            g = generate(long_task, cond, np.random.default_rng(13 + cond))
            nll = level1_nll(g, long_task, cond)
            assert nll == pytest.approx(entropy_rate(task, cond), abs=0.1)

    def test_wrong_condition_scores_worse(self, task):
        long_task = dataclasses.replace(task, length=4000)
        g = generate(long_task, 0, np.random.default_rng(17))
        right = level1_nll(g, long_task, 0)
        wrong = level1_nll(g, long_task, 1)
        assert wrong > right + 0.5

    def test_nll_input_validation(self, task):
        g = generate(task, 0, np.random.default_rng(0))
        with pytest.raises(ValueError):
            level1_nll(g, task, 9)
        cells = g.cells.copy()
        cells[0, 0] = g.mask_id
        with pytest.raises(ValueError):
            level1_nll(TokenGrid(32, cells), task, 0)
