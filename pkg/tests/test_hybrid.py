"""Joint AR+NAR objective: batch plumbing, loss separation, training progress."""

import numpy as np
import pytest

from magnet.hybrid import HybridBatch, hybrid_train_step
from magnet.model import ModelConfig, ToyModel, TrainBatch, fused_losses_and_grads
from magnet.synth import generate, make_default_task


def _model(seed=0, **kw):
    base = dict(
        num_levels=4, vocab=32, max_len=16, cond_count=4, d_model=32,
        n_heads=2, n_layers=1, ffn_mult=2, cond_dropout=0.0, window=5,
        mode="fused", seed=seed, lr=3e-3,
    )
    base.update(kw)
    return ToyModel(ModelConfig(**base))


def _synth_batch(task, b, rng):
    grids = np.stack([generate(task, int(c), rng).cells for c in rng.integers(0, 4, size=b)])
    cond = rng.integers(0, 4, size=b)
    return TrainBatch(grids, cond)


@pytest.fixture(scope="module")
def task():
    return make_default_task(seed=0, length=16)


class TestHybridBatch:
    def test_sample_draws_full_range(self, task):
        rng = np.random.default_rng(0)
        batch = _synth_batch(task, 64, rng)
        hb = HybridBatch.sample(batch, rng)
        assert hb.t_switch.min() >= 1
        assert hb.t_switch.max() <= 16
        draws = HybridBatch.sample(_synth_batch(task, 500, rng), rng).t_switch
        assert 1 in draws and 16 in draws

    def test_switch_bounds_enforced(self, task):
        rng = np.random.default_rng(1)
        batch = _synth_batch(task, 3, rng)
        with pytest.raises(ValueError):
            HybridBatch(batch.grids, batch.cond, np.array([0, 4, 4]))
        with pytest.raises(ValueError):
            HybridBatch(batch.grids, batch.cond, np.array([1, 4, 17]))
        with pytest.raises(ValueError):
            HybridBatch(batch.grids, batch.cond, np.array([1, 4]))


class TestHybridTrainStep:
    def test_full_switch_is_pure_autoregressive(self, task):
        model = _model()
        rng = np.random.default_rng(2)
        batch = _synth_batch(task, 4, rng)
        hb = HybridBatch(batch.grids, batch.cond, np.full(4, 16))
        loss_ar, loss_nar = hybrid_train_step(model, hb, rng)
        assert loss_nar is None
        assert np.isfinite(loss_ar)

    def test_minimal_prompt_keeps_both_losses(self, task):
        model = _model()
        rng = np.random.default_rng(3)
        batch = _synth_batch(task, 4, rng)
        hb = HybridBatch(batch.grids, batch.cond, np.ones(4, dtype=np.int64))
        loss_ar, loss_nar = hybrid_train_step(model, hb, rng)
        assert np.isfinite(loss_ar) and np.isfinite(loss_nar)

    def test_deterministic_given_rng(self, task):
        results = []
        for _ in range(2):
            model = _model()
            rng = np.random.default_rng(4)
            batch = _synth_batch(task, 4, np.random.default_rng(8))
            hb = HybridBatch.sample(batch, rng)
            results.append(hybrid_train_step(model, hb, rng))
        assert results[0] == results[1]

    def test_rejects_parallel_only_model(self, task):
        model = ToyModel(ModelConfig(num_levels=4, vocab=32, max_len=16, d_model=32,
                                     n_heads=2, n_layers=1, mode="nar"))
        rng = np.random.default_rng(5)
        batch = _synth_batch(task, 2, rng)
        hb = HybridBatch.sample(batch, rng)
        with pytest.raises(ValueError):
            hybrid_train_step(model, hb, rng)

    def test_update_flag(self, task):
        model = _model()
        before = {k: v.copy() for k, v in model.params.items()}
        rng = np.random.default_rng(6)
        hb = HybridBatch.sample(_synth_batch(task, 4, rng), rng)
        hybrid_train_step(model, hb, rng, update=False)
        for k, v in model.params.items():
            np.testing.assert_array_equal(before[k], v)

    def test_losses_decrease_with_training(self, task):
        """Both objectives improve over 500 steps, averaged across 3 seeds."""
        first_ar, last_ar, first_nar, last_nar = [], [], [], []
        for seed in range(3):
            model = _model(seed=seed)
            rng = np.random.default_rng(100 + seed)
            ar_losses, nar_losses = [], []
            for _ in range(500):
                hb = HybridBatch.sample(_synth_batch(task, 8, rng), rng)
                la, ln = hybrid_train_step(model, hb, rng)
                if la is not None:
                    ar_losses.append(la)
                if ln is not None:
                    nar_losses.append(ln)
            first_ar.append(np.mean(ar_losses[:50]))
            last_ar.append(np.mean(ar_losses[-50:]))
            first_nar.append(np.mean(nar_losses[:50]))
            last_nar.append(np.mean(nar_losses[-50:]))
        assert np.mean(last_ar) < np.mean(first_ar)
        assert np.mean(last_nar) < np.mean(first_nar)


class TestLossSeparation:
    """Selective logit perturbation: each loss only sees its own region."""

    def _setup(self, task):
        model = _model(seed=9)
        rng = np.random.default_rng(10)
        batch = _synth_batch(task, 3, rng)
        t_switch = np.array([5, 9, 12])
        hb = HybridBatch.sample(TrainBatch(batch.grids, batch.cond), np.random.default_rng(0))
        hb = HybridBatch(batch.grids, batch.cond, t_switch)
        levels = np.array([1, 0, 3])
        masks = np.zeros((3, 16), dtype=bool)
        for i, sw in enumerate(t_switch):
            masks[i, sw::2] = True
        return model, hb, levels, masks

    def _losses(self, model, hb, levels, masks, hook):
        return fused_losses_and_grads(
            model, hb.grids, hb.cond, hb.t_switch, levels, masks,
            np.random.default_rng(0), logit_hook=hook,
        )[:2]

    def test_prompt_perturbation_leaves_nar_loss_alone(self, task):
        model, hb, levels, masks = self._setup(task)
        base_ar, base_nar = self._losses(model, hb, levels, masks, None)

        def bump_prompt(j, logits):
            out = logits.copy()
            s = logits.shape[1]
            tok_time = np.arange(s) - j
            cols = (tok_time >= 0) & (tok_time < 16)
            bump = cols[None, :] & (tok_time[None, :] < hb.t_switch[:, None])
            out[bump, 0] += 3.0
            return out

        pert_ar, pert_nar = self._losses(model, hb, levels, masks, bump_prompt)
        assert pert_nar == base_nar
        assert pert_ar != base_ar

    def test_region_perturbation_leaves_ar_loss_alone(self, task):
        model, hb, levels, masks = self._setup(task)
        base_ar, base_nar = self._losses(model, hb, levels, masks, None)

        def bump_region(j, logits):
            out = logits.copy()
            s = logits.shape[1]
            tok_time = np.arange(s) - j
            cols = (tok_time >= 0) & (tok_time < 16)
            bump = cols[None, :] & (tok_time[None, :] >= hb.t_switch[:, None])
            out[bump, 0] += 3.0
            return out

        pert_ar, pert_nar = self._losses(model, hb, levels, masks, bump_region)
        assert pert_ar == base_ar
        assert pert_nar != base_nar

    def test_padding_cells_contribute_nothing(self, task):
        """The AR loss at full switch averages exactly the K*T real cells."""
        model = _model(seed=12)
        rng = np.random.default_rng(13)
        batch = _synth_batch(task, 1, rng)
        hb = HybridBatch(batch.grids, batch.cond, np.array([16]))
        captured = {}

        def capture(j, logits):
            captured[j] = logits.copy()
            return logits

        loss_ar, loss_nar, _ = fused_losses_and_grads(
            model, hb.grids, hb.cond, hb.t_switch, np.zeros(1, dtype=np.int64),
            np.zeros((1, 16), dtype=bool), np.random.default_rng(0), logit_hook=capture,
        )
        assert loss_nar is None
        total = 0.0
        count = 0
        for j in range(4):
            for t in range(16):
                pos = t + j
                z = captured[j][0, pos].astype(np.float64)
                z = z - z.max()
                logp = z - np.log(np.exp(z).sum())
                total -= logp[hb.grids[0, j, t]]
                count += 1
        assert count == 64
        assert loss_ar == pytest.approx(total / count, rel=1e-9)
