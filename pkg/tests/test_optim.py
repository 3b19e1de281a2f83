"""AdamW, reduce-on-plateau, early stopping."""

import numpy as np
import pytest

from blockff.optim import (LEARNING_RATE_GRID, WEIGHT_DECAY_GRID, AdamW,
                           EarlyStop, PlateauScheduler)
from blockff.tensor import NonFiniteError, make_rng


def _scalar_adamw_reference(p, g, lr, beta1=0.9, beta2=0.999, eps=1e-8,
                            wd=0.0, steps=1):
    """Straight transcription of the update rule on a single scalar."""
    m = v = 0.0
    for t in range(1, steps + 1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        p = p - lr * wd * p
        p = p - lr * mhat / (np.sqrt(vhat) + eps)
    return p


class TestAdamW:
    def test_zero_grads_zero_decay_is_identity(self):
        p = np.array([1.0, -2.0, 3.0])
        opt = AdamW({"p": p}, lr=0.1, weight_decay=0.0)
        opt.step({"p": np.zeros(3)})
        np.testing.assert_array_equal(p, [1.0, -2.0, 3.0])

    def test_single_step_matches_scalar_reference(self):
        p = np.array([0.5])
        opt = AdamW({"p": p}, lr=0.1, weight_decay=0.0)
        opt.step({"p": np.array([1.0])})
        expected = _scalar_adamw_reference(0.5, 1.0, lr=0.1)
        np.testing.assert_allclose(p, [expected], rtol=1e-12)
        # first-step magnitude is ~lr for unit gradient
        assert abs((0.5 - p[0]) - 0.1) < 1e-6

    def test_multi_step_matches_scalar_reference(self):
        p = np.array([2.0])
        opt = AdamW({"p": p}, lr=0.05, weight_decay=0.01)
        for _ in range(25):
            opt.step({"p": np.array([0.3])})
        expected = _scalar_adamw_reference(2.0, 0.3, lr=0.05, wd=0.01, steps=25)
        np.testing.assert_allclose(p, [expected], rtol=1e-10)

    def test_decay_only_shrinks_params(self):
        p = np.array([4.0, -4.0])
        opt = AdamW({"p": p}, lr=0.1, weight_decay=0.5)
        opt.step({"p": np.zeros(2)})
        np.testing.assert_allclose(p, [4.0 * (1 - 0.05), -4.0 * (1 - 0.05)],
                                   rtol=1e-12)

    def test_non_finite_gradient_rejected(self):
        opt = AdamW({"p": np.zeros(2)}, lr=0.1)
        with pytest.raises(NonFiniteError):
            opt.step({"p": np.array([np.nan, 0.0])})

    def test_shape_mismatch_rejected(self):
        opt = AdamW({"p": np.zeros(2)}, lr=0.1)
        with pytest.raises(ValueError):
            opt.step({"p": np.zeros(3)})

    def test_sign_step_in_large_t_limit(self):
        # with constant gradients and no decay the step direction converges
        # to -lr * sign(g)
        rng = make_rng(0)
        g = rng.standard_normal(8) * rng.uniform(0.1, 10, 8)
        p = np.zeros(8)
        opt = AdamW({"p": p}, lr=1e-3, weight_decay=0.0)
        for _ in range(10_000):
            opt.step({"p": g.copy()})
        before = p.copy()
        opt.step({"p": g.copy()})
        step = p - before
        np.testing.assert_allclose(step, -1e-3 * np.sign(g), rtol=1e-4)

    def test_updates_in_place(self):
        p = np.ones(3)
        opt = AdamW({"p": p}, lr=0.1)
        ref = p
        opt.step({"p": np.ones(3)})
        assert ref is p and ref[0] != 1.0


class TestPlateauScheduler:
    def test_improving_sequence_keeps_lr(self):
        opt = AdamW({"p": np.zeros(1)}, lr=1.0)
        sched = PlateauScheduler([opt], patience=10, factor=0.1)
        for loss in np.linspace(1.0, 0.1, 40):
            assert not sched.update(loss)
        assert opt.lr == 1.0

    def test_exactly_one_reduction_after_ten_stale_epochs(self):
        opt = AdamW({"p": np.zeros(1)}, lr=1.0)
        sched = PlateauScheduler([opt], patience=10, factor=0.1)
        sched.update(0.5)  # the best
        fired = [sched.update(0.5) for _ in range(10)]
        assert fired == [False] * 9 + [True]
        np.testing.assert_allclose(opt.lr, 0.1)
        # counter reset: next nine stale epochs do not fire again
        assert not any(sched.update(0.5) for _ in range(9))
        np.testing.assert_allclose(opt.lr, 0.1)

    def test_lr_never_increases(self):
        opt = AdamW({"p": np.zeros(1)}, lr=1.0)
        sched = PlateauScheduler([opt], patience=2, factor=0.5)
        rng = make_rng(1)
        last = opt.lr
        for _ in range(50):
            sched.update(float(rng.uniform(0, 1)))
            assert opt.lr <= last
            last = opt.lr

    def test_independent_schedulers_do_not_interact(self):
        opts = [AdamW({"p": np.zeros(1)}, lr=1.0) for _ in range(2)]
        scheds = [PlateauScheduler([o], patience=3, factor=0.1) for o in opts]
        m0 = [0.9, 0.9, 0.9, 0.9, 0.9]          # stale: fires at epoch 4
        m1 = [0.9, 0.8, 0.7, 0.6, 0.5]          # improving: never fires
        # interleave in two different orders; trajectories must match
        lrs_a = ([], [])
        for a, b in zip(m0, m1):
            scheds[0].update(a)
            scheds[1].update(b)
            lrs_a[0].append(opts[0].lr)
            lrs_a[1].append(opts[1].lr)
        opts2 = [AdamW({"p": np.zeros(1)}, lr=1.0) for _ in range(2)]
        scheds2 = [PlateauScheduler([o], patience=3, factor=0.1) for o in opts2]
        lrs_b = ([], [])
        for a, b in zip(m0, m1):
            scheds2[1].update(b)
            scheds2[0].update(a)
            lrs_b[0].append(opts2[0].lr)
            lrs_b[1].append(opts2[1].lr)
        assert lrs_a == lrs_b
        assert lrs_a[1] == [1.0] * 5

    def test_shared_scheduler_scales_all_optimizers(self):
        opts = [AdamW({"p": np.zeros(1)}, lr=1.0),
                AdamW({"p": np.zeros(1)}, lr=0.5)]
        sched = PlateauScheduler(opts, patience=1, factor=0.1)
        sched.update(1.0)
        sched.update(1.0)
        np.testing.assert_allclose([o.lr for o in opts], [0.1, 0.05])


class TestEarlyStop:
    def test_improving_sequence_never_stops(self):
        es = EarlyStop(patience=30)
        for acc in np.linspace(0.1, 0.9, 100):
            assert not es.update(acc)

    def test_fires_exactly_on_thirtieth_stale_epoch(self):
        es = EarlyStop(patience=30)
        es.update(0.8)
        results = [es.update(0.8) for _ in range(30)]
        assert results == [False] * 29 + [True]

    def test_stop_is_idempotent(self):
        es = EarlyStop(patience=2)
        es.update(0.5)
        es.update(0.5)
        assert es.update(0.5)
        assert es.update(0.99)  # stays stopped even on later improvement
        assert es.stopped


class TestGrids:
    def test_grid_contents(self):
        assert len(LEARNING_RATE_GRID) == 16
        assert LEARNING_RATE_GRID[0] == 7e-5 and LEARNING_RATE_GRID[-1] == 5e-1
        assert WEIGHT_DECAY_GRID == (0.0, 1e-8, 1e-7, 1e-6, 1e-5)
