import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convformer.data import AugmentFlags, augment, shift_crop, synth_dataset
from convformer.errors import ConfigError, DataError, StateError
from convformer.model import ConvFormer, build_variant
from convformer.tensor import ParameterStore, Tensor
from convformer.train import (
    TrainConfig,
    TrainingAborted,
    adamw_step,
    dice_ce_loss,
    poly_lr,
    predict,
    train_loop,
)

TINY = dict(stage_channels=(4, 8, 12, 16), encoder_dim=8, encoder_layers=1, stem_conv_blocks=1, points=2)


class TestPolyLr:
    def test_endpoints_and_midpoint(self):
        cfg = TrainConfig(max_iters=1000)
        assert poly_lr(0, cfg) == 2e-4
        assert poly_lr(1000, cfg) == 0.0
        assert poly_lr(500, cfg) == pytest.approx(1.0718e-4, rel=1e-4)
        assert poly_lr(500, cfg) == pytest.approx(2e-4 * 0.5 ** 0.9, rel=1e-12)

    def test_strictly_decreasing(self):
        cfg = TrainConfig(max_iters=300)
        lrs = [poly_lr(i, cfg) for i in range(301)]
        assert all(a > b for a, b in zip(lrs, lrs[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            poly_lr(11, TrainConfig(max_iters=10))

    @pytest.mark.parametrize("kwargs", [dict(lr0=0), dict(poly_power=0), dict(poly_power=1.5),
                                        dict(max_iters=-1), dict(batch_size=0)])
    def test_config_invariants(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)


def scalar_store(value=1.5):
    store = ParameterStore(dtype=np.float64)
    p = store.add("p", np.array([value]))
    return store, p


class TestAdamW:
    def test_zero_gradient_no_decay_is_identity(self):
        store, p = scalar_store()
        p.grad = np.zeros(1)
        adamw_step(store, 1e-2, 0.0)
        assert p.data[0] == 1.5

    def test_zero_gradient_is_pure_decay(self):
        store, p = scalar_store()
        p.grad = np.zeros(1)
        adamw_step(store, 1e-2, 0.5)
        assert p.data[0] == pytest.approx(1.5 * (1 - 1e-2 * 0.5), rel=1e-15)

    def test_one_step_closed_form(self):
        lr, wd, eps = 1e-3, 0.005, 1e-8
        store, p = scalar_store()
        p.grad = np.ones(1)
        adamw_step(store, lr, wd, eps=eps)
        # bias-corrected moments are exactly g and g^2 after one step
        assert p.data[0] == pytest.approx(1.5 * (1 - lr * wd) - lr / (1 + eps), rel=1e-14)

    def test_matches_hand_rolled_adam_without_decay(self, rng):
        grads = rng.normal(size=10)
        store, p = scalar_store(0.3)
        w, m, v = 0.3, 0.0, 0.0
        for t, g in enumerate(grads, 1):
            p.grad = np.array([g])
            adamw_step(store, 1e-2, 0.0)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w -= 1e-2 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
            assert abs(p.data[0] - w) < 1e-7

    def test_missing_gradient(self):
        store, _ = scalar_store()
        with pytest.raises(StateError):
            adamw_step(store, 1e-3, 0.0)


class TestLoss:
    def test_uniform_logits_ce_is_ln2(self, rng):
        target = rng.integers(0, 2, size=(2, 4, 4))
        logits = Tensor(np.zeros((2, 2, 4, 4)))
        total = dice_ce_loss(logits, target).data.item()
        # soft dice of p = 0.5 everywhere, per class: (2 * 0.5 n_c + 1) / (0.5 N + n_c + 1)
        n = np.array([(target == c).sum() for c in range(2)])
        dice = ((n + 1) / (16 + n + 1)).mean()
        assert total == pytest.approx(0.5 * (math.log(2) + 1 - dice), rel=1e-12)

    def test_saturated_logits(self, rng):
        target = rng.integers(0, 3, size=(2, 5, 5))
        logits = 30.0 * (np.eye(3)[target].transpose(0, 3, 1, 2) * 2 - 1)
        assert dice_ce_loss(Tensor(logits), target).data.item() < 0.01

    def test_batch_permutation_invariance(self, rng):
        target = rng.integers(0, 2, size=(3, 4, 4))
        logits = rng.normal(size=(3, 2, 4, 4))
        perm = [2, 0, 1]
        a = dice_ce_loss(Tensor(logits), target).data.item()
        b = dice_ce_loss(Tensor(logits[perm]), target[perm]).data.item()
        assert a == pytest.approx(b, rel=1e-12)

    @pytest.mark.parametrize("bad", [2, -1])
    def test_out_of_range_class(self, bad):
        target = np.zeros((1, 2, 2), dtype=int)
        target[0, 0, 0] = bad
        with pytest.raises(DataError):
            dice_ce_loss(Tensor(np.zeros((1, 2, 2, 2))), target)

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            dice_ce_loss(Tensor(np.zeros((1, 2, 2, 2))), np.zeros((1, 3, 2), dtype=int))


class TestAugment:
    def test_all_off_is_identity(self, rng):
        img, mask = rng.normal(size=(1, 8, 8)), rng.integers(0, 2, size=(8, 8))
        a, b = augment(img, mask, AugmentFlags(flip=False, crop=False), rng)
        np.testing.assert_array_equal(a, img)
        np.testing.assert_array_equal(b, mask)

    def test_double_flip_is_identity(self, rng):
        img = rng.normal(size=(1, 6, 6))
        np.testing.assert_array_equal(img[..., ::-1][..., ::-1], img)
        np.testing.assert_array_equal(shift_crop(shift_crop(img, 0, 0), 0, 0), img)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_image_and_mask_move_together(self, seed):
        h = w = 16
        grid = np.arange(1, h * w + 1).reshape(h, w)
        img, mask = augment(grid[None].astype(np.float64), grid, AugmentFlags(max_shift=5),
                            np.random.default_rng(seed))
        assert img.shape == (1, h, w) and mask.shape == (h, w)
        np.testing.assert_array_equal(img[0], mask)

    def test_shift_crop_pads_with_zero(self):
        a = np.arange(1, 10).reshape(3, 3)
        np.testing.assert_array_equal(shift_crop(a, 1, -1), [[0, 0, 0], [2, 3, 0], [5, 6, 0]])

    def test_reproducible_by_seed(self, rng):
        img, mask = rng.normal(size=(1, 16, 16)), rng.integers(0, 2, size=(16, 16))
        a = augment(img, mask, AugmentFlags(), np.random.default_rng(7))
        b = augment(img, mask, AugmentFlags(), np.random.default_rng(7))
        np.testing.assert_array_equal(a[0], b[0])


class TestSynth:
    def test_deterministic(self):
        a, b = synth_dataset(5, 32, 11), synth_dataset(5, 32, 11)
        for (ia, ma), (ib, mb) in zip(a, b):
            assert ia.tobytes() == ib.tobytes() and ma.tobytes() == mb.tobytes()

    def test_masks_nonempty_and_not_full_with_calibrated_fraction(self):
        data = synth_dataset(100, 64, 0)
        fractions = [m.mean() for _, m in data]
        assert 0 < min(fractions) and max(fractions) < 1
        assert 0.05 <= np.mean(fractions) <= 0.6
        assert all(im.shape == (1, 64, 64) and im.dtype == np.float32 for im, _ in data)

    def test_noise_level(self):
        img, mask = synth_dataset(1, 64, 3)[0]
        assert np.std(img[0][mask == 0]) == pytest.approx(0.1, rel=0.15)

    def test_size_must_divide_by_16(self):
        with pytest.raises(ConfigError):
            synth_dataset(1, 40, 0)


class TestTrainLoop:
    def test_zero_iterations_leaves_initialization(self):
        cfg = build_variant("full", **TINY)
        init = ConvFormer(cfg, seed=3)
        result = train_loop(cfg, TrainConfig(max_iters=0, seed=3), synth_dataset(2, 32, 0))
        for (_, a), (_, b) in zip(init.store.state_items(), result.model.store.state_items()):
            assert np.array_equal(a, b)
        assert result.losses == []

    def test_same_seed_bitwise_identical(self):
        cfg = build_variant("full", **TINY)
        data = synth_dataset(4, 32, 0)
        runs = [train_loop(cfg, TrainConfig(max_iters=3, batch_size=2, seed=1), data) for _ in range(2)]
        assert runs[0].losses == runs[1].losses
        for (_, a), (_, b) in zip(runs[0].model.store.state_items(), runs[1].model.store.state_items()):
            assert a.tobytes() == b.tobytes()

    def test_lr_schedule_and_history(self):
        cfg = build_variant("no_detrans", **TINY)
        tc = TrainConfig(max_iters=4, batch_size=2, eval_every=2)
        result = train_loop(cfg, tc, synth_dataset(3, 32, 0))
        assert result.lrs == [poly_lr(i, tc) for i in range(4)]
        assert [it for it, _ in result.history] == [2, 4]
        assert result.model.store.training

    def test_nan_batch_aborts_with_seed(self):
        data = synth_dataset(2, 32, 0)
        data[1][0][0, 0, 0] = np.nan
        with pytest.raises(TrainingAborted) as err:
            train_loop(build_variant("no_detrans", **TINY), TrainConfig(max_iters=5, batch_size=2, seed=4), data)
        assert err.value.batch_seed == (4, 0)
        assert "batch seed (4, 0)" in str(err.value)

    def test_predict_restores_mode(self):
        model = ConvFormer(build_variant("no_detrans", **TINY)).train()
        out = predict(model, np.zeros((3, 1, 32, 32), dtype=np.float32), batch_size=2)
        assert out.shape == (3, 32, 32) and model.store.training
