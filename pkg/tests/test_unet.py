"""U-Net architecture, initialization, end-to-end gradients, checkpoints."""

import numpy as np
import pytest

from ptvseg import losses, unet
from ptvseg.errors import ConfigError, ShapeError
from ptvseg.unet import UNetConfig

from conftest import rel_err


def plan_param_count(base, depth, c_in=1, c_out=1):
    """Independent counting oracle: walk the layer plan, sum kh*kw*ci*co + co."""
    total = 0
    prev = c_in
    widths = [base * 2**l for l in range(depth)]
    for w in widths:  # encoder: two 3x3 convs per level
        total += 3 * 3 * prev * w + w
        total += 3 * 3 * w * w + w
        prev = w
    bott = base * 2**depth
    total += 3 * 3 * prev * bott + bott
    total += 3 * 3 * bott * bott + bott
    prev = bott
    for w in reversed(widths):  # decoder: 2x2 upconv + two 3x3 convs
        total += 2 * 2 * prev * w + w
        total += 3 * 3 * (2 * w) * w + w
        total += 3 * 3 * w * w + w
        prev = w
    total += 1 * 1 * prev * c_out + c_out
    return total


class TestArchitecture:
    def test_default_has_23_layers(self):
        model = unet.build_unet(UNetConfig(), seed=0)
        assert model.n_layers() == 23

    def test_layer_count_formula(self):
        for depth in (1, 2, 3, 4):
            model = unet.build_unet(UNetConfig(base_channels=1, depth=depth), seed=0)
            assert model.n_layers() == 5 * depth + 3

    def test_default_parameter_budget(self):
        # oracle first: the plan walk must itself reproduce the frozen figure
        oracle = plan_param_count(32, 4)
        assert oracle == 7_759_521
        assert oracle < 8_000_000
        assert unet.count_parameters(UNetConfig()) == oracle
        model = unet.build_unet(UNetConfig(), seed=1)
        assert model.n_parameters() == oracle

    @pytest.mark.parametrize("base,depth", [(1, 1), (2, 3), (8, 2), (3, 4)])
    def test_parameter_count_any_plan(self, base, depth):
        cfg = UNetConfig(base_channels=base, depth=depth)
        assert unet.count_parameters(cfg) == plan_param_count(base, depth)
        assert unet.build_unet(cfg, seed=2).n_parameters() == plan_param_count(base, depth)

    def test_channel_plan_doubles_and_halves(self):
        model = unet.build_unet(UNetConfig(base_channels=4, depth=3), seed=0)
        enc_out = [k2.c_out for _, k2 in model.encoder]
        assert enc_out == [4, 8, 16]
        dec_out = [k2.c_out for _, _, k2 in model.decoder]
        assert dec_out == [16, 8, 4]

    def test_invalid_config_rejected(self):
        with pytest.raises(ConfigError):
            UNetConfig(base_channels=0)
        with pytest.raises(ConfigError):
            UNetConfig(depth=0)
        with pytest.raises(ConfigError):
            UNetConfig(padding="reflect")


class TestInit:
    def test_reproducible(self):
        a = unet.init_weights((4, 3, 3, 3), seed=99)
        b = unet.init_weights((4, 3, 3, 3), seed=99)
        np.testing.assert_array_equal(a, b)
        c = unet.init_weights((4, 3, 3, 3), seed=100)
        assert (a != c).any()

    def test_he_std_within_ten_percent(self):
        w = unet.init_weights((50, 25, 3, 3), seed=7)  # ~1e5 draws, fan_in 225
        target = np.sqrt(2.0 / 225.0)
        assert abs(w.std() - target) / target < 0.10

    def test_biases_start_at_zero(self):
        model = unet.build_unet(UNetConfig(base_channels=2, depth=2), seed=5)
        for _, k in model.kernels():
            assert not k.bias.any()

    def test_build_deterministic(self):
        m1 = unet.build_unet(UNetConfig(base_channels=2, depth=2), seed=11)
        m2 = unet.build_unet(UNetConfig(base_channels=2, depth=2), seed=11)
        for p1, p2 in zip(m1.parameters(), m2.parameters()):
            np.testing.assert_array_equal(p1, p2)


class TestForward:
    def test_output_shape_matches_input(self):
        model = unet.build_unet(UNetConfig(base_channels=2, depth=4), seed=0)
        img = np.random.default_rng(0).random((1, 64, 64))
        probs, _ = unet.unet_forward(model, img)
        assert probs.shape == (1, 64, 64)

    def test_shape_contract_over_divisible_sizes(self):
        rng = np.random.default_rng(1)
        for depth in (1, 2, 3):
            model = unet.build_unet(UNetConfig(base_channels=1, depth=depth), seed=0)
            for _ in range(3):
                h = int(rng.integers(1, 5)) * 2**depth
                w = int(rng.integers(1, 5)) * 2**depth
                probs, _ = unet.unet_forward(model, rng.random((1, h, w)))
                assert probs.shape == (1, h, w)

    def test_zero_weights_give_half_everywhere(self):
        model = unet.build_unet(UNetConfig(base_channels=2, depth=2), seed=0)
        for p in model.parameters():
            p[...] = 0.0
        probs, _ = unet.unet_forward(model, np.random.default_rng(2).random((1, 16, 16)))
        np.testing.assert_array_equal(probs, np.full((1, 16, 16), 0.5))

    def test_outputs_in_open_unit_interval(self):
        model = unet.build_unet(UNetConfig(base_channels=2, depth=2), seed=3)
        probs, _ = unet.unet_forward(model, np.random.default_rng(3).random((1, 16, 16)))
        assert (probs > 0).all() and (probs < 1).all()

    def test_bit_identical_across_runs(self):
        model = unet.build_unet(UNetConfig(base_channels=2, depth=2), seed=4)
        img = np.random.default_rng(4).random((1, 16, 16))
        p1, _ = unet.unet_forward(model, img)
        p2, _ = unet.unet_forward(model, img.copy())
        np.testing.assert_array_equal(p1, p2)

    def test_indivisible_extent_rejected(self):
        model = unet.build_unet(UNetConfig(base_channels=1, depth=3), seed=0)
        with pytest.raises(ShapeError, match="extent"):
            unet.unet_forward(model, np.zeros((1, 20, 24)))

    def test_wrong_channels_rejected(self):
        model = unet.build_unet(UNetConfig(base_channels=1, depth=1), seed=0)
        with pytest.raises(ShapeError, match="channel"):
            unet.unet_forward(model, np.zeros((2, 8, 8)))


class TestBackward:
    def test_zero_upstream_grad(self):
        model = unet.build_unet(UNetConfig(base_channels=1, depth=1), seed=0)
        img = np.random.default_rng(5).random((1, 8, 8))
        probs, cache = unet.unet_forward(model, img)
        grads = unet.unet_backward(model, cache, np.zeros_like(probs))
        for g in unet.grad_arrays(grads):
            assert not g.any()

    def test_full_finite_difference_check(self):
        # tiny model, every parameter probed; the seed pair is chosen so no
        # pre-activation sits near a ReLU kink and no pool window is near a
        # tie (finite differences are meaningless across those)
        model = unet.build_unet(UNetConfig(base_channels=1, depth=1), seed=0)
        rng = np.random.default_rng(1000)
        img = rng.random((1, 8, 8))
        y = (rng.random((1, 8, 8)) > 0.5).astype(float)

        def total_loss():
            p, _ = unet.unet_forward(model, img)
            return losses.bce_loss(p, y).scalar

        probs, cache = unet.unet_forward(model, img)
        lv = losses.bce_loss(probs, y)
        analytic = unet.grad_arrays(unet.unet_backward(model, cache, lv.grad))

        h = 1e-5
        worst = 0.0
        for arr, an in zip(model.parameters(), analytic):
            flat, gflat = arr.reshape(-1), an.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                fp = total_loss()
                flat[i] = old - h
                fm = total_loss()
                flat[i] = old
                fd = (fp - fm) / (2 * h)
                denom = max(abs(fd), abs(gflat[i]), 1e-8)
                worst = max(worst, abs(fd - gflat[i]) / denom)
        assert worst < 1e-4

    def test_batch_gradient_is_sum_of_samples(self):
        model = unet.build_unet(UNetConfig(base_channels=1, depth=1), seed=7)
        rng = np.random.default_rng(7)
        imgs = [rng.random((1, 8, 8)) for _ in range(3)]
        ys = [(rng.random((1, 8, 8)) > 0.5).astype(float) for _ in range(3)]

        per_sample = []
        for img, y in zip(imgs, ys):
            probs, cache = unet.unet_forward(model, img)
            lv = losses.bce_loss(probs, y)
            per_sample.append(unet.grad_arrays(unet.unet_backward(model, cache, lv.grad)))
        summed = [sum(g[i] for g in per_sample) for i in range(len(per_sample[0]))]

        # two-path oracle: gradient of the summed loss in one accumulation pass
        acc = None
        for img, y in zip(imgs, ys):
            probs, cache = unet.unet_forward(model, img)
            lv = losses.bce_loss(probs, y)
            flat = unet.grad_arrays(unet.unet_backward(model, cache, lv.grad))
            acc = flat if acc is None else [a + b for a, b in zip(acc, flat)]
        for a, b in zip(summed, acc):
            assert rel_err(a, b) < 1e-12

    def test_training_reduces_loss_both_objectives(self):
        # 50 plain gradient-descent steps on one fixed sample
        rng = np.random.default_rng(8)
        img = rng.random((1, 16, 16))
        y = np.zeros((1, 16, 16))
        y[0, 4:12, 4:12] = 1.0
        for kind in (losses.BCEL, losses.DICE):
            model = unet.build_unet(UNetConfig(base_channels=2, depth=2), seed=9)
            params = model.parameters()

            def step_loss():
                _, cache = unet.unet_forward(model, img)
                lv = losses.loss_from_logits(cache.logits, y, kind)
                grads = unet.grad_arrays(unet.unet_backward_from_logits(model, cache, lv.grad))
                for p, g in zip(params, grads):
                    p -= 0.5 * g
                return lv.scalar

            first = step_loss()
            for _ in range(49):
                last = step_loss()
            assert last < first


class TestCheckpoint:
    def test_round_trip_identical_bytes(self, tmp_path):
        model = unet.build_unet(UNetConfig(base_channels=2, depth=2), seed=10)
        p1 = tmp_path / "a.bin"
        p2 = tmp_path / "b.bin"
        unet.save_checkpoint(model, p1)
        loaded = unet.load_checkpoint(p1)
        unet.save_checkpoint(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_round_trip_preserves_values(self, tmp_path):
        model = unet.build_unet(UNetConfig(base_channels=2, depth=2), seed=11)
        path = tmp_path / "c.bin"
        unet.save_checkpoint(model, path)
        loaded = unet.load_checkpoint(path)
        assert loaded.config == model.config
        assert loaded.seed == model.seed
        for a, b in zip(model.parameters(), loaded.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(ValueError, match="magic"):
            unet.load_checkpoint(path)
