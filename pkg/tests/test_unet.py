import hashlib
import pathlib

import numpy as np
import pytest

from oracles import finite_diff_grad, rel_err
from corticarve.losses import dice_loss, sdt_loss
from corticarve.unet import (
    CHECKPOINT_MAGIC,
    NonFiniteGradientError,
    StaleCacheError,
    UNetConfig,
    UNetModel,
    _conv3d_bwd,
    _conv3d_fwd,
    _maxpool2_bwd,
    _maxpool2_fwd,
    _softmax_ch,
    _upsample2_bwd,
    _upsample2_fwd,
    adam_step,
    load_checkpoint,
    save_checkpoint,
    unet_backward,
    unet_forward,
)

FIXTURES = pathlib.Path(__file__).parent / "fixtures"


def tiny_model(head="sdt", dtype=np.float64, seed=0):
    cfg = UNetConfig(
        levels=2, filters=(2, 3), convs_per_level=1, head=head, in_shape=(4, 4, 4)
    )
    return UNetModel.create(cfg, seed=seed, dtype=dtype)


class TestConfig:
    def test_defaults(self):
        cfg = UNetConfig()
        assert cfg.levels == 3
        assert cfg.filters == (8, 16, 32)
        assert cfg.convs_per_level == 2
        assert cfg.leaky_slope == 0.2
        assert cfg.head == "sdt"
        assert cfg.out_channels == 1
        assert UNetConfig(head="dice", in_shape=(8, 8, 8), levels=2, filters=(2, 2)).out_channels == 2

    def test_validation(self):
        with pytest.raises(ValueError, match="levels"):
            UNetConfig(levels=0, filters=())
        with pytest.raises(ValueError, match="filters list length"):
            UNetConfig(levels=2, filters=(8,))
        with pytest.raises(ValueError, match="head"):
            UNetConfig(head="segment")
        with pytest.raises(ValueError, match="multiples"):
            UNetConfig(levels=3, filters=(2, 2, 2), in_shape=(10, 8, 8))
        with pytest.raises(ValueError, match="leaky_slope"):
            UNetConfig(leaky_slope=1.5)

    def test_dict_round_trip(self):
        cfg = UNetConfig(levels=2, filters=(4, 6), head="dice", in_shape=(8, 8, 8))
        assert UNetConfig.from_dict(cfg.to_dict()) == cfg

    def test_param_count_hand_derived(self):
        # enc0 27*1*2+2 = 56, enc1 27*2*3+3 = 165, dec0 27*(2+3)*2+2 = 272,
        # head 2*1+1 = 3 -> 496
        assert tiny_model().num_params() == 496


class TestLayers:
    def test_conv_matches_finite_differences(self, rng):
        x = rng.normal(size=(4, 4, 4, 2))
        w = rng.normal(size=(3, 3, 3, 2, 3)) * 0.3
        b = rng.normal(size=3) * 0.1

        def loss():
            y, _ = _conv3d_fwd(x, w, b)
            return 0.5 * float((y * y).sum())

        y, col = _conv3d_fwd(x, w, b)
        gx, gw, gb = _conv3d_bwd(col, w, y, x.shape)
        assert rel_err(gx, finite_diff_grad(loss, x, 1e-6)) < 1e-6
        assert rel_err(gw, finite_diff_grad(loss, w, 1e-6)) < 1e-6
        assert rel_err(gb, finite_diff_grad(loss, b, 1e-6)) < 1e-6

    def test_conv_zero_padding_convention(self):
        # identity-center kernel reproduces the input, so padding is zero
        x = np.zeros((3, 3, 3, 1))
        x[1, 1, 1, 0] = 2.0
        w = np.zeros((3, 3, 3, 1, 1))
        w[1, 1, 1, 0, 0] = 1.0
        y, _ = _conv3d_fwd(x, w, np.zeros(1))
        assert np.array_equal(y, x)
        # shifted tap reads the zero pad at the border
        w2 = np.zeros((3, 3, 3, 1, 1))
        w2[0, 1, 1, 0, 0] = 1.0  # looks one voxel backwards along x
        y2, _ = _conv3d_fwd(np.ones((2, 2, 2, 1)), w2, np.zeros(1))
        assert np.all(y2[0] == 0.0) and np.all(y2[1] == 1.0)

    def test_maxpool_forward_and_routing(self, rng):
        x = rng.normal(size=(4, 4, 4, 2))
        y, am = _maxpool2_fwd(x)
        assert y.shape == (2, 2, 2, 2)
        brute = x.reshape(2, 2, 2, 2, 2, 2, 2).transpose(0, 2, 4, 6, 1, 3, 5).reshape(2, 2, 2, 2, 8)
        assert np.array_equal(y, brute.max(axis=-1))

        def loss():
            yy, _ = _maxpool2_fwd(x)
            return 0.5 * float((yy * yy).sum())

        gx = _maxpool2_bwd(y, am, x.shape)
        assert rel_err(gx, finite_diff_grad(loss, x, 1e-6)) < 1e-6

    def test_upsample_replicates_and_adjoint(self, rng):
        x = rng.normal(size=(2, 2, 2, 3))
        y = _upsample2_fwd(x)
        assert y.shape == (4, 4, 4, 3)
        assert np.array_equal(y[::2, ::2, ::2], x)
        assert np.array_equal(y[1::2, 1::2, 1::2], x)
        # adjoint identity <u, U x> == <U^T u, x>
        u = rng.normal(size=(4, 4, 4, 3))
        lhs = float((u * y).sum())
        rhs = float((_upsample2_bwd(u) * x).sum())
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_leaky_negative_branch_scales_by_slope(self):
        # one conv, one fixed negative pre-activation: gradient must carry 0.2
        cfg = UNetConfig(levels=1, filters=(1,), convs_per_level=1, in_shape=(2, 2, 2))
        model = UNetModel.create(cfg, seed=0, dtype=np.float64)
        for k in model.params:
            model.params[k][:] = 0.0
        model.params["enc0_conv0_w"][1, 1, 1, 0, 0] = 1.0
        model.params["head_w"][0, 0] = 1.0
        x = -np.ones((2, 2, 2, 1))
        pred, cache = unet_forward(model, x, train=True)
        assert np.allclose(pred, -0.2)  # forward leak
        grads = unet_backward(model, cache, np.ones((2, 2, 2)))
        # d pred / d w_center = 0.2 * x = -0.2 per voxel, 8 voxels
        assert grads["enc0_conv0_w"][1, 1, 1, 0, 0] == pytest.approx(-0.2 * 8)

    def test_softmax_normalizes(self, rng):
        z = rng.normal(size=(3, 3, 3, 2)) * 10
        p = _softmax_ch(z)
        assert np.allclose(p.sum(axis=-1), 1.0)
        assert np.all(p > 0)


class TestForward:
    def test_zero_parameters_give_zero_sdt(self):
        model = tiny_model()
        for k in model.params:
            model.params[k][:] = 0.0
        pred, _ = unet_forward(model, np.ones((4, 4, 4)))
        assert pred.shape == (4, 4, 4)
        assert np.all(pred == 0.0)

    def test_dice_head_outputs_probabilities(self, rng):
        model = tiny_model(head="dice")
        pred, _ = unet_forward(model, rng.random((4, 4, 4)))
        assert pred.shape == (4, 4, 4, 2)
        assert np.allclose(pred.sum(axis=-1), 1.0)

    def test_deterministic_creation_and_forward(self, rng):
        x = rng.random((4, 4, 4))
        a, _ = unet_forward(tiny_model(seed=5), x)
        b, _ = unet_forward(tiny_model(seed=5), x)
        assert np.array_equal(a, b)

    def test_wrong_input_shape(self):
        with pytest.raises(ValueError, match="input shape"):
            unet_forward(tiny_model(), np.zeros((5, 4, 4)))

    def test_accepts_scalar_volume(self, rng):
        from conftest import scalar_vol

        x = rng.random((4, 4, 4))
        a, _ = unet_forward(tiny_model(), scalar_vol(x))
        b, _ = unet_forward(tiny_model(), x)
        assert np.array_equal(a, b)

    def test_deeper_nets_keep_output_shape(self, rng):
        x32 = rng.random((32, 32, 32))
        for levels, filters in ((2, (2, 3)), (4, (2, 2, 3, 3)), (5, (2, 2, 2, 2, 2))):
            cfg = UNetConfig(levels=levels, filters=filters, convs_per_level=1, in_shape=(32, 32, 32))
            pred, _ = unet_forward(UNetModel.create(cfg, dtype=np.float32), x32.astype(np.float32))
            assert pred.shape == (32, 32, 32)

    def test_dtype_follows_model(self, rng):
        x = rng.random((4, 4, 4))
        p64, _ = unet_forward(tiny_model(dtype=np.float64), x)
        p32, _ = unet_forward(tiny_model(dtype=np.float32), x.astype(np.float32))
        assert p64.dtype == np.float64
        assert p32.dtype == np.float32


class TestEndToEndGradients:
    def test_sdt_loss_gradcheck_float64(self, rng):
        model = tiny_model(dtype=np.float64)
        x = rng.random((4, 4, 4))
        target = rng.normal(size=(4, 4, 4))
        weights = np.where(rng.random((4, 4, 4)) < 0.5, 0.1, 1.0)

        pred, cache = unet_forward(model, x, train=True)
        res = sdt_loss(pred, target, weights)
        # loss gradient is wrt its first argument, the prediction
        grads = unet_backward(model, cache, res.gradient)

        for name in ("enc0_conv0_w", "enc1_conv0_w", "dec0_conv0_w", "head_w", "head_b"):
            p = model.params[name]

            def loss():
                out, _ = unet_forward(model, x)
                return sdt_loss(out, target, weights).value

            num = finite_diff_grad(loss, p, 1e-6)
            assert rel_err(grads[name], num) < 1e-6, name

    def test_dice_loss_gradcheck_float64(self, rng):
        model = tiny_model(head="dice", dtype=np.float64)
        x = rng.random((4, 4, 4))
        mask = rng.random((4, 4, 4)) < 0.5

        pred, cache = unet_forward(model, x, train=True)
        res = dice_loss(pred, mask)
        grads = unet_backward(model, cache, res.gradient)

        for name in ("enc0_conv0_w", "dec0_conv0_b", "head_w"):
            p = model.params[name]

            def loss():
                out, _ = unet_forward(model, x)
                return dice_loss(out, mask).value

            num = finite_diff_grad(loss, p, 1e-6)
            assert rel_err(grads[name], num) < 1e-6, name

    def test_float32_gradients_track_float64(self, rng):
        m64 = tiny_model(dtype=np.float64, seed=3)
        m32 = tiny_model(dtype=np.float32, seed=3)
        x = rng.random((4, 4, 4))
        target = rng.normal(size=(4, 4, 4))
        w = np.ones((4, 4, 4))

        p64, c64 = unet_forward(m64, x, train=True)
        g64 = unet_backward(m64, c64, sdt_loss(p64, target, w).gradient)
        p32, c32 = unet_forward(m32, x.astype(np.float32), train=True)
        g32 = unet_backward(
            m32, c32, sdt_loss(p32, target.astype(np.float32), w.astype(np.float32)).gradient
        )
        for name in g64:
            assert rel_err(g32[name], g64[name]) < 1e-4, name


class TestBackwardGuards:
    def test_inference_cache_is_refused(self, rng):
        model = tiny_model()
        _, cache = unet_forward(model, rng.random((4, 4, 4)))
        assert cache is None
        with pytest.raises(StaleCacheError, match="train=True"):
            unet_backward(model, cache, np.zeros((4, 4, 4)))

    def test_cache_goes_stale_after_adam(self, rng):
        model = tiny_model(dtype=np.float32)
        x = rng.random((4, 4, 4)).astype(np.float32)
        pred, cache = unet_forward(model, x, train=True)
        grads = unet_backward(model, cache, pred)
        adam_step(model, grads, 1e-3)
        with pytest.raises(StaleCacheError, match="stale"):
            unet_backward(model, cache, pred)

    def test_gradient_shape_checked(self, rng):
        model = tiny_model()
        _, cache = unet_forward(model, rng.random((4, 4, 4)), train=True)
        with pytest.raises(ValueError, match="gradient shape"):
            unet_backward(model, cache, np.zeros((2, 2, 2)))


class TestAdam:
    def test_first_step_moves_by_lr_sign(self):
        model = tiny_model(dtype=np.float32)
        before = {k: v.copy() for k, v in model.params.items()}
        grads = {k: np.ones_like(v) for k, v in model.params.items()}
        adam_step(model, grads, lr=1e-3)
        for k, v in model.params.items():
            # first-step update is lr * g / (|g| + eps) = lr within 1e-8
            assert np.allclose(before[k] - v, 1e-3, atol=1e-6), k
        assert model.adam_t == 1

    def test_nonfinite_gradient_aborts_untouched(self):
        model = tiny_model(dtype=np.float32)
        before = {k: v.copy() for k, v in model.params.items()}
        grads = {k: np.ones_like(v) for k, v in model.params.items()}
        grads["head_w"] = np.full_like(model.params["head_w"], np.nan)
        with pytest.raises(NonFiniteGradientError, match="head_w"):
            adam_step(model, grads, 1e-3)
        assert model.adam_t == 0
        for k, v in model.params.items():
            assert np.array_equal(before[k], v)

    def test_missing_gradient_caught(self):
        model = tiny_model(dtype=np.float32)
        grads = {k: np.zeros_like(v) for k, v in model.params.items()}
        del grads["head_b"]
        with pytest.raises(KeyError, match="head_b"):
            adam_step(model, grads, 1e-3)

    def test_repeated_steps_deterministic(self, rng):
        def run():
            model = tiny_model(dtype=np.float32, seed=9)
            r = np.random.default_rng(4)
            for _ in range(5):
                x = r.random((4, 4, 4), dtype=np.float32)
                pred, cache = unet_forward(model, x, train=True)
                grads = unet_backward(model, cache, pred)
                adam_step(model, grads, 1e-3)
            return model

        a, b = run(), run()
        for k in a.params:
            assert np.array_equal(a.params[k], b.params[k])
            assert np.array_equal(a.adam_v[k], b.adam_v[k])


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path, rng):
        model = tiny_model(dtype=np.float32, seed=21)
        x = rng.random((4, 4, 4)).astype(np.float32)
        pred, cache = unet_forward(model, x, train=True)
        adam_step(model, unet_backward(model, cache, pred), 1e-3)
        state = {"step": 17, "lr": 5e-5}
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path, train_state=state)

        loaded, got_state = load_checkpoint(path)
        assert got_state == state
        assert loaded.config == model.config
        assert loaded.adam_t == model.adam_t
        for k in model.params:
            assert np.array_equal(loaded.params[k], model.params[k])
            assert np.array_equal(loaded.adam_m[k], model.adam_m[k])
            assert np.array_equal(loaded.adam_v[k], model.adam_v[k])
        a, _ = unet_forward(model, x)
        b, _ = unet_forward(loaded, x)
        assert np.array_equal(a, b)

    def test_train_state_defaults_to_none(self, tmp_path):
        model = tiny_model(dtype=np.float32)
        save_checkpoint(model, tmp_path / "m.ckpt")
        _, state = load_checkpoint(tmp_path / "m.ckpt")
        assert state is None

    def test_float64_model_refused(self, tmp_path):
        with pytest.raises(ValueError, match="float32"):
            save_checkpoint(tiny_model(dtype=np.float64), tmp_path / "m.ckpt")

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "m.ckpt"
        p.write_bytes(b"ELF\x00" + b"\x00" * 64)
        with pytest.raises(ValueError, match="bad magic"):
            load_checkpoint(p)

    def test_unsupported_version(self, tmp_path):
        model = tiny_model(dtype=np.float32)
        p = tmp_path / "m.ckpt"
        save_checkpoint(model, p)
        raw = bytearray(p.read_bytes())
        raw[4:8] = (99).to_bytes(4, "little")
        p.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="version 99"):
            load_checkpoint(p)

    def test_magic_constant(self):
        assert CHECKPOINT_MAGIC == b"CRTC"


class TestGoldenForward:
    def test_fixture_hashes_intact(self):
        manifest = (FIXTURES / "MANIFEST.sha256").read_text().strip().splitlines()
        for line in manifest:
            digest, name = line.split()
            got = hashlib.sha256((FIXTURES / name).read_bytes()).hexdigest()
            assert got == digest, f"fixture {name} drifted"

    def test_committed_checkpoint_reproduces_output(self):
        model, state = load_checkpoint(FIXTURES / "golden_unet.ckpt")
        assert state == {"note": "fixture"}
        x = np.load(FIXTURES / "golden_input.npy")
        want = np.load(FIXTURES / "golden_output.npy")
        got, _ = unet_forward(model, x)
        assert got.shape == want.shape
        assert np.allclose(got, want, atol=1e-6)
