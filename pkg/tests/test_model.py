import numpy as np
import pytest

from miavsr.autodiff import Tape
from miavsr.formats import load_checkpoint, save_checkpoint
from miavsr.model import (ConfigError, ModelConfig, ModelParams, bilinear_upsample,
                          charbonnier_loss, forward_sequence, reconstruct, shallow_extract,
                          total_loss)
from miavsr.tensor import Tensor, conv2d, pixel_shuffle

from conftest import frames


def bilinear_oracle(img, s):
    H, W, c = img.shape
    out = np.zeros((H * s, W * s, c))
    for i in range(H * s):
        y = min(max((i + 0.5) / s - 0.5, 0.0), H - 1)
        y0 = int(np.floor(y))
        y1, fy = min(y0 + 1, H - 1), y - y0
        for j in range(W * s):
            x = min(max((j + 0.5) / s - 0.5, 0.0), W - 1)
            x0 = int(np.floor(x))
            x1, fx = min(x0 + 1, W - 1), x - x0
            out[i, j] = ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
                         + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])
    return out


class TestConfig:
    def test_defaults_are_desk_scale(self, desk_cfg):
        assert (desk_cfg.scale, desk_cfg.channels, desk_cfg.window, desk_cfg.heads) == (4, 32, 4, 4)
        assert (desk_cfg.M, desk_cfg.N, desk_cfg.skip_interval) == (2, 4, 2)

    @pytest.mark.parametrize("bad", [{"scale": 5}, {"channels": 30, "heads": 4},
                                     {"N": 3, "skip_interval": 2}, {"dtype": "float16"},
                                     {"lam": -1.0}, {"window": 0}, {"channels": 32.0}])
    def test_rejects(self, bad):
        with pytest.raises(ConfigError):
            ModelConfig(**bad)

    def test_unknown_field(self):
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"chanels": 16})

    def test_dict_roundtrip(self, tiny_cfg):
        assert ModelConfig.from_dict(tiny_cfg.to_dict()) == tiny_cfg

    def test_full_scale_is_valid(self):
        cfg = ModelConfig.full_scale()
        assert cfg.channels == 120 and cfg.N == 24 and cfg.M == 4

    def test_params_must_match(self, tiny_cfg, tiny_params):
        with pytest.raises(ConfigError):
            forward_sequence([np.zeros((8, 8, 3))], tiny_cfg.replace(channels=16), tiny_params)


class TestShallowAndReconstruct:
    def test_zero_frame(self, tiny_params):
        out = shallow_extract(Tensor(np.zeros((5, 6, 3), dtype=np.float32)), tiny_params)
        assert out.shape == (5, 6, 8) and not out.data.any()

    def test_matches_conv(self, rng, tiny_params):
        f = Tensor(rng.random((5, 6, 3)).astype(np.float32))
        ref = conv2d(f, tiny_params.shallow_w, tiny_params.shallow_b)
        np.testing.assert_array_equal(shallow_extract(f, tiny_params).data, ref.data)

    def test_zero_features_give_upsampled_input(self, rng, tiny_params):
        lr = rng.random((4, 5, 3)).astype(np.float32)
        out = reconstruct(Tensor(np.zeros((4, 5, 8), np.float32)), Tensor(lr), tiny_params, 2)
        assert out.shape == (8, 10, 3)
        np.testing.assert_allclose(out.data, bilinear_oracle(lr, 2), atol=1e-6)

    def test_without_residual_is_pixel_shuffle(self, rng, tiny_params):
        feat = Tensor(rng.normal(size=(4, 4, 8)).astype(np.float32))
        out = reconstruct(feat, Tensor(np.ones((4, 4, 3))), tiny_params, 2, global_residual=False)
        ref = pixel_shuffle(conv2d(feat, tiny_params.recon_w, tiny_params.recon_b), 2)
        np.testing.assert_array_equal(out.data, ref.data)

    @pytest.mark.parametrize("s", [2, 3, 4])
    def test_bilinear_oracle(self, rng, s):
        img = rng.random((3, 5, 2))
        np.testing.assert_allclose(bilinear_upsample(img, s), bilinear_oracle(img, s), atol=1e-12)

    def test_bilinear_preserves_constants(self):
        np.testing.assert_allclose(bilinear_upsample(np.full((3, 3, 1), 0.7), 4), 0.7)


class TestCharbonnier:
    def test_equal_is_eps(self, rng):
        x = Tensor(rng.random((4, 4, 3)))
        assert charbonnier_loss(x, x).item() == pytest.approx(1e-3, rel=1e-12)

    def test_single_pixel(self):
        pred, target = np.zeros((1, 1, 3)), np.zeros((1, 1, 3))
        pred[0, 0, 0] = 1.0
        assert charbonnier_loss(Tensor(pred), Tensor(target)).item() == pytest.approx(
            np.sqrt(1 + 1e-6), rel=1e-14)

    def test_rgb_norm_per_pixel(self):
        pred = np.zeros((1, 1, 3))
        pred[0, 0] = [3.0, 4.0, 0.0]
        val = charbonnier_loss(Tensor(pred), Tensor(np.zeros((1, 1, 3))), eps=0.0).item()
        assert val == pytest.approx(5.0)

    def test_lower_bound(self, rng):
        a, b = Tensor(rng.random((3, 3, 3))), Tensor(rng.random((3, 3, 3)))
        assert charbonnier_loss(a, b).item() >= 1e-3

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            charbonnier_loss(Tensor(np.zeros((2, 2, 3))), Tensor(np.zeros((2, 3, 3))))


class TestTotalLoss:
    def setup_method(self):
        rng = np.random.default_rng(5)
        self.pred = [Tensor(rng.random((4, 4, 3)).astype(np.float32))]
        self.target = [Tensor(rng.random((4, 4, 3)).astype(np.float32))]

    def test_lambda_zero(self):
        lb = total_loss(self.pred, self.target, [Tensor(np.ones((4, 1), np.float32))], 0.0)
        assert lb.total.item() == lb.l_sr.item()

    def test_zero_masks(self):
        lb = total_loss(self.pred, self.target, [Tensor(np.zeros((4, 1), np.float32))], 5e-4)
        assert lb.l_mask.item() == 0 and lb.total.item() == lb.l_sr.item()

    def test_half_mask_arithmetic(self):
        m = Tensor(np.array([[1.0], [0.0]], np.float32))
        lb = total_loss(self.pred, self.target, [m], 5e-4)
        assert lb.l_mask.item() == 0.5
        expected = np.float32(lb.l_sr.item()) + np.float32(5e-4) * np.float32(0.5)
        assert lb.total.item() == expected
        assert lb.total.item() == pytest.approx(lb.l_sr.item() + 2.5e-4, abs=1e-7)

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            total_loss(self.pred, self.target, [], -1.0)


class TestForward:
    def test_single_frame(self, rng, tiny_cfg, tiny_params):
        res = forward_sequence(frames(rng, 1, 8, 8), tiny_cfg, tiny_params, "masked")
        assert res.hr[0].shape == (16, 16, 3) and np.isfinite(res.hr[0].data).all()
        assert res.loss is None

    def test_empty(self, tiny_cfg, tiny_params):
        with pytest.raises(ValueError):
            forward_sequence([], tiny_cfg, tiny_params)

    def test_unknown_mode(self, rng, tiny_cfg, tiny_params):
        with pytest.raises(ValueError):
            forward_sequence(frames(rng, 1, 8, 8), tiny_cfg, tiny_params, "sparse")

    def test_unmasked_masks_all_ones(self, rng, tiny_cfg, tiny_params):
        res = forward_sequence(frames(rng, 4, 8, 8), tiny_cfg, tiny_params)
        assert len(res.records) == 4 * 2 * 2 and res.mean_alpha == 1.0

    def test_saturation_matches_unmasked(self, rng, tiny_cfg, tiny_params):
        xs = frames(rng, 5, 8, 8)
        a = forward_sequence(xs, tiny_cfg, tiny_params)
        b = forward_sequence(xs, tiny_cfg, tiny_params, "masked", saturate=True)
        for u, v in zip(a.hr, b.hr):
            assert np.abs(u.data - v.data).max() <= 1e-6

    def test_static_handcrafted(self, rng, desk_cfg):
        p = ModelParams.init(desk_cfg)
        xs = [rng.random((16, 16, 3)).astype(np.float32)] * 5
        h = forward_sequence(xs, desk_cfg, p, "handcrafted")
        u = forward_sequence(xs, desk_cfg, p)
        late = [r.alpha for r in h.records if r.step >= 2]
        assert late and max(late) < 0.05
        for t in range(5):
            assert np.abs(h.hr[t].data - u.hr[t].data).max() < 1e-3

    def test_unmasked_is_deterministic(self, rng, tiny_cfg, tiny_params):
        xs = frames(rng, 3, 8, 8)
        a = forward_sequence(xs, tiny_cfg, tiny_params)
        b = forward_sequence(xs, tiny_cfg, tiny_params)
        for u, v in zip(a.hr, b.hr):
            np.testing.assert_array_equal(u.data, v.data)

    def test_training_mode_seeded(self, rng, tiny_cfg, tiny_params):
        xs, ys = frames(rng, 4, 8, 8), frames(rng, 4, 16, 16)

        def run():
            return forward_sequence(xs, tiny_cfg, tiny_params, "masked", targets=ys, training=True,
                                    rng=np.random.default_rng(9))
        a, b = run(), run()
        assert a.loss.total.item() == b.loss.total.item()
        for u, v in zip(a.hr, b.hr):
            np.testing.assert_array_equal(u.data, v.data)

    def test_masked_flops_not_above_unmasked(self, rng, tiny_cfg):
        p = ModelParams.init(tiny_cfg)
        xs = frames(rng, 5, 8, 8)
        u = forward_sequence(xs, tiny_cfg, p)
        h = forward_sequence(xs, tiny_cfg, p, "handcrafted", threshold=0.5)

        def net(res, t):
            return res.ledger.frame_total(t) - res.ledger.select(
                frame=t, kinds=("mask_predictor",)).flops
        for t in range(5):
            full = all(r.alpha == 1 for r in h.masks(t))
            assert net(h, t) <= net(u, t)
            assert (net(h, t) == net(u, t)) == full
        assert any(r.alpha < 1 for r in h.records)

    def test_predictor_receives_gradient(self, rng, tiny_cfg, tiny_params):
        cfg = tiny_cfg.replace(lam=0.1)
        xs, ys = frames(rng, 4, 8, 8), frames(rng, 4, 16, 16)
        named = tiny_params.predictor_params()
        with Tape(named) as tape:
            res = forward_sequence(xs, cfg, tiny_params, "masked", targets=ys, training=True,
                                   rng=np.random.default_rng(2))
        grads = tape.backward(res.loss.total)
        assert max(np.abs(g).max() for g in grads.values()) > 0
        for p in named.values():
            p.requires_grad = False


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, tiny_cfg, rng):
        p = ModelParams.init(tiny_cfg, seed=4)
        save_checkpoint(tmp_path / "ck", tiny_cfg.to_dict(),
                        {k: v.data for k, v in p.named().items()})
        cfg, tensors = load_checkpoint(tmp_path / "ck")
        q = ModelParams.init(tiny_cfg, seed=5)
        q.load_named(tensors)
        assert ModelConfig.from_dict(cfg) == tiny_cfg
        xs = frames(rng, 2, 8, 8)
        a, b = forward_sequence(xs, tiny_cfg, p), forward_sequence(xs, tiny_cfg, q)
        np.testing.assert_array_equal(a.hr[1].data, b.hr[1].data)

    def test_mismatched_names(self, tiny_cfg):
        p = ModelParams.init(tiny_cfg)
        tensors = {k: v.data for k, v in p.named().items()}
        tensors.pop("recon.bias")
        with pytest.raises(ConfigError):
            p.load_named(tensors)
