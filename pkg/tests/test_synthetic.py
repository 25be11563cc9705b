import numpy as np
import pytest

from miavsr.synthetic import SyntheticSpec, box_downsample, gen_synthetic, render_hr


class TestSpec:
    @pytest.mark.parametrize("bad", [{"pattern": "waves"}, {"H": 30}, {"fraction": 1.5},
                                     {"velocity": (0.5, 0)}, {"noise": -0.1}, {"T": 0}])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            SyntheticSpec(**bad)


class TestRender:
    def test_static_frames_identical(self):
        hr = render_hr(SyntheticSpec(T=4, H=16, W=16, pattern="static"))
        assert all(np.array_equal(hr[0], f) for f in hr)

    def test_moving_square_shifts_one_row(self):
        hr = render_hr(SyntheticSpec(T=4, H=16, W=16, pattern="moving_square", velocity=(1, 0)))
        for t in range(1, 4):
            np.testing.assert_array_equal(hr[t], np.roll(hr[t - 1], 1, axis=0))
            assert not np.array_equal(hr[t], hr[t - 1])

    @pytest.mark.parametrize("fraction", [0.0, 0.25, 0.5, 1.0])
    def test_mixed_changed_fraction(self, fraction):
        hr = render_hr(SyntheticSpec(T=5, H=16, W=16, pattern="mixed", fraction=fraction))
        for a, b in zip(hr, hr[1:]):
            changed = (a != b).any(axis=-1)
            assert changed.sum() == round(fraction * 256)

    def test_range(self):
        for pattern in ("static", "moving_square", "mixed"):
            hr = render_hr(SyntheticSpec(T=3, H=16, W=16, pattern=pattern))
            assert all(f.min() >= 0 and f.max() <= 1 for f in hr)


class TestGenerate:
    def test_box_downsample(self):
        img = np.arange(16.0).reshape(4, 4, 1)
        np.testing.assert_array_equal(box_downsample(img, 2)[..., 0], [[2.5, 4.5], [10.5, 12.5]])

    def test_shapes_and_dtype(self):
        lr, hr = gen_synthetic(SyntheticSpec(T=3, H=32, W=16, scale=4))
        assert lr[0].shape == (8, 4, 3) and hr[0].shape == (32, 16, 3)
        assert lr[0].dtype == hr[0].dtype == np.float32

    def test_deterministic(self):
        spec = SyntheticSpec(T=3, H=16, W=16, noise=0.05, seed=3)
        (a, _), (b, _) = gen_synthetic(spec), gen_synthetic(spec)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_noise_only_on_low_resolution(self):
        clean = gen_synthetic(SyntheticSpec(T=2, H=16, W=16, seed=3))
        noisy = gen_synthetic(SyntheticSpec(T=2, H=16, W=16, seed=3, noise=0.05))
        np.testing.assert_array_equal(clean[1][0], noisy[1][0])
        assert not np.array_equal(clean[0][0], noisy[0][0])
