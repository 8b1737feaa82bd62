import numpy as np
import pytest
from hypothesis import given, strategies as st

from planesweep.errors import DataFormatError
from planesweep.features import (FeatureMap, FeaturePyramid, downsample_bilinear,
                                 downsample_nearest, load_feature_map, rgb_features,
                                 sample_bilinear, sample_bilinear_grad,
                                 sample_bilinear_grid, save_feature_map)


def random_map(rng, h=7, w=9, c=3):
    return FeatureMap(rng.normal(0, 1, (h, w, c)))


class TestFeatureMap:
    def test_rejects_non_finite(self):
        data = np.zeros((2, 2, 1))
        data[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            FeatureMap(data)

    def test_rejects_wrong_rank(self):
        with pytest.raises(ValueError):
            FeatureMap(np.zeros((4, 4)))

    def test_immutable(self, rng):
        fm = random_map(rng)
        with pytest.raises(ValueError):
            fm.data[0, 0, 0] = 1.0


class TestRgbFeatures:
    def test_constant_image_at_mean_is_zero(self):
        img = np.full((4, 5, 3), 100.0)
        fm = rgb_features(img, (100.0, 100.0, 100.0))
        assert np.all(fm.data == 0.0)

    def test_no_rescaling(self):
        img = np.full((2, 2, 3), 255.0)
        fm = rgb_features(img, (100.0, 100.0, 100.0))
        assert np.all(fm.data == 155.0)


def scalar_bilinear_oracle(data, x, y):
    """Independent per-scalar interpolation: plain Python loops."""
    h, w, c = data.shape
    x0 = 0 if w == 1 else min(int(np.floor(x)), w - 2)
    y0 = 0 if h == 1 else min(int(np.floor(y)), h - 2)
    fx, fy = x - x0, y - y0
    out = []
    for ch in range(c):
        a = data[y0, x0, ch] * (1 - fx) + data[y0, min(x0 + 1, w - 1), ch] * fx
        b = data[min(y0 + 1, h - 1), x0, ch] * (1 - fx) + data[min(y0 + 1, h - 1), min(x0 + 1, w - 1), ch] * fx
        out.append(a * (1 - fy) + b * fy)
    return np.array(out)


class TestBilinear:
    def test_integer_coordinate_exact(self, rng):
        fm = random_map(rng)
        assert np.array_equal(sample_bilinear(fm, (3, 2)), fm.data[2, 3])

    def test_border_coordinate_exact(self, rng):
        fm = random_map(rng)
        v = sample_bilinear(fm, (fm.width - 1, fm.height - 1))
        assert np.allclose(v, fm.data[-1, -1], atol=0, rtol=0)

    def test_midpoint_average(self, rng):
        fm = random_map(rng)
        v = sample_bilinear(fm, (2.5, 4.0))
        assert np.allclose(v, (fm.data[4, 2] + fm.data[4, 3]) / 2, atol=1e-15)

    def test_matches_scalar_oracle(self, rng):
        fm = random_map(rng, 11, 13, 4)
        for _ in range(200):
            x = rng.uniform(0, fm.width - 1)
            y = rng.uniform(0, fm.height - 1)
            got = sample_bilinear(fm, (x, y))
            want = scalar_bilinear_oracle(fm.data, x, y)
            assert np.abs(got - want).max() < 1e-12

    def test_out_of_range_raises(self, rng):
        fm = random_map(rng)
        with pytest.raises(ValueError):
            sample_bilinear(fm, (fm.width - 0.5, 0.0))

    @given(st.floats(0, 1), st.floats(0, 1), st.floats(-2, 2), st.floats(-2, 2))
    def test_linearity_in_map(self, fx, fy, alpha, beta):
        rng = np.random.default_rng(7)
        a = rng.normal(0, 1, (4, 5, 2))
        b = rng.normal(0, 1, (4, 5, 2))
        u = (fx * 4, fy * 3)
        lhs = sample_bilinear(FeatureMap(alpha * a + beta * b), u)
        rhs = (alpha * sample_bilinear(FeatureMap(a), u)
               + beta * sample_bilinear(FeatureMap(b), u))
        assert np.abs(lhs - rhs).max() < 1e-12

    def test_channel_independence(self, rng):
        a = rng.normal(0, 1, (5, 6, 3))
        b = a.copy()
        b[:, :, 1] = rng.normal(0, 1, (5, 6))  # perturb only channel 1
        u = (2.7, 3.1)
        va = sample_bilinear(FeatureMap(a), u)
        vb = sample_bilinear(FeatureMap(b), u)
        assert va[0] == vb[0] and va[2] == vb[2] and va[1] != vb[1]

    def test_grid_matches_scalar(self, rng):
        fm = random_map(rng, 9, 8, 3)
        xs = rng.uniform(0, fm.width - 1, (4, 6))
        ys = rng.uniform(0, fm.height - 1, (4, 6))
        got = sample_bilinear_grid(fm, xs, ys)
        for i in np.ndindex(xs.shape):
            assert np.abs(got[i] - sample_bilinear(fm, (xs[i], ys[i]))).max() < 1e-12


class TestBilinearGrad:
    def test_integer_coordinate_one_hot(self, rng):
        fm = random_map(rng)
        _, texels, w = sample_bilinear_grad(fm, (3, 2))
        assert w[0] == 1.0 and np.all(w[1:] == 0.0)
        assert texels[0] == (2, 3)

    @given(st.floats(0, 1), st.floats(0, 1))
    def test_weights_nonnegative_sum_one(self, fx, fy):
        rng = np.random.default_rng(3)
        fm = FeatureMap(rng.normal(0, 1, (5, 5, 2)))
        _, _, w = sample_bilinear_grad(fm, (fx * 4, fy * 4))
        assert np.all(w >= 0)
        assert abs(w.sum() - 1.0) < 1e-12

    def test_matches_finite_differences(self, rng):
        fm = random_map(rng, 6, 6, 2)
        u = (2.3, 4.6)
        _, texels, w = sample_bilinear_grad(fm, u)
        h = 1e-4
        for (ty, tx), weight in zip(texels, w):
            dp = np.array(fm.data)
            dp[ty, tx, 0] += h
            dm = np.array(fm.data)
            dm[ty, tx, 0] -= h
            fd = (sample_bilinear(FeatureMap(dp), u)[0]
                  - sample_bilinear(FeatureMap(dm), u)[0]) / (2 * h)
            assert abs(fd - weight) < 1e-6 * max(1.0, abs(weight))


class TestFileFormat:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        data = rng.normal(0, 1, (5, 7, 3)).astype(np.float32)
        fm = FeatureMap(data.astype(np.float64))
        path = tmp_path / "m.fmap"
        save_feature_map(fm, path)
        loaded = load_feature_map(path)
        assert np.array_equal(loaded.data, fm.data)
        # and the file itself is reproduced byte for byte
        save_feature_map(loaded, tmp_path / "m2.fmap")
        assert (tmp_path / "m.fmap").read_bytes() == (tmp_path / "m2.fmap").read_bytes()

    def test_truncated_file_rejected(self, tmp_path, rng):
        fm = random_map(rng)
        path = tmp_path / "m.fmap"
        save_feature_map(fm, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(DataFormatError):
            load_feature_map(path)

    def test_channel_mismatch_rejected(self, tmp_path, rng):
        fm = random_map(rng, 4, 4, 31)
        path = tmp_path / "m.fmap"
        save_feature_map(fm, path)
        blob = bytearray(path.read_bytes())
        blob[12:16] = (32).to_bytes(4, "little")  # claim 32 channels
        path.write_bytes(bytes(blob))
        with pytest.raises(DataFormatError):
            load_feature_map(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "m.fmap"
        path.write_bytes(b"JUNKxxxxxxxxxxxxxxxx")
        with pytest.raises(DataFormatError):
            load_feature_map(path)

    def test_non_finite_payload_rejected(self, tmp_path):
        path = tmp_path / "m.fmap"
        save_feature_map(FeatureMap(np.ones((2, 2, 1))), path)
        blob = bytearray(path.read_bytes())
        blob[16:20] = np.array([np.inf], dtype="<f4").tobytes()
        path.write_bytes(bytes(blob))
        with pytest.raises(DataFormatError):
            load_feature_map(path)


class TestPyramid:
    def test_level_dims_validated(self, rng):
        f0 = FeatureMap(rng.normal(0, 1, (8, 8, 2)))
        f1 = FeatureMap(rng.normal(0, 1, (4, 4, 2)))
        FeaturePyramid((f0, f1), (2, 4))
        with pytest.raises(ValueError):
            FeaturePyramid((f0, f0), (2, 4))

    def test_odd_dims_round_up(self, rng):
        f0 = FeatureMap(rng.normal(0, 1, (7, 9, 2)))
        f1 = FeatureMap(rng.normal(0, 1, (4, 5, 2)))
        FeaturePyramid((f0, f1), (2, 4))


class TestResampling:
    def test_nearest_downsample_block_centers(self):
        arr = np.arange(16).reshape(4, 4)
        out = downsample_nearest(arr, 2)
        assert out.shape == (2, 2)
        # source index floor((i+0.5)*2) = 2i+1
        assert np.array_equal(out, arr[1::2, 1::2])

    def test_nearest_downsample_odd_clamps(self):
        arr = np.arange(5)[:, None] * np.ones((1, 5))
        out = downsample_nearest(arr, 2)
        assert out.shape == (3, 3)
        assert out[-1, -1] == 4  # clamped to the last row/col

    def test_bilinear_downsample_constant(self):
        img = np.full((6, 8, 3), 3.5)
        out = downsample_bilinear(img, 3, 4)
        assert out.shape == (3, 4, 3)
        assert np.allclose(out, 3.5)
