import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from evloop.errors import FullCoverageError
from evloop.imaging import (
    N_BINS,
    PreprocessSpec,
    binarize_otsu,
    contrast_enhance,
    extract_fov_bbox,
    inpaint,
    normalize_minmax,
    otsu_cut,
    preprocess,
    quantize,
    resize_bilinear,
    warp_mask,
)

from oracles import otsu_bruteforce


def disc_image(size=128, radius=40, center=(64, 64), value=0.8):
    yy, xx = np.mgrid[:size, :size]
    inside = np.hypot(yy - center[0], xx - center[1]) <= radius
    return np.repeat((inside * value)[..., None], 3, axis=2)


def ramp(h=64, w=64):
    yy, xx = np.mgrid[:h, :w]
    return np.stack([0.2 + 0.5 * xx / w, 0.3 + 0.4 * yy / h, 0.1 + 0.3 * (xx + yy) / (h + w)], axis=-1)


class TestFov:
    def test_disc_bbox_matches_scan(self):
        img = disc_image()
        box = extract_fov_bbox(img)
        # brute-force scan of bright pixels
        coords = [(y, x) for y in range(128) for x in range(128) if img[y, x].mean() > 0.06]
        ys, xs = zip(*coords)
        assert (box.top, box.left, box.bottom - 1, box.right - 1) == (min(ys), min(xs), max(ys), max(xs))
        for got, want in zip((box.top, box.left, box.bottom, box.right), (24, 24, 104, 104)):
            assert abs(got - want) <= 1

    def test_all_bright_and_all_black_give_full_frame(self):
        for img in (np.ones((20, 30, 3)), np.zeros((20, 30, 3))):
            box = extract_fov_bbox(img)
            assert (box.top, box.left, box.bottom, box.right) == (0, 0, 20, 30)


class TestResize:
    def test_identity(self):
        img = np.random.default_rng(0).random((17, 23, 3))
        assert np.array_equal(resize_bilinear(img, (17, 23)), img)

    def test_constant(self):
        out = resize_bilinear(np.full((5, 7, 3), 0.3), (11, 4))
        np.testing.assert_allclose(out, 0.3, atol=1e-15)

    def test_checkerboard_center(self):
        out = resize_bilinear(np.array([[0.0, 1.0], [1.0, 0.0]]), 3)
        assert out[1, 1] == pytest.approx(0.5)
        assert out.shape == (3, 3)

    def test_zero_target(self):
        with pytest.raises(ValueError):
            resize_bilinear(np.zeros((4, 4)), 0)


class TestContrast:
    def test_constant_image_goes_mid_gray(self):
        out = contrast_enhance(np.full((64, 64, 3), 0.37))
        np.testing.assert_allclose(out, 0.5, atol=1e-9)

    def test_impulse_is_amplified(self):
        spec = PreprocessSpec(target_size=32, blur_sigma_fraction=0.25)
        img = np.full((9, 9, 3), 0.4)
        img[4, 4] = 0.5
        # fov radius 4 -> sigma 1; the centre is well inside the fade ring
        out = contrast_enhance(img, spec, fov=(4, 4, 4))
        blurred = ndimage.gaussian_filter(img, (1, 1, 0), mode="nearest")
        expected = np.clip(4 * img[4, 4] - 4 * blurred[4, 4] + 0.5, 0, 1)
        np.testing.assert_allclose(out[4, 4], expected)
        peak_contrast_in = img[4, 4, 0] - img[0, 0, 0]
        peak_contrast_out = out[4, 4, 0] - out[0, 0, 0]
        assert peak_contrast_out > peak_contrast_in

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 1000))
    def test_bounds(self, seed):
        img = np.random.default_rng(seed).random((40, 40, 3))
        out = contrast_enhance(img)
        assert out.min() >= 0 and out.max() <= 1 and np.isfinite(out).all()

    def test_preprocess_output_and_mask_geometry(self):
        img = disc_image(100, 30, (50, 45))
        out, geom = preprocess(img, PreprocessSpec(target_size=64), return_geometry=True)
        assert out.shape == (64, 64, 3)
        assert 0 <= out.min() and out.max() <= 1
        mask = np.zeros((100, 100), bool)
        mask[48:53, 43:48] = True
        warped = warp_mask(mask, geom)
        cy, cx = np.argwhere(warped).mean(axis=0)
        assert abs(cy - 32) <= 2 and abs(cx - 32) <= 2


class TestOtsu:
    def test_bimodal_half_and_half(self):
        m = np.zeros((10, 10))
        m[:, 5:] = 1.0
        res = binarize_otsu(m)
        assert np.array_equal(res.mask, m == 1.0)
        assert not res.degenerate

    def test_constant_map_is_degenerate(self):
        res = binarize_otsu(np.full((6, 6), 0.3))
        assert res.degenerate and not res.mask.any()
        mask, th = res
        assert not mask.any()

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_bruteforce(self, seed):
        rng = np.random.default_rng(seed)
        m = rng.gamma(rng.uniform(0.3, 3), size=(12, 12))
        res = binarize_otsu(m)
        bins = quantize(normalize_minmax(m))
        k = otsu_bruteforce(bins)
        assert res.th_bin == k / N_BINS
        assert np.array_equal(res.mask, bins >= k)

    def test_region_restricts_histogram_and_mask(self):
        m = np.zeros((8, 8))
        m[2:6, 2:6] = np.arange(16).reshape(4, 4)
        region = np.zeros((8, 8), bool)
        region[2:6, 2:6] = True
        res = binarize_otsu(m, region=region)
        assert not res.mask[~region].any()
        assert res.mask[region].any()

    def test_cut_on_histogram(self):
        hist = np.zeros(256, int)
        hist[10], hist[200] = 5, 5
        assert otsu_cut(hist) == 11


class TestInpaint:
    def test_empty_mask_identity(self):
        img = np.random.default_rng(0).random((16, 16, 3))
        out = inpaint(img, np.zeros((16, 16), bool), 3)
        assert out.tobytes() == img.tobytes()
        assert out is not img

    def test_linear_ramp_disc(self):
        img = ramp()
        yy, xx = np.mgrid[:64, :64]
        mask = np.hypot(yy - 32, xx - 30) <= 10
        out, info = inpaint(img, mask, 3, return_info=True)
        assert np.abs(out - img)[mask].max() < 0.02
        assert np.array_equal(out[~mask], img[~mask])
        assert info.converged and info.last_update < 1e-4

    def test_constant_image_fixed_point(self):
        img = np.full((20, 20, 3), 0.42)
        mask = np.zeros((20, 20), bool)
        mask[3:9, 5:15] = True
        out = inpaint(img, mask, 3)
        np.testing.assert_allclose(out, 0.42, atol=1e-12)

    def test_full_coverage(self):
        with pytest.raises(FullCoverageError):
            inpaint(np.zeros((5, 5, 3)), np.ones((5, 5), bool), 3)

    def test_mask_shape_mismatch(self):
        with pytest.raises(ValueError):
            inpaint(np.zeros((5, 5, 3)), np.ones((4, 5), bool), 3)

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 10_000), frac=st.floats(0.01, 0.6))
    def test_locality_and_bounds(self, seed, frac):
        rng = np.random.default_rng(seed)
        img = ndimage.gaussian_filter(rng.random((24, 24, 3)), (2, 2, 0))
        mask = rng.random((24, 24)) < frac
        if mask.all() or not mask.any():
            return
        out, info = inpaint(img, mask, 3, return_info=True)
        assert np.array_equal(out[~mask], img[~mask])
        assert out.min() >= 0 and out.max() <= 1 and np.isfinite(out).all()
        assert info.converged or info.sweeps == 500

    def test_grayscale_input(self):
        img = ramp()[..., 0]
        mask = np.zeros(img.shape, bool)
        mask[20:30, 20:30] = True
        out = inpaint(img, mask, 3)
        assert out.shape == img.shape
        assert np.abs(out - img)[mask].max() < 0.02
