import numpy as np
import pytest

from segvar.imgcore import GrayImage
from segvar.preprocess import (
    ClaheParams,
    WindowParams,
    apply_window,
    clahe,
    clahe_tile_tables,
    clip_histogram,
    compute_window,
)


def _img(data, depth=12):
    return GrayImage(np.asarray(data), depth=depth)


class TestWindow:
    def test_single_slice(self):
        w = compute_window([_img([[0, 4000]])])
        assert (w.lo, w.hi) == (0.0, 3600.0)

    def test_two_slices_global_extrema(self):
        w = compute_window([_img([[100, 1000]]), _img([[200, 4000]])])
        assert (w.lo, w.hi) == (90.0, 3600.0)

    def test_constant_volume_degenerate(self):
        with pytest.raises(ValueError, match="degenerate"):
            compute_window([_img([[5, 5]])])

    def test_empty_list(self):
        with pytest.raises(ValueError):
            compute_window([])

    def test_apply_window_endpoints(self):
        w = WindowParams(0, 3600)
        out = apply_window(_img([[0, 3600, 4000]]), w)
        assert out.data.tolist() == [[0, 255, 255]]
        assert out.depth == 8

    def test_apply_window_midpoint(self):
        out = apply_window(_img([[1800]]), WindowParams(0, 3600))
        assert out.data.tolist() == [[128]]  # round(255*0.5) half away from zero

    def test_apply_window_below_window(self):
        out = apply_window(_img([[50]]), WindowParams(90, 3600))
        assert out.data.tolist() == [[0]]

    def test_apply_window_monotone_and_surjective_at_ends(self):
        rng = np.random.default_rng(3)
        vals = np.sort(rng.integers(0, 4096, size=200))
        out = apply_window(_img(vals[None, :]), WindowParams(500, 3000))
        o = out.data[0]
        assert (np.diff(o.astype(int)) >= 0).all()
        assert o[0] == 0 and o[-1] == 255


class TestClahe:
    def test_constant_image_stays_constant(self):
        img = GrayImage(np.full((32, 32), 77), depth=8)
        out = clahe(img, ClaheParams(4, 4, 2.0))
        assert (out.data == out.data[0, 0]).all()

    def test_two_valued_single_tile_cdf_mapping(self):
        # 50% zeros, 50% 255s, one tile, no clipping:
        # lut[0] = round(128*255/256) = 128, lut[255] = 255
        data = np.zeros((16, 16), dtype=np.uint16)
        data[:, 8:] = 255
        out = clahe(GrayImage(data, depth=8), ClaheParams(1, 1, 1000.0))
        assert set(np.unique(out.data)) == {128, 255}

    def test_no_bin_above_clip_limit_before_redistribution(self):
        rng = np.random.default_rng(4)
        img = GrayImage(rng.integers(0, 256, size=(64, 64)), depth=8)
        p = ClaheParams(4, 4, 2.0)
        tables = clahe_tile_tables(img, p)
        ceilings = np.floor(tables.clip_limits).astype(np.int64)
        assert (tables.clipped_hists <= ceilings[:, :, None]).all()

    def test_clip_histogram_conserves_mass(self):
        hist = np.zeros(256, dtype=np.int64)
        hist[10] = 500
        hist[200] = 12
        clipped, redist = clip_histogram(hist, 37.0)
        assert clipped.max() <= 37
        assert redist.sum() == hist.sum()

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        img = GrayImage(rng.integers(0, 256, size=(40, 40)), depth=8)
        a = clahe(img, ClaheParams(4, 4, 2.0))
        b = clahe(img, ClaheParams(4, 4, 2.0))
        assert np.array_equal(a.data, b.data)

    def test_raises_when_smaller_than_grid(self):
        img = GrayImage(np.zeros((4, 4)), depth=8)
        with pytest.raises(ValueError, match="smaller than tile grid"):
            clahe(img, ClaheParams(8, 8))

    def test_entropy_improves_on_low_contrast_image(self):
        def entropy(arr):
            h = np.bincount(arr.ravel(), minlength=256)
            p = h[h > 0] / arr.size
            return float(-(p * np.log2(p)).sum())

        rng = np.random.default_rng(6)
        base = rng.integers(100, 140, size=(256, 256))
        img = GrayImage(base, depth=8)
        out = clahe(img)  # default 8x8 grid, clip_factor 2
        assert entropy(out.data) >= entropy(img.data)

    def test_rejects_non_8bit(self):
        with pytest.raises(ValueError, match="8-bit"):
            clahe(_img([[0, 1000]] * 8, depth=12), ClaheParams(2, 2))
