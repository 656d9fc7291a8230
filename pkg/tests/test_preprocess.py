import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trusformer.preprocess import (
    AlignmentError,
    EmptyBagError,
    NeedleMask,
    RFImage,
    ROISpec,
    build_bag,
    normalize_roi,
    resize_roi,
    tile_rois,
)

from oracles import brute_force_tiles


def as_tuples(tiles):
    return [(w.a0, w.a1, w.l0, w.l1, p[0], p[1]) for w, p in tiles]


def full_frame(h=280, w=230, depth=28.0, width=46.0):
    return RFImage(np.random.default_rng(0).standard_normal((h, w)), depth, width, "c0")


class TestTiling:
    def test_full_mask_grid_count(self):
        img = full_frame()
        tiles = tile_rois(img, NeedleMask(np.ones(img.shape, bool)), ROISpec())
        assert len(tiles) == 42 * 24

    def test_full_mask_matches_enumeration(self):
        img = full_frame()
        mask = np.ones(img.shape, bool)
        assert as_tuples(tile_rois(img, NeedleMask(mask), ROISpec())) == brute_force_tiles(mask, 28, 46, ROISpec())

    def test_empty_mask(self):
        img = full_frame()
        assert tile_rois(img, NeedleMask(np.zeros(img.shape, bool)), ROISpec()) == []

    def test_window_inside_mask_always_kept(self):
        img = full_frame()
        mask = np.zeros(img.shape, bool)
        mask[0:50, 0:25] = True  # exactly the first 5x5 mm window
        tiles = tile_rois(img, NeedleMask(mask), ROISpec(overlap_threshold=1.0))
        assert [p for _, p in tiles] == [(0.0, 0.0)]

    def test_lateral_major_order(self):
        img = full_frame()
        tiles = tile_rois(img, NeedleMask(np.ones(img.shape, bool)), ROISpec())
        keys = [(w.lateral_idx, w.axial_idx) for w, _ in tiles]
        assert keys == sorted(keys)

    def test_misaligned_mask(self):
        img = full_frame()
        with pytest.raises(AlignmentError):
            tile_rois(img, NeedleMask(np.ones((10, 10), bool)), ROISpec())

    @settings(max_examples=60, deadline=None)
    @given(
        h=st.integers(8, 64),
        w=st.integers(8, 64),
        depth=st.floats(6.0, 20.0),
        width=st.floats(6.0, 20.0),
        thr=st.sampled_from([0.1, 0.5, 0.66, 1.0]),
        seed=st.integers(0, 10_000),
    )
    def test_matches_brute_force(self, h, w, depth, width, thr, seed):
        rng = np.random.default_rng(seed)
        mask = rng.random((h, w)) < rng.uniform(0.2, 0.95)
        spec = ROISpec(overlap_threshold=thr)
        img = RFImage(rng.standard_normal((h, w)), depth, width)
        assert as_tuples(tile_rois(img, NeedleMask(mask), spec)) == brute_force_tiles(mask, depth, width, spec)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), t1=st.floats(0.05, 1.0), t2=st.floats(0.05, 1.0))
    def test_threshold_monotone(self, seed, t1, t2):
        lo, hi = sorted((t1, t2))
        rng = np.random.default_rng(seed)
        img = RFImage(rng.standard_normal((60, 60)), 15.0, 15.0)
        mask = NeedleMask(rng.random((60, 60)) < 0.7)
        assert len(tile_rois(img, mask, ROISpec(overlap_threshold=hi))) <= len(
            tile_rois(img, mask, ROISpec(overlap_threshold=lo))
        )


class TestResize:
    def test_constant(self):
        out = resize_roi(np.full((1780, 55), 3.25))
        assert out.shape == (256, 256)
        np.testing.assert_allclose(out, 3.25, rtol=1e-12)

    def test_paper_window_shape(self):
        assert resize_roi(np.random.default_rng(1).random((1780, 55))).shape == (256, 256)

    def test_identity(self):
        x = np.random.default_rng(2).random((256, 256))
        np.testing.assert_array_equal(resize_roi(x), x)

    def test_linear_ramp_preserved(self):
        # linear interpolation reproduces affine functions exactly
        a = np.linspace(0, 1, 50)[:, None] + 2 * np.linspace(0, 1, 25)[None, :]
        out = resize_roi(a, (32, 32))
        expected = np.linspace(0, 1, 32)[:, None] + 2 * np.linspace(0, 1, 32)[None, :]
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_degenerate(self):
        with pytest.raises(ValueError):
            resize_roi(np.zeros((0, 5)))


class TestNormalize:
    def test_affine_to_unit_range(self):
        x = np.random.default_rng(3).random((64, 64))
        out = normalize_roi(x)
        assert out.min() == 0.0 and out.max() == 1.0
        np.testing.assert_allclose(out, (x - x.min()) / (x.max() - x.min()))

    def test_outlier_clamped(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal(256 * 256)
        mu, sd = x.mean(), x.std()
        x[0] = mu + 10 * sd
        mu, sd = x.mean(), x.std()  # statistics including the outlier
        out = normalize_roi(x.reshape(256, 256)).ravel()
        upper = mu + 4 * sd
        lower = max(x.min(), mu - 4 * sd)
        assert out[0] == 1.0
        # the next-largest sample sits where the clamped range puts it
        j = np.argsort(x)[-2]
        assert out[j] == pytest.approx((min(x[j], upper) - lower) / (upper - lower))

    def test_constant_half(self):
        np.testing.assert_array_equal(normalize_roi(np.full((8, 8), 7.0)), 0.5)


class TestBuildBag:
    def test_full_mask_bag(self):
        img = full_frame()
        bag = build_bag(img, NeedleMask(np.ones(img.shape, bool)), ROISpec(output_size_px=(8, 8)))
        assert len(bag) == 1008
        assert len(bag.positions) == 1008

    def test_empty_bag_error(self):
        img = full_frame()
        with pytest.raises(EmptyBagError):
            build_bag(img, NeedleMask(np.zeros(img.shape, bool)), ROISpec())

    def test_values_in_unit_range_and_deterministic(self):
        img = full_frame()
        mask = np.zeros(img.shape, bool)
        mask[100:170, 40:140] = True
        spec = ROISpec(output_size_px=(32, 32))
        a = build_bag(img, NeedleMask(mask), spec)
        b = build_bag(img, NeedleMask(mask), spec)
        arr = a.as_array()
        assert arr.min() >= 0 and arr.max() <= 1
        assert all(r.min() == 0.0 and r.max() == 1.0 for r in a.rois)
        assert arr.tobytes() == b.as_array().tobytes()
        assert a.positions == b.positions
