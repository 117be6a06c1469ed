import numpy as np
import pytest

from madkit.crops import (CellViews, augment_view, blur_view, crop_resize,
                          extract_views, flip_view, jitter_intensity,
                          load_views, multicrop, normalize01, percentile_clip,
                          polygon_mask, preprocess_field, flat_field_correct,
                          resize_masked, save_views, split_cells)
from madkit.errors import GeometryError, ParameterError, ValidationError
from madkit.rng import derive_rng


def resize_masked_oracle(image, mask, out_h, out_w):
    """Direct per-pixel reimplementation of mask-weighted bilinear resize."""
    h, w, c = image.shape
    out = np.zeros((out_h, out_w, c))
    cov = np.zeros((out_h, out_w))
    for oy in range(out_h):
        for ox in range(out_w):
            sy = (oy + 0.5) * h / out_h - 0.5
            sx = (ox + 0.5) * w / out_w - 0.5
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            fy, fx = sy - y0, sx - x0
            num = np.zeros(c)
            den = 0.0
            for dy, wy in ((0, 1 - fy), (1, fy)):
                for dx, wx in ((0, 1 - fx), (1, fx)):
                    yy, xx = y0 + dy, x0 + dx
                    if 0 <= yy < h and 0 <= xx < w:
                        m = mask[yy, xx]
                        num += wy * wx * m * image[yy, xx]
                        den += wy * wx * m
            cov[oy, ox] = den
            if den > 0:
                out[oy, ox] = num / den
    return out, cov


class TestResizeMasked:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        image = rng.random((7, 9, 2))
        mask = (rng.random((7, 9)) < 0.6).astype(float)
        for out_h, out_w in ((5, 5), (12, 4), (7, 9), (3, 14)):
            got_img, got_cov = resize_masked(image, mask, out_h, out_w)
            exp_img, exp_cov = resize_masked_oracle(image, mask, out_h, out_w)
            np.testing.assert_allclose(got_img, exp_img, atol=1e-12)
            np.testing.assert_allclose(got_cov, exp_cov, atol=1e-12)

    def test_same_size_is_bitwise_copy(self):
        rng = np.random.default_rng(1)
        image = rng.random((6, 6, 3))
        mask = np.ones((6, 6))
        out, cov = resize_masked(image, mask, 6, 6)
        assert out.tobytes() == image.tobytes()
        assert cov.tobytes() == mask.tobytes()

    def test_no_boundary_darkening(self):
        # constant value inside a half-plane mask must stay exactly constant
        # after resize; plain bilinear would fade at the support boundary
        image = np.zeros((8, 8, 1))
        mask = np.zeros((8, 8))
        image[:, :4, 0] = 1.0
        mask[:, :4] = 1.0
        out, cov = resize_masked(image, mask, 5, 5)
        assert np.all(out[cov > 0] == 1.0)
        assert np.all(out[cov == 0] == 0.0)

    def test_zero_support_gives_exact_zero(self):
        rng = np.random.default_rng(2)
        image = rng.random((10, 10, 3))
        mask = np.zeros((10, 10))
        mask[:2, :2] = 1.0
        out, cov = resize_masked(image, mask, 4, 4)
        assert np.all(out[cov == 0.0] == 0.0)
        assert np.any(cov == 0.0) and np.any(cov > 0.0)

    def test_upsampling_constant_preserved(self):
        image = np.full((4, 4, 1), 0.37)
        mask = np.ones((4, 4))
        out, cov = resize_masked(image, mask, 11, 11)
        np.testing.assert_allclose(out[cov > 0], 0.37, rtol=0, atol=1e-14)

    def test_validation(self):
        with pytest.raises(ValidationError):
            resize_masked(np.zeros((4, 4)), np.ones((4, 4)), 2, 2)
        with pytest.raises(ParameterError):
            resize_masked(np.zeros((4, 4, 1)), np.ones((4, 4)), 0, 2)


class TestCropResize:
    def test_border_zero_padding(self):
        image = np.arange(16, dtype=float).reshape(4, 4, 1)
        mask = np.ones((4, 4))
        out, cov = crop_resize(image, mask, top=-1, left=-1, side=4,
                               out_side=4)
        expected = np.zeros((4, 4))
        expected[1:, 1:] = image[:3, :3, 0]
        np.testing.assert_array_equal(out[..., 0], expected)
        exp_cov = np.zeros((4, 4))
        exp_cov[1:, 1:] = 1.0
        np.testing.assert_array_equal(cov, exp_cov)

    def test_full_frame_identity_is_bitwise(self):
        rng = np.random.default_rng(3)
        image = rng.random((9, 9, 2))
        mask = rng.random((9, 9))
        out, cov = crop_resize(image, mask, 0, 0, 9, 9)
        assert out.tobytes() == image.tobytes()
        assert cov.tobytes() == mask.tobytes()

    def test_crop_then_resize_matches_two_steps(self):
        rng = np.random.default_rng(4)
        image = rng.random((12, 12, 1))
        mask = (rng.random((12, 12)) < 0.8).astype(float)
        got_img, got_cov = crop_resize(image, mask, 2, 3, 6, 10)
        region = image[2:8, 3:9]
        rmask = mask[2:8, 3:9]
        exp_img, exp_cov = resize_masked(region, rmask, 10, 10)
        np.testing.assert_allclose(got_img, exp_img, atol=1e-12)
        np.testing.assert_allclose(got_cov, exp_cov, atol=1e-12)


class TestPolygonMask:
    def test_square_oracle(self):
        poly = np.array([[-0.5, -0.5], [-0.5, 2.5], [2.5, 2.5], [2.5, -0.5]])
        mask = polygon_mask(poly, 4, 4)
        expected = np.zeros((4, 4))
        expected[:3, :3] = 1.0
        np.testing.assert_array_equal(mask, expected)

    def test_matches_pointwise_crossing_oracle(self):
        rng = np.random.default_rng(5)
        r = 3.0 + rng.random(7) * 2.0
        theta = np.sort(rng.uniform(0, 2 * np.pi, size=7))
        poly = np.stack([5.0 + r * np.sin(theta), 5.0 + r * np.cos(theta)],
                        axis=1)
        mask = polygon_mask(poly, 10, 10)
        for y in range(10):
            for x in range(10):
                crossings = 0
                for e in range(7):
                    y1, x1 = poly[e]
                    y2, x2 = poly[(e + 1) % 7]
                    if (y1 > y) != (y2 > y):
                        t = (y - y1) / (y2 - y1)
                        if x < x1 + t * (x2 - x1):
                            crossings += 1
                assert mask[y, x] == float(crossings % 2 == 1), (y, x)

    def test_ellipse_polygon_area(self):
        # a 16-gon inscribed in an ellipse covers sin(2*pi/16)*8/pi of it
        a, b = 7.0, 4.0
        theta = 2 * np.pi * np.arange(16) / 16
        poly = np.stack([16 + a * np.cos(theta), 16 + b * np.sin(theta)],
                        axis=1)
        mask = polygon_mask(poly, 32, 32)
        expected = 0.5 * 16 * np.sin(2 * np.pi / 16) * a * b
        assert abs(mask.sum() - expected) / expected < 0.1

    def test_offset_origin(self):
        poly = np.array([[-0.5, -0.5], [-0.5, 2.5], [2.5, 2.5], [2.5, -0.5]])
        shifted = polygon_mask(poly + 10.0, 4, 4, origin=(10.0, 10.0))
        np.testing.assert_array_equal(shifted, polygon_mask(poly, 4, 4))

    def test_validation(self):
        with pytest.raises(ValidationError):
            polygon_mask(np.zeros((2, 2)), 4, 4)


class TestPreprocess:
    def test_percentile_clip_oracle(self):
        rng = np.random.default_rng(6)
        image = rng.normal(size=(40, 40, 2))
        out = percentile_clip(image, 5.0, 95.0)
        for c in range(2):
            lo, hi = np.percentile(image[..., c], [5.0, 95.0])
            np.testing.assert_array_equal(out[..., c],
                                          np.clip(image[..., c], lo, hi))

    def test_normalize01_range(self):
        rng = np.random.default_rng(7)
        image = rng.normal(size=(16, 16, 3)) * 5 + 2
        out = normalize01(image)
        for c in range(3):
            assert out[..., c].min() == 0.0
            assert out[..., c].max() == 1.0

    def test_normalize01_constant_channel_warns(self):
        image = np.ones((8, 8, 1))
        with pytest.warns(RuntimeWarning):
            out = normalize01(image)
        assert np.all(out == 0.0)

    def test_flat_field_removes_gradient(self):
        rng = np.random.default_rng(8)
        flat = 0.5 + 0.1 * rng.random((64, 64, 1))
        ramp = np.linspace(0.5, 2.0, 64)[:, None, None]
        corrected = flat_field_correct(flat * ramp)
        # most of the slow gradient must be gone; edge effects of the
        # smoothing keep it from vanishing entirely on a small image
        col_cv = corrected.mean(axis=(1, 2))
        raw_cv = (flat * ramp).mean(axis=(1, 2))
        assert (col_cv.std() / col_cv.mean()) < (raw_cv.std() / raw_cv.mean()) / 5

    def test_preprocess_field_output_range(self):
        rng = np.random.default_rng(9)
        image = rng.random((48, 48, 3)) * 3.0
        out = preprocess_field(image)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_explicit_profile_validation(self):
        with pytest.raises(ValidationError):
            flat_field_correct(np.ones((8, 8, 1)), np.ones((4, 4, 1)))


class TestAugment:
    def test_double_flip_identity(self):
        rng = np.random.default_rng(10)
        image = rng.random((6, 6, 3))
        mask = (rng.random((6, 6)) < 0.5).astype(float)
        for horizontal in (True, False):
            i2, m2 = flip_view(*flip_view(image, mask, horizontal), horizontal)
            np.testing.assert_array_equal(i2, image)
            np.testing.assert_array_equal(m2, mask)

    def test_jitter_keeps_zeros_and_bounds(self):
        rng = np.random.default_rng(11)
        image = np.clip(rng.random((8, 8, 3)), 0, 1)
        mask = (rng.random((8, 8)) < 0.5).astype(float)
        image = image * mask[..., None]
        out = jitter_intensity(image, 0.4, derive_rng("jit", 0))
        assert np.all(out[mask == 0] == 0.0)
        assert out.min() >= 0.0 and out.max() <= 1.0
        again = jitter_intensity(image, 0.4, derive_rng("jit", 0))
        np.testing.assert_array_equal(out, again)

    def test_blur_keeps_mask_zeros(self):
        rng = np.random.default_rng(12)
        image = rng.random((10, 10, 2))
        mask = np.zeros((10, 10))
        mask[3:7, 3:7] = 1.0
        image = image * mask[..., None]
        out = blur_view(image, mask, sigma=1.0)
        assert np.all(out[mask == 0] == 0.0)
        inside = mask == 1.0
        assert out[inside].var() < image[inside].var()

    def test_augment_view_deterministic_and_masked(self):
        rng = np.random.default_rng(13)
        image = rng.random((12, 12, 3))
        mask = (rng.random((12, 12)) < 0.6).astype(float)
        image = image * mask[..., None]
        a_img, a_mask = augment_view(image, mask, derive_rng("aug", 5))
        b_img, b_mask = augment_view(image, mask, derive_rng("aug", 5))
        np.testing.assert_array_equal(a_img, b_img)
        np.testing.assert_array_equal(a_mask, b_mask)
        assert np.all(a_img[a_mask == 0] == 0.0)

    def test_parameter_validation(self):
        img = np.zeros((4, 4, 1))
        with pytest.raises(ParameterError):
            jitter_intensity(img, 1.5, np.random.default_rng(0))
        with pytest.raises(ParameterError):
            blur_view(img, np.ones((4, 4)), 0.0)


class TestMulticrop:
    def _view(self, seed=14, side=24):
        rng = np.random.default_rng(seed)
        image = rng.random((side, side, 3))
        mask = (rng.random((side, side)) < 0.7).astype(float)
        return image * mask[..., None], mask

    def test_counts_and_shapes(self):
        image, mask = self._view()
        crops, regions = multicrop(image, mask, 2, 4, derive_rng("mc", 0))
        assert len(crops) == 6
        assert regions.shape == (6, 3)
        for img, cov in crops:
            assert img.shape == image.shape
            assert cov.shape == mask.shape
            assert np.all(img[cov == 0] == 0.0)

    def test_scale_bookkeeping(self):
        image, mask = self._view()
        for trial in range(10):
            crops, regions = multicrop(image, mask, 2, 4,
                                       derive_rng("mc", trial))
            sides = regions[:, 2]
            h = image.shape[0]
            assert np.all(sides[:2] >= int(np.round(0.7 * h)))
            assert np.all(sides[2:] <= int(np.round(0.7 * h)))
            assert np.all(sides[2:] >= int(np.round(0.3 * h)))
            assert np.all(regions[:, 0] >= 0)
            assert np.all(regions[:, 0] + sides <= h)

    def test_half_scale_covers_quarter_area(self):
        # scale is a side fraction: a crop at scale 0.5 holds exactly a
        # quarter of the source pixels when the half side is integral
        image, mask = self._view()
        h = image.shape[0]
        crops, regions = multicrop(image, mask, 1, 3, derive_rng("mc", 9),
                                   global_scale=(0.5, 0.5),
                                   local_scale=(0.5, 0.5))
        assert np.all(regions[:, 2] == h // 2)
        assert np.all(regions[:, 2] ** 2 / h ** 2 == 0.25)

    def test_unit_scale_global_is_bitwise_identity(self):
        image, mask = self._view()
        crops, regions = multicrop(image, mask, 2, 0, derive_rng("mc", 1),
                                   global_scale=(1.0, 1.0))
        for img, cov in crops:
            assert img.tobytes() == image.tobytes()
            assert cov.tobytes() == mask.tobytes()
        assert np.all(regions[:, 2] == image.shape[0])

    def test_deterministic(self):
        image, mask = self._view()
        a, ra = multicrop(image, mask, 2, 2, derive_rng("mc", 2))
        b, rb = multicrop(image, mask, 2, 2, derive_rng("mc", 2))
        np.testing.assert_array_equal(ra, rb)
        for (ai, ac), (bi, bc) in zip(a, b):
            np.testing.assert_array_equal(ai, bi)
            np.testing.assert_array_equal(ac, bc)

    def test_validation(self):
        image, mask = self._view()
        with pytest.raises(ParameterError):
            multicrop(image, mask, 0, 2, derive_rng("mc", 3))
        with pytest.raises(ParameterError):
            multicrop(image, mask, 2, 2, derive_rng("mc", 3),
                      local_scale=(0.0, 0.5))
        with pytest.raises(GeometryError):
            multicrop(np.zeros((4, 6, 1)), np.ones((4, 6)), 1, 0,
                      derive_rng("mc", 3))


@pytest.fixture(scope="module")
def field():
    import dataclasses
    from madkit.synthgen import (default_expression_model,
                                 default_tissue_spec, generate_field)
    spec = default_tissue_spec(cells_per_field=60, height=512, width=512)
    spec = dataclasses.replace(spec, niche_spread=40.0, k_env=8)
    return generate_field(spec, default_expression_model(spec), seed=21)


@pytest.fixture(scope="module")
def views(field):
    image = preprocess_field(field.image)
    morph, morph_mask, env, env_mask = extract_views(
        image, field.centroids, field.polygons)
    return image, morph, morph_mask, env, env_mask


class TestExtractViews:
    def test_shapes(self, field, views):
        image, morph, morph_mask, env, env_mask = views
        n = field.n_cells
        assert morph.shape == (n, 24, 24, 3)
        assert morph_mask.shape == (n, 24, 24)
        assert env.shape == (n, 64, 64, 3)
        assert env_mask.shape == (n, 64, 64)

    def test_morphology_masked_to_cell(self, views):
        _, morph, morph_mask, _, _ = views
        assert np.all(morph[morph_mask == 0.0] == 0.0)
        # every cell keeps a nonempty interior
        assert np.all(morph_mask.reshape(morph_mask.shape[0], -1).max(axis=1)
                      > 0)

    def test_environment_matches_direct_slice(self, field, views):
        image, _, _, env, env_mask = views
        h, w, _ = image.shape
        for i in (0, 13, 37):
            cy, cx = np.round(field.centroids[i]).astype(int)
            top, left = cy - 32, cx - 32
            expected = np.zeros((64, 64, 3))
            ys0, ys1 = max(top, 0), min(top + 64, h)
            xs0, xs1 = max(left, 0), min(left + 64, w)
            expected[ys0 - top:ys1 - top, xs0 - left:xs1 - left] = \
                image[ys0:ys1, xs0:xs1]
            np.testing.assert_array_equal(env[i], expected)
            assert np.all(env_mask[i][ys0 - top:ys1 - top,
                                      xs0 - left:xs1 - left] == 1.0)

    def test_morphology_signal_above_mask_boundary(self, views):
        # interiors carry intensity well above zero on average
        _, morph, morph_mask, _, _ = views
        inside = morph[morph_mask > 0.5]
        assert inside.mean() > 0.1

    def test_views_deterministic(self, field, views):
        image, morph, morph_mask, env, env_mask = views
        m2, mm2, e2, em2 = extract_views(image, field.centroids,
                                         field.polygons)
        np.testing.assert_array_equal(morph, m2)
        np.testing.assert_array_equal(env, e2)

    def test_validation(self):
        with pytest.raises(GeometryError):
            extract_views(np.zeros((8, 8)), np.zeros((1, 2)),
                          np.zeros((1, 4, 2)))
        with pytest.raises(ValidationError):
            extract_views(np.zeros((8, 8, 1)), np.zeros((2, 2)),
                          np.zeros((1, 4, 2)))


class TestSplits:
    def test_frozen_largest_remainder(self):
        out = split_cells(10, (0.75, 0.0, 0.25), seed=0)
        assert out["pretrain"].size == 8
        assert out["finetune"].size == 0
        assert out["test"].size == 2

    def test_disjoint_and_exhaustive(self):
        out = split_cells(101, (0.6, 0.2, 0.2), seed=1)
        merged = np.concatenate([out["pretrain"], out["finetune"],
                                 out["test"]])
        assert merged.size == 101
        assert np.array_equal(np.sort(merged), np.arange(101))

    def test_stratified_keeps_class_balance(self):
        labels = np.repeat(np.arange(5), 40)
        out = split_cells(200, (0.75, 0.0, 0.25), seed=2, labels=labels)
        for split, frac in (("pretrain", 0.75), ("test", 0.25)):
            counts = np.bincount(labels[out[split]], minlength=5)
            assert np.all(counts == int(frac * 40))

    def test_deterministic_and_seed_sensitive(self):
        a = split_cells(50, (0.5, 0.25, 0.25), seed=3)
        b = split_cells(50, (0.5, 0.25, 0.25), seed=3)
        c = split_cells(50, (0.5, 0.25, 0.25), seed=4)
        np.testing.assert_array_equal(a["pretrain"], b["pretrain"])
        assert not np.array_equal(a["pretrain"], c["pretrain"])

    def test_validation(self):
        with pytest.raises(ParameterError):
            split_cells(10, (0.5, 0.5, 0.5), seed=0)
        with pytest.raises(ValidationError):
            split_cells(10, (0.5, 0.25, 0.25), seed=0,
                        labels=np.zeros(5, dtype=int))


class TestViewPersistence:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(15)
        n = 7
        views = CellViews(
            morphology=rng.random((n, 24, 24, 3)),
            morphology_mask=(rng.random((n, 24, 24)) < 0.5).astype(float),
            environment=rng.random((n, 64, 64, 3)),
            environment_mask=np.ones((n, 64, 64)),
            cell_ids=np.arange(n, dtype=np.int64),
            labels=rng.integers(0, 5, size=n).astype(np.int32),
            expression=rng.random((n, 32)),
            composition=rng.random((n, 5)))
        path = tmp_path / "views.madc"
        save_views(views, path)
        loaded = load_views(path)
        np.testing.assert_array_equal(loaded.cell_ids, views.cell_ids)
        np.testing.assert_array_equal(loaded.labels, views.labels)
        np.testing.assert_array_equal(
            loaded.morphology, views.morphology.astype(np.float32))
        np.testing.assert_array_equal(
            loaded.environment_mask,
            views.environment_mask.astype(np.float32))
        assert loaded.morphology.dtype == np.float64

    def test_subset(self):
        rng = np.random.default_rng(16)
        n = 5
        views = CellViews(
            morphology=rng.random((n, 4, 4, 1)),
            morphology_mask=np.ones((n, 4, 4)),
            environment=rng.random((n, 6, 6, 1)),
            environment_mask=np.ones((n, 6, 6)),
            cell_ids=np.arange(n),
            labels=np.arange(n),
            expression=rng.random((n, 3)),
            composition=rng.random((n, 2)))
        sub = views.subset(np.array([1, 3]))
        assert sub.n_cells == 2
        np.testing.assert_array_equal(sub.cell_ids, [1, 3])
        np.testing.assert_array_equal(sub.morphology, views.morphology[[1, 3]])

    def test_count_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            CellViews(
                morphology=np.zeros((3, 4, 4, 1)),
                morphology_mask=np.zeros((3, 4, 4)),
                environment=np.zeros((2, 6, 6, 1)),
                environment_mask=np.zeros((3, 6, 6)),
                cell_ids=np.arange(3),
                labels=np.zeros(3),
                expression=np.zeros((3, 2)),
                composition=np.zeros((3, 2)))
