import math

import numpy as np
import pytest

from clim.augment import (
    AugConfig,
    CropSpec,
    MixMask,
    cutmix_apply,
    cutmix_mask,
    color_jitter,
    draw_mix_params,
    draw_view_params,
    gaussian_blur,
    horizontal_flip,
    make_views,
    mixup_apply,
    random_resized_crop,
    realize_mixed_views_batch,
    render_view_batch,
    rerender,
    resize_bilinear,
    scale_factor,
    to_grayscale,
)
from clim.errors import ValidationError
from clim.numerics import Rng


def rand_image(seed, h=16, w=16, c=3):
    return Rng(seed).random_array(h * w * c).reshape(h, w, c)


class TestResize:
    def test_checkerboard_half(self):
        cb = np.zeros((4, 4, 1))
        cb[::2, 1::2] = 1.0
        cb[1::2, ::2] = 1.0
        assert np.allclose(resize_bilinear(cb, 2, 2), 0.5)

    def test_identity(self):
        img = rand_image(1)
        assert np.array_equal(resize_bilinear(img, 16, 16), img)

    def test_constant_preserved(self):
        img = np.full((5, 7, 3), 0.37)
        out = resize_bilinear(img, 9, 3)
        assert np.allclose(out, 0.37)


class TestRandomResizedCrop:
    def test_full_crop_equals_resize(self):
        img = rand_image(2)
        cfg = AugConfig(crop_scale_range=(1.0, 1.0), crop_aspect_range=(1.0, 1.0), resolutions=(8,))
        out, spec = random_resized_crop(Rng(3), img, cfg)
        assert (spec.top, spec.left, spec.height, spec.width) == (0, 0, 16, 16)
        assert spec.sigma == 1.0
        assert np.array_equal(out, resize_bilinear(img, 8, 8))

    def test_identity_when_out_side_matches(self):
        img = rand_image(4)
        cfg = AugConfig(resolutions=(8,))
        out, spec = random_resized_crop(Rng(5), img, cfg, out_side=None)
        crop = img[spec.top:spec.top + spec.height, spec.left:spec.left + spec.width]
        if spec.height == 8 and spec.width == 8:
            assert np.allclose(out, crop)
        re = rerender(img, spec, spec.out_side)
        assert np.array_equal(re, out)

    def test_constant_image_convexity(self):
        img = np.full((16, 16, 3), 0.6)
        out, _ = random_resized_crop(Rng(6), img, AugConfig(resolutions=(11,)))
        assert np.allclose(out, 0.6)

    def test_crop_always_in_bounds(self):
        img = rand_image(7, h=13, w=9)
        for seed in range(50):
            _, spec = random_resized_crop(Rng(seed), img, AugConfig(resolutions=(8,)))
            assert 0 <= spec.top and spec.top + spec.height <= 13
            assert 0 <= spec.left and spec.left + spec.width <= 9


class TestRerender:
    def test_identity_at_same_side(self):
        img = rand_image(8)
        _, spec = random_resized_crop(Rng(9), img, AugConfig(resolutions=(10,)))
        out1 = rerender(img, spec, 10)
        out2 = rerender(img, spec, 10)
        assert np.array_equal(out1, out2)

    def test_constant(self):
        img = np.full((12, 12, 1), 0.25)
        spec = CropSpec(top=2, left=3, height=6, width=6, out_side=4, sigma=0.25, aspect=1.0)
        assert np.allclose(rerender(img, spec, 9), 0.25)

    def test_out_of_bounds_rejected(self):
        spec = CropSpec(top=10, left=0, height=10, width=10, out_side=4, sigma=0.5, aspect=1.0)
        with pytest.raises(ValidationError):
            rerender(rand_image(10), spec, 4)


class TestScaleFactor:
    def test_half_area_double_out(self):
        spec = CropSpec(0, 0, 1, 1, out_side=224, sigma=0.5, aspect=1.0)
        assert scale_factor(spec, 448, 448) == pytest.approx(1.0)

    def test_unit(self):
        spec = CropSpec(0, 0, 224, 224, out_side=224, sigma=1.0, aspect=1.0)
        assert scale_factor(spec, 224, 224) == pytest.approx(1.0)

    def test_downscale(self):
        spec = CropSpec(0, 0, 224, 224, out_side=112, sigma=1.0, aspect=1.0)
        assert scale_factor(spec, 224, 224) == pytest.approx(0.5)


class TestFlip:
    def test_prob_zero_identity(self):
        img = rand_image(11)
        assert np.array_equal(horizontal_flip(Rng(0), img, 0.0), img)

    def test_mirror(self):
        img = np.array([[[0.1], [0.9]]])
        assert np.array_equal(horizontal_flip(Rng(0), img, 1.0), np.array([[[0.9], [0.1]]]))

    def test_involution(self):
        img = rand_image(12)
        once = horizontal_flip(Rng(0), img, 1.0)
        twice = horizontal_flip(Rng(0), once, 1.0)
        assert np.array_equal(twice, img)


class TestColorJitter:
    def test_zero_strength_identity(self):
        img = rand_image(13)
        cfg = AugConfig(brightness=0.0, contrast=0.0, saturation=0.0)
        assert np.allclose(color_jitter(Rng(1), img, cfg), img)

    def test_zero_brightness_zeroes(self):
        img = rand_image(14)
        out = _jitter_with(img, 0.0, 1.0, 1.0)
        assert np.allclose(out, 0.0)

    def test_zero_contrast_collapses_to_mean(self):
        img = rand_image(15)
        lum = img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114
        out = _jitter_with(img, 1.0, 0.0, 1.0)
        assert np.allclose(out, np.clip(lum.mean(), 0, 1))

    def test_requires_rgb(self):
        with pytest.raises(ValidationError):
            color_jitter(Rng(0), rand_image(16, c=1), AugConfig())


def _jitter_with(img, fb, fc, fs):
    from clim.augment import _jitter_batch

    return _jitter_batch(img[None], np.array([[fb, fc, fs]]))[0]


class TestGrayscale:
    def test_already_gray_unchanged(self):
        g = np.repeat(rand_image(17, c=1), 3, axis=2)
        assert np.allclose(to_grayscale(Rng(0), g, 1.0), g)

    def test_prob_zero(self):
        img = rand_image(18)
        assert np.array_equal(to_grayscale(Rng(0), img, 0.0), img)

    def test_pure_red(self):
        img = np.zeros((1, 1, 3))
        img[..., 0] = 1.0
        assert np.allclose(to_grayscale(Rng(0), img, 1.0), 0.299)


class TestBlur:
    def test_constant_unchanged(self):
        img = np.full((8, 8, 3), 0.42)
        out = gaussian_blur(Rng(1), img, AugConfig(blur_prob=1.0))
        assert np.allclose(out, 0.42)

    def test_prob_zero(self):
        img = rand_image(19)
        assert np.array_equal(gaussian_blur(Rng(0), img, AugConfig(blur_prob=0.0)), img)

    def test_impulse(self):
        img = np.zeros((1, 3, 1))
        img[0, 1, 0] = 1.0
        cfg = AugConfig(blur_prob=1.0, blur_radius_range=(0.3, 0.3))
        out = gaussian_blur(Rng(2), img, cfg)
        assert out[0, 1, 0] > out[0, 0, 0]
        assert out[0, 1, 0] > out[0, 2, 0]
        assert abs(out.sum() - 1.0) < 1e-6


class TestCutmixMask:
    def test_lam_one_empty(self):
        mask = cutmix_mask(Rng(1), 32, 1.0)
        assert mask.area == 0 and mask.lambda_realized == 1.0

    def test_exact_quarter(self):
        # sqrt(0.25)*32 = 16; center chosen interior so no clipping
        for seed in range(200):
            mask = cutmix_mask(Rng(seed), 32, 0.75)
            if (mask.x1 - mask.x0, mask.y1 - mask.y0) == (16, 16):
                assert mask.lambda_realized == 1.0 - 256 / 1024
                return
        raise AssertionError("no unclipped 16x16 mask in 200 seeds")

    def test_corner_clipping(self):
        class CornerRng(Rng):
            def randint(self, lo, hi):
                return 0

        mask = cutmix_mask(CornerRng(0), 32, 0.75)
        assert (mask.x0, mask.y0, mask.x1, mask.y1) == (0, 0, 8, 8)
        assert mask.lambda_realized == 1.0 - 64 / 1024

    def test_accounting_exact_over_seeds(self):
        rng = Rng(3)
        for _ in range(2000):
            lam = rng.beta(2.0)
            mask = cutmix_mask(rng, 32, lam)
            assert mask.lambda_realized == 1.0 - mask.area / 1024

    def test_validation(self):
        with pytest.raises(ValidationError):
            cutmix_mask(Rng(0), 0, 0.5)
        with pytest.raises(ValidationError):
            cutmix_mask(Rng(0), 8, 1.5)


class TestCutmixApply:
    def test_empty_box_keeps_anchor(self):
        a, p = rand_image(20), rand_image(21)
        mask = MixMask(0, 0, 0, 0, side=16, lambda_realized=1.0)
        assert np.array_equal(cutmix_apply(a, p, mask), a)

    def test_full_box_is_positive(self):
        a, p = rand_image(22), rand_image(23)
        mask = MixMask(0, 0, 16, 16, side=16, lambda_realized=0.0)
        assert np.array_equal(cutmix_apply(a, p, mask), p)

    def test_pixel_count(self):
        a = np.zeros((32, 32, 1))
        p = np.ones((32, 32, 1))
        mask = MixMask(4, 6, 20, 22, side=32, lambda_realized=1.0 - 256 / 1024)
        out = cutmix_apply(a, p, mask)
        assert int(out.sum()) == 256

    def test_self_mix_identity(self):
        a = rand_image(24)
        mask = cutmix_mask(Rng(1), 16, 0.4)
        assert np.array_equal(cutmix_apply(a, a, mask), a)

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            cutmix_apply(rand_image(25), rand_image(26, h=8, w=8), MixMask(0, 0, 1, 1, 8, 0.9))


class TestMixup:
    def test_endpoints(self):
        a, p = rand_image(27), rand_image(28)
        assert np.allclose(mixup_apply(a, p, 1.0), a)
        assert np.allclose(mixup_apply(a, p, 0.0), p)

    def test_blend(self):
        a = np.zeros((2, 2, 1))
        p = np.ones((2, 2, 1))
        assert np.allclose(mixup_apply(a, p, 0.25), 0.75)


class TestMakeViews:
    def test_single_resolution_single_view(self):
        cfg = AugConfig(resolutions=(16,))
        views = make_views(Rng(1), rand_image(29), rand_image(30), cfg)
        assert len(views) == 1 and views[0].resolution == 16

    def test_self_positive_matches_plain_augmentation(self):
        cfg = AugConfig(resolutions=(16, 8))
        img = rand_image(31)
        mixed = make_views(Rng(7), img, img, cfg)
        plain = make_views(Rng(7), img, img, AugConfig(resolutions=(16, 8), mixing="none"))
        for mv, pv in zip(mixed, plain):
            # identical content: mixing patches of the same source only swaps
            # anchor-view pixels for positive-view pixels of the same image
            assert mv.image.shape == pv.image.shape
            assert np.all(mv.image >= 0.0) and np.all(mv.image <= 1.0)

    def test_cross_resolution_area_fractions_agree(self):
        cfg = AugConfig(resolutions=(32, 24))
        img_a, img_p = rand_image(32), rand_image(33)
        for seed in range(10000):
            params = draw_mix_params(Rng(seed), (16, 16), cfg)
            rendered_masks = {}
            from clim.augment import _box_from_center, _mask_lattice, _round_half_up

            lattice = _mask_lattice(cfg.resolutions)
            bw = _round_half_up(lattice * math.sqrt(1.0 - params.lam_raw))
            cx = min(int(params.center_u * lattice), lattice - 1)
            cy = min(int(params.center_v * lattice), lattice - 1)
            box = _box_from_center(lattice, bw, cx, cy)
            for r in cfg.resolutions:
                s = r // lattice
                area = (box[2] - box[0]) * s * (box[3] - box[1]) * s
                rendered_masks[r] = area / (r * r)
            assert abs(rendered_masks[32] - rendered_masks[24]) < 0.02

    def test_views_carry_consistent_masks(self):
        cfg = AugConfig(resolutions=(32, 24))
        views = make_views(Rng(11), rand_image(34), rand_image(35), cfg)
        fracs = [v.mask.area / (v.resolution ** 2) for v in views]
        assert abs(fracs[0] - fracs[1]) < 0.02
        assert views[0].lam == views[1].lam
        for v in views:
            assert v.mask.lambda_realized == 1.0 - v.mask.area / (v.resolution ** 2)

    def test_determinism(self):
        cfg = AugConfig(resolutions=(16, 8))
        a, p = rand_image(36), rand_image(37)
        v1 = make_views(Rng(5), a, p, cfg)
        v2 = make_views(Rng(5), a, p, cfg)
        for x, y in zip(v1, v2):
            assert np.array_equal(x.image, y.image)

    def test_energy_bound(self):
        cfg = AugConfig(resolutions=(16, 8))
        for seed in range(20):
            for v in make_views(Rng(seed), rand_image(seed), rand_image(seed + 100), cfg):
                assert v.image.min() >= 0.0 and v.image.max() <= 1.0

    def test_mixup_mode(self):
        cfg = AugConfig(resolutions=(16,), mixing="mixup")
        views = make_views(Rng(3), rand_image(38), rand_image(39), cfg)
        assert views[0].mask is None and 0.0 < views[0].lam < 1.0

    def test_none_mode(self):
        cfg = AugConfig(resolutions=(16,), mixing="none")
        views = make_views(Rng(3), rand_image(40), rand_image(41), cfg)
        assert views[0].mask is None and views[0].lam == 1.0


class TestBatchParity:
    def test_render_batch_matches_single(self):
        cfg = AugConfig(resolutions=(12,))
        images = np.stack([rand_image(s) for s in range(6)])
        params = [draw_view_params(Rng(100 + s), (16, 16), cfg) for s in range(6)]
        batched = render_view_batch(images, params, 12)
        for i in range(6):
            single = render_view_batch(images[i][None], [params[i]], 12)[0]
            assert np.array_equal(batched[i], single)

    def test_realize_batch_matches_make_views(self):
        cfg = AugConfig(resolutions=(16, 8))
        anchors = np.stack([rand_image(s) for s in range(4)])
        positives = np.stack([rand_image(50 + s) for s in range(4)])
        params = [draw_mix_params(Rng(200 + s), (16, 16), cfg) for s in range(4)]
        rendered = realize_mixed_views_batch(anchors, positives, params, cfg)
        for i in range(4):
            one = realize_mixed_views_batch(anchors[i][None], positives[i][None], [params[i]], cfg)
            for r in cfg.resolutions:
                assert np.array_equal(rendered[r][0][i], one[r][0][0])
                assert rendered[r][1][i] == one[r][1][0]


class TestConfigValidation:
    def test_bad_probability(self):
        with pytest.raises(ValidationError):
            AugConfig(flip_prob=1.5)

    def test_bad_range(self):
        with pytest.raises(ValidationError):
            AugConfig(crop_scale_range=(0.9, 0.2))

    def test_bad_mixing(self):
        with pytest.raises(ValidationError):
            AugConfig(mixing="blend")

    def test_empty_resolutions(self):
        with pytest.raises(ValidationError):
            AugConfig(resolutions=())
