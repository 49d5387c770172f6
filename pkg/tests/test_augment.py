import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dssn.augment import (
    AugConfig,
    CutMixBox,
    apply_cutmix,
    aug_strong_feature,
    aug_strong_image,
    aug_weak,
    cutmix_batch,
    sample_cutmix_box,
)
from dssn.common import IGNORE, ValidationError


def rand_image(seed, h=16, w=16):
    return torch.from_numpy(np.random.default_rng(seed).random((3, h, w))).float()


def rand_mask(seed, c=4, h=16, w=16):
    return torch.from_numpy(np.random.default_rng(seed).integers(0, c, (h, w)))


OFF = AugConfig(crop_size=16, scale_range=(1, 1), hflip_prob=0, jitter_strength=(0, 0, 0), jitter_prob=0,
                grayscale_prob=0, blur_prob=0, cutmix_prob=0, feature_dropout_rate=0)


class TestWeak:
    def test_identity_when_disabled(self):
        img, m = rand_image(0), rand_mask(0)
        out, out_m = aug_weak(img, m, 5, OFF)
        assert torch.equal(out, img) and torch.equal(out_m, m)

    def test_flip_is_involution(self):
        cfg = AugConfig(crop_size=16, scale_range=(1, 1), hflip_prob=1.0)
        img, m = rand_image(1), rand_mask(1)
        once, m1 = aug_weak(img, m, 0, cfg)
        assert not torch.equal(once, img)
        twice, m2 = aug_weak(once, m1, 0, cfg)
        assert torch.equal(twice, img) and torch.equal(m2, m)

    def test_flip_only_preserves_histogram(self):
        cfg = AugConfig(crop_size=16, scale_range=(1, 1), hflip_prob=0.5)
        m = rand_mask(2)
        ref = torch.bincount(m.ravel(), minlength=4)
        for seed in range(100):
            _, out = aug_weak(rand_image(2), m, seed, cfg)
            assert torch.equal(torch.bincount(out.ravel(), minlength=4), ref)

    def test_downscale_pads_with_ignore(self):
        cfg = AugConfig(crop_size=16, scale_range=(0.5, 0.5), hflip_prob=0)
        img, m = aug_weak(rand_image(3), rand_mask(3), 0, cfg)
        assert img.shape == (3, 16, 16) and m.shape == (16, 16)
        assert (m == IGNORE).sum() == 16 * 16 - 8 * 8
        assert torch.all(img[:, m == IGNORE] == 0)

    def test_upscale_crop_keeps_valid_labels(self):
        cfg = AugConfig(crop_size=16, scale_range=(2.0, 2.0))
        _, m = aug_weak(rand_image(4), rand_mask(4), 7, cfg)
        assert m.shape == (16, 16) and m.max() < 4

    def test_misaligned_mask(self):
        with pytest.raises(ValidationError):
            aug_weak(rand_image(0), rand_mask(0, h=8), 0, OFF)

    def test_seed_determinism(self):
        cfg = AugConfig(crop_size=16)
        a = aug_weak(rand_image(5), rand_mask(5), (1, 2, 3), cfg)
        b = aug_weak(rand_image(5), rand_mask(5), (1, 2, 3), cfg)
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


class TestStrongImage:
    def test_identity_when_disabled(self):
        img = rand_image(6)
        assert torch.equal(aug_strong_image(img, 0, OFF), img)

    def test_grayscale_channels_equal(self):
        cfg = AugConfig(jitter_prob=0, grayscale_prob=1.0, blur_prob=0)
        out = aug_strong_image(rand_image(7), 0, cfg)
        assert torch.equal(out[0], out[1]) and torch.equal(out[1], out[2])

    def test_output_in_unit_range(self):
        cfg = AugConfig(jitter_prob=1.0, blur_prob=1.0)
        for seed in range(20):
            out = aug_strong_image(rand_image(seed), seed, cfg)
            assert out.min() >= 0 and out.max() <= 1

    def test_views_differ_on_average(self):
        img, cfg = rand_image(8), AugConfig()
        diffs = [(aug_strong_image(img, (s, 1), cfg) - aug_strong_image(img, (s, 2), cfg)).pow(2).sum(0).sqrt().mean()
                 for s in range(1000)]
        assert float(np.mean(diffs)) > 0

    def test_blur_preserves_constant_image(self):
        cfg = AugConfig(jitter_prob=0, grayscale_prob=0, blur_prob=1.0)
        img = torch.full((3, 8, 8), 0.25)
        assert torch.allclose(aug_strong_image(img, 3, cfg), img, atol=1e-6)


class TestCutMixBox:
    def test_area_fraction_mean(self):
        areas = [sample_cutmix_box(64, 64, s).area / 64**2 for s in range(10000)]
        assert abs(np.mean(areas) - 0.5) < 0.02

    def test_limit_cases(self):
        # lam near 1 -> empty box, lam near 0 -> near full box
        import dssn.augment as aug
        real = aug.make_rng
        try:
            for lam, lo, hi in [(1 - 1e-9, 0, 0), (1e-9, 63 * 63, 64 * 64)]:
                aug.make_rng = lambda seed, lam=lam: _StubRng(lam)
                box = sample_cutmix_box(64, 64, 0)
                assert lo <= box.area <= hi
        finally:
            aug.make_rng = real

    @settings(max_examples=200, deadline=None)
    @given(h=st.integers(1, 40), w=st.integers(1, 40), seed=st.integers(0, 2**31))
    def test_box_inside_image(self, h, w, seed):
        sample_cutmix_box(h, w, seed).check(h, w)


class _StubRng:
    def __init__(self, lam):
        self.lam = lam

    def random(self):
        return self.lam

    def integers(self, lo, hi):
        return lo


class TestApplyCutMix:
    def test_zero_area_box(self):
        a, b = rand_image(9), rand_image(10)
        out, (m,) = apply_cutmix(a, b, [rand_mask(9)], [rand_mask(10)], CutMixBox(3, 3, 0, 0))
        assert torch.equal(out, a) and torch.equal(m, rand_mask(9))

    def test_full_box(self):
        a, b = rand_image(9), rand_image(10)
        out, (m,) = apply_cutmix(a, b, [rand_mask(9)], [rand_mask(10)], CutMixBox(0, 0, 16, 16))
        assert torch.equal(out, b) and torch.equal(m, rand_mask(10))

    def test_pixel_provenance(self):
        rng = np.random.default_rng(11)
        for trial in range(50):
            a, b = rand_image(2 * trial), rand_image(2 * trial + 1)
            ma, mb = rand_mask(2 * trial), rand_mask(2 * trial + 1) + 4  # disjoint label sets
            box = sample_cutmix_box(16, 16, int(rng.integers(1 << 30)))
            out, (m,) = apply_cutmix(a, b, [ma], [mb], box)
            for y in range(16):
                for x in range(16):
                    from_a = torch.equal(out[:, y, x], a[:, y, x]) and m[y, x] == ma[y, x]
                    from_b = torch.equal(out[:, y, x], b[:, y, x]) and m[y, x] == mb[y, x]
                    inside = box.top <= y < box.top + box.height and box.left <= x < box.left + box.width
                    assert from_b if inside else from_a

    def test_box_outside_rejected(self):
        with pytest.raises(ValidationError):
            apply_cutmix(rand_image(0), rand_image(1), [], [], CutMixBox(10, 10, 8, 8))

    def test_batch_partner_and_prob(self):
        imgs = torch.stack([rand_image(s) for s in range(3)])
        same, _, boxes = cutmix_batch(imgs, [], [(0, b) for b in range(3)], prob=0.0)
        assert torch.equal(same, imgs) and boxes == [None] * 3
        mixed, _, boxes = cutmix_batch(imgs, [], [(0, b) for b in range(3)], prob=1.0)
        for b, box in enumerate(boxes):
            if box.area:
                ys, xs = slice(box.top, box.top + box.height), slice(box.left, box.left + box.width)
                assert torch.equal(mixed[b, :, ys, xs], imgs[(b - 1) % 3, :, ys, xs])


class TestFeatureDropout:
    def test_zero_rate_identity(self):
        f = torch.randn(2, 4, 3, 3)
        assert aug_strong_feature(f, 0.0, 0) is f

    def test_half_rate_statistics(self):
        out = aug_strong_feature(torch.ones(10000), 0.5, 1)
        assert abs(float((out == 0).float().mean()) - 0.5) < 0.03
        assert torch.all(out[out != 0] == 2.0)

    def test_expectation_is_input(self):
        ones = torch.ones(64)
        mean = torch.stack([aug_strong_feature(ones, 0.5, s) for s in range(1000)]).mean(0)
        assert float((mean - 1).abs().max()) < 0.1

    def test_preserves_zeros_and_seed(self):
        f = torch.randn(2, 8, 4, 4)
        f[:, :2] = 0
        a, b = aug_strong_feature(f, 0.3, (1, 2)), aug_strong_feature(f, 0.3, (1, 2))
        assert torch.equal(a, b) and torch.all(a[:, :2] == 0)

    @pytest.mark.parametrize("rate", [-0.1, 1.0])
    def test_rate_validation(self, rate):
        with pytest.raises(ValidationError):
            aug_strong_feature(torch.ones(3), rate, 0)
