import math

import numpy as np
import pytest

from embshift.augment import (
    DEFAULT_IMAGENET,
    IDENTITY,
    INCEPTION,
    EraseMode,
    NormStats,
    beta_mixup_variance_factor,
    cutmix,
    cutmix_box,
    erase_box,
    expected_erase_fraction,
    extended_mixup,
    mixup,
    normalize,
    random_erase,
    random_resize_crop,
    sample_cutmix_mask,
)
from embshift.tensor import SeededRng, randn, stats


def _pair(n, seed):
    return randn(n, SeededRng(seed, 0)), randn(n, SeededRng(seed, 1))


@pytest.mark.parametrize("lam, expected", [(0.5, 0.5), (0.8, 0.68)])
def test_mixup_variance(lam, expected):
    a, b = _pair(10**5, 1)
    assert abs(stats(mixup(a, b, lam)).variance - expected) < 0.02


def test_mixup_identity_and_errors():
    a = randn((4, 4, 3), SeededRng(2))
    np.testing.assert_allclose(mixup(a, a, 0.37), a, atol=1e-15)
    for lam in (0.0, 1.0, -0.1, 1.2):
        with pytest.raises(ValueError):
            mixup(a, a, lam)
    with pytest.raises(ValueError):
        mixup(a, a[:2], 0.5)


def test_beta_mixup_factor_matches_sampling():
    g = np.random.default_rng(0)
    for alpha in (0.2, 0.8, 1.0, 4.0):
        lam = g.beta(alpha, alpha, size=10**6)
        mc = np.mean(lam**2 + (1 - lam) ** 2)
        assert beta_mixup_variance_factor(alpha) == pytest.approx(mc, abs=2e-3)


def test_extended_mixup():
    a, b = _pair(10**5, 3)
    a, b = a + 1.0, b + 1.0
    r = 1 / math.sqrt(2)
    s = stats(extended_mixup(a, b, r, r))
    assert abs(s.variance / stats(a).variance - 1) < 0.02
    assert abs(s.mean - math.sqrt(2)) < 0.02
    np.testing.assert_allclose(extended_mixup(a, b, 0.3, 0.7), mixup(a, b, 0.3), atol=1e-12)
    np.testing.assert_array_equal(extended_mixup(a, b, 1.0, 0.0), a)


def test_cutmix_trivial_masks():
    a, b = randn((6, 6, 3), SeededRng(1)), randn((6, 6, 3), SeededRng(2))
    np.testing.assert_array_equal(cutmix(a, b, np.ones((6, 6))), a)
    np.testing.assert_array_equal(cutmix(a, b, np.zeros((6, 6))), b)
    with pytest.raises(ValueError):
        cutmix(a, b, np.full((6, 6), 0.5))


def test_cutmix_conserves_on_average():
    # rectangle covering ~37% of a 64x64 image
    mask = np.ones((64, 64))
    mask[:39, :39] = 0
    assert 0.36 < 1 - mask.mean() < 0.38
    var, mean = [], []
    for seed in range(1000):
        a, b = randn((64, 64, 3), SeededRng(seed, 0)), randn((64, 64, 3), SeededRng(seed, 1))
        s = stats(cutmix(a, b, mask))
        var.append(s.variance)
        mean.append(s.mean)
    assert abs(np.mean(var) - 1) < 0.02
    assert abs(np.mean(mean)) < 0.02


def _expected_clipped_area(h, w, lam):
    """Enumerate every centre position: mean zero-region area after clipping."""
    ch, cw = int(round(h * math.sqrt(1 - lam))), int(round(w * math.sqrt(1 - lam)))
    def span(n, c):
        return np.mean([min(n, cy - c // 2 + c) - max(0, cy - c // 2) for cy in range(n)])
    return span(h, ch) * span(w, cw)


def test_cutmix_mask_area():
    y0, y1, x0, x1, ch, cw = cutmix_box((32, 32), 0.5, SeededRng(0))
    # unclipped area ~ 512 up to side rounding
    assert abs(ch * cw - 512) <= 32
    areas = [(1 - sample_cutmix_mask((32, 32), 0.5, SeededRng(0, i))).sum() for i in range(10**4)]
    oracle = _expected_clipped_area(32, 32, 0.5)
    assert np.mean(areas) == pytest.approx(oracle, rel=0.02)


def test_cutmix_mask_limits_and_determinism():
    m = sample_cutmix_mask((32, 32), 0.999, SeededRng(1))
    assert m.mean() > 0.99
    np.testing.assert_array_equal(sample_cutmix_mask((16, 24), 0.3, SeededRng(5)), sample_cutmix_mask((16, 24), 0.3, SeededRng(5)))
    with pytest.raises(ValueError):
        sample_cutmix_mask((8, 8), 1.0, SeededRng(0))


def test_erase_prob_zero_is_identity():
    x = randn((16, 16, 3), SeededRng(0))
    np.testing.assert_array_equal(random_erase(x, "const", 0.0, rng=SeededRng(1)), x)


def test_erase_modes_fill_values():
    x = randn((32, 32, 3), SeededRng(0)) + 10.0
    const = random_erase(x, "const", 1.0, rng=SeededRng(3))
    rand = random_erase(x, "rand", 1.0, rng=SeededRng(3))
    pixel = random_erase(x, "pixel", 1.0, rng=SeededRng(3))
    hole = const != x
    assert hole.any() and np.all(const[hole] == 0)
    assert np.unique(rand[rand != x]).size == 1
    vals = pixel[pixel != x]
    assert np.unique(vals).size == vals.size


def test_erase_range_errors():
    x = np.zeros((8, 8, 3))
    with pytest.raises(ValueError):
        random_erase(x, "pixel", 1.0, area_range=(0.5, 0.2), rng=SeededRng(0))
    with pytest.raises(ValueError):
        random_erase(x, "pixel", 1.0, aspect_range=(2.0, 1.0), rng=SeededRng(0))
    with pytest.raises(ValueError):
        random_erase(x, "pixel", 1.5, rng=SeededRng(0))


def test_erase_pixel_conserves():
    var, mean = [], []
    for seed in range(1000):
        x = randn((32, 32, 3), SeededRng(seed, 0))
        s = stats(random_erase(x, EraseMode.PIXEL, 1.0, rng=SeededRng(seed, 1)))
        var.append(s.variance)
        mean.append(s.mean)
    assert abs(np.mean(var) - 1) < 0.02
    assert abs(np.mean(mean)) < 0.02


def test_erase_const_drops_by_fraction():
    gaps = []
    for seed in range(1000):
        x = randn((32, 32, 3), SeededRng(seed, 0))
        out = random_erase(x, EraseMode.CONST, 1.0, rng=SeededRng(seed, 1))
        f = np.mean(out != x)
        gaps.append(stats(out).variance - (1 - f) * stats(x).variance)
    assert abs(np.mean(gaps)) < 0.02


def test_expected_erase_fraction_matches_direct_sampling():
    g = np.random.default_rng(3)
    areas = []
    for _ in range(20000):
        box = erase_box(64, 64, (0.02, 1 / 3), (0.3, 10 / 3), g)
        areas.append(0 if box is None else box[2] * box[3] / 64**2)
    assert expected_erase_fraction((64, 64)) == pytest.approx(np.mean(areas), abs=0.005)


def test_norm_presets():
    assert DEFAULT_IMAGENET.mean == (0.485, 0.456, 0.406)
    assert DEFAULT_IMAGENET.std == (0.229, 0.224, 0.225)
    assert INCEPTION.mean == INCEPTION.std == (0.5, 0.5, 0.5)
    assert NormStats.named("identity") is IDENTITY
    with pytest.raises(ValueError):
        NormStats((0, 0, 0), (1, 0, 1))
    with pytest.raises(ValueError):
        NormStats.named("cifar")


def test_normalize_identity_and_inception_on_uniform():
    x = np.random.default_rng(0).uniform(0, 1, size=(256, 256, 3))
    np.testing.assert_array_equal(normalize(x, IDENTITY), x)
    y = normalize(x, INCEPTION)
    for c in range(3):
        s = stats(y[:, :, c])
        assert abs(s.mean) < 0.01
        assert abs(s.variance - 1 / 3) < 0.01


def test_normalize_default_stats_on_matching_input():
    # oracle: build the input by inverting the normalization
    z = randn((256, 256, 3), SeededRng(4))
    x = z * np.array(DEFAULT_IMAGENET.std) + np.array(DEFAULT_IMAGENET.mean)
    s = stats(normalize(x, DEFAULT_IMAGENET))
    assert abs(s.mean) < 0.01
    assert abs(s.variance - 1) < 0.01


def test_normalize_channel_mismatch():
    with pytest.raises(ValueError):
        normalize(np.zeros((4, 4, 2)), DEFAULT_IMAGENET)


def test_resize_crop_identity_and_errors():
    x = randn((12, 12, 3), SeededRng(0))
    np.testing.assert_allclose(random_resize_crop(x, (1.0, 1.0), (12, 12), "bicubic", SeededRng(1)), x, atol=1e-12)
    with pytest.raises(ValueError):
        random_resize_crop(x, (1.0, 1.0), (13, 12), "bicubic", SeededRng(1))
    with pytest.raises(ValueError):
        random_resize_crop(x, (0.5, 1.0), (6, 6), "bicubic", SeededRng(1))


@pytest.mark.parametrize("method, expected", [("bicubic", 0.7295), ("nearest", 1.0)])
def test_resize_crop_variance_ratio(method, expected):
    ratios = []
    for seed in range(200):
        x = randn((64, 64), SeededRng(seed))
        out = random_resize_crop(x, (2.0, 2.0), (64, 64), method, SeededRng(seed, 1), center=True)
        ratios.append(stats(out).variance / stats(x).variance)
    assert abs(np.mean(ratios) - expected) < 0.03
