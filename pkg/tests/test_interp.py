import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from embshift.interp import (
    Dims,
    Method,
    UpsampleSpec,
    cubic_kernel,
    duplication_decompose,
    resample_weights,
    upsample1d,
    upsample2d,
)
from embshift.tensor import SeededRng, randn, stats

METHODS = list(Method)


def _brute_bilinear_1d(x, m):
    """Direct evaluation of the half-pixel rule, one output at a time."""
    n = len(x)
    out = []
    for j in range(m):
        src = min(max((j + 0.5) * n / m - 0.5, 0.0), n - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n - 1)
        f = src - i0
        out.append((1 - f) * x[i0] + f * x[i1])
    return np.array(out)


def _brute_bicubic_1d(x, m, a=-0.75):
    def w(d):
        d = abs(d)
        if d <= 1:
            return (a + 2) * d**3 - (a + 3) * d**2 + 1
        if d < 2:
            return a * d**3 - 5 * a * d**2 + 8 * a * d - 4 * a
        return 0.0

    n = len(x)
    out = []
    for j in range(m):
        src = (j + 0.5) * n / m - 0.5
        i0 = int(np.floor(src))
        acc = 0.0
        for i in range(i0 - 1, i0 + 3):
            acc += w(src - i) * x[min(max(i, 0), n - 1)]
        out.append(acc)
    return np.array(out)


def test_nearest_integer_scale_duplicates():
    out = upsample1d([1, 2, 3], UpsampleSpec("nearest", 6, "1d"))
    np.testing.assert_array_equal(out, [1, 1, 2, 2, 3, 3])


def test_bilinear_hand_value():
    out = upsample1d([0, 1], UpsampleSpec("bilinear", 4, "1d"))
    np.testing.assert_allclose(out, [0, 0.25, 0.75, 1], atol=1e-15)


@pytest.mark.parametrize("m", [5, 8, 13, 31])
def test_against_brute_force(m):
    x = randn(5, SeededRng(1))
    np.testing.assert_allclose(upsample1d(x, UpsampleSpec("bilinear", m, "1d")), _brute_bilinear_1d(x, m), atol=1e-12)
    np.testing.assert_allclose(upsample1d(x, UpsampleSpec("bicubic", m, "1d")), _brute_bicubic_1d(x, m), atol=1e-12)


def test_cubic_kernel_partition_of_unity():
    t = np.linspace(0, 1, 101)
    total = cubic_kernel(t + 1) + cubic_kernel(t) + cubic_kernel(1 - t) + cubic_kernel(2 - t)
    np.testing.assert_allclose(total, 1.0, atol=1e-12)
    assert cubic_kernel(0) == 1 and cubic_kernel(1) == 0 and cubic_kernel(2) == 0


@pytest.mark.parametrize("method", METHODS)
def test_weights_sum_to_one(method):
    _, w = resample_weights(7, 19, method)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("method", METHODS)
def test_identity_size(method):
    x = randn(17, SeededRng(3))
    np.testing.assert_allclose(upsample1d(x, UpsampleSpec(method, 17, "1d")), x, atol=1e-12)
    img = randn((6, 9, 2), SeededRng(4))
    np.testing.assert_allclose(upsample2d(img, UpsampleSpec(method, (6, 9), "2d")), img, atol=1e-12)


def test_downsampling_rejected():
    with pytest.raises(ValueError):
        upsample1d(np.zeros(8), UpsampleSpec("bicubic", 4, "1d"))
    with pytest.raises(ValueError):
        upsample2d(np.zeros((8, 8)), UpsampleSpec("bilinear", (16, 4), "2d"))
    with pytest.raises(ValueError):
        upsample1d(np.zeros(8), UpsampleSpec("bicubic", (16, 16), "2d"))


def test_nearest_2d_blocks():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = upsample2d(x, UpsampleSpec("nearest", (4, 4), "2d"))
    np.testing.assert_array_equal(out, np.kron(x, np.ones((2, 2))))


@pytest.mark.parametrize("method", ["bilinear", "bicubic"])
def test_separability_order(method):
    for seed in range(5):
        img = randn((9, 13, 3), SeededRng(seed))
        spec = UpsampleSpec(method, (20, 29), "2d")
        np.testing.assert_allclose(upsample2d(img, spec, order="rows"), upsample2d(img, spec, order="cols"), atol=1e-9)


def test_channels_processed_independently():
    img = randn((5, 5, 3), SeededRng(8))
    spec = UpsampleSpec("bicubic", (11, 11), "2d")
    out = upsample2d(img, spec)
    for c in range(3):
        np.testing.assert_allclose(out[:, :, c], upsample2d(img[:, :, c], spec), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.floats(1.0, 4.0), st.integers(0, 2**32 - 1))
def test_bilinear_stays_within_range_of_monotone_inputs(n, scale, seed):
    x = np.cumsum(np.abs(np.random.default_rng(seed).standard_normal(n)))
    out = upsample1d(x, UpsampleSpec("bilinear", int(n * scale), "1d"))
    assert out.min() >= x.min() - 1e-12 and out.max() <= x.max() + 1e-12


def test_bicubic_may_overshoot():
    # documented behaviour: no value clamping after cubic convolution
    out = upsample1d([0, 0, 1, 1], UpsampleSpec("bicubic", 16, "1d"))
    assert out.min() < 0 or out.max() > 1


@pytest.mark.parametrize("method", METHODS)
def test_mean_conservation(method):
    v = randn(10**5, SeededRng(12))
    out = upsample1d(v, UpsampleSpec(method, 2 * 10**5, "1d"))
    assert abs(stats(out).mean - stats(v).mean) <= 0.01


def test_duplication_decompose_cases():
    assert duplication_decompose([1, 2], [1, 1, 2, 2])
    assert not duplication_decompose([1, 2], [1, 1, 1, 2])
    with pytest.raises(ValueError):
        duplication_decompose([1, 2], [1, 1, 2])


@pytest.mark.parametrize("scale", [1, 2, 3, 5])
def test_nearest_is_duplication_type(scale):
    v = randn(257, SeededRng(scale))
    out = upsample1d(v, UpsampleSpec("nearest", scale * 257, "1d"))
    # sort-and-compare oracle
    np.testing.assert_array_equal(np.sort(out), np.sort(np.repeat(v, scale)))
    assert duplication_decompose(v, out)
    assert stats(out).mean == pytest.approx(stats(v).mean, abs=1e-12)
    assert stats(out).variance == pytest.approx(stats(v).variance, rel=1e-12)


@pytest.mark.parametrize("method", ["bilinear", "bicubic"])
def test_interpolation_is_not_duplication(method):
    v = randn(64, SeededRng(0))
    assert not duplication_decompose(v, upsample1d(v, UpsampleSpec(method, 128, "1d")))


def test_2d_ratio_matches_squared_1d_ratio():
    one_d, two_d = [], []
    for t in range(200):
        v = randn(4096, SeededRng(0, t))
        one_d.append(stats(upsample1d(v, UpsampleSpec("bicubic", 8192, "1d"))).variance / stats(v).variance)
        img = randn((64, 64), SeededRng(1, t))
        two_d.append(stats(upsample2d(img, UpsampleSpec("bicubic", (128, 128), "2d"))).variance / stats(img).variance)
    assert abs(np.mean(two_d) - np.mean(one_d) ** 2) <= 0.02


def test_spec_validation():
    with pytest.raises(ValueError):
        UpsampleSpec("area", 4, "1d")
    with pytest.raises(ValueError):
        UpsampleSpec("nearest", (4, 4), "1d")
    assert UpsampleSpec("nearest", 4, "1d").dims is Dims.ONE_D
