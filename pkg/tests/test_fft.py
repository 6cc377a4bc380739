import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deblurvae.fft import (
    circular_convolve,
    fft2,
    ifft2,
    is_hermitian,
    naive_dft2,
    pad_and_center_kernel,
    parseval_gap,
    unpad_kernel,
)


def direct_circular_conv(x, k):
    H, W = x.shape
    s = k.shape[0]
    c = s // 2
    out = np.zeros_like(x)
    for p in range(H):
        for q in range(W):
            for i in range(s):
                for j in range(s):
                    out[p, q] += k[i, j] * x[(p - (i - c)) % H, (q - (j - c)) % W]
    return out


def test_impulse_gives_flat_spectrum():
    x = np.zeros((4, 4))
    x[0, 0] = 1
    np.testing.assert_allclose(fft2(x), np.ones((4, 4)), atol=1e-15)


def test_constant_image_dc_only():
    X = fft2(np.full((8, 4), 0.3))
    assert X[0, 0] == pytest.approx(0.3 * 32)
    X[0, 0] = 0
    assert np.abs(X).max() < 1e-14


def test_fft_matches_naive_dft():
    x = np.random.default_rng(0).standard_normal((16, 16))
    assert np.abs(fft2(x) - naive_dft2(x)).max() < 1e-9


def test_fft_non_square_matches_naive():
    x = np.random.default_rng(1).standard_normal((4, 8))
    assert np.abs(fft2(x) - naive_dft2(x)).max() < 1e-10


def test_non_power_of_two_rejected():
    with pytest.raises(ValueError, match="height 6"):
        fft2(np.zeros((6, 8)))
    with pytest.raises(ValueError, match="width 12"):
        fft2(np.zeros((8, 12)))


def test_round_trip():
    x = np.random.default_rng(2).standard_normal((8, 8))
    assert np.abs(ifft2(fft2(x)) - x).max() < 1e-12


def test_inverse_of_flat_spectrum_is_impulse():
    out = ifft2(np.ones((4, 4), dtype=complex))
    expected = np.zeros((4, 4))
    expected[0, 0] = 1
    np.testing.assert_allclose(out, expected, atol=1e-15)


def test_linear_phase_gives_shifted_impulse():
    H, W = 8, 8
    u = np.arange(H)[:, None]
    v = np.arange(W)[None, :]
    X = np.exp(-2j * np.pi * (u * 3 / H + v * 5 / W))
    expected = np.zeros((H, W))
    expected[3, 5] = 1
    # the oracle spectrum of that impulse, computed independently
    assert np.abs(naive_dft2(expected) - X).max() < 1e-12
    assert np.abs(ifft2(X) - expected).max() < 1e-12


def test_non_hermitian_rejected_in_strict_mode():
    X = np.zeros((4, 4), dtype=complex)
    X[0, 1] = 1.0
    assert not is_hermitian(X)
    with pytest.raises(ValueError):
        ifft2(X)
    assert ifft2(X, real=False, strict=False).dtype == np.complex128


def test_real_input_spectrum_is_hermitian():
    X = fft2(np.random.default_rng(3).standard_normal((16, 8)))
    H, W = X.shape
    for u in range(H):
        for v in range(W):
            assert abs(X[u, v] - np.conj(X[-u % H, -v % W])) < 1e-12


def test_pad_unit_kernel_is_impulse():
    out = pad_and_center_kernel(np.ones((1, 1)), 4, 4)
    expected = np.zeros((4, 4))
    expected[0, 0] = 1
    np.testing.assert_array_equal(out, expected)


def test_pad_3x3_wraps_to_corners():
    k = np.arange(1.0, 10.0).reshape(3, 3)
    out = pad_and_center_kernel(k, 4, 4)
    assert out[0, 0] == 5  # center
    assert out[3, 3] == 1  # top-left offset (-1, -1)
    assert out[3, 1] == 3
    assert out[1, 3] == 7
    assert out[1, 1] == 9
    assert out.sum() == k.sum()
    np.testing.assert_array_equal(unpad_kernel(out, 3, 3), k)


def test_symmetric_kernel_has_real_spectrum():
    k = np.array([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]]) / 16
    X = fft2(pad_and_center_kernel(k, 8, 8))
    assert np.abs(X.imag).max() < 1e-15


def test_kernel_larger_than_image_rejected():
    with pytest.raises(ValueError):
        pad_and_center_kernel(np.ones((5, 5)), 4, 4)
    with pytest.raises(ValueError):
        pad_and_center_kernel(np.ones((2, 2)), 4, 4)


def test_convolution_theorem_against_loop():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((16, 16))
    k = rng.standard_normal((5, 5))
    assert np.abs(circular_convolve(x, k) - direct_circular_conv(x, k)).max() < 1e-10


def test_parseval_examples():
    x = np.random.default_rng(5).standard_normal((32, 32))
    assert parseval_gap(x) < 1e-10
    assert parseval_gap(np.zeros((8, 8))) == 0.0
    assert parseval_gap(np.full((16, 16), 0.7)) < 1e-14


def test_parseval_many_random_images():
    rng = np.random.default_rng(6)
    xs = rng.standard_normal((1000, 32, 32))
    X = fft2(xs)
    energy = (xs ** 2).sum(axis=(1, 2))
    spec = (np.abs(X) ** 2).sum(axis=(1, 2)) / 1024
    assert (np.abs(energy - spec) / energy).max() < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2 ** 31))
def test_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 8, 16))
    lhs = fft2(a * x + b * y)
    rhs = a * fft2(x) + b * fft2(y)
    assert np.abs(lhs - rhs).max() < 1e-10


def test_batched_transform_matches_per_image():
    xs = np.random.default_rng(7).standard_normal((3, 2, 8, 8))
    X = fft2(xs)
    for i in range(3):
        for c in range(2):
            np.testing.assert_allclose(X[i, c], fft2(xs[i, c]), atol=1e-13)
