import numpy as np
import pytest

from deblurvae.circulant import (
    EPS_LARGE,
    EPS_SMALL,
    BccbOperator,
    apply,
    log_abs_det,
    log_abs_det_tensor,
    materialize_dense,
    resolve_epsilon,
)
from deblurvae.fft import fft2, pad_and_center_kernel
from deblurvae.tensor import Tensor, get_tape, grad_check


def gaussian_like(size, sigma=1.0):
    ax = np.arange(size) - size // 2
    g = np.exp(-(ax[:, None] ** 2 + ax[None] ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def dense_logdet(op):
    sign, val = np.linalg.slogdet(materialize_dense(op))
    return val


def test_identity_kernel_logdet_zero():
    for H, W in [(4, 4), (8, 16)]:
        assert log_abs_det(BccbOperator(np.ones((1, 1)), (H, W))) == 0.0


def test_scaled_delta_logdet():
    op = BccbOperator(np.full((1, 1), -2.5), (4, 8))
    assert log_abs_det(op) == pytest.approx(32 * np.log(2.5), rel=1e-14)


def test_gaussian_kernel_vs_dense_lu():
    op = BccbOperator(gaussian_like(3), (6, 6), epsilon=0.1)
    ref = dense_logdet(op)
    assert abs(log_abs_det(op) - ref) / abs(ref) < 1e-8


@pytest.mark.parametrize("n", [4, 6, 8])
@pytest.mark.parametrize("size", [3, 5])
@pytest.mark.parametrize("eps", [0.0, 0.1, 0.5])
@pytest.mark.parametrize("unit_sum", [True, False])
def test_logdet_matches_dense_across_grid(n, size, eps, unit_sum):
    rng = np.random.default_rng(n * 100 + size * 10 + int(eps * 10))
    k = rng.uniform(0, 1, (size, size))
    k = k / k.sum() if unit_sum else 2.0 * k
    op = BccbOperator(k, (n, n), epsilon=eps)
    ref = dense_logdet(op)
    assert abs(log_abs_det(op) - ref) <= 1e-8 * max(abs(ref), 1e-300)


def test_singular_kernel_raises_with_frequency():
    box = np.zeros((3, 3))
    box[1:, 1:] = 0.25  # 2x2 box kernel suppresses the Nyquist frequencies
    with pytest.raises(np.linalg.LinAlgError, match="frequency"):
        log_abs_det(BccbOperator(box, (8, 8), epsilon=0.0))


def test_logdet_increases_with_epsilon():
    box = np.zeros((3, 3))
    box[1:, 1:] = 0.25
    vals = [log_abs_det(BccbOperator(box, (8, 8), epsilon=e)) for e in (0.01, 0.1, 0.5, 1.0)]
    assert all(np.isfinite(vals))
    assert all(a < b for a, b in zip(vals, vals[1:]))


def test_dense_identity_plus_eps():
    M = materialize_dense(BccbOperator(np.ones((1, 1)), (4, 4), epsilon=0.3))
    np.testing.assert_array_equal(M, 1.3 * np.eye(16))


def test_dense_matvec_vs_direct_conv():
    rng = np.random.default_rng(0)
    k = rng.standard_normal((3, 3))
    op = BccbOperator(k, (6, 8))
    x = rng.standard_normal((6, 8))
    H, W = 6, 8
    direct = np.zeros((H, W))
    for p in range(H):
        for q in range(W):
            for i in range(3):
                for j in range(3):
                    direct[p, q] += k[i, j] * x[(p - i + 1) % H, (q - j + 1) % W]
    assert np.abs(materialize_dense(op) @ x.ravel() - direct.ravel()).max() < 1e-12


def test_dense_is_bccb():
    k = np.random.default_rng(1).standard_normal((3, 3))
    H, W = 4, 6
    M = materialize_dense(BccbOperator(k, (H, W)))
    row0 = M[0].reshape(H, W)
    for p in range(H * W):
        pr, pc = divmod(p, W)
        np.testing.assert_array_equal(M[p].reshape(H, W), np.roll(row0, (pr, pc), axis=(0, 1)))


def test_dense_size_cap():
    with pytest.raises(ValueError):
        materialize_dense(BccbOperator(np.ones((1, 1)), (128, 64)))


def test_apply_cases():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((6, 6))
    with pytest.raises(ValueError):
        apply(BccbOperator(np.ones((1, 1)), (8, 8)), x)
    x = rng.standard_normal((8, 8))
    np.testing.assert_allclose(apply(BccbOperator(np.ones((1, 1)), (8, 8)), x), x, atol=1e-14)
    np.testing.assert_allclose(apply(BccbOperator(np.zeros((3, 3)), (8, 8), epsilon=1.0), x), x, atol=1e-14)


def test_apply_matches_dense_on_power_of_two_grid():
    rng = np.random.default_rng(3)
    k = rng.standard_normal((3, 3))
    op = BccbOperator(k, (8, 8), epsilon=0.2)
    x = rng.standard_normal((8, 8))
    assert np.abs(apply(op, x).ravel() - materialize_dense(op) @ x.ravel()).max() < 1e-10


def test_eigenvalue_cache_is_coherent():
    k = gaussian_like(5)
    op = BccbOperator(k, (8, 8))
    assert np.array_equal(op.eigenvalues, fft2(pad_and_center_kernel(k, 8, 8)))


def test_epsilon_presets():
    assert resolve_epsilon("large") == EPS_LARGE == 0.5
    assert resolve_epsilon("small") == EPS_SMALL
    assert resolve_epsilon(0.2) == 0.2
    with pytest.raises(ValueError):
        resolve_epsilon(-1)


def test_logdet_tensor_matches_scalar_and_gradcheck():
    get_tape().clear()
    rng = np.random.default_rng(4)
    k = Tensor(rng.uniform(0.1, 1.0, (2, 3, 3)), requires_grad=True)
    vals = log_abs_det_tensor(k, 8, 8, 0.1).data
    for b in range(2):
        assert vals[b] == pytest.approx(log_abs_det(BccbOperator(k.data[b], (8, 8), 0.1)), rel=1e-13)
    w = Tensor([0.7, -1.3])
    assert grad_check(lambda: (log_abs_det_tensor(k, 8, 8, 0.1) * w).sum(), [k]) < 1e-4


def test_logdet_gradient_unit_sum_kernel_vs_dense_differences():
    # derivative of log|det| from two dense evaluations, independent of the FFT path
    k = gaussian_like(3, 0.8)
    h = 1e-6
    kt = Tensor(k[None].copy(), requires_grad=True)
    get_tape().clear()
    out = log_abs_det_tensor(kt, 4, 4, 0.1).sum()
    out.backward()
    for i, j in [(0, 0), (1, 1), (2, 1)]:
        kp, km = k.copy(), k.copy()
        kp[i, j] += h
        km[i, j] -= h
        num = (dense_logdet(BccbOperator(kp, (4, 4), 0.1)) - dense_logdet(BccbOperator(km, (4, 4), 0.1))) / (2 * h)
        assert abs(kt.grad[0, i, j] - num) / abs(num) < 1e-4
    get_tape().clear()


def test_oversized_kernel_folds_onto_grid():
    k = np.random.default_rng(5).uniform(0, 1, (5, 5))
    folded = np.zeros((4, 4))
    for i in range(5):
        for j in range(5):
            folded[(i - 2) % 4, (j - 2) % 4] += k[i, j]
    op = BccbOperator(k, (4, 4))
    np.testing.assert_allclose(op.eigenvalues, np.fft.fft2(folded), atol=1e-12)
    get_tape().clear()
    kt = Tensor(k[None].copy(), requires_grad=True)
    assert grad_check(lambda: log_abs_det_tensor(kt, 4, 4, 0.5).sum(), [kt]) < 1e-4


def test_apply_matches_dense_on_six_by_six():
    rng = np.random.default_rng(6)
    op = BccbOperator(rng.standard_normal((3, 3)), (6, 6), epsilon=0.3)
    x = rng.standard_normal((6, 6))
    assert np.abs(apply(op, x).ravel() - materialize_dense(op) @ x.ravel()).max() < 1e-10
