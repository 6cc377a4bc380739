import numpy as np
import pytest

from deblurvae.circulant import BccbOperator, materialize_dense
from deblurvae.fft import circular_convolve
from deblurvae.kernels import gaussian_kernel
from deblurvae.tensor import Tensor, get_tape, grad_check
from deblurvae.wiener import (
    assemble_elbo,
    baseline_loss,
    build_weight,
    gaussian_log_likelihood,
    identity_weight,
    kl_standard_normal,
    weighted_recon_loss,
)


@pytest.fixture(autouse=True)
def _fresh_tape():
    get_tape().clear()
    yield
    get_tape().clear()


def edge_image(n=32):
    x = -np.ones((n, n))
    x[:, n // 2:] = 1.0
    x[n // 4: n // 2, n // 4: 3 * n // 4] = 0.3
    return x


def test_delta_kernel_gives_constant_weight():
    w = build_weight(np.ones((1, 1)), 0.025, 8, 8)
    np.testing.assert_allclose(w.grid, np.full((8, 8), 1 / 1.025), atol=1e-15)


@pytest.mark.parametrize("C", [0.0, -1.0])
def test_nonpositive_C_rejected(C):
    with pytest.raises(ValueError):
        build_weight(np.ones((1, 1)), C, 4, 4)


def test_gain_bounded_by_wiener_cap():
    rng = np.random.default_rng(0)
    for C in (1e-3, 0.025, 0.5):
        k = rng.standard_normal((5, 5))
        w = build_weight(k, C, 16, 16)
        assert np.abs(w.grid).max() <= 1 / (2 * np.sqrt(C)) + 1e-12


def test_gaussian_kernel_gain_rises_toward_high_frequencies():
    k = gaussian_kernel(5, 1.0).weights
    w = build_weight(k, 0.025, 32, 32)
    row = np.abs(w.grid[0, :17])
    assert row[0] < 1
    # 1D analog by hand: separable Gaussian -> Lambda(0, v) = sum_j g_j cos(2 pi v j / W)
    g1 = np.exp(-(np.arange(5) - 2) ** 2 / 2.0)
    g1 /= g1.sum()
    lam = np.array([np.sum(g1 * np.cos(2 * np.pi * v * (np.arange(5) - 2) / 32)) for v in range(17)])
    np.testing.assert_allclose(row, np.abs(lam) / (lam ** 2 + 0.025), rtol=1e-10)
    assert np.argmax(row) > 4


def test_weighted_loss_zero_when_equal():
    x = np.random.default_rng(1).standard_normal((2, 1, 8, 8))
    w = build_weight(gaussian_kernel(3, 0.8).weights, 0.025, 8, 8)
    assert weighted_recon_loss(x, x.copy(), w).item() == 0.0


def test_identity_weight_is_summed_squared_error():
    rng = np.random.default_rng(2)
    x, xh = rng.standard_normal((2, 3, 2, 16, 16))
    ref = np.sum((x - xh) ** 2) / 3
    assert abs(weighted_recon_loss(x, xh, identity_weight(16, 16)).item() - ref) < 1e-10 * ref


def test_blurred_error_amplified_by_matched_kernel():
    x = edge_image()
    k = gaussian_kernel(7, 1.5).weights
    xb = circular_convolve(x, k)
    mse = np.sum((x - xb) ** 2)
    wl = weighted_recon_loss(x, xb, build_weight(k, 0.025, 32, 32)).item()
    assert wl > mse


def test_blur_sensitivity_ranking():
    x = edge_image()
    k = gaussian_kernel(7, 1.5).weights
    blurred = circular_convolve(x, k)
    err_blur = blurred - x
    noise = np.random.default_rng(3).standard_normal(x.shape)
    noisy = x + noise * np.sqrt(np.sum(err_blur ** 2) / np.sum(noise ** 2))
    w = build_weight(k, 0.025, 32, 32)
    mse_a, mse_b = np.sum((blurred - x) ** 2), np.sum((noisy - x) ** 2)
    wa = weighted_recon_loss(x, blurred, w).item()
    wb = weighted_recon_loss(x, noisy, w).item()
    assert abs(mse_a / mse_b - 1) < 1e-10
    assert wa / wb > mse_a / mse_b


def test_weighted_loss_gradcheck_both_inputs():
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((2, 1, 8, 8)), requires_grad=True)
    xh = Tensor(rng.standard_normal((2, 1, 8, 8)), requires_grad=True)
    k = rng.uniform(0, 1, (2, 3, 3))
    w = build_weight(k, 0.025, 8, 8)  # per-sample grids, asymmetric kernels
    assert grad_check(lambda: weighted_recon_loss(x, xh, w), [x, xh]) < 1e-4


def test_weighted_loss_shape_errors():
    w = identity_weight(8, 8)
    with pytest.raises(ValueError):
        weighted_recon_loss(np.zeros((8, 8)), np.zeros((8, 4)), w)
    with pytest.raises(ValueError):
        weighted_recon_loss(np.zeros((4, 4)), np.zeros((4, 4)), w)


def dense_gaussian_nll(x, xh, k, eps):
    op = BccbOperator(k, x.shape, eps)
    K = materialize_dense(op)
    sigma = K @ K.T
    e = (x - xh).ravel()
    sign, logdet = np.linalg.slogdet(sigma)
    quad = e @ np.linalg.solve(sigma, e)
    return 0.5 * quad + 0.5 * logdet + 0.5 * e.size * np.log(2 * np.pi)


@pytest.mark.parametrize("seed", range(5))
def test_gaussian_nll_matches_dense_density(seed):
    rng = np.random.default_rng(seed)
    k = rng.uniform(0, 1, (3, 3))
    k[1, 1] += 3.0  # center-heavy kernels are safely invertible
    k /= k.sum()
    x, xh = rng.standard_normal((2, 4, 4))
    ref = dense_gaussian_nll(x, xh, k, 0.0)
    got = gaussian_log_likelihood(x, xh, build_weight(k, 1e-12, 4, 4), BccbOperator(k, (4, 4))).item()
    assert abs(got - ref) / abs(ref) < 1e-6


def test_gaussian_nll_identity_reduces_to_unit_gaussian():
    rng = np.random.default_rng(5)
    x, xh = rng.standard_normal((2, 8, 8))
    got = gaussian_log_likelihood(x, xh, identity_weight(8, 8), BccbOperator(np.ones((1, 1)), (8, 8))).item()
    ref = 32 * np.log(2 * np.pi) + 0.5 * np.sum((x - xh) ** 2)
    assert got == pytest.approx(ref, rel=1e-12)


def test_gaussian_nll_scalar_kernel_logdet():
    x = np.zeros((4, 4))
    base = gaussian_log_likelihood(x, x, identity_weight(4, 4), BccbOperator(np.ones((1, 1)), (4, 4))).item()
    scaled = gaussian_log_likelihood(x, x, identity_weight(4, 4), BccbOperator(np.full((1, 1), 3.0), (4, 4))).item()
    assert scaled - base == pytest.approx(16 * np.log(3.0), rel=1e-12)


def test_kl_examples():
    assert kl_standard_normal(np.zeros((3, 4)), np.zeros((3, 4))).item() == 0.0
    assert kl_standard_normal(np.ones((1, 1)), np.zeros((1, 1))).item() == pytest.approx(0.5)


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(6)
    mu = rng.standard_normal(4) * 0.7
    logvar = rng.standard_normal(4) * 0.5
    sd = np.exp(0.5 * logvar)
    z = mu + sd * rng.standard_normal((1_000_000, 4))
    log_q = -0.5 * (((z - mu) / sd) ** 2 + logvar + np.log(2 * np.pi))
    log_p = -0.5 * (z ** 2 + np.log(2 * np.pi))
    mc = np.mean(np.sum(log_q - log_p, axis=1))
    exact = kl_standard_normal(mu[None], logvar[None]).item()
    assert abs(mc - exact) / exact < 1e-2


def test_kl_gradcheck():
    rng = np.random.default_rng(7)
    mu = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    lv = Tensor(rng.standard_normal((3, 5)) * 0.3, requires_grad=True)
    assert grad_check(lambda: kl_standard_normal(mu, lv), [mu, lv]) < 1e-4


def test_baseline_examples():
    x = np.random.default_rng(8).standard_normal((2, 1, 4, 4))
    assert baseline_loss("L2", x, x).item() == 0.0
    assert baseline_loss("L1", np.zeros((1, 1)), np.ones((1, 1))).item() == 1.0
    half = np.full((1, 1, 4, 4), 0.5)
    assert baseline_loss("CE", half, half).item() == pytest.approx(16 * np.log(2), rel=1e-12)


def test_baseline_errors():
    with pytest.raises(ValueError):
        baseline_loss("CE", np.full((1, 1, 2, 2), -0.5), np.full((1, 1, 2, 2), 0.5))
    with pytest.raises(ValueError):
        baseline_loss("L3", np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 2)))


@pytest.mark.parametrize("kind", ["L2", "L1", "CE"])
def test_baseline_gradcheck(kind):
    rng = np.random.default_rng(9)
    x = rng.uniform(0.1, 0.9, (2, 1, 4, 4))
    xh = Tensor(rng.uniform(0.1, 0.9, (2, 1, 4, 4)), requires_grad=True)
    assert grad_check(lambda: baseline_loss(kind, x, xh), [xh]) < 1e-4


def test_assemble_elbo_arithmetic():
    total, br = assemble_elbo(1.0, 0.0, 2.0, 0.5)
    assert total == 2.0 and br.total == 2.0
    assert br.total == br.recon_term + br.logdet_term + br.beta * br.kl_term


def test_proposed_identity_weight_matches_l2_pipeline():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((2, 1, 8, 8))
    xh = rng.standard_normal((2, 1, 8, 8))
    a = 0.5 * weighted_recon_loss(x, xh, identity_weight(8, 8)).item()
    b = 0.5 * baseline_loss("L2", x, xh).item()
    assert a == pytest.approx(b, rel=1e-12)
