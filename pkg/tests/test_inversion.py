import numpy as np
import pytest
from scipy import ndimage

from conftest import grad_probe_error
from pairedae.linear_pae import fit_linear_paired
from pairedae.neuralnet import MlpNet
from pairedae.numerics import make_rng
from pairedae.paired import PairedModel, build_paired
from pairedae.inversion import (
    ForwardOp,
    LsiConfig,
    LsiDiverged,
    lsi,
    lsi_objective,
    select_alpha,
    warm_start,
)
from pairedae.variational import build_vpae


def test_identity_mask(rng):
    X = rng.standard_normal((4, 9))
    F = ForwardOp.identity(9)
    np.testing.assert_array_equal(F(X), X)
    np.testing.assert_array_equal(F.adjoint(X), X)


def test_mask_zeros_exactly_k(rng):
    mask = np.ones(20)
    mask[[1, 5, 7]] = 0
    out = ForwardOp("mask", mask=mask)(rng.random((3, 20)) + 0.1)
    assert np.all(np.sum(out == 0, axis=1) == 3)
    with pytest.raises(ValueError):
        ForwardOp("mask", mask=[0, 0.5, 1])


def test_blur_matches_scipy_convolution(rng):
    k = np.array([0.1, 0.2, 0.4, 0.2, 0.1])
    img = rng.random((7, 9))
    F = ForwardOp("blur", kernel=k, shape=(7, 9))
    ref = ndimage.convolve(img, np.outer(k, k), mode="constant", cval=0.0)
    np.testing.assert_allclose(F(img.ravel()), ref.ravel(), atol=1e-13)


@pytest.mark.parametrize("variant", ["mask", "explicit", "blur"])
def test_adjoint_dot_product(variant, rng):
    if variant == "mask":
        F = ForwardOp("mask", mask=(rng.random(48) > 0.3).astype(float))
    elif variant == "explicit":
        F = ForwardOp("explicit", matrix=rng.standard_normal((30, 48)))
    else:
        F = ForwardOp("blur", kernel=[0.25, 0.5, 0.25, 0.1, 0.3], shape=(6, 8))
    worst = 0.0
    for _ in range(100):
        x = rng.standard_normal(F.in_dim)
        y = rng.standard_normal(F.out_dim)
        lhs, rhs = F(x) @ y, x @ F.adjoint(y)
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-12))
    assert worst <= 1e-12


def test_warm_start_identity_and_linear(rng):
    Y = rng.standard_normal((5, 6))
    np.testing.assert_array_equal(warm_start(PairedModel.identity(6), Y), Y)
    X = rng.standard_normal((200, 6))
    Yt = X @ rng.standard_normal((6, 6)).T
    m = PairedModel.from_linear(*fit_linear_paired(X, Yt, 3, 3))
    expected = Y @ (m.M_dagger.matrix() @ m.e_y.matrix()).T
    np.testing.assert_allclose(warm_start(m, Y), expected, atol=1e-12)


def test_warm_start_vpae_modes(rng):
    m = build_vpae(6, 5, 3, 2, (7,), rng)
    Y = rng.random((4, 5))
    mu = warm_start(m, Y)
    np.testing.assert_array_equal(mu, m.mapped_x(Y).mu)
    assert warm_start(m, Y, "sample", make_rng(0)).shape == mu.shape
    assert warm_start(m, Y, "sample-mean", make_rng(0)).shape == mu.shape
    with pytest.raises(ValueError):
        warm_start(m, Y, "median")


def test_identity_decoder_reaches_closed_form(rng):
    n, alpha = 5, 0.3
    Y = rng.standard_normal((3, n))
    z0 = rng.standard_normal((3, n))
    res = lsi(PairedModel.identity(n), ForwardOp.identity(n), Y, LsiConfig(steps=4000, lr=1e-2, alpha=alpha),
              z0=z0)
    target = (Y + alpha * z0) / (1 + alpha)
    assert np.max(np.linalg.norm(res.z - target, axis=1)) <= 1e-6


def test_huge_alpha_pins_to_anchor(rng):
    m = build_paired(12, 12, 4, 4, (8,), rng)
    Y = rng.random((4, 12))
    res = lsi(m, ForwardOp.identity(12), Y, LsiConfig(steps=50, alpha=1e9))
    z0 = warm_start(m, Y)
    assert np.all(np.linalg.norm(res.z - z0, axis=1) <= 1e-3 * np.linalg.norm(z0, axis=1))


def test_best_iterate_not_worse_than_start(rng):
    m = build_paired(12, 12, 4, 4, (8,), rng)
    Y = rng.random((6, 12))
    res = lsi(m, ForwardOp("mask", mask=(rng.random(12) > 0.3).astype(float)), Y, LsiConfig(steps=100, alpha=1e-2))
    assert res.objective.shape == (101, 6) and res.misfit.shape == (101, 6)
    best = res.objective.min(axis=0)
    assert np.all(best <= res.objective[0])


def test_alpha_zero_ignores_anchor(rng):
    m = build_paired(10, 10, 3, 3, (6,), rng)
    Y = rng.random((3, 10))
    zi = rng.standard_normal((3, 3))
    cfg = LsiConfig(steps=30, alpha=0.0)
    a = lsi(m, ForwardOp.identity(10), Y, cfg, z0=rng.standard_normal((3, 3)), z_init=zi)
    b = lsi(m, ForwardOp.identity(10), Y, cfg, z0=rng.standard_normal((3, 3)), z_init=zi)
    np.testing.assert_array_equal(a.z, b.z)


def test_cold_start_uses_zero(rng):
    m = build_paired(10, 10, 3, 3, (6,), rng)
    Y = rng.random((2, 10))
    res = lsi(m, ForwardOp.identity(10), Y, LsiConfig(steps=5, warm_start=False))
    np.testing.assert_array_equal(res.z0, np.zeros((2, 3)))


def test_rows_are_independent(rng):
    m = build_paired(10, 10, 3, 3, (6,), rng)
    Y = rng.random((4, 10))
    cfg = LsiConfig(steps=40, alpha=1e-2)
    full = lsi(m, ForwardOp.identity(10), Y, cfg)
    one = lsi(m, ForwardOp.identity(10), Y[2:3], cfg)
    np.testing.assert_allclose(full.z[2], one.z[0], atol=1e-12)


def test_objective_gradient(rng):
    m = build_paired(8, 8, 3, 3, (6,), rng, hidden_activation="silu")
    F = ForwardOp("explicit", matrix=rng.standard_normal((5, 8)))
    Y = rng.random((2, 5))
    Z0 = rng.standard_normal((2, 3))
    Z = rng.standard_normal((2, 3))
    _, _, g = lsi_objective(m, F, Y, Z, Z0, 0.4)

    def f(w):
        return float(np.sum(lsi_objective(m, F, Y, w.reshape(Z.shape), Z0, 0.4)[1]))

    assert grad_probe_error(f, Z.ravel(), g.ravel(), rng) <= 1e-6


def test_nan_raises_diverged():
    m = PairedModel.identity(3)
    with pytest.raises(LsiDiverged) as e:
        lsi(m, ForwardOp.identity(3), np.array([[np.nan, 0.0, 1.0]]), LsiConfig(steps=3))
    assert e.value.iteration == 0


def test_config_validation():
    for bad in ({"steps": 0}, {"alpha": -1.0}, {"lr": -0.1}):
        with pytest.raises(ValueError):
            LsiConfig(**bad)


def test_select_alpha_returns_grid_member(rng):
    m = build_paired(10, 10, 3, 3, (6,), rng)
    X = rng.random((4, 10))
    a, scores = select_alpha(m, ForwardOp.identity(10), X, X, grid=(0.0, 1.0), cfg=LsiConfig(steps=10))
    assert a in (0.0, 1.0) and len(scores) == 2


def test_decoder_used_for_vpae(rng):
    m = build_vpae(6, 6, 3, 3, (5,), rng)
    res = lsi(m, ForwardOp.identity(6), rng.random((2, 6)), LsiConfig(steps=5))
    np.testing.assert_allclose(res.x_hat, m.dec_x(res.z))
    assert isinstance(m.dec_x, MlpNet)
