"""Closed-form linear paired autoencoders.

Second moments are raw (uncentered): ``gamma = E[x x^T]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import spectral_norm, svd


class RankDeficientError(np.linalg.LinAlgError):
    pass


@dataclass
class SecondMoment:
    gamma: np.ndarray
    L: np.ndarray
    ridge: float


@dataclass
class LinearAE:
    E: np.ndarray
    D: np.ndarray

    @property
    def rank(self):
        return self.E.shape[0]

    def encode(self, X):
        return np.asarray(X, float) @ self.E.T

    def decode(self, Z):
        return np.asarray(Z, float) @ self.D.T


@dataclass
class LinearMaps:
    M: np.ndarray
    M_dagger: np.ndarray


@dataclass
class ErrorBoundReport:
    """Computable error bound for linear paired models.

    ``xi_*`` are maxima over the supplied samples, not over all inputs, so the
    bound is an empirical surrogate of the worst-case statement.
    """

    lip_dx: float
    lip_ey: float
    xi_y: float
    xi_M: float
    xi_x: float
    norm_Mdagger: float
    delta: float
    bound: float
    empirical: bool = True


def symmetric_factor(gamma):
    """Symmetric square root ``V sqrt(max(lam, 0)) V^T``."""
    gamma = 0.5 * (gamma + gamma.T)
    lam, V = np.linalg.eigh(gamma)
    return (V * np.sqrt(np.clip(lam, 0.0, None))) @ V.T


def second_moment_factor(samples, ridge=None) -> SecondMoment:
    """``gamma = X^T X / N + ridge * I``; default ridge is ``1e-10 * tr(X^T X / N) / n``."""
    X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    N, n = X.shape
    if N < 1:
        raise ValueError("need at least one sample")
    raw = X.T @ X / N
    if ridge is None:
        ridge = 1e-10 * np.trace(raw) / n
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    gamma = raw + ridge * np.eye(n)
    gamma = 0.5 * (gamma + gamma.T)
    return SecondMoment(gamma, symmetric_factor(gamma), float(ridge))


def second_moment_from_gamma(gamma) -> SecondMoment:
    gamma = np.asarray(gamma, dtype=np.float64)
    return SecondMoment(gamma, symmetric_factor(gamma), 0.0)


def fit_linear_ae(sm: SecondMoment, r: int) -> LinearAE:
    """Optimal rank-r linear autoencoder ``A = U_r U_r^T`` from the SVD of the factor."""
    n = sm.L.shape[0]
    if not 1 <= r <= n:
        raise ValueError(f"rank {r} outside [1, {n}]")
    U = svd(sm.L)[0]
    Ur = U[:, :r]
    return LinearAE(Ur.T.copy(), Ur.copy())


def reconstruction_error_sq(ae: LinearAE, L):
    """``||D E L - L||_F^2``, the expected squared reconstruction error."""
    return float(np.sum((ae.D @ (ae.E @ L) - L) ** 2))


def _solve_right(A, G, what):
    """Return ``A @ inv(G)`` for symmetric G, refusing (near-)singular G."""
    s = np.linalg.svd(G, compute_uv=False)
    if s.size == 0 or s[-1] <= 1e-12 * max(1.0, s[0]):
        raise RankDeficientError(f"{what} is singular (smallest singular value {s[-1] if s.size else 0:.3e})")
    return np.linalg.solve(G.T, A.T).T


def optimal_forward_map(E_x, E_y, F, sm_x: SecondMoment):
    """``M = E_y F G E_x^T (E_x G E_x^T)^{-1}`` with ``G`` the second moment of x."""
    G = sm_x.gamma
    gram = E_x @ G @ E_x.T
    return _solve_right(E_y @ F @ G @ E_x.T, gram, "E_x Gamma_x E_x^T")


def optimal_inverse_map(E_x, E_y, F, sm_x: SecondMoment, gamma_eps):
    """``M_dagger = E_x G^T F^T E_y^T (E_y (F G F^T + Gamma_eps) E_y^T)^{-1}``."""
    G = sm_x.gamma
    gamma_y = F @ G @ F.T + np.asarray(gamma_eps, dtype=np.float64)
    gram = E_y @ gamma_y @ E_y.T
    return _solve_right(E_x @ G.T @ F.T @ E_y.T, gram, "E_y Gamma_y E_y^T")


def optimal_maps_from_samples(E_x, E_y, X, Y) -> LinearMaps:
    """Sample version of the optimal maps using empirical moments of paired (x, y).

    ``F Gamma_x`` is replaced by the cross moment ``E[y x^T]`` and ``Gamma_y`` by
    ``E[y y^T]``; with independent zero-mean noise these agree in expectation.
    """
    X = np.asarray(X, float)
    Y = np.asarray(Y, float)
    N = X.shape[0]
    gx = X.T @ X / N
    gy = Y.T @ Y / N
    cyx = Y.T @ X / N
    M = _solve_right(E_y @ cyx @ E_x.T, E_x @ gx @ E_x.T, "E_x Gamma_x E_x^T")
    Md = _solve_right(E_x @ cyx.T @ E_y.T, E_y @ gy @ E_y.T, "E_y Gamma_y E_y^T")
    return LinearMaps(M, Md)


def fit_linear_paired(X, Y, r_x, r_y):
    """Closed-form linear paired model from sample pairs: (ae_x, ae_y, maps)."""
    ae_x = fit_linear_ae(second_moment_factor(X), r_x)
    ae_y = fit_linear_ae(second_moment_factor(Y), r_y)
    return ae_x, ae_y, optimal_maps_from_samples(ae_x.E, ae_y.E, X, Y)


def linear_error_bound(model, X, Y, delta=None) -> ErrorBoundReport:
    """Assemble ``L_x (||M_dagger|| (L_y delta + xi_y) + xi_M) + xi_x`` for a linear model.

    ``delta`` defaults to the largest observed ``||y - y_pred||`` with
    ``y_pred`` the surrogate forward prediction of x. ``xi_y`` is taken over
    both the data encodings ``e_y(y)`` and the mapped encodings ``M e_x(x)``.
    """
    X = np.atleast_2d(np.asarray(X, float))
    Y = np.atleast_2d(np.asarray(Y, float))
    if X.shape[0] == 0:
        raise ValueError("empty dataset")
    Ex, Dx, Ey, Dy, M, Md = (model.matrix(k) for k in ("e_x", "d_x", "e_y", "d_y", "M", "M_dagger"))
    zx = X @ Ex.T
    zy = np.vstack([Y @ Ey.T, zx @ M.T])
    if delta is None:
        delta = float(np.max(np.linalg.norm(Y - zx @ M.T @ Dy.T, axis=1)))
    xi_y = float(np.max(np.linalg.norm(zy @ Dy.T @ Ey.T - zy, axis=1)))
    xi_M = float(np.max(np.linalg.norm(zx @ M.T @ Md.T - zx, axis=1)))
    xi_x = float(np.max(np.linalg.norm(X @ Ex.T @ Dx.T - X, axis=1)))
    lx, ly, nmd = spectral_norm(Dx), spectral_norm(Ey), spectral_norm(Md)
    bound = lx * (nmd * (ly * delta + xi_y) + xi_M) + xi_x
    return ErrorBoundReport(lx, ly, xi_y, xi_M, xi_x, nmd, float(delta), float(bound))
