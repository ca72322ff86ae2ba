"""Linear forward operators and latent-space inversion (LSI).

LSI minimizes, per observation y,

    0.5 * ||F(d_x(z)) - y||^2 + 0.5 * alpha * ||z - z0||^2

with ADAM, starting from z0 = M_dagger(e_y(y)) (warm) or from zero (cold).
Batches of observations are solved together; every row is an independent
problem because both the objective and ADAM act row-wise.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import AdamState, adam_step
from .paired import PairedModel
from .variational import VpaeModel


class LsiDiverged(FloatingPointError):
    def __init__(self, iteration):
        super().__init__(f"LSI objective became non-finite at iteration {iteration}")
        self.iteration = iteration


def _conv_matrix(kernel, size):
    """Zero-padded 'same' 1-D convolution as a dense (size, size) matrix."""
    k = np.asarray(kernel, dtype=np.float64)
    if k.ndim != 1 or k.size % 2 == 0:
        raise ValueError("blur kernels must be 1-D with odd length")
    c = k.size // 2
    A = np.zeros((size, size))
    for i in range(size):
        for j, kv in enumerate(k[::-1]):
            col = i + j - c
            if 0 <= col < size:
                A[i, col] = kv
    return A


class ForwardOp:
    """Linear operator on flattened vectors (rows of a batch)."""

    def __init__(self, variant, *, mask=None, matrix=None, kernel=None, shape=None):
        self.variant = variant
        if variant == "mask":
            m = np.asarray(mask, dtype=np.float64)
            if not np.all((m == 0) | (m == 1)):
                raise ValueError("mask entries must be 0 or 1")
            self.mask = m.reshape(m.shape[0], -1) if m.ndim > 2 else m
            self.in_dim = self.out_dim = self.mask.shape[-1]
        elif variant == "explicit":
            self.matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
            self.out_dim, self.in_dim = self.matrix.shape
        elif variant == "blur":
            h, w = shape
            self.shape = (h, w)
            self.Kh = _conv_matrix(kernel, h)
            self.Kw = _conv_matrix(kernel, w)
            self.in_dim = self.out_dim = h * w
        else:
            raise ValueError(f"unknown operator variant {variant!r}")

    @classmethod
    def identity(cls, n):
        return cls("mask", mask=np.ones(n))

    def _check(self, X, dim):
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != dim:
            raise ValueError(f"operator expects width {dim}, got {X.shape[-1]}")
        return X

    def apply(self, X):
        X = self._check(X, self.in_dim)
        if self.variant == "mask":
            return X * self.mask
        if self.variant == "explicit":
            return X @ self.matrix.T
        h, w = self.shape
        img = X.reshape(-1, h, w)
        out = np.einsum("ij,bjk,lk->bil", self.Kh, img, self.Kw)
        return out.reshape(X.shape)

    def adjoint(self, R):
        R = self._check(R, self.out_dim)
        if self.variant == "mask":
            return R * self.mask
        if self.variant == "explicit":
            return R @ self.matrix
        h, w = self.shape
        img = R.reshape(-1, h, w)
        out = np.einsum("ji,bjk,kl->bil", self.Kh, img, self.Kw)
        return out.reshape(R.shape)

    def __call__(self, X):
        return self.apply(X)


def _decoder(model):
    return model.dec_x if isinstance(model, VpaeModel) else model.d_x


def warm_start(model, Y, mode="mean", rng=None, n_samples=100):
    """Latent initial guess z0 = M_dagger(e_y(y)).

    For a VPAE, ``mode`` picks the mapped mean ("mean"), one draw ("sample")
    or the average of ``n_samples`` draws ("sample-mean").
    """
    Y = np.asarray(Y, dtype=np.float64)
    if isinstance(model, PairedModel):
        return model.M_dagger(model.e_y(Y))
    g = model.mapped_x(Y)
    if mode == "mean":
        return g.mu
    std = np.exp(g.log_std)
    if mode == "sample":
        return g.mu + std * rng.standard_normal(g.mu.shape)
    if mode == "sample-mean":
        draws = rng.standard_normal((n_samples, *g.mu.shape))
        return g.mu + std * draws.mean(axis=0)
    raise ValueError(f"unknown warm-start mode {mode!r}")


@dataclass
class LsiConfig:
    steps: int = 500
    lr: float = 1e-2
    alpha: float = 0.0
    warm_start: bool = True
    warm_mode: str = "mean"

    def __post_init__(self):
        if self.steps < 1 or self.alpha < 0 or self.lr < 0:
            raise ValueError("LSI needs steps >= 1, alpha >= 0, lr >= 0")


@dataclass
class LsiResult:
    z: np.ndarray
    x_hat: np.ndarray
    misfit: np.ndarray  # (steps + 1, batch): data term per iterate
    objective: np.ndarray  # (steps + 1, batch)
    z0: np.ndarray


def lsi_objective(model, F: ForwardOp, Y, Z, Z0, alpha):
    """Row-wise (misfit, objective) and the gradient of the summed objective wrt Z."""
    dec = _decoder(model)
    X, tape = dec.forward(Z)
    R = F.apply(X) - Y
    misfit = 0.5 * np.sum(R**2, axis=-1)
    D = Z - Z0
    obj = misfit + 0.5 * alpha * np.sum(D**2, axis=-1)
    _, gz = dec.backward(tape, F.adjoint(R))
    return misfit, obj, gz + alpha * D


def lsi(model, F: ForwardOp, Y, cfg: LsiConfig, rng=None, *, z0=None, z_init=None) -> LsiResult:
    """Latent-space inversion; returns the best iterate per row and full traces.

    ``z0`` anchors the regularizer (default: warm start, or zero when
    ``cfg.warm_start`` is false). ``z_init`` is the ADAM starting point and
    defaults to ``z0``.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    r = _decoder(model).in_dim
    if z0 is None:
        z0 = warm_start(model, Y, cfg.warm_mode, rng) if cfg.warm_start else np.zeros((Y.shape[0], r))
    z0 = np.atleast_2d(np.asarray(z0, dtype=np.float64))
    Z = np.array(z0 if z_init is None else np.atleast_2d(z_init), dtype=np.float64)
    st = AdamState.zeros_like(Z, lr=cfg.lr)
    misfits, objs = [], []
    best_obj = np.full(Y.shape[0], np.inf)
    best_z = Z.copy()
    for it in range(cfg.steps + 1):
        mf, obj, g = lsi_objective(model, F, Y, Z, z0, cfg.alpha)
        if not np.all(np.isfinite(obj)):
            raise LsiDiverged(it)
        misfits.append(mf)
        objs.append(obj)
        better = obj < best_obj
        best_obj[better] = obj[better]
        best_z[better] = Z[better]
        if it < cfg.steps:
            Z, st = adam_step(Z, g, st)
    dec = _decoder(model)
    return LsiResult(best_z, dec(best_z), np.array(misfits), np.array(objs), z0)


def select_alpha(model, F: ForwardOp, Y, X, grid=(0.0, 1e-3, 1e-2, 1e-1, 1.0), cfg: LsiConfig | None = None, rng=None):
    """Pick alpha from ``grid`` by mean relative error of LSI estimates on a held-out split."""
    from .ood import rel_err

    cfg = cfg or LsiConfig()
    scores = []
    for a in grid:
        c = LsiConfig(cfg.steps, cfg.lr, a, cfg.warm_start, cfg.warm_mode)
        res = lsi(model, F, Y, c, rng)
        scores.append(np.mean([rel_err(xh, x) for xh, x in zip(res.x_hat, X)]))
    return grid[int(np.argmin(scores))], scores
