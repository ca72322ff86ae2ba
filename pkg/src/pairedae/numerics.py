"""Numerical substrate: SVD, seeded sampling, ADAM and a finite-difference oracle.

All arrays are float64. Random streams come from numpy's PCG64 generator;
a worker that needs its own stream derives it with ``child_rng(seed, i)``,
which seeds PCG64 with ``seed ^ i``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


class SvdError(RuntimeError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def child_rng(seed: int, index: int) -> np.random.Generator:
    return make_rng((int(seed) ^ int(index)) & 0xFFFFFFFFFFFFFFFF)


def svd(A):
    """Thin SVD ``A = U @ diag(S) @ Vt`` with ``k = min(m, n)`` singular values.

    Backed by LAPACK (gesdd, falling back to gesvd). Raises ``SvdError`` if
    neither driver converges.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise ValueError(f"svd expects a matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("svd input contains NaN or Inf")
    try:
        U, S, Vt = np.linalg.svd(A, full_matrices=False)
    except np.linalg.LinAlgError:
        try:
            import scipy.linalg

            U, S, Vt = scipy.linalg.svd(A, full_matrices=False, lapack_driver="gesvd")
        except np.linalg.LinAlgError as exc:
            raise SvdError(f"SVD did not converge for matrix of shape {A.shape}") from exc
    return U, S, Vt


def spectral_norm(A) -> float:
    A = np.asarray(A, dtype=np.float64)
    if A.size == 0:
        return 0.0
    return float(svd(A)[1][0])


def gaussian_sample(rng: np.random.Generator, shape, mean: float = 0.0, std: float = 1.0):
    if std < 0:
        raise ValueError(f"std must be nonnegative, got {std}")
    eps = rng.standard_normal(shape)
    return mean + std * eps


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        z = np.zeros(np.shape(param))
        return cls(z, z.copy(), 0, lr, beta1, beta2, eps)


def adam_step(param, grad, st: AdamState):
    """One bias-corrected ADAM update. Returns the new parameter and state."""
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape or st.m.shape != param.shape:
        raise ValueError(f"shape mismatch: param {param.shape}, grad {grad.shape}, state {st.m.shape}")
    t = st.t + 1
    m = st.beta1 * st.m + (1.0 - st.beta1) * grad
    v = st.beta2 * st.v + (1.0 - st.beta2) * grad * grad
    m_hat = m / (1.0 - st.beta1**t)
    v_hat = v / (1.0 - st.beta2**t)
    new = param - st.lr * m_hat / (np.sqrt(v_hat) + st.eps)
    return new, replace(st, m=m, v=v, t=t)


class Adam:
    """ADAM over a list of arrays, updated in place."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.states = [AdamState.zeros_like(p, lr, beta1, beta2, eps) for p in self.params]

    def step(self, grads):
        for i, (p, g) in enumerate(zip(self.params, grads)):
            new, self.states[i] = adam_step(p, g, self.states[i])
            p[...] = new


def finite_diff_grad(f, x, h: float = 1e-5):
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def directional_fd(f, x, v, h: float = 1e-5) -> float:
    """Central difference of ``f`` along direction ``v``."""
    x = np.asarray(x, dtype=np.float64)
    return float((f(x + h * v) - f(x - h * v)) / (2.0 * h))
