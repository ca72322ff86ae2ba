"""Dense multilayer networks with hand-written reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import count

import numpy as np

ACTIVATIONS = ("identity", "relu", "silu", "sigmoid")

_versions = count(1)


def _sigmoid(a):
    # split by sign so large |a| never overflows exp
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def _act(name, a):
    if name == "identity":
        return a
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "sigmoid":
        return _sigmoid(a)
    if name == "silu":
        return a * _sigmoid(a)
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name, a, out):
    """Derivative of the activation at pre-activation ``a`` (``out`` = act(a))."""
    if name == "identity":
        return np.ones_like(a)
    if name == "relu":
        return (a > 0).astype(np.float64)
    if name == "sigmoid":
        return out * (1.0 - out)
    s = _sigmoid(a)
    return s * (1.0 + a * (1.0 - s))


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "identity"
    bias: bool = True

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("layer dims must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class Tape:
    inputs: list
    pre: list
    outs: list
    version: int


class MlpNet:
    """Chain of affine layers. Weights are stored (out_dim, in_dim); batches are rows."""

    def __init__(self, layers, weights, biases):
        self.layers = list(layers)
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        self.weights = [np.array(W, dtype=np.float64) for W in weights]
        self.biases = [None if b is None else np.array(b, dtype=np.float64) for b in biases]
        for spec, W, b in zip(self.layers, self.weights, self.biases):
            if W.shape != (spec.out_dim, spec.in_dim):
                raise ValueError(f"weight shape {W.shape} does not match {spec}")
            if spec.bias != (b is not None) or (b is not None and b.shape != (spec.out_dim,)):
                raise ValueError(f"bias does not match {spec}")
        self.version = next(_versions)

    @classmethod
    def init(cls, dims, activations, rng, bias=True):
        """Glorot-uniform weights, zero biases. ``activations`` has one entry per layer."""
        if isinstance(activations, str):
            activations = [activations] * (len(dims) - 1)
        layers = [LayerSpec(i, o, a, bias) for i, o, a in zip(dims[:-1], dims[1:], activations)]
        weights, biases = [], []
        for spec in layers:
            lim = np.sqrt(6.0 / (spec.in_dim + spec.out_dim))
            weights.append(rng.uniform(-lim, lim, size=(spec.out_dim, spec.in_dim)))
            biases.append(np.zeros(spec.out_dim) if bias else None)
        return cls(layers, weights, biases)

    @classmethod
    def linear(cls, W, b=None):
        W = np.atleast_2d(np.asarray(W, dtype=np.float64))
        spec = LayerSpec(W.shape[1], W.shape[0], "identity", b is not None)
        return cls([spec], [W], [b])

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    def params(self):
        out = []
        for W, b in zip(self.weights, self.biases):
            out.append(W)
            if b is not None:
                out.append(b)
        return out

    def touch(self):
        """Mark parameters as modified; tapes recorded earlier become stale."""
        self.version = next(_versions)

    def copy(self):
        return MlpNet(self.layers, [W.copy() for W in self.weights], [None if b is None else b.copy() for b in self.biases])

    def is_linear(self):
        return all(s.activation == "identity" and not s.bias for s in self.layers)

    def matrix(self):
        """Product of the weight matrices, for bias-free identity-activation nets."""
        if not self.is_linear():
            raise ValueError("network is not linear")
        A = self.weights[0]
        for W in self.weights[1:]:
            A = W @ A
        return A

    def forward(self, batch):
        X = np.asarray(batch, dtype=np.float64)
        squeeze = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.in_dim:
            raise ValueError(f"input width {X.shape[1]} != in_dim {self.in_dim}")
        inputs, pre, outs = [], [], []
        h = X
        for spec, W, b in zip(self.layers, self.weights, self.biases):
            inputs.append(h)
            a = h @ W.T
            if b is not None:
                a = a + b
            h = _act(spec.activation, a)
            pre.append(a)
            outs.append(h)
        return (h[0] if squeeze else h), Tape(inputs, pre, outs, self.version)

    def __call__(self, batch):
        return self.forward(batch)[0]

    def backward(self, tape: Tape, out_grad):
        """Return (param grads in ``params()`` order, input grad)."""
        if tape.version != self.version:
            raise ValueError("stale tape: parameters changed since forward")
        g = np.atleast_2d(np.asarray(out_grad, dtype=np.float64))
        squeeze = np.ndim(out_grad) == 1
        grads = []
        for spec, W, b, x, a, o in reversed(list(zip(self.layers, self.weights, self.biases, tape.inputs, tape.pre, tape.outs))):
            if spec.activation != "identity":
                g = g * _act_grad(spec.activation, a, o)
            if b is not None:
                grads.append(g.sum(axis=0))
            grads.append(g.T @ x)
            g = g @ W
        grads.reverse()
        return grads, (g[0] if squeeze else g)

    def to_arrays(self, prefix):
        out = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.W{i}"] = W
            if b is not None:
                out[f"{prefix}.b{i}"] = b
        return out

    def spec(self):
        return [[s.in_dim, s.out_dim, s.activation, s.bias] for s in self.layers]

    @classmethod
    def from_arrays(cls, spec, arrays, prefix):
        layers = [LayerSpec(int(i), int(o), a, bool(b)) for i, o, a, b in spec]
        weights = [arrays[f"{prefix}.W{k}"] for k in range(len(layers))]
        biases = [arrays[f"{prefix}.b{k}"] if l.bias else None for k, l in enumerate(layers)]
        return cls(layers, weights, biases)


class Identity:
    """Parameter-free identity map with the MlpNet calling convention."""

    def __init__(self, dim):
        self.in_dim = self.out_dim = int(dim)
        self.version = 0

    def params(self):
        return []

    def touch(self):
        pass

    def copy(self):
        return Identity(self.in_dim)

    def is_linear(self):
        return True

    def matrix(self):
        return np.eye(self.in_dim)

    def forward(self, batch):
        X = np.asarray(batch, dtype=np.float64)
        if X.shape[-1] != self.in_dim:
            raise ValueError(f"input width {X.shape[-1]} != {self.in_dim}")
        return X, None

    def __call__(self, batch):
        return self.forward(batch)[0]

    def backward(self, tape, out_grad):
        return [], np.asarray(out_grad, dtype=np.float64)

    def to_arrays(self, prefix):
        return {}

    def spec(self):
        return {"identity": self.in_dim}


def component_spec(c):
    return c.spec()


def component_from_arrays(spec, arrays, prefix):
    if isinstance(spec, dict) and "identity" in spec:
        return Identity(spec["identity"])
    return MlpNet.from_arrays(spec, arrays, prefix)


@dataclass
class GaussianLatent:
    mu: np.ndarray
    log_std: np.ndarray = field(default=None)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.log_std = np.zeros_like(self.mu) if self.log_std is None else np.asarray(self.log_std, dtype=np.float64)
        if self.mu.shape != self.log_std.shape:
            raise ValueError("mu and log_std shapes differ")

    @classmethod
    def split(cls, head):
        """Split a (..., 2r) head output into mean and log-std halves."""
        head = np.asarray(head, dtype=np.float64)
        r = head.shape[-1] // 2
        return cls(head[..., :r], head[..., r:])

    def concat(self):
        return np.concatenate([self.mu, self.log_std], axis=-1)


def reparameterize(g: GaussianLatent, rng=None, eps=None):
    """z = mu + exp(log_std) * eps with eps ~ N(0, I); returns (z, eps)."""
    if eps is None:
        eps = rng.standard_normal(g.mu.shape)
    return g.mu + np.exp(g.log_std) * eps, eps


def kl_std_normal(g: GaussianLatent):
    """KL(N(mu, diag(exp(2 log_std))) || N(0, I)), summed over the last axis."""
    s = g.log_std
    return 0.5 * np.sum(g.mu**2 + np.exp(2.0 * s) - 1.0 - 2.0 * s, axis=-1)


def kl_std_normal_grad(g: GaussianLatent):
    return g.mu.copy(), np.exp(2.0 * g.log_std) - 1.0


def mse(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def mse_grad(a, b):
    """Gradient of mse(a, b) with respect to ``a``."""
    return 2.0 * (a - b) / a.size
