"""Paired autoencoders: model container, joint objective, training and direct estimates."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .linear_pae import LinearAE, LinearMaps
from .neuralnet import Identity, MlpNet, component_from_arrays, mse, mse_grad
from .numerics import Adam, make_rng

log = logging.getLogger(__name__)

COMPONENTS = ("e_x", "d_x", "e_y", "d_y", "M", "M_dagger")
LOSS_VARIANTS = ("combined", "full-mappings", "latent-mappings")


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch, what="loss"):
        super().__init__(f"{what} became non-finite at epoch {epoch}")
        self.epoch = epoch


class PairedModel:
    """Encoders/decoders for x (QoI) and y (data) plus latent maps M: z_x -> z_y, M_dagger: z_y -> z_x."""

    def __init__(self, e_x, d_x, e_y, d_y, M, M_dagger):
        self.e_x, self.d_x, self.e_y, self.d_y, self.M, self.M_dagger = e_x, d_x, e_y, d_y, M, M_dagger
        r_x, r_y = e_x.out_dim, e_y.out_dim
        ok = (
            d_x.in_dim == r_x
            and d_y.in_dim == r_y
            and M.in_dim == r_x
            and M.out_dim == r_y
            and M_dagger.in_dim == r_y
            and M_dagger.out_dim == r_x
            and d_x.out_dim == e_x.in_dim
            and d_y.out_dim == e_y.in_dim
        )
        if not ok:
            raise ValueError("paired model dimensions are inconsistent")

    @property
    def r_x(self):
        return self.e_x.out_dim

    @property
    def r_y(self):
        return self.e_y.out_dim

    @property
    def n(self):
        return self.e_x.in_dim

    @property
    def m(self):
        return self.e_y.in_dim

    def components(self):
        return {k: getattr(self, k) for k in COMPONENTS}

    def copy(self):
        return PairedModel(*(getattr(self, k).copy() for k in COMPONENTS))

    def matrix(self, name):
        return getattr(self, name).matrix()

    def params(self):
        return [p for k in COMPONENTS for p in getattr(self, k).params()]

    def get_flat(self):
        ps = self.params()
        return np.concatenate([p.ravel() for p in ps]) if ps else np.zeros(0)

    def set_flat(self, vec):
        i = 0
        for k in COMPONENTS:
            c = getattr(self, k)
            for p in c.params():
                p[...] = vec[i : i + p.size].reshape(p.shape)
                i += p.size
            c.touch()

    def to_arrays(self):
        out = {}
        for k in COMPONENTS:
            out.update(getattr(self, k).to_arrays(k))
        return out

    def spec(self):
        return {k: getattr(self, k).spec() for k in COMPONENTS}

    @classmethod
    def from_arrays(cls, spec, arrays):
        return cls(*(component_from_arrays(spec[k], arrays, k) for k in COMPONENTS))

    @classmethod
    def from_linear(cls, ae_x: LinearAE, ae_y: LinearAE, maps: LinearMaps | None = None):
        if maps is None:
            M, Md = Identity(ae_x.rank), Identity(ae_y.rank)
        else:
            M, Md = MlpNet.linear(maps.M), MlpNet.linear(maps.M_dagger)
        return cls(MlpNet.linear(ae_x.E), MlpNet.linear(ae_x.D), MlpNet.linear(ae_y.E), MlpNet.linear(ae_y.D), M, Md)

    @classmethod
    def identity(cls, n):
        return cls(*(Identity(n) for _ in COMPONENTS))


def build_paired(n, m, r_x, r_y, widths=(256, 128), rng=None, *, identity_maps=False, linear=False,
                 hidden_activation="relu", output_activation="sigmoid"):
    """Dense encoders n -> widths -> r and mirrored decoders; latent maps are bias-free matrices."""
    rng = make_rng(0) if rng is None else rng
    if identity_maps and r_x != r_y:
        raise ValueError("identity latent maps need r_x == r_y")

    def coder(dims, last):
        if linear:
            return MlpNet.init(dims, "identity", rng, bias=False)
        return MlpNet.init(dims, [hidden_activation] * (len(dims) - 2) + [last], rng)

    w = [] if linear else list(widths)
    e_x = coder([n, *w, r_x], "identity")
    d_x = coder([r_x, *w[::-1], n], output_activation)
    e_y = coder([m, *w, r_y], "identity")
    d_y = coder([r_y, *w[::-1], m], output_activation)
    if identity_maps:
        M, Md = Identity(r_x), Identity(r_y)
    else:
        M = MlpNet.init([r_x, r_y], "identity", rng, bias=False)
        Md = MlpNet.init([r_y, r_x], "identity", rng, bias=False)
    return PairedModel(e_x, d_x, e_y, d_y, M, Md)


@dataclass
class TrainConfig:
    alpha_x: float = 1.0
    alpha_y: float = 1.0
    alpha_M: float = 1.0
    alpha_Mdagger: float = 1.0
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    loss_variant: str = "combined"
    two_stage: bool = False
    latent_M: float = 0.0
    latent_Mdagger: float = 0.0

    def __post_init__(self):
        w = self.weights()
        if min(w) < 0 or max(w) + self.latent_M + self.latent_Mdagger <= 0 or min(self.latent_M, self.latent_Mdagger) < 0:
            raise ValueError("loss weights must be nonnegative with at least one positive")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"unknown loss variant {self.loss_variant!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("invalid epochs / batch_size / lr")

    def weights(self):
        return (self.alpha_x, self.alpha_y, self.alpha_M, self.alpha_Mdagger)


class _Grads:
    def __init__(self, model):
        self.g = {k: [np.zeros_like(p) for p in getattr(model, k).params()] for k in COMPONENTS}

    def add(self, name, grads):
        for acc, g in zip(self.g[name], grads):
            acc += g

    def flat(self):
        parts = [g.ravel() for k in COMPONENTS for g in self.g[k]]
        return np.concatenate(parts) if parts else np.zeros(0)


def paired_loss(model: PairedModel, X, Y, cfg: TrainConfig | None = None, *, weights=None, variant=None,
                return_terms=False):
    """Weighted paired objective and its gradient.

    ``combined``: a_x mse(d_x e_x x, x) + a_y mse(d_y e_y y, y)
    + a_M mse(d_y M e_x x, y) + a_Md mse(d_x Md e_y y, x).
    ``full-mappings`` keeps only the two cross terms; ``latent-mappings``
    replaces them with mse(M z_x, z_y) and mse(Md z_y, z_x).
    ``cfg.latent_M`` / ``cfg.latent_Mdagger`` add the latent terms on top of any variant.
    Returns (loss, grads) with grads a dict of per-component lists.
    """
    cfg = cfg or TrainConfig()
    ax, ay, aM, aMd = cfg.weights() if weights is None else weights
    variant = variant or cfg.loss_variant
    lM, lMd = cfg.latent_M, cfg.latent_Mdagger
    if variant == "full-mappings":
        ax = ay = 0.0
    elif variant == "latent-mappings":
        lM, lMd = lM + aM, lMd + aMd
        aM = aMd = 0.0
    X = np.atleast_2d(np.asarray(X, float))
    Y = np.atleast_2d(np.asarray(Y, float))
    if X.shape[0] != Y.shape[0] or X.shape[0] == 0:
        raise ValueError("X and Y must hold the same nonzero number of rows")
    G = _Grads(model)
    terms, w = {}, {}
    need_x = ax or aM or aMd or lM or lMd
    need_y = ay or aM or aMd or lM or lMd
    zx, tex = model.e_x.forward(X) if need_x else (None, None)
    zy, tey = model.e_y.forward(Y) if need_y else (None, None)
    gzx = np.zeros_like(zx) if zx is not None else None
    gzy = np.zeros_like(zy) if zy is not None else None

    def through_decoder(dec, name, z, target, weight):
        out, t = dec.forward(z)
        val = mse(out, target)
        g, gz = dec.backward(t, weight * mse_grad(out, target))
        G.add(name, g)
        return val, gz

    if ax:
        (terms["x"], gz), w["x"] = through_decoder(model.d_x, "d_x", zx, X, ax), ax
        gzx += gz
    if ay:
        (terms["y"], gz), w["y"] = through_decoder(model.d_y, "d_y", zy, Y, ay), ay
        gzy += gz
    if aM:
        zyh, t = model.M.forward(zx)
        (terms["M"], gz), w["M"] = through_decoder(model.d_y, "d_y", zyh, Y, aM), aM
        g, gz = model.M.backward(t, gz)
        G.add("M", g)
        gzx += gz
    if aMd:
        zxh, t = model.M_dagger.forward(zy)
        (terms["Md"], gz), w["Md"] = through_decoder(model.d_x, "d_x", zxh, X, aMd), aMd
        g, gz = model.M_dagger.backward(t, gz)
        G.add("M_dagger", g)
        gzy += gz
    if lM:
        zyh, t = model.M.forward(zx)
        terms["zM"], w["zM"] = mse(zyh, zy), lM
        gd = lM * mse_grad(zyh, zy)
        g, gz = model.M.backward(t, gd)
        G.add("M", g)
        gzx += gz
        gzy -= gd
    if lMd:
        zxh, t = model.M_dagger.forward(zy)
        terms["zMd"], w["zMd"] = mse(zxh, zx), lMd
        gd = lMd * mse_grad(zxh, zx)
        g, gz = model.M_dagger.backward(t, gd)
        G.add("M_dagger", g)
        gzy += gz
        gzx -= gd
    if need_x:
        G.add("e_x", model.e_x.backward(tex, gzx)[0])
    if need_y:
        G.add("e_y", model.e_y.backward(tey, gzy)[0])
    loss = float(sum(w[k] * v for k, v in terms.items()))
    if return_terms:
        return loss, G.g, terms
    return loss, G.g


def _epoch_loss(model, X, Y, cfg, batch_size=512):
    tot = 0.0
    for s in range(0, X.shape[0], batch_size):
        l, _ = paired_loss(model, X[s : s + batch_size], Y[s : s + batch_size], cfg)
        tot += l * min(batch_size, X.shape[0] - s)
    return tot / X.shape[0]


def _run_adam(model, X, Y, cfg, trainable, loss_fn, rng):
    comps = [getattr(model, k) for k in trainable]
    params = [p for c in comps for p in c.params()]
    opt = Adam(params, lr=cfg.lr)
    history = [_epoch_loss(model, X, Y, cfg)]
    N = X.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(N)
        tot = 0.0
        for s in range(0, N, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            loss, grads = loss_fn(model, X[idx], Y[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch)
            opt.step([g for k in trainable for g in grads[k]])
            for c in comps:
                c.touch()
            tot += loss * len(idx)
        history.append(tot / N)
        log.debug("epoch %d loss %.6g", epoch, history[-1])
    return history


def train_paired(X, Y, cfg: TrainConfig, model: PairedModel | None = None, *, widths=(256, 128), r_x=32, r_y=32,
                 identity_maps=False):
    """ADAM training of a paired model; returns (trained copy, per-epoch mean losses).

    ``history[0]`` is the loss of the initial model over the full data.
    With ``cfg.two_stage`` the autoencoders are trained first (cross terms off)
    and the latent maps second (autoencoders frozen).
    """
    X = np.atleast_2d(np.asarray(X, float))
    Y = np.atleast_2d(np.asarray(Y, float))
    if X.shape[0] == 0 or X.shape[0] != Y.shape[0]:
        raise ValueError("need at least one aligned (x, y) pair")
    rng = make_rng(cfg.seed)
    if model is None:
        model = build_paired(X.shape[1], Y.shape[1], r_x, r_y, widths, rng, identity_maps=identity_maps)
    else:
        model = model.copy()
    if not cfg.two_stage:
        hist = _run_adam(model, X, Y, cfg, COMPONENTS, lambda m, x, y: paired_loss(m, x, y, cfg), rng)
        return model, hist
    ae_cfg = TrainConfig(cfg.alpha_x, cfg.alpha_y, 0.0, 0.0, cfg.lr, cfg.epochs, cfg.batch_size, cfg.seed)
    hist = _run_adam(model, X, Y, ae_cfg, ("e_x", "d_x", "e_y", "d_y"), lambda m, x, y: paired_loss(m, x, y, ae_cfg), rng)
    map_cfg = TrainConfig(0.0, 0.0, cfg.alpha_M, cfg.alpha_Mdagger, cfg.lr, cfg.epochs, cfg.batch_size, cfg.seed,
                          "latent-mappings" if cfg.loss_variant == "latent-mappings" else "full-mappings")
    hist += _run_adam(model, X, Y, map_cfg, ("M", "M_dagger"), lambda m, x, y: paired_loss(m, x, y, map_cfg), rng)[1:]
    return model, hist


def direct_estimate(model: PairedModel, Y):
    """x_hat = d_x(M_dagger(e_y(y)))."""
    return model.d_x(model.M_dagger(model.e_y(Y)))


def surrogate_forward(model: PairedModel, X):
    """y_hat = d_y(M(e_x(x)))."""
    return model.d_y(model.M(model.e_x(X)))
