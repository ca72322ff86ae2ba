"""Variational paired autoencoders and the variational latent map.

Gaussian heads are parameterized by mean and log standard deviation:
``z = mu + exp(log_std) * eps``. KL terms target N(0, I).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .neuralnet import GaussianLatent, MlpNet, component_from_arrays, kl_std_normal, kl_std_normal_grad, mse
from .numerics import Adam, make_rng
from .paired import PairedModel, TrainingDiverged

VPAE_COMPONENTS = ("enc_x", "dec_x", "enc_y", "dec_y", "M", "M_dagger")
TERMS = ("x", "y", "M", "Md")


@dataclass
class VariationalAE:
    """Encoder with a (mu || log_std) head of width 2r and a deterministic mean decoder."""

    encoder: MlpNet
    decoder: MlpNet
    sigma: float = 1.0

    def __post_init__(self):
        if self.encoder.out_dim != 2 * self.decoder.in_dim:
            raise ValueError("encoder head must have width 2 * latent dim")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    @property
    def r(self):
        return self.decoder.in_dim

    def encode(self, X) -> GaussianLatent:
        return GaussianLatent.split(self.encoder(X))


def elbo_loss(vae: VariationalAE, X, rng=None, *, eps=None, recon_weight=1.0, kl_weight=1.0):
    """Batch mean of ||d(z) - x||^2 / (2 sigma) + KL(q(z|x) || N(0, I)), one z per sample.

    Returns (loss, grads, eps) with grads = {"encoder": [...], "decoder": [...]}.
    """
    X = np.atleast_2d(np.asarray(X, float))
    B = X.shape[0]
    head, te = vae.encoder.forward(X)
    g = GaussianLatent.split(head)
    if eps is None:
        eps = rng.standard_normal(g.mu.shape)
    std = np.exp(g.log_std)
    z = g.mu + std * eps
    out, td = vae.decoder.forward(z)
    res = out - X
    loss = recon_weight * np.sum(res**2) / (2 * vae.sigma * B) + kl_weight * np.sum(kl_std_normal(g)) / B
    gd, gz = vae.decoder.backward(td, recon_weight * res / (vae.sigma * B))
    kmu, ks = kl_std_normal_grad(g)
    gmu = gz + kl_weight * kmu / B
    gs = gz * std * eps + kl_weight * ks / B
    ge, _ = vae.encoder.backward(te, np.concatenate([gmu, gs], axis=1))
    return float(loss), {"encoder": ge, "decoder": gd}, eps


class VpaeModel:
    """Two VAEs whose (mu || log_std) heads are linked by latent maps M and M_dagger."""

    def __init__(self, enc_x, dec_x, enc_y, dec_y, M, M_dagger, sigma=1.0):
        self.enc_x, self.dec_x, self.enc_y, self.dec_y, self.M, self.M_dagger = enc_x, dec_x, enc_y, dec_y, M, M_dagger
        self.sigma = float(sigma)
        r_x, r_y = dec_x.in_dim, dec_y.in_dim
        ok = (
            enc_x.out_dim == 2 * r_x
            and enc_y.out_dim == 2 * r_y
            and M.in_dim == 2 * r_x
            and M.out_dim == 2 * r_y
            and M_dagger.in_dim == 2 * r_y
            and M_dagger.out_dim == 2 * r_x
        )
        if not ok:
            raise ValueError("VPAE dimensions are inconsistent")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    @property
    def r_x(self):
        return self.dec_x.in_dim

    @property
    def r_y(self):
        return self.dec_y.in_dim

    @property
    def vae_x(self):
        return VariationalAE(self.enc_x, self.dec_x, self.sigma)

    @property
    def vae_y(self):
        return VariationalAE(self.enc_y, self.dec_y, self.sigma)

    def copy(self):
        return VpaeModel(*(getattr(self, k).copy() for k in VPAE_COMPONENTS), sigma=self.sigma)

    def params(self):
        return [p for k in VPAE_COMPONENTS for p in getattr(self, k).params()]

    def get_flat(self):
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, vec):
        i = 0
        for k in VPAE_COMPONENTS:
            c = getattr(self, k)
            for p in c.params():
                p[...] = vec[i : i + p.size].reshape(p.shape)
                i += p.size
            c.touch()

    def to_arrays(self):
        out = {}
        for k in VPAE_COMPONENTS:
            out.update(getattr(self, k).to_arrays(k))
        return out

    def spec(self):
        return {**{k: getattr(self, k).spec() for k in VPAE_COMPONENTS}, "sigma": self.sigma}

    @classmethod
    def from_arrays(cls, spec, arrays):
        return cls(*(component_from_arrays(spec[k], arrays, k) for k in VPAE_COMPONENTS), sigma=spec["sigma"])

    def mapped_x(self, Y) -> GaussianLatent:
        """(mu_hat_x, log_std_hat_x) = M_dagger(e_y(y))."""
        return GaussianLatent.split(self.M_dagger(self.enc_y(Y)))

    def mapped_y(self, X) -> GaussianLatent:
        return GaussianLatent.split(self.M(self.enc_x(X)))

    def as_paired(self) -> PairedModel:
        """Deterministic paired model built from the mean heads and the mean blocks of the maps."""
        def mean_rows(net, keep):
            W, b = net.weights[-1], net.biases[-1]
            last = net.layers[-1]
            layers = net.layers[:-1] + [type(last)(last.in_dim, keep, last.activation, last.bias)]
            return MlpNet(layers, net.weights[:-1] + [W[:keep]], net.biases[:-1] + [None if b is None else b[:keep]])

        def mean_block(net, rin, rout):
            if len(net.layers) != 1 or net.biases[0] is not None or net.layers[0].activation != "identity":
                raise ValueError("mean-block extraction needs single-matrix latent maps")
            return MlpNet.linear(net.weights[0][:rout, :rin])

        return PairedModel(
            mean_rows(self.enc_x, self.r_x), self.dec_x.copy(),
            mean_rows(self.enc_y, self.r_y), self.dec_y.copy(),
            mean_block(self.M, self.r_x, self.r_y), mean_block(self.M_dagger, self.r_y, self.r_x),
        )


def build_vpae(n, m, r_x, r_y, widths=(256, 128), rng=None, sigma=1.0, hidden_activation="relu",
               output_activation="sigmoid"):
    rng = make_rng(0) if rng is None else rng
    w = list(widths)

    def enc(d, r):
        return MlpNet.init([d, *w, 2 * r], [hidden_activation] * len(w) + ["identity"], rng)

    def dec(r, d):
        return MlpNet.init([r, *w[::-1], d], [hidden_activation] * len(w) + [output_activation], rng)

    enc_x, dec_x, enc_y, dec_y = enc(n, r_x), dec(r_x, n), enc(m, r_y), dec(r_y, m)
    M = MlpNet.init([2 * r_x, 2 * r_y], "identity", rng, bias=False)
    Md = MlpNet.init([2 * r_y, 2 * r_x], "identity", rng, bias=False)
    return VpaeModel(enc_x, dec_x, enc_y, dec_y, M, Md, sigma)


def draw_vpae_noise(model: VpaeModel, batch, rng):
    return {
        "x": rng.standard_normal((batch, model.r_x)),
        "y": rng.standard_normal((batch, model.r_y)),
        "M": rng.standard_normal((batch, model.r_y)),
        "Md": rng.standard_normal((batch, model.r_x)),
    }


def vpae_loss(model: VpaeModel, X, Y, rng=None, *, noise=None, weights=(1.0, 1.0, 1.0, 1.0), return_terms=False):
    """Sum of four single-sample ELBO terms, each averaged over the batch.

    x: d_x(z_x) vs x; y: d_y(z_y) vs y; M: d_y(z_hat_y) vs y with
    (mu, s)_hat_y = M(e_x(x)); Md: d_x(z_hat_x) vs x with (mu, s)_hat_x = M_dagger(e_y(y)).
    Every term carries KL of its Gaussian against N(0, I).
    Returns (loss, grads) or (loss, grads, terms); terms maps name -> (recon, kl).
    """
    X = np.atleast_2d(np.asarray(X, float))
    Y = np.atleast_2d(np.asarray(Y, float))
    B = X.shape[0]
    if Y.shape[0] != B or B == 0:
        raise ValueError("X and Y must hold the same nonzero number of rows")
    if noise is None:
        noise = draw_vpae_noise(model, B, rng)
    w = dict(zip(TERMS, weights))
    s2 = 2.0 * model.sigma
    grads = {k: [np.zeros_like(p) for p in getattr(model, k).params()] for k in VPAE_COMPONENTS}
    terms = {}

    def add(name, gl):
        for a, g in zip(grads[name], gl):
            a += g

    hx, tx = model.enc_x.forward(X)
    hy, ty = model.enc_y.forward(Y)
    ghx = np.zeros_like(hx)
    ghy = np.zeros_like(hy)

    def gaussian_term(head, eps, dec_name, target, weight):
        """Reconstruction + KL through a (mu || log_std) head; returns grad wrt head."""
        g = GaussianLatent.split(head)
        std = np.exp(g.log_std)
        z = g.mu + std * eps
        dec = getattr(model, dec_name)
        out, td = dec.forward(z)
        res = out - target
        recon = float(np.sum(res**2) / (s2 * B))
        kl = float(np.sum(kl_std_normal(g)) / B)
        gd, gz = dec.backward(td, weight * 2.0 * res / (s2 * B))
        add(dec_name, gd)
        kmu, ks = kl_std_normal_grad(g)
        ghead = np.concatenate([gz + weight * kmu / B, gz * std * eps + weight * ks / B], axis=1)
        return (recon, kl), ghead

    if w["x"]:
        terms["x"], gh = gaussian_term(hx, noise["x"], "dec_x", X, w["x"])
        ghx += gh
    if w["y"]:
        terms["y"], gh = gaussian_term(hy, noise["y"], "dec_y", Y, w["y"])
        ghy += gh
    if w["M"]:
        hm, tm = model.M.forward(hx)
        terms["M"], gh = gaussian_term(hm, noise["M"], "dec_y", Y, w["M"])
        gm, gin = model.M.backward(tm, gh)
        add("M", gm)
        ghx += gin
    if w["Md"]:
        hm, tm = model.M_dagger.forward(hy)
        terms["Md"], gh = gaussian_term(hm, noise["Md"], "dec_x", X, w["Md"])
        gm, gin = model.M_dagger.backward(tm, gh)
        add("M_dagger", gm)
        ghy += gin
    add("enc_x", model.enc_x.backward(tx, ghx)[0])
    add("enc_y", model.enc_y.backward(ty, ghy)[0])
    loss = float(sum(w[k] * (r + k_) for k, (r, k_) in terms.items()))
    if return_terms:
        return loss, grads, terms
    return loss, grads


@dataclass
class VpaeTrainConfig:
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    weights: tuple = (1.0, 1.0, 1.0, 1.0)


def train_vpae(X, Y, cfg: VpaeTrainConfig, model: VpaeModel | None = None, *, widths=(256, 128), r_x=32, r_y=32,
               sigma=1.0):
    """ADAM on ``vpae_loss`` with fresh noise per batch; returns (model, epoch-mean losses)."""
    X = np.atleast_2d(np.asarray(X, float))
    Y = np.atleast_2d(np.asarray(Y, float))
    rng = make_rng(cfg.seed)
    model = build_vpae(X.shape[1], Y.shape[1], r_x, r_y, widths, rng, sigma) if model is None else model.copy()
    comps = [getattr(model, k) for k in VPAE_COMPONENTS]
    opt = Adam(model.params(), lr=cfg.lr)
    N = X.shape[0]
    hist = [vpae_loss(model, X, Y, make_rng(cfg.seed ^ 0x5EED), weights=cfg.weights)[0]]
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(N)
        tot = 0.0
        for s in range(0, N, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            loss, grads = vpae_loss(model, X[idx], Y[idx], rng, weights=cfg.weights)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch)
            opt.step([g for k in VPAE_COMPONENTS for g in grads[k]])
            for c in comps:
                c.touch()
            tot += loss * len(idx)
        hist.append(tot / N)
    return model, hist


def vpae_direct_estimate(model: VpaeModel, Y):
    """Decode the mapped mean: d_x(mu_hat_x)."""
    return model.dec_x(model.mapped_x(Y).mu)


def vpae_sample_inference(model: VpaeModel, y, n: int, rng):
    """Encode and map once, then draw ``n`` latents from N(mu_hat_x, exp(s_hat_x)^2) and decode each.

    Returns an (n, dim_x) array for a single ``y``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    g = model.mapped_x(np.asarray(y, float).reshape(1, -1))
    eps = rng.standard_normal((n, model.r_x))
    z = g.mu + np.exp(g.log_std) * eps
    return model.dec_x(z)


@dataclass
class SampleStats:
    mean: np.ndarray
    std: np.ndarray
    n: int


def pixel_stats(samples) -> SampleStats:
    """Elementwise mean and (n-1)-normalized standard deviation over the first axis."""
    S = np.asarray(samples, dtype=np.float64)
    if S.shape[0] < 2:
        raise ValueError("pixel_stats needs at least two samples")
    return SampleStats(S.mean(axis=0), S.std(axis=0, ddof=1), S.shape[0])


class VariationalLatentMap:
    """Stochastic map z_y -> z_x: Gaussian encoder head on z_y, deterministic decoder to z_x.

    With ``fixed_log_std`` set, the encoder emits only the mean and the
    log-std is held at that constant.
    """

    def __init__(self, encoder: MlpNet, decoder: MlpNet, sigma=1.0, fixed_log_std=None):
        self.encoder, self.decoder = encoder, decoder
        self.sigma = float(sigma)
        self.fixed_log_std = fixed_log_std
        head = decoder.in_dim if fixed_log_std is not None else 2 * decoder.in_dim
        if encoder.out_dim != head:
            raise ValueError("encoder head width does not match decoder latent dim")

    @property
    def r(self):
        return self.decoder.in_dim

    def head(self, Z):
        out, tape = self.encoder.forward(Z)
        if self.fixed_log_std is not None:
            return GaussianLatent(out, np.full_like(out, self.fixed_log_std)), tape
        return GaussianLatent.split(out), tape

    def copy(self):
        return VariationalLatentMap(self.encoder.copy(), self.decoder.copy(), self.sigma, self.fixed_log_std)

    def params(self):
        return self.encoder.params() + self.decoder.params()

    def to_arrays(self):
        return {**self.encoder.to_arrays("enc_z"), **self.decoder.to_arrays("dec_z")}

    def spec(self):
        return {"enc_z": self.encoder.spec(), "dec_z": self.decoder.spec(), "sigma": self.sigma,
                "fixed_log_std": self.fixed_log_std}

    @classmethod
    def from_arrays(cls, spec, arrays):
        return cls(MlpNet.from_arrays(spec["enc_z"], arrays, "enc_z"), MlpNet.from_arrays(spec["dec_z"], arrays, "dec_z"),
                   spec["sigma"], spec["fixed_log_std"])


def build_latent_map(r_y, r_x, hidden=128, rng=None, *, linear=True, fixed_log_std=None, sigma=1.0):
    """Non-compressive map: the inner latent has dimension r_y."""
    rng = make_rng(0) if rng is None else rng
    head = r_y if fixed_log_std is not None else 2 * r_y
    if linear:
        enc = MlpNet.init([r_y, hidden, head], "identity", rng)
        dec = MlpNet.init([r_y, hidden, r_x], "identity", rng)
    else:
        enc = MlpNet.init([r_y, hidden, head], ["relu", "identity"], rng)
        dec = MlpNet.init([r_y, hidden, r_x], ["relu", "identity"], rng)
    return VariationalLatentMap(enc, dec, sigma, fixed_log_std)


def latent_map_loss(vmap: VariationalLatentMap, Zy, Zx, rng=None, *, eps=None, kl_weight=1.0):
    """mse(d(z), z_x) / (2 sigma) + mean KL of the head, one sample per row."""
    Zy = np.atleast_2d(np.asarray(Zy, float))
    Zx = np.atleast_2d(np.asarray(Zx, float))
    B = Zy.shape[0]
    g, te = vmap.head(Zy)
    if eps is None:
        eps = rng.standard_normal(g.mu.shape)
    std = np.exp(g.log_std)
    z = g.mu + std * eps
    out, td = vmap.decoder.forward(z)
    recon = mse(out, Zx) / (2 * vmap.sigma)
    kl = float(np.sum(kl_std_normal(g)) / B)
    gd, gz = vmap.decoder.backward(td, (out - Zx) / (vmap.sigma * out.size))
    kmu, ks = kl_std_normal_grad(g)
    gmu = gz + kl_weight * kmu / B
    if vmap.fixed_log_std is not None:
        ghead = gmu
    else:
        ghead = np.concatenate([gmu, gz * std * eps + kl_weight * ks / B], axis=1)
    ge, _ = vmap.encoder.backward(te, ghead)
    return recon + kl_weight * kl, ge + gd, recon


@dataclass
class LatentMapConfig:
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    kl_weight: float = 1.0
    hidden: int = 128
    linear: bool = True
    fixed_log_std: float | None = None


def train_variational_latent_map(Zy, Zx, cfg: LatentMapConfig, vmap: VariationalLatentMap | None = None):
    """Fit the stochastic latent map on pairs (z_y, z_x) from frozen encoders.

    Returns (map, epoch-mean losses). The autoencoders are not touched.
    """
    Zy = np.atleast_2d(np.asarray(Zy, float))
    Zx = np.atleast_2d(np.asarray(Zx, float))
    rng = make_rng(cfg.seed)
    if vmap is None:
        vmap = build_latent_map(Zy.shape[1], Zx.shape[1], cfg.hidden, rng, linear=cfg.linear, fixed_log_std=cfg.fixed_log_std)
    else:
        vmap = vmap.copy()
    opt = Adam(vmap.params(), lr=cfg.lr)
    N = Zy.shape[0]
    hist = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(N)
        tot = 0.0
        for s in range(0, N, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            loss, grads, _ = latent_map_loss(vmap, Zy[idx], Zx[idx], rng, kl_weight=cfg.kl_weight)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch)
            opt.step(grads)
            vmap.encoder.touch()
            vmap.decoder.touch()
            tot += loss * len(idx)
        hist.append(tot / N)
    return vmap, hist


def latent_map_sample(vmap: VariationalLatentMap, z_y, n: int, rng):
    """``n`` draws of z_x = d(z), z ~ N(head(z_y)) for a single z_y."""
    if n < 1:
        raise ValueError("n must be >= 1")
    g, _ = vmap.head(np.asarray(z_y, float).reshape(1, -1))
    z = g.mu + np.exp(g.log_std) * rng.standard_normal((n, vmap.r))
    return vmap.decoder(z)


def latent_map_mean(vmap: VariationalLatentMap, Zy):
    g, _ = vmap.head(Zy)
    return vmap.decoder(g.mu)
