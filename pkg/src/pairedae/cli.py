"""``pae`` command-line harness.

Commands: make-data, train, invert, ood, sample, export-latents.
Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import ood
from .checkpoint import CheckpointError, load_model, save_model
from .datagen import CorruptionSpec, IdxError, ImageSet, gen_shapes, load_idx, save_idx
from .inversion import ForwardOp, LsiConfig, lsi
from .linear_pae import fit_linear_paired
from .numerics import SvdError, child_rng
from .paired import PairedModel, TrainConfig, direct_estimate, train_paired
from .variational import (
    LatentMapConfig,
    VpaeTrainConfig,
    latent_map_mean,
    latent_map_sample,
    pixel_stats,
    train_variational_latent_map,
    train_vpae,
    vpae_direct_estimate,
    vpae_sample_inference,
)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
MODEL_KINDS = ("paired", "linear", "vpae", "latent-map")


class ConfigError(ValueError):
    pass


def _build(cls, d, what):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"{what} must be a JSON object")
    known = {f.name for f in fields(cls)}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"unknown {what} keys: {sorted(extra)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {what}: {exc}") from None


@dataclass
class DataSpec:
    source: str = "shapes"  # "shapes" | "idx"
    path: str | None = None
    count: int = 2000
    offset: int = 0
    height: int = 16
    width: int = 16

    def __post_init__(self):
        if self.source not in ("shapes", "idx"):
            raise ValueError(f"unknown data source {self.source!r}")
        if self.source == "idx" and not self.path:
            raise ValueError("idx source needs a path")
        if self.count < 1 or self.offset < 0 or self.height < 1 or self.width < 1:
            raise ValueError("count, height, width must be >= 1 and offset >= 0")


@dataclass
class ModelSpec:
    kind: str = "paired"
    r_x: int = 32
    r_y: int = 32
    widths: list = field(default_factory=lambda: [128, 64])
    identity_maps: bool = False
    sigma: float = 1.0
    map: dict = field(default_factory=dict)  # LatentMapConfig fields for kind "latent-map"

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.r_x < 1 or self.r_y < 1 or any(int(w) < 1 for w in self.widths):
            raise ValueError("latent dims and widths must be >= 1")
        if self.identity_maps and self.r_x != self.r_y:
            raise ValueError("identity maps need r_x == r_y")


@dataclass
class RunConfig:
    seed: int = 0
    data: DataSpec = field(default_factory=DataSpec)
    corruption: CorruptionSpec = field(default_factory=lambda: CorruptionSpec("pixel-bernoulli"))
    model: ModelSpec = field(default_factory=ModelSpec)
    train: dict = field(default_factory=dict)
    lsi: LsiConfig = field(default_factory=LsiConfig)
    out: str = "out"

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        extra = set(d) - {f.name for f in fields(cls)}
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        seed = d.get("seed", 0)
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        cfg = cls(
            seed=seed,
            data=_build(DataSpec, d.get("data"), "data"),
            corruption=_build(CorruptionSpec, d.get("corruption", {"variant": "pixel-bernoulli"}), "corruption"),
            model=_build(ModelSpec, d.get("model"), "model"),
            train=d.get("train", {}) or {},
            lsi=_build(LsiConfig, d.get("lsi"), "lsi"),
            out=d.get("out", "out"),
        )
        cfg.train_config()  # validate now, before any file is touched
        if cfg.model.kind == "latent-map":
            _build(LatentMapConfig, cfg.model.map, "model.map")
        if cfg.data.source == "idx" and not os.path.isfile(cfg.data.path):
            raise ConfigError(f"data path not found: {cfg.data.path}")
        return cfg

    def train_config(self):
        cls = VpaeTrainConfig if self.model.kind == "vpae" else TrainConfig
        d = dict(self.train)
        d["seed"] = self.seed
        if cls is VpaeTrainConfig and "weights" in d:
            d["weights"] = tuple(d["weights"])
        return _build(cls, d, "train")

    def to_dict(self):
        d = asdict(self)
        d["lsi"] = asdict(self.lsi)
        return d


def load_config(path, seed=None) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON config: {exc}") from None
    if seed is not None and isinstance(raw, dict):
        raw["seed"] = seed
    return RunConfig.from_dict(raw)


def make_pairs(cfg: RunConfig):
    """(clean images, corrupted images, observation mask) as (N, H, W) arrays."""
    d = cfg.data
    if d.source == "shapes":
        imgs = gen_shapes(child_rng(cfg.seed, 0), d.offset + d.count, d.height, d.width).pixels[d.offset :]
    else:
        got = load_idx(d.path)
        if not isinstance(got, ImageSet):
            raise ConfigError("data path must hold an image IDX file")
        if got.count < d.offset + d.count:
            raise ConfigError(f"{d.path} has {got.count} images, need {d.offset + d.count}")
        imgs = got.pixels[d.offset : d.offset + d.count]  # first-N rule
    Y, mask = cfg.corruption.apply(ImageSet(imgs), child_rng(cfg.seed, 1 + cfg.corruption.seed))
    return imgs, Y.pixels, mask


def read_matrix(path):
    """IDX file -> (N, d) float rows and the per-sample shape."""
    got = load_idx(path)
    arr = got.pixels if isinstance(got, ImageSet) else np.asarray(got, dtype=np.float64)
    if arr.ndim < 2:
        raise ConfigError(f"{path} holds a vector; expected samples along the first axis")
    return arr.reshape(arr.shape[0], int(np.prod(arr.shape[1:]))), arr.shape[1:]


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([format(v, ".17g") if isinstance(v, (float, np.floating)) else v for v in r])


def _check_dim(X, want, what):
    if X.shape[1] != want:
        raise ConfigError(f"{what} has dimension {X.shape[1]}, model expects {want}")


def _paired_view(kind, model):
    if kind == "paired":
        return model
    if kind == "vpae":
        return model.as_paired()
    return model[0]


def cmd_make_data(args, cfg: RunConfig):
    X, Y, mask = make_pairs(cfg)
    os.makedirs(args.out, exist_ok=True)
    save_idx(os.path.join(args.out, "x.idx"), X)
    save_idx(os.path.join(args.out, "y.idx"), Y)
    save_idx(os.path.join(args.out, "mask.idx"), mask)
    return EXIT_OK


def cmd_train(args, cfg: RunConfig):
    X, Y, _ = make_pairs(cfg)
    X, Y = X.reshape(len(X), -1), Y.reshape(len(Y), -1)
    tc = cfg.train_config()
    ms = cfg.model
    widths = tuple(int(w) for w in ms.widths)
    if ms.kind == "linear":
        model = PairedModel.from_linear(*fit_linear_paired(X, Y, ms.r_x, ms.r_y))
        hist = []
    elif ms.kind == "vpae":
        model, hist = train_vpae(X, Y, tc, widths=widths, r_x=ms.r_x, r_y=ms.r_y, sigma=ms.sigma)
    else:
        model, hist = train_paired(X, Y, tc, widths=widths, r_x=ms.r_x, r_y=ms.r_y, identity_maps=ms.identity_maps)
        if ms.kind == "latent-map":
            mc = _build(LatentMapConfig, {**ms.map, "seed": cfg.seed}, "model.map")
            vmap, mh = train_variational_latent_map(model.e_y(Y), model.e_x(X), mc)
            model = (model, vmap)
            hist = hist + mh
    os.makedirs(args.out, exist_ok=True)
    save_model(os.path.join(args.out, "model.pae"), model, cfg.to_dict())
    write_csv(os.path.join(args.out, "history.csv"), ["epoch", "loss"], [(i, float(h)) for i, h in enumerate(hist)])
    return EXIT_OK


def _direct(kind, model, Y):
    if kind == "paired":
        return direct_estimate(model, Y)
    if kind == "vpae":
        return vpae_direct_estimate(model, Y)
    pm, vmap = model
    return pm.d_x(latent_map_mean(vmap, pm.e_y(Y)))


def cmd_invert(args, cfg: RunConfig | None):
    kind, model, _ = load_model(args.checkpoint)
    Y, shape = read_matrix(args.data)
    lsi_model = model[0] if kind == "latent-map" else model
    n_in = (lsi_model.dec_y if kind == "vpae" else lsi_model.d_y).out_dim
    _check_dim(Y, n_in, "data")
    truth = None
    if args.truth:
        truth, _ = read_matrix(args.truth)
        if truth.shape[0] != Y.shape[0]:
            raise ConfigError("truth and data sample counts differ")
    if args.lsi:
        lc = cfg.lsi if cfg is not None else LsiConfig()
        lc = LsiConfig(args.steps or lc.steps, lc.lr, lc.alpha if args.alpha is None else args.alpha,
                       not args.cold, lc.warm_mode)
        if args.mask:
            mask, _ = read_matrix(args.mask)
            if mask.shape != Y.shape and mask.shape[0] != 1:
                raise ConfigError("mask must match the data shape")
            F = ForwardOp("mask", mask=mask if mask.shape[0] == Y.shape[0] else mask[0])
        else:
            F = ForwardOp.identity(Y.shape[1])
        res = lsi(lsi_model, F, Y, lc, child_rng(args.seed, 2))
        X_hat = res.x_hat
    else:
        X_hat = _direct(kind, model, Y)
    if truth is not None:
        _check_dim(truth, X_hat.shape[1], "truth")
    os.makedirs(args.out, exist_ok=True)
    out_shape = shape if X_hat.shape[1] == int(np.prod(shape)) else (X_hat.shape[1],)
    save_idx(os.path.join(args.out, "estimates.idx"), X_hat.reshape(len(X_hat), *out_shape))
    if truth is not None:
        rows = []
        for i, (xh, x) in enumerate(zip(X_hat, truth)):
            s = ood.ssim(xh.reshape(out_shape), x.reshape(out_shape)) if len(out_shape) == 2 else float("nan")
            rows.append((i, ood.rel_err(xh, x), s))
        write_csv(os.path.join(args.out, "metrics.csv"), ["index", "rel_err", "ssim"], rows)
    if args.lsi:
        hdr = ["iteration"] + [f"s{i}" for i in range(Y.shape[0])]
        write_csv(os.path.join(args.out, "misfit.csv"), hdr,
                  [(t, *map(float, row)) for t, row in enumerate(res.misfit)])
    return EXIT_OK


def _group_names(paths):
    names = []
    for p in paths:
        base = os.path.splitext(os.path.basename(p))[0]
        name, k = base, 1
        while name in names:
            name, k = f"{base}_{k}", k + 1
        names.append(name)
    return names


def cmd_ood(args, cfg):
    kind, model, _ = load_model(args.checkpoint)
    pm = _paired_view(kind, model)
    B, _ = read_matrix(args.baseline)
    _check_dim(B, pm.m, "baseline")
    if B.shape[0] < 30:
        raise ConfigError(f"baseline needs at least 30 samples, got {B.shape[0]}")
    pair = tuple(args.pair.split(","))
    if len(pair) != 2 or any(p not in ood.METRICS for p in pair):
        raise ConfigError("--pair expects two of m1..m5 separated by a comma")
    probes = {}
    for name, path in zip(_group_names(args.probe), args.probe):
        P, _ = read_matrix(path)
        _check_dim(P, pm.m, "probe")
        probes[name] = P
    base = ood.fit_baseline(pm, B)
    recs = {g: ood.recon_metrics_batch(pm, P) for g, P in probes.items()}
    os.makedirs(args.out, exist_ok=True)
    ood.export_report(recs, base, args.out, scatter_pair=pair)
    rows = []
    for g, rs in recs.items():
        flags = [ood.ood_score(base, r)[1] for r in rs]
        rows.append((g, len(rs), float(np.mean(flags)) if flags else float("nan")))
    write_csv(os.path.join(args.out, "summary.csv"), ["group", "count", "flag_rate"], rows)
    return EXIT_OK


def cmd_sample(args, cfg):
    kind, model, _ = load_model(args.checkpoint)
    if kind not in ("vpae", "latent-map"):
        raise ConfigError(f"sampling needs a variational checkpoint, got {kind!r}")
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    Y, _ = read_matrix(args.data)
    rng = child_rng(args.seed, 3)
    if kind == "vpae":
        _check_dim(Y, model.dec_y.out_dim, "data")
        S = np.stack([vpae_sample_inference(model, y, args.n, rng) for y in Y]) if len(Y) else np.zeros((0, args.n, model.dec_x.out_dim))
    else:
        pm, vmap = model
        _check_dim(Y, pm.m, "data")
        zy = pm.e_y(Y)
        S = np.stack([pm.d_x(latent_map_sample(vmap, z, args.n, rng)) for z in zy]) if len(Y) else np.zeros((0, args.n, pm.n))
    os.makedirs(args.out, exist_ok=True)
    save_idx(os.path.join(args.out, "samples.idx"), S)
    save_idx(os.path.join(args.out, "mean.idx"), S.mean(axis=1))
    if args.n >= 2:  # a single draw has no spread; std.idx is omitted
        save_idx(os.path.join(args.out, "std.idx"), np.stack([pixel_stats(s).std for s in S]) if len(S) else S[:, 0])
    return EXIT_OK


def cmd_export_latents(args, cfg):
    kind, model, _ = load_model(args.checkpoint)
    pm = _paired_view(kind, model)
    X, _ = read_matrix(args.data)
    enc = pm.e_x if args.space == "x" else pm.e_y
    _check_dim(X, enc.in_dim, "data")
    labels = None
    if args.labels:
        labels = np.asarray(load_idx(args.labels)).reshape(-1)
        if labels.shape[0] != X.shape[0]:
            raise ConfigError("label count does not match sample count")
    Z = enc(X) if len(X) else np.zeros((0, enc.out_dim))
    r = pm.r_x if args.space == "x" else pm.r_y
    header = [f"z{i}" for i in range(r)] + (["label"] if labels is not None else [])
    rows = [(*map(float, z), *([int(labels[i])] if labels is not None else [])) for i, z in enumerate(Z)]
    os.makedirs(args.out, exist_ok=True)
    write_csv(os.path.join(args.out, "latents.csv"), header, rows)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="pae", description="Paired autoencoders for inverse problems.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="JSON run config")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help="output directory")

    sp = sub.add_parser("make-data", help="write clean/corrupted IDX pairs from a config")
    common(sp, True)
    sp = sub.add_parser("train", help="train a model and write model.pae")
    common(sp, True)

    sp = sub.add_parser("invert", help="direct or latent-space inversion")
    sp.add_argument("checkpoint")
    sp.add_argument("data")
    mode = sp.add_mutually_exclusive_group(required=True)
    mode.add_argument("--direct", action="store_true")
    mode.add_argument("--lsi", action="store_true")
    sp.add_argument("--cold", action="store_true", help="LSI from a zero latent instead of the warm start")
    sp.add_argument("--truth", help="ground-truth IDX for rel_err / ssim")
    sp.add_argument("--mask", help="observation mask IDX used as the forward operator")
    sp.add_argument("--alpha", type=float, default=None)
    sp.add_argument("--steps", type=int, default=None)
    common(sp)

    sp = sub.add_parser("ood", help="baseline fit and OOD scoring report")
    sp.add_argument("checkpoint")
    sp.add_argument("--baseline", required=True)
    sp.add_argument("--probe", action="append", required=True)
    sp.add_argument("--pair", default="m1,m3", help="metric pair for the scatter CSV")
    common(sp)

    sp = sub.add_parser("sample", help="posterior samples from a variational checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("data")
    sp.add_argument("--n", type=int, default=100)
    common(sp)

    sp = sub.add_parser("export-latents", help="latent coordinates as CSV")
    sp.add_argument("checkpoint")
    sp.add_argument("data")
    sp.add_argument("--labels")
    sp.add_argument("--space", choices=("x", "y"), default="x")
    common(sp)
    return p


COMMANDS = {
    "make-data": cmd_make_data,
    "train": cmd_train,
    "invert": cmd_invert,
    "ood": cmd_ood,
    "sample": cmd_sample,
    "export-latents": cmd_export_latents,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed) if args.config else None
        if args.seed is None:
            args.seed = cfg.seed if cfg is not None else 0
        if args.out is None:
            args.out = cfg.out if cfg is not None else "out"
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, CheckpointError, IdxError, FileNotFoundError, IsADirectoryError, ValueError) as exc:
        print(f"pae: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, SvdError, np.linalg.LinAlgError) as exc:
        print(f"pae: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
