"""Paired autoencoders for inverse problems: direct estimates, latent-space inversion and OOD metrics."""

from .datagen import CorruptionSpec, ImageSet, gen_shapes, read_idx, write_idx
from .inversion import ForwardOp, LsiConfig, lsi, warm_start
from .linear_pae import fit_linear_ae, fit_linear_paired, linear_error_bound
from .ood import Baseline, MetricRecord, fit_baseline, ood_score, recon_metrics, rel_err, ssim
from .paired import PairedModel, TrainConfig, build_paired, direct_estimate, surrogate_forward, train_paired
from .variational import VpaeModel, build_vpae, train_vpae, vpae_sample_inference

__all__ = [
    "Baseline", "CorruptionSpec", "ForwardOp", "ImageSet", "LsiConfig", "MetricRecord", "PairedModel", "TrainConfig",
    "VpaeModel", "build_paired", "build_vpae", "direct_estimate", "fit_baseline", "fit_linear_ae", "fit_linear_paired",
    "gen_shapes", "linear_error_bound", "lsi", "ood_score", "read_idx", "recon_metrics", "rel_err", "ssim",
    "surrogate_forward", "train_paired", "train_vpae", "vpae_sample_inference", "warm_start", "write_idx",
]
__version__ = "0.1.0"
