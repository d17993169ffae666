"""Learned perceptual colour difference for photographic images.

A multi-scale autoregressive normalizing flow maps an RGB image to latent
coordinates in which the RMS distance between two images serves as their
colour difference.
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .color import delta_e76, delta_e94, delta_e2000, image_cd_mean, lab_to_srgb, srgb_to_lab
from .estimator import CDFlow, PixelMeanCD
from .evaluation import EvalReport, evaluate, geometric_distort, plcc_linearized, srcc, stress
from .flow import FlowConfig, FlowModel, LatentStack, flow_forward, flow_inverse, log_likelihood
from .metric import CDResult, compare, delta_e, delta_e_scale, local_cd_maps
from .training import LabeledPair, TrainConfig, batch_loss, gen_synthetic_dataset, train

__version__ = "0.1.0"

__all__ = [
    "CDFlow",
    "PixelMeanCD",
    "FlowConfig",
    "FlowModel",
    "LatentStack",
    "flow_forward",
    "flow_inverse",
    "log_likelihood",
    "CDResult",
    "compare",
    "delta_e",
    "delta_e_scale",
    "local_cd_maps",
    "LabeledPair",
    "TrainConfig",
    "batch_loss",
    "gen_synthetic_dataset",
    "train",
    "EvalReport",
    "evaluate",
    "geometric_distort",
    "plcc_linearized",
    "srcc",
    "stress",
    "srgb_to_lab",
    "lab_to_srgb",
    "delta_e76",
    "delta_e94",
    "delta_e2000",
    "image_cd_mean",
    "load_checkpoint",
    "save_checkpoint",
]
