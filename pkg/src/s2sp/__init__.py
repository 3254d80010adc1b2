"""Single-image self-supervised denoising.

Train a gated-convolution encoder/decoder on one noisy image using
Bernoulli-masked pairs, then denoise by averaging many dropout-perturbed
predictions. :class:`SelfSupervisedDenoiser` is the high-level entry
point; the submodules expose the tensor engine, network, losses, and
pipeline pieces individually.
"""

from .estimator import SelfSupervisedDenoiser
from .losses import (LossConfig, NullScorer, SmoothTVScorer,
                     expectation_property_check, iqa_loss, make_scorer,
                     masked_residual_loss, smooth_tv_score, total_loss)
from .network import (DenoiserNetwork, GatedConvLayer, ShapeManifest,
                      build_network, network_forward)
from .pipeline import (Checkpoint, CropRecord, TrainConfig, TrainingDiverged,
                       denoise_ensemble, pad_to_multiple32, train)
from .pngio import UnsupportedImageError, read_png, write_png
from .quality import (MetricReport, NoiseSpec, add_awgn, evaluate,
                      gaussian_lpf, psnr, ssim)
from .sampling import BernoulliMask, TrainingPair, make_pair, sample_mask
from .tensor import RngStream, Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "BernoulliMask", "Checkpoint", "CropRecord", "DenoiserNetwork",
    "GatedConvLayer", "LossConfig", "MetricReport", "NoiseSpec", "NullScorer",
    "RngStream", "SelfSupervisedDenoiser", "ShapeManifest", "SmoothTVScorer",
    "Tape", "Tensor", "TrainConfig", "TrainingDiverged", "TrainingPair",
    "UnsupportedImageError", "add_awgn", "backward", "build_network",
    "denoise_ensemble", "evaluate", "expectation_property_check",
    "gaussian_lpf", "iqa_loss", "make_pair", "make_scorer",
    "masked_residual_loss", "network_forward", "pad_to_multiple32", "psnr",
    "read_png", "sample_mask", "smooth_tv_score", "ssim", "total_loss",
    "train", "write_png",
]
