"""Desk-scale foundation-aligned VAE, rectified-flow transformer, and latent diagnostics."""

from .autodiff import Tensor, backward, no_grad
from .diagnostics import UniformityReport, psnr, ssim, uniformity_of_latents
from .estimators import LatentFlow, VaeTokenizer
from .gradcheck import finite_diff_check
from .vfloss import (
    FeatureMap,
    LatentMap,
    LossBreakdown,
    Margins,
    Projection,
    adaptive_weight,
    mcos_loss,
    mdms_loss,
    project_latent,
    vf_loss_total,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "no_grad",
    "finite_diff_check",
    "VaeTokenizer",
    "LatentFlow",
    "UniformityReport",
    "uniformity_of_latents",
    "psnr",
    "ssim",
    "FeatureMap",
    "LatentMap",
    "LossBreakdown",
    "Margins",
    "Projection",
    "adaptive_weight",
    "mcos_loss",
    "mdms_loss",
    "project_latent",
    "vf_loss_total",
    "__version__",
]
