"""Dual-stage progressive enhancement network for single-image deraining.

A coarse rain-streak-removal stage (dilated dense residual blocks) feeds a
detail-reconstruction stage (parallel-dilation pixel-attention blocks). The
package also ships the hybrid SSIM/edge training objective, evaluation
metrics, a static conv-stack analyzer, a synthetic-rain data generator and
a reproducible training loop, all wired behind one CLI.
"""

__version__ = "0.1.0"

from .blocks import DDRB, ERPAB, PAB, PDRB, ConvSpec, ResBlock
from .losses import LossConfig, edge_loss, hybrid_loss, mse_loss, ssim, ssim_loss, ssim_mse_loss
from .metrics import EvalReport, evaluate_directory, psnr, ssim_metric
from .networks import (
    DPENet,
    DRNet,
    NetworkConfig,
    R2Net,
    build_dpenet,
    load_checkpoint,
    load_model,
    save_checkpoint,
)
from .training import TrainConfig, fit, lr_at

__all__ = [
    "__version__",
    "ConvSpec", "ResBlock", "DDRB", "PDRB", "PAB", "ERPAB",
    "LossConfig", "mse_loss", "edge_loss", "ssim", "ssim_loss",
    "hybrid_loss", "ssim_mse_loss",
    "EvalReport", "evaluate_directory", "psnr", "ssim_metric",
    "NetworkConfig", "DPENet", "R2Net", "DRNet", "build_dpenet",
    "save_checkpoint", "load_checkpoint", "load_model",
    "TrainConfig", "fit", "lr_at",
]
