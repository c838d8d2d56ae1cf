"""Differentiable training objectives: MSE, Laplacian edge, SSIM, and hybrids.

Predictions arrive unclamped (training must keep gradients alive outside
[0, 1]); every loss here accepts arbitrary real values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ShapeMismatchError

LAPLACIAN_KERNEL = ((0.0, 1.0, 0.0), (1.0, -4.0, 1.0), (0.0, 1.0, 0.0))


@dataclass(frozen=True)
class LossConfig:
    """Weights and constants shared by the loss family.

    edge_weight scales the edge term inside the hybrid loss; mse_weight
    scales the MSE term inside the SSIM+MSE hybrid. charbonnier_eps is the
    offset under the square root of the edge loss. k1/k2/data_range are the
    SSIM stabilizer constants; the window is Gaussian. edge_scales adds
    optional Gaussian pre-blur sigmas for a multi-scale edge loss (off by
    default: the plain 3x3 Laplacian).
    """

    edge_weight: float = 0.05
    mse_weight: float = 1.0
    charbonnier_eps: float = 1e-3
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0
    window_size: int = 11
    window_sigma: float = 1.5
    edge_scales: tuple[float, ...] = ()

    def __post_init__(self):
        if self.charbonnier_eps <= 0:
            raise ValueError("charbonnier_eps must be positive")
        if self.k1 <= 0 or self.k2 <= 0 or self.data_range <= 0:
            raise ValueError("k1, k2 and data_range must be positive")
        if self.window_size % 2 == 0 or self.window_size < 1:
            raise ValueError("window_size must be odd and positive")
        if self.window_sigma <= 0:
            raise ValueError("window_sigma must be positive")


DEFAULT_LOSS_CONFIG = LossConfig()


def _check_same_shape(s: torch.Tensor, y: torch.Tensor) -> None:
    if s.shape != y.shape:
        raise ShapeMismatchError(f"shape mismatch: {tuple(s.shape)} vs {tuple(y.shape)}")
    if s.ndim != 4:
        raise ShapeMismatchError(f"expected rank-4 tensors, got shape {tuple(s.shape)}")


def gaussian_window(size: int, sigma: float, dtype: torch.dtype = torch.float32,
                    device: torch.device | None = None) -> torch.Tensor:
    """2-D Gaussian window normalized to sum 1, shape (size, size)."""
    half = (size - 1) / 2.0
    coords = torch.arange(size, dtype=dtype, device=device) - half
    g = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    window = g[:, None] * g[None, :]
    return window / window.sum()


def mse_loss(s: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean over batch, channels and pixels of the squared difference."""
    _check_same_shape(s, y)
    return ((s - y) ** 2).mean()


def laplacian(x: torch.Tensor) -> torch.Tensor:
    """Per-channel 3x3 Laplacian with replicate padding (constants map to 0)."""
    channels = x.shape[1]
    kernel = torch.tensor(LAPLACIAN_KERNEL, dtype=x.dtype, device=x.device)
    kernel = kernel.expand(channels, 1, 3, 3)
    padded = F.pad(x, (1, 1, 1, 1), mode="replicate")
    return F.conv2d(padded, kernel, groups=channels)


def _gaussian_blur(x: torch.Tensor, sigma: float) -> torch.Tensor:
    size = 2 * int(math.ceil(3.0 * sigma)) + 1
    kernel = gaussian_window(size, sigma, dtype=x.dtype, device=x.device)
    kernel = kernel.expand(x.shape[1], 1, size, size)
    pad = size // 2
    padded = F.pad(x, (pad, pad, pad, pad), mode="replicate")
    return F.conv2d(padded, kernel, groups=x.shape[1])


def edge_loss(s: torch.Tensor, y: torch.Tensor,
              cfg: LossConfig = DEFAULT_LOSS_CONFIG) -> torch.Tensor:
    """Charbonnier penalty on the Laplacian difference.

    mean(sqrt((lap(s) - lap(y))^2 + eps^2)); equals eps exactly when s == y.
    With cfg.edge_scales set, the Laplacian is additionally taken on
    Gaussian-blurred copies and the terms are averaged.
    """
    _check_same_shape(s, y)
    eps2 = cfg.charbonnier_eps ** 2

    def term(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        diff = laplacian(a) - laplacian(b)
        return torch.sqrt(diff ** 2 + eps2).mean()

    total = term(s, y)
    if not cfg.edge_scales:
        return total
    for sigma in cfg.edge_scales:
        total = total + term(_gaussian_blur(s, sigma), _gaussian_blur(y, sigma))
    return total / (1 + len(cfg.edge_scales))


def ssim(s: torch.Tensor, y: torch.Tensor,
         cfg: LossConfig = DEFAULT_LOSS_CONFIG) -> torch.Tensor:
    """Mean structural similarity over all valid window positions and channels.

    Gaussian-weighted means, variances and covariance per window (no
    padding, valid positions only), combined as
    (2*mu_s*mu_y + c1)(2*cov + c2) / ((mu_s^2 + mu_y^2 + c1)(var_s + var_y + c2))
    with c1 = (k1*L)^2, c2 = (k2*L)^2. Returns exactly 1 when s == y.
    """
    _check_same_shape(s, y)
    if s.shape[-2] < cfg.window_size or s.shape[-1] < cfg.window_size:
        raise ShapeMismatchError(
            f"image {tuple(s.shape[-2:])} smaller than the {cfg.window_size}x"
            f"{cfg.window_size} window"
        )
    channels = s.shape[1]
    window = gaussian_window(cfg.window_size, cfg.window_sigma, s.dtype, s.device)
    window = window.expand(channels, 1, cfg.window_size, cfg.window_size)

    def local_mean(x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(x, window, groups=channels)

    c1 = (cfg.k1 * cfg.data_range) ** 2
    c2 = (cfg.k2 * cfg.data_range) ** 2
    mu_s = local_mean(s)
    mu_y = local_mean(y)
    var_s = local_mean(s * s) - mu_s * mu_s
    var_y = local_mean(y * y) - mu_y * mu_y
    cov = local_mean(s * y) - mu_s * mu_y
    index = ((2.0 * mu_s * mu_y + c1) * (2.0 * cov + c2)) / (
        (mu_s * mu_s + mu_y * mu_y + c1) * (var_s + var_y + c2)
    )
    return index.mean()


def ssim_loss(s: torch.Tensor, y: torch.Tensor,
              cfg: LossConfig = DEFAULT_LOSS_CONFIG) -> torch.Tensor:
    """1 - ssim(s, y); zero iff the images agree on the window grid."""
    return 1.0 - ssim(s, y, cfg)


def hybrid_loss(s: torch.Tensor, y: torch.Tensor,
                cfg: LossConfig = DEFAULT_LOSS_CONFIG) -> torch.Tensor:
    """SSIM loss plus edge_weight times the edge loss."""
    return ssim_loss(s, y, cfg) + cfg.edge_weight * edge_loss(s, y, cfg)


def ssim_mse_loss(s: torch.Tensor, y: torch.Tensor,
                  cfg: LossConfig = DEFAULT_LOSS_CONFIG) -> torch.Tensor:
    """SSIM loss plus mse_weight times the MSE."""
    return ssim_loss(s, y, cfg) + cfg.mse_weight * mse_loss(s, y)


def _mse_only(s, y, cfg):
    return mse_loss(s, y)


# Training objective registry; keys are the CLI/ablation leg names.
LOSS_FUNCTIONS = {
    "mse": _mse_only,
    "edge": edge_loss,
    "ssim": ssim_loss,
    "ssim_mse": ssim_mse_loss,
    "hybrid": hybrid_loss,
}
