"""Multi-scale structural similarity for unit-range images.

Single-scale SSIM uses a 7x7 Gaussian window (sigma 1.5) with the usual
stabilizers C1 = 0.01^2 and C2 = 0.03^2 on a unit dynamic range.  The
multi-scale version evaluates the contrast-structure term at every scale,
the luminance term at the coarsest, 2x average-pools between scales, and
combines them with the standard five-scale exponents renormalized to the
scale count actually used.  The default scale count for an HxW image is
floor(log2(min(H, W)/8)) + 1, so every scale keeps at least an 8-pixel side
(window-sized maps survive at the coarsest level).

Values live in [0, 1]; identical images score exactly 1.  Terms are clamped
at 1e-6 before the fractional powers so gradients stay finite on adversarial
inputs with negative raw covariance.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidArgumentError

_DTYPE = torch.float64

# standard multi-scale exponents; renormalized over the scales in use
_SCALE_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_C1 = 0.01 ** 2
_C2 = 0.03 ** 2
_TERM_FLOOR = 1e-6


def default_scales(image_hw: tuple[int, int]) -> int:
    """floor(log2(min(H,W)/8)) + 1, the deepest pyramid with >= 8 px sides."""
    side = min(int(image_hw[0]), int(image_hw[1]))
    if side < 8:
        raise InvalidArgumentError(
            f"image side {side} is too small for one 8-pixel scale"
        )
    return int(math.floor(math.log2(side / 8))) + 1


def _gaussian_window(size: int = 7, sigma: float = 1.5) -> torch.Tensor:
    half = (size - 1) / 2.0
    coords = torch.arange(size, dtype=_DTYPE) - half
    g = torch.exp(-(coords ** 2) / (2.0 * sigma * sigma))
    return g / g.sum()


def _ssim_terms(
    x: torch.Tensor, y: torch.Tensor, window: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean luminance and contrast-structure terms for (B, 1, H, W) inputs."""
    size = window.shape[0]
    kernel_row = window.reshape(1, 1, 1, size)
    kernel_col = window.reshape(1, 1, size, 1)

    def blur(t: torch.Tensor) -> torch.Tensor:
        return F.conv2d(F.conv2d(t, kernel_row), kernel_col)

    mu_x = blur(x)
    mu_y = blur(y)
    mu_xx = mu_x * mu_x
    mu_yy = mu_y * mu_y
    mu_xy = mu_x * mu_y
    sigma_xx = blur(x * x) - mu_xx
    sigma_yy = blur(y * y) - mu_yy
    sigma_xy = blur(x * y) - mu_xy
    lum = (2.0 * mu_xy + _C1) / (mu_xx + mu_yy + _C1)
    cs = (2.0 * sigma_xy + _C2) / (sigma_xx + sigma_yy + _C2)
    return lum.mean(), cs.mean()


def ms_ssim_t(
    x: torch.Tensor,
    y: torch.Tensor,
    scales: int | None = None,
    window_size: int = 7,
    window_sigma: float = 1.5,
) -> torch.Tensor:
    """Multi-scale SSIM of two (B, H, W) unit-range batches (scalar tensor)."""
    if x.shape != y.shape or x.dim() != 3:
        raise InvalidArgumentError("inputs must be equal-shape (B, H, W) batches")
    h, w = int(x.shape[1]), int(x.shape[2])
    if scales is None:
        scales = default_scales((h, w))
    if scales < 1:
        raise InvalidArgumentError("need at least one scale")
    if min(h, w) // (2 ** (scales - 1)) < window_size:
        raise InvalidArgumentError(
            f"{scales} scales reduce a {h}x{w} image below the {window_size}px window"
        )
    weights = np.asarray(_SCALE_WEIGHTS[:scales])
    weights = weights / weights.sum()
    window = _gaussian_window(window_size, window_sigma)
    cur_x = x.unsqueeze(1)
    cur_y = y.unsqueeze(1)
    result = torch.ones((), dtype=_DTYPE)
    for s in range(scales):
        lum, cs = _ssim_terms(cur_x, cur_y, window)
        term = lum * cs if s == scales - 1 else cs
        result = result * torch.clamp(term, min=_TERM_FLOOR) ** float(weights[s])
        if s < scales - 1:
            cur_x = F.avg_pool2d(cur_x, kernel_size=2)
            cur_y = F.avg_pool2d(cur_y, kernel_size=2)
    return result


def ms_ssim(x: np.ndarray, y: np.ndarray, scales: int | None = None) -> float:
    """Numpy front end of ``ms_ssim_t`` (accepts (H, W) or (B, H, W))."""
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.ndim == 2:
        xa = xa[None]
        ya = ya[None]
    with torch.no_grad():
        v = ms_ssim_t(torch.from_numpy(xa), torch.from_numpy(ya), scales=scales)
    return float(v)
