"""Imperceptibility and capacity metrics.

PSNR uses a peak of 1 on the [0, 1] scale, which equals the usual 8-bit
definition with peak 255. SSIM uses an 11-tap Gaussian window (sigma 1.5),
K1 = 0.01, K2 = 0.03, and is computed on luminance over the valid region
(no padding), averaged over the window positions.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidDimension, ShapeError, WindowError

INFINITE = float("inf")


def _as_tensor(x) -> torch.Tensor:
    t = x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x))
    return t.detach().double()


def _chw(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 3 and x.shape[0] != 3 and x.shape[-1] == 3:
        x = x.permute(2, 0, 1)
    return x


def psnr(x, y) -> float:
    """PSNR in dB for one image pair; ``inf`` when the images are identical."""
    a, b = _as_tensor(x), _as_tensor(y)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a - b) ** 2).mean())
    return INFINITE if mse == 0.0 else 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    pos = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(pos ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def luminance(x: torch.Tensor) -> torch.Tensor:
    x = _chw(x)
    if x.dim() == 2:
        return x
    if x.shape[0] == 1:
        return x[0]
    return 0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2]


def ssim(x, y, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    a, b = _as_tensor(x), _as_tensor(y)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    a, b = luminance(a), luminance(b)
    if min(a.shape) < window:
        raise WindowError(f"image {tuple(a.shape)} smaller than the {window}x{window} window")
    c1, c2 = k1 ** 2, k2 ** 2
    w = _gaussian_window(window, sigma).view(1, 1, window, window)
    filt = lambda t: F.conv2d(t.view(1, 1, *t.shape), w)  # noqa: E731
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


def bits_per_pixel(message_length: int, height: int, width: int, channels: int = 3) -> float:
    if min(height, width, channels) <= 0 or message_length < 0:
        raise InvalidDimension("image dimensions must be positive and message length non-negative")
    return message_length / (height * width * channels)


def batch_psnr(x: torch.Tensor, y: torch.Tensor) -> list[float]:
    return [psnr(a, b) for a, b in zip(x, y)]


def batch_ssim(x: torch.Tensor, y: torch.Tensor) -> list[float]:
    return [ssim(a, b) for a, b in zip(x, y)]
