"""JPEG compression: a differentiable surrogate for training and the real codec.

The surrogate follows the baseline codec step by step (YCbCr, 4:2:0 chroma
subsampling, 8x8 DCT, quality-scaled Annex K tables) and replaces the
quantizer's rounding with ``round(x) + (x - round(x))**3`` so gradients flow.
"""

from __future__ import annotations

import io
import math

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

_LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

_CHROMA_TABLE = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=np.float64)


def quantization_tables(quality: int) -> tuple[np.ndarray, np.ndarray]:
    """Scale the Annex K tables the way libjpeg's ``jpeg_quality_scaling`` does."""
    if not 1 <= quality <= 100:
        raise ValueError(f"JPEG quality must be in [1, 100], got {quality}")
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    scaled = [np.clip(np.floor((t * scale + 50) / 100), 1, 255) for t in (_LUMA_TABLE, _CHROMA_TABLE)]
    return scaled[0], scaled[1]


def _dct_matrix(dtype, device) -> torch.Tensor:
    n = 8
    m = torch.zeros(n, n, dtype=torch.float64)
    for k in range(n):
        alpha = math.sqrt(1 / n) if k == 0 else math.sqrt(2 / n)
        for i in range(n):
            m[k, i] = alpha * math.cos(math.pi * (2 * i + 1) * k / (2 * n))
    return m.to(dtype=dtype, device=device)


def soft_round(x: torch.Tensor) -> torch.Tensor:
    r = torch.round(x)
    return r + (x - r) ** 3


def _rgb_to_ycbcr(x: torch.Tensor) -> torch.Tensor:
    r, g, b = x[:, 0], x[:, 1], x[:, 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0
    return torch.stack([y, cb, cr], dim=1)


def _ycbcr_to_rgb(x: torch.Tensor) -> torch.Tensor:
    y, cb, cr = x[:, 0], x[:, 1] - 128.0, x[:, 2] - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return torch.stack([r, g, b], dim=1)


def _blockwise(plane: torch.Tensor, table: torch.Tensor, dct: torch.Tensor) -> torch.Tensor:
    n, h, w = plane.shape
    blocks = plane.reshape(n, h // 8, 8, w // 8, 8).permute(0, 1, 3, 2, 4)
    coeffs = dct @ (blocks - 128.0) @ dct.T
    coeffs = soft_round(coeffs / table) * table
    blocks = dct.T @ coeffs @ dct + 128.0
    return blocks.permute(0, 1, 3, 2, 4).reshape(n, h, w)


def differentiable_jpeg(x: torch.Tensor, quality: int) -> torch.Tensor:
    n, _, h, w = x.shape
    luma_q, chroma_q = (torch.as_tensor(t, dtype=x.dtype, device=x.device)
                        for t in quantization_tables(int(quality)))
    dct = _dct_matrix(x.dtype, x.device)
    ph, pw = (-h) % 16, (-w) % 16
    padded = F.pad(x, (0, pw, 0, ph), mode="replicate") if (ph or pw) else x
    ycc = _rgb_to_ycbcr(255.0 * padded)
    y = _blockwise(ycc[:, 0], luma_q, dct)
    chroma = F.avg_pool2d(ycc[:, 1:], 2)
    ch, cw = chroma.shape[-2:]
    chroma = _blockwise(chroma.reshape(-1, ch, cw), chroma_q, dct).reshape(n, 2, ch, cw)
    chroma = F.interpolate(chroma, scale_factor=2, mode="bilinear", align_corners=False)
    rgb = _ycbcr_to_rgb(torch.cat([y.unsqueeze(1), chroma], dim=1)) / 255.0
    return torch.clamp(rgb[..., :h, :w], 0.0, 1.0)


def to_uint8(img: torch.Tensor) -> np.ndarray:
    arr = img.detach().cpu().double().clamp(0, 1).permute(1, 2, 0).numpy()
    return np.round(arr * 255.0).astype(np.uint8)


def from_uint8(arr: np.ndarray, like: torch.Tensor | None = None) -> torch.Tensor:
    t = torch.from_numpy(np.asarray(arr, dtype=np.float64) / 255.0).permute(2, 0, 1)
    if like is not None:
        t = t.to(dtype=like.dtype, device=like.device)
    return t.float() if like is None else t


def real_jpeg(x: torch.Tensor, quality: int) -> torch.Tensor:
    """Round-trip each image through libjpeg (via Pillow) at ``quality``."""
    out = []
    for img in x:
        buf = io.BytesIO()
        Image.fromarray(to_uint8(img)).save(buf, format="JPEG", quality=int(quality))
        buf.seek(0)
        out.append(from_uint8(np.array(Image.open(buf).convert("RGB")), like=x))
    return torch.stack(out)
