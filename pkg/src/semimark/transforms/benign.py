"""Benign image processing: sampling, differentiable training ops, evaluation ops."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from ..errors import ConfigError
from .jpeg import differentiable_jpeg, real_jpeg

BENIGN_KINDS = ("identity", "jpeg", "gaussian_blur", "saturation", "contrast",
                "resize_cycle", "translate_rotate")
ALL_KINDS = BENIGN_KINDS + ("malicious_mask", "external_plugin", "filter")


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise ConfigError(f"unknown transform kind {self.kind!r}")

    @property
    def label(self) -> str:
        if not self.params:
            return self.kind
        inner = ",".join(f"{k}={_fmt(v)}" for k, v in sorted(self.params.items()))
        return f"{self.kind}({inner})"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "TransformSpec":
        return cls(d["kind"], dict(d.get("params") or {}))


def _fmt(v) -> str:
    return f"{v:.6g}" if isinstance(v, float) else str(v)


@dataclass(frozen=True)
class BenignConfig:
    """Enabled kinds and the ranges their parameters are drawn from."""

    kinds: tuple[str, ...] = BENIGN_KINDS
    jpeg_qualities: tuple[int, ...] = (25, 50, 75)
    blur_kernel: tuple[int, int] = (5, 10)
    contrast: tuple[float, float] = (0.8, 1.8)
    saturation: tuple[float, float] = (0.0, 1.0)
    resize_scale: tuple[float, float] = (3.0, 8.0)
    shift: tuple[float, float] = (-8.0, 8.0)
    rotation: tuple[float, float] = (-8.0, 8.0)

    def __post_init__(self):
        kinds = tuple(self.kinds)
        if not kinds:
            raise ConfigError("at least one benign transform kind must be enabled")
        unknown = set(kinds) - set(BENIGN_KINDS)
        if unknown:
            raise ConfigError(f"unknown benign kinds {sorted(unknown)}")
        object.__setattr__(self, "kinds", kinds)

    @classmethod
    def from_dict(cls, d: dict | None) -> "BenignConfig":
        d = dict(d or {})
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def validate(self, spec: TransformSpec) -> None:
        p, k = spec.params, spec.kind

        def within(name, lo, hi):
            if not lo - 1e-9 <= p[name] <= hi + 1e-9:
                raise ConfigError(f"{spec.label}: {name} outside [{lo}, {hi}]")

        if k == "jpeg" and p["quality"] not in self.jpeg_qualities:
            raise ConfigError(f"{spec.label}: quality not in {self.jpeg_qualities}")
        if k == "gaussian_blur":
            within("kernel", *self.blur_kernel)
        if k == "contrast":
            within("factor", *self.contrast)
        if k == "saturation":
            within("weight", *self.saturation)
        if k == "resize_cycle":
            within("scale", *self.resize_scale)
        if k == "translate_rotate":
            within("shift_h", *self.shift)
            within("shift_v", *self.shift)
            within("angle", *self.rotation)


def _as_rng(seed) -> random.Random:
    if isinstance(seed, random.Random):
        return seed
    return random.Random(seed)


def sample_benign(seed, config: BenignConfig | None = None) -> TransformSpec:
    """Pick one enabled kind uniformly, then draw its parameters."""
    config = config or BenignConfig()
    rng = _as_rng(seed)
    kind = config.kinds[rng.randrange(len(config.kinds))]
    if kind == "identity":
        return TransformSpec(kind)
    if kind == "jpeg":
        return TransformSpec(kind, {"quality": rng.choice(config.jpeg_qualities)})
    if kind == "gaussian_blur":
        return TransformSpec(kind, {"kernel": rng.randint(*config.blur_kernel)})
    if kind == "saturation":
        return TransformSpec(kind, {"weight": rng.uniform(*config.saturation)})
    if kind == "contrast":
        return TransformSpec(kind, {"factor": rng.uniform(*config.contrast)})
    if kind == "resize_cycle":
        return TransformSpec(kind, {"scale": rng.uniform(*config.resize_scale)})
    return TransformSpec(kind, {"shift_h": rng.uniform(*config.shift),
                                "shift_v": rng.uniform(*config.shift),
                                "angle": rng.uniform(*config.rotation)})


def blur_sigma(kernel: int) -> float:
    return 0.3 * ((kernel - 1) / 2 - 1) + 0.8


def gaussian_kernel1d(kernel: int, sigma: float | None = None, dtype=torch.float32) -> torch.Tensor:
    sigma = blur_sigma(kernel) if sigma is None or sigma <= 0 else sigma
    pos = torch.arange(kernel, dtype=torch.float64) - (kernel - 1) / 2
    weights = torch.exp(-0.5 * (pos / sigma) ** 2)
    return (weights / weights.sum()).to(dtype)


def gaussian_blur(x: torch.Tensor, kernel: int, sigma: float | None = None) -> torch.Tensor:
    if kernel <= 1:
        return x
    g = gaussian_kernel1d(kernel, sigma, x.dtype).to(x.device)
    c = x.shape[1]
    lo, hi = (kernel - 1) // 2, kernel // 2
    pad_mode = "reflect" if max(lo, hi) < min(x.shape[-2:]) else "replicate"
    h = F.pad(x, (lo, hi, 0, 0), mode=pad_mode)
    h = F.conv2d(h, g.view(1, 1, 1, -1).expand(c, 1, 1, kernel), groups=c)
    h = F.pad(h, (0, 0, lo, hi), mode=pad_mode)
    return F.conv2d(h, g.view(1, 1, -1, 1).expand(c, 1, kernel, 1), groups=c)


def grayscale(x: torch.Tensor) -> torch.Tensor:
    return (0.299 * x[:, 0:1] + 0.587 * x[:, 1:2] + 0.114 * x[:, 2:3]).expand_as(x)


def adjust_saturation(x: torch.Tensor, weight: float) -> torch.Tensor:
    return weight * x + (1.0 - weight) * grayscale(x)


def adjust_contrast(x: torch.Tensor, factor: float) -> torch.Tensor:
    mean = grayscale(x)[:, :1].mean(dim=(1, 2, 3), keepdim=True)
    return mean + factor * (x - mean)


def resize_cycle(x: torch.Tensor, scale: float) -> torch.Tensor:
    h, w = x.shape[-2:]
    small = (max(1, round(h / scale)), max(1, round(w / scale)))
    down = F.interpolate(x, size=small, mode="bilinear", align_corners=False)
    return F.interpolate(down, size=(h, w), mode="bilinear", align_corners=False)


def translate_rotate(x: torch.Tensor, shift_h: float, shift_v: float, angle: float) -> torch.Tensor:
    """Rotate about the centre by ``angle`` degrees, then shift by whole or fractional pixels."""
    n, _, h, w = x.shape
    a = math.radians(angle)
    cos, sin = math.cos(a), math.sin(a)
    # grid_sample maps output coords to input coords, so build the inverse transform
    theta = torch.tensor([[cos, sin * h / w, -2.0 * shift_h / w],
                          [-sin * w / h, cos, -2.0 * shift_v / h]], dtype=x.dtype, device=x.device)
    grid = F.affine_grid(theta.expand(n, 2, 3), list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)


def _apply(x: torch.Tensor, spec: TransformSpec, jpeg) -> torch.Tensor:
    p = spec.params
    if spec.kind == "identity":
        return x
    if spec.kind == "jpeg":
        out = jpeg(x, p["quality"])
    elif spec.kind == "gaussian_blur":
        out = gaussian_blur(x, int(p["kernel"]), p.get("sigma"))
    elif spec.kind == "saturation":
        out = adjust_saturation(x, p["weight"])
    elif spec.kind == "contrast":
        out = adjust_contrast(x, p["factor"])
    elif spec.kind == "resize_cycle":
        out = resize_cycle(x, p["scale"])
    elif spec.kind == "translate_rotate":
        out = translate_rotate(x, p["shift_h"], p["shift_v"], p["angle"])
    else:
        raise ConfigError(f"{spec.kind!r} is not a benign transform")
    return torch.clamp(out, 0.0, 1.0)


def apply_benign(x_w: torch.Tensor, spec: TransformSpec) -> torch.Tensor:
    """Differentiable version used in training (JPEG through the surrogate)."""
    return _apply(x_w, spec, differentiable_jpeg)


def apply_benign_eval(x_w: torch.Tensor, spec: TransformSpec) -> torch.Tensor:
    """Evaluation version: JPEG goes through the real codec."""
    return _apply(x_w, spec, real_jpeg)
