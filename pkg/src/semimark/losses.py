"""Loss terms for the encoder/decoder, discriminator, critic and adversary.

Every function reduces by the mean over the batch (and over bits or pixels
inside each sample), so a one-image batch equals the unbatched value.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, LengthMismatch, NumericError

EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    c_pips: float = 1.0
    c_g: float = 0.1
    c_RE: float = 1.0
    # removal-resistance and critic terms entering the encoder/decoder step
    c_adv: float = 1.0
    c_critic: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (v == v and abs(v) != float("inf") and v >= 0):
                raise ConfigError(f"loss weight {f.name} must be finite and non-negative, got {v}")

    def to_dict(self) -> dict:
        return asdict(self)


def _check_bits(*tensors):
    shapes = {tuple(t.shape) for t in tensors if t is not None}
    if len(shapes) > 1:
        raise LengthMismatch(f"bit tensors differ in shape: {sorted(shapes)}")


def l1_bits(b: torch.Tensor, b_hat: torch.Tensor) -> torch.Tensor:
    return (b - b_hat).abs().mean()


def secret_retrieval_error(b: torch.Tensor, b_bt: torch.Tensor, b_mt: torch.Tensor | None = None) -> torch.Tensor:
    """Per-bit mean L1 to the benign recovery minus that to the malicious one.

    Without a malicious recovery only the benign distance remains.
    """
    _check_bits(b, b_bt, b_mt)
    err = l1_bits(b, b_bt)
    if b_mt is not None:
        err = err - l1_bits(b, b_mt)
    return err


class PerceptualFeatures(nn.Module):
    """Frozen random conv stack whose activations serve as a perceptual space.

    Weights come from a private generator so the extractor is identical in
    every process regardless of the global torch seed.
    """

    def __init__(self, widths=(16, 32, 64), seed: int = 20240611):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers, prev = [], 3
        for i, w in enumerate(widths):
            conv = nn.Conv2d(prev, w, 3, stride=1 if i == 0 else 2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / (prev * 9)) ** 0.5)
                conv.bias.zero_()
            layers.append(conv)
            prev = w
        self.layers = nn.ModuleList(layers)
        self.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats, h = [], x
        for conv in self.layers:
            h = F.leaky_relu(conv(h), 0.2)
            feats.append(h)
        return feats


_PERCEPTUAL: dict[torch.dtype, PerceptualFeatures] = {}


def perceptual_features(dtype=torch.float32) -> PerceptualFeatures:
    if dtype not in _PERCEPTUAL:
        _PERCEPTUAL[dtype] = PerceptualFeatures().to(dtype)
    return _PERCEPTUAL[dtype]


def perceptual_distance(x: torch.Tensor, y: torch.Tensor, extractor: nn.Module | None = None) -> torch.Tensor:
    extractor = extractor or perceptual_features(x.dtype)
    return sum(F.mse_loss(a, b) for a, b in zip(extractor(x), extractor(y))) / len(extractor.layers)


def safe_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp(min=EPS))


def reconstruction_terms(x: torch.Tensor, x_w: torch.Tensor, weights: LossWeights) -> dict:
    l1 = F.l1_loss(x_w, x)
    l2 = F.mse_loss(x_w, x)
    pips = perceptual_distance(x, x_w) if weights.c_pips > 0 else torch.zeros((), dtype=x.dtype)
    return {"L1_img": l1, "L2_img": l2, "L_pips": pips, "L_d": l1 + l2 + weights.c_pips * pips}


def image_reconstruction_loss(x: torch.Tensor, x_w: torch.Tensor, discriminator, weights: LossWeights,
                              terms: dict | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(L_d, L_image)`` with ``L_image = L_d + c_g * log(1 - A(x_w))``."""
    terms = terms if terms is not None else reconstruction_terms(x, x_w, weights)
    l_g = safe_log(1.0 - discriminator(x_w)).mean()
    terms["L_G"] = l_g
    terms["L_image"] = terms["L_d"] + weights.c_g * l_g
    return terms["L_d"], terms["L_image"]


def discriminator_objective(a_x: torch.Tensor, a_xw: torch.Tensor) -> torch.Tensor:
    """Mean of ``log(1 - A(x)) + log(A(x_w))`` from discriminator outputs in (0, 1)."""
    return (safe_log(1.0 - a_x) + safe_log(a_xw)).mean()


def critic_losses(c_x: torch.Tensor, c_xw: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """``(L_c, L_w)`` from critic scores of original and watermarked images."""
    l_c = c_xw.mean()
    return l_c, c_x.mean() - l_c


def bit_cross_entropy(b: torch.Tensor, probs: torch.Tensor) -> torch.Tensor:
    _check_bits(b, probs)
    p = probs.clamp(EPS, 1.0 - EPS)
    return -(b * torch.log(p) + (1.0 - b) * torch.log(1.0 - p)).mean()


def adversary_losses(b: torch.Tensor, probs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """``(L_adv, L_r)`` given decoder probabilities on adversary outputs."""
    l_adv = bit_cross_entropy(b, probs)
    return l_adv, -l_adv


def encoder_decoder_objective(terms: dict, weights: LossWeights) -> torch.Tensor:
    """Combine the encoder/decoder step's loss terms into one scalar."""
    total = terms["L_image"] + weights.c_RE * terms["L_RE"]
    if "L_adv" in terms:
        total = total + weights.c_adv * terms["L_adv"]
    if "L_c" in terms:
        total = total + weights.c_critic * terms["L_c"]
    return total


def require_finite(value: torch.Tensor, component: str) -> torch.Tensor:
    if not torch.isfinite(value).all():
        raise NumericError(f"non-finite loss {value.detach().cpu().tolist()}", component=component)
    return value
