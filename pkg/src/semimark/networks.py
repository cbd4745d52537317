"""The five trainable networks and the bundle that carries them.

Images travel as ``(batch, 3, side, side)`` float tensors in [0, 1]; bit
strings as ``(batch, L)`` float tensors of 0/1 (or probabilities).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .errors import FingerprintError, NumericError, ShapeError, StorageError

PROJ_SIDE = 84
ADVERSARY_BOUND = 0.01


def default_depth(side: int) -> int:
    return min(8, math.ceil(math.log2(side)))


@dataclass(frozen=True)
class NetworkConfig:
    side: int = 224
    message_length: int = 64
    depth: int | None = None
    base_width: int = 32
    max_width: int = 512
    critic_width: int = 64
    disc_width: int = 64
    critic_clip: float = 0.05

    def __post_init__(self):
        if self.depth is None:
            object.__setattr__(self, "depth", default_depth(self.side))
        if self.side < 2 or self.message_length < 1 or self.depth < 1:
            raise ShapeError(f"invalid network config {self}")

    def widths(self) -> list[int]:
        return [min(self.base_width * 2 ** i, self.max_width) for i in range(self.depth)]

    def down_sizes(self) -> list[int]:
        sizes, s = [], self.side
        for _ in range(self.depth):
            # k=4,s=2,p=1 halves with floor; a 1-pixel map uses k=3 and stays 1
            s = s // 2 if s >= 2 else 1
            sizes.append(s)
        return sizes


def _init_conv(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, a=0.2, mode="fan_in", nonlinearity="leaky_relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class UNet(nn.Module):
    """U-Net with stride-2 downsampling and nearest-neighbour + conv upsampling.

    Instance norm is skipped on feature maps smaller than 4x4, where the
    per-channel statistics degenerate.
    """

    def __init__(self, in_ch: int, out_ch: int, cfg: NetworkConfig):
        super().__init__()
        widths, sizes = cfg.widths(), cfg.down_sizes()
        self.down = nn.ModuleList()
        prev, s_in = in_ch, cfg.side
        for i, (w, s) in enumerate(zip(widths, sizes)):
            kernel = 4 if s_in >= 2 else 3
            layers = [nn.Conv2d(prev, w, kernel, stride=2, padding=1)]
            s_in = s
            if i > 0 and s >= 4:
                layers.append(nn.InstanceNorm2d(w))
            layers.append(nn.LeakyReLU(0.2))
            self.down.append(nn.Sequential(*layers))
            prev = w
        self.up = nn.ModuleList()
        # up block j mirrors down level depth-1-j and lands on the skip of level depth-2-j
        skip_widths = [in_ch] + widths[:-1]
        skip_sizes = [cfg.side] + sizes[:-1]
        for j in range(cfg.depth):
            level = cfg.depth - 1 - j
            w_out = skip_widths[level] if level > 0 else widths[0]
            layers = [nn.Conv2d(prev, w_out, 3, padding=1)]
            if skip_sizes[level] >= 4 and level > 0:
                layers.append(nn.InstanceNorm2d(w_out))
            layers.append(nn.ReLU())
            self.up.append(nn.Sequential(*layers))
            prev = w_out + (skip_widths[level] if level > 0 else in_ch)
        self.head = nn.Conv2d(prev, out_ch, 3, padding=1)
        _init_conv(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = [x]
        h = x
        for block in self.down:
            h = block(h)
            skips.append(h)
        skips.pop()
        for block in self.up:
            skip = skips.pop()
            h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = torch.cat([block(h), skip], dim=1)
        return self.head(h)


class Encoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.project = nn.Linear(cfg.message_length, PROJ_SIDE * PROJ_SIDE)
        self.unet = UNet(4, 3, cfg)
        nn.init.normal_(self.project.weight, std=1.0 / math.sqrt(cfg.message_length))
        nn.init.zeros_(self.project.bias)

    def message_plane(self, bits: torch.Tensor) -> torch.Tensor:
        b_proj = self.project(2.0 * bits - 1.0).view(-1, 1, PROJ_SIDE, PROJ_SIDE)
        return F.interpolate(b_proj, size=(self.cfg.side, self.cfg.side),
                             mode="bilinear", align_corners=False)

    def residual(self, x: torch.Tensor, bits: torch.Tensor) -> torch.Tensor:
        return self.unet(torch.cat([x, self.message_plane(bits)], dim=1))

    def forward(self, x: torch.Tensor, bits: torch.Tensor) -> torch.Tensor:
        return torch.clamp(x + self.residual(x, bits), 0.0, 1.0)


class Decoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.unet = UNet(3, 1, cfg)
        self.project = nn.Linear(PROJ_SIDE * PROJ_SIDE, cfg.message_length)
        nn.init.normal_(self.project.weight, std=1.0 / PROJ_SIDE)
        nn.init.zeros_(self.project.bias)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        h = self.unet(x)
        b_decoded = F.interpolate(h, size=(PROJ_SIDE, PROJ_SIDE), mode="bilinear",
                                  align_corners=False, antialias=h.shape[-1] > PROJ_SIDE)
        return self.project(b_decoded.flatten(1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x))


class PatchDiscriminator(nn.Module):
    """Three stride-2 blocks; each output cell scores one receptive-field patch."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        w = cfg.disc_width
        self.body = nn.Sequential(
            nn.Conv2d(3, w, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(w, 2 * w, 4, stride=2, padding=1), nn.InstanceNorm2d(2 * w), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * w, 4 * w, 4, stride=2, padding=1), nn.InstanceNorm2d(4 * w), nn.LeakyReLU(0.2),
            nn.Conv2d(4 * w, 1, 3, padding=1),
        )
        _init_conv(self)

    def patch_logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.patch_logits(x).mean(dim=(1, 2, 3)))


class Critic(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        w = cfg.critic_width
        self.body = nn.Sequential(
            nn.Conv2d(3, w, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(w, w, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.AdaptiveAvgPool2d(1),
        )
        self.score = nn.Linear(w, 1)
        _init_conv(self)
        self.clip(cfg.critic_clip)

    @torch.no_grad()
    def clip(self, bound: float) -> None:
        for p in self.parameters():
            p.clamp_(-bound, bound)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.score(self.body(x).flatten(1)).squeeze(1)


class Adversary(nn.Module):
    """Removal network: two conv blocks and a 1x1 layer emitting a bounded residual."""

    def __init__(self, cfg: NetworkConfig, width: int = 32, bound: float = ADVERSARY_BOUND):
        super().__init__()
        self.bound = bound
        self.body = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, width, 3, padding=1), nn.LeakyReLU(0.2),
        )
        self.out = nn.Conv2d(width, 3, 1)
        _init_conv(self)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def residual(self, x_w: torch.Tensor) -> torch.Tensor:
        return self.bound * torch.tanh(self.out(self.body(x_w)))

    def forward(self, x_w: torch.Tensor) -> torch.Tensor:
        return torch.clamp(x_w + self.residual(x_w), 0.0, 1.0)


NETWORK_NAMES = ("encoder", "decoder", "discriminator", "critic", "adversary")


@dataclass
class ModelBundle:
    encoder: Encoder
    decoder: Decoder
    discriminator: PatchDiscriminator
    critic: Critic
    adversary: Adversary
    config: NetworkConfig
    fingerprint: dict = field(default_factory=dict)

    @classmethod
    def create(cls, config: NetworkConfig, seed: int = 0, fingerprint: dict | None = None,
               dtype: torch.dtype = torch.float32) -> "ModelBundle":
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            bundle = cls(Encoder(config), Decoder(config), PatchDiscriminator(config),
                         Critic(config), Adversary(config), config)
        finally:
            torch.random.set_rng_state(gen_state)
        bundle.fingerprint = dict(fingerprint or {})
        bundle.fingerprint.setdefault("network", asdict(config))
        return bundle.to(dtype)

    def networks(self) -> dict[str, nn.Module]:
        return {name: getattr(self, name) for name in NETWORK_NAMES}

    def to(self, dtype: torch.dtype) -> "ModelBundle":
        for net in self.networks().values():
            net.to(dtype)
        return self

    def eval(self) -> "ModelBundle":
        for net in self.networks().values():
            net.eval()
        return self

    def parameters(self):
        for net in self.networks().values():
            yield from net.parameters()

    def assert_finite(self) -> None:
        for name, net in self.networks().items():
            for pname, p in net.named_parameters():
                if not torch.isfinite(p).all():
                    raise NumericError(f"non-finite parameter {pname}", component=name)

    def state(self) -> dict:
        return {name: net.state_dict() for name, net in self.networks().items()}

    def save(self, path) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            torch.save({"fingerprint": json.dumps(self.fingerprint, sort_keys=True),
                        "state": self.state()}, path)
        except OSError as exc:
            raise StorageError(f"cannot write checkpoint {path}: {exc}") from exc
        return path

    @classmethod
    def load(cls, path, expected_fingerprint: dict | None = None) -> "ModelBundle":
        try:
            blob = torch.load(Path(path), map_location="cpu", weights_only=True)
        except FileNotFoundError as exc:
            raise StorageError(f"checkpoint not found: {path}") from exc
        except Exception as exc:
            raise FingerprintError(f"unreadable checkpoint {path}: {exc}") from exc
        fingerprint = json.loads(blob["fingerprint"])
        if expected_fingerprint is not None and not fingerprints_match(fingerprint, expected_fingerprint):
            raise FingerprintError(f"checkpoint {path} was trained with a different configuration")
        bundle = cls.create(NetworkConfig(**fingerprint["network"]), fingerprint=fingerprint)
        for name, net in bundle.networks().items():
            try:
                net.load_state_dict(blob["state"][name], strict=True)
            except (KeyError, RuntimeError) as exc:
                raise FingerprintError(f"{name} weights do not fit the declared shapes: {exc}") from exc
        return bundle


def fingerprints_match(actual: dict, expected: dict) -> bool:
    """True when every key in ``expected`` has the same value in ``actual``."""
    canon = lambda v: json.loads(json.dumps(v, sort_keys=True))  # noqa: E731
    return all(k in actual and canon(actual[k]) == canon(v) for k, v in expected.items())


def _check_image(x: torch.Tensor, side: int | None = None) -> None:
    if x.dim() != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected (batch, 3, H, W) images, got {tuple(x.shape)}")
    if side is not None and tuple(x.shape[-2:]) != (side, side):
        raise ShapeError(f"model expects {side}x{side} images, got {tuple(x.shape[-2:])}")
    if not torch.isfinite(x).all():
        raise NumericError("non-finite pixel values")


def encode_image(x: torch.Tensor, bits: torch.Tensor, bundle: ModelBundle) -> torch.Tensor:
    _check_image(x, bundle.config.side)
    if bits.shape[-1] != bundle.config.message_length:
        raise ShapeError(f"expected {bundle.config.message_length} bits, got {bits.shape[-1]}")
    return _finite(bundle.encoder(x, bits.to(x.dtype)), "encoder")


def decode_image(x: torch.Tensor, bundle: ModelBundle) -> torch.Tensor:
    _check_image(x, bundle.config.side)
    return _finite(bundle.decoder(x), "decoder")


def _finite(out: torch.Tensor, component: str) -> torch.Tensor:
    if not torch.isfinite(out).all():
        raise NumericError("non-finite activations", component=component)
    return out


def discriminator_score(x: torch.Tensor, bundle: ModelBundle) -> torch.Tensor:
    _check_image(x)
    return _finite(bundle.discriminator(x), "discriminator")


def critic_score(x: torch.Tensor, bundle: ModelBundle) -> torch.Tensor:
    _check_image(x)
    return _finite(bundle.critic(x), "critic")


def adversary_perturb(x_w: torch.Tensor, bundle: ModelBundle) -> torch.Tensor:
    _check_image(x_w)
    return _finite(bundle.adversary(x_w), "adversary")
