"""Watermark-removal attacks scored by post-attack bit recovery.

Every attack takes watermarked images ``x_w`` (batch, 3, H, W), a decoder
module mapping images to bit probabilities, and the embedded bits. Inputs
are never modified; outcomes hold fresh tensors.
"""

from __future__ import annotations

import math
import random
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch
from torch import nn

from .codec import DEFAULT_THRESHOLD
from .errors import ConfigError, FingerprintError, NumericError, ShapeError, StorageError
from .losses import bit_cross_entropy
from .transforms.benign import BenignConfig, TransformSpec, apply_benign, sample_benign
from .transforms.jpeg import real_jpeg

ATTACK_KINDS = ("fgsm", "cw", "bpda_eot", "vae_regen", "perturbation_transfer")


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack {self.kind!r}")
        if self.kind == "fgsm" and self.params.get("epsilon", 0.0) < 0:
            raise ConfigError("fgsm epsilon must be non-negative")
        for key in ("steps", "k_samples"):
            if key in self.params and not 1 <= int(self.params[key]) <= 100_000:
                raise ConfigError(f"{self.kind}: {key} must lie in [1, 100000]")

    @property
    def label(self) -> str:
        inner = ",".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                         for k, v in sorted(self.params.items()) if k != "checkpoint")
        return f"attack:{self.kind}({inner})" if inner else f"attack:{self.kind}"


@dataclass
class AttackOutcome:
    images: torch.Tensor
    pre_bra: list[float]
    post_bra: list[float]
    linf: list[float]
    l2: list[float]
    wall_time: float
    threshold: float = DEFAULT_THRESHOLD

    @property
    def flipped(self) -> list[bool]:
        """Per image: decision went from watermarked to not watermarked."""
        tau = 100.0 * self.threshold
        return [pre >= tau - 1e-9 and post < tau - 1e-9 for pre, post in zip(self.pre_bra, self.post_bra)]

    @property
    def mean_pre_bra(self) -> float:
        return sum(self.pre_bra) / len(self.pre_bra)

    @property
    def mean_post_bra(self) -> float:
        return sum(self.post_bra) / len(self.post_bra)

    def summary(self) -> dict:
        n = len(self.post_bra)
        return {"pre_bra": self.mean_pre_bra, "post_bra": self.mean_post_bra,
                "flip_rate": sum(self.flipped) / n, "linf": max(self.linf), "l2": sum(self.l2) / n,
                "wall_time": self.wall_time}


def per_image_bra(decoder: nn.Module, images: torch.Tensor, bits: torch.Tensor) -> list[float]:
    with torch.no_grad():
        hard = (decoder(images) >= 0.5).to(bits.dtype)
    return (100.0 * (hard == bits).to(torch.float64).mean(dim=1)).tolist()


def _outcome(decoder, x_w, x_adv, bits, started, threshold) -> AttackOutcome:
    diff = (x_adv - x_w).detach().flatten(1).double()
    return AttackOutcome(
        images=x_adv.detach(), pre_bra=per_image_bra(decoder, x_w, bits),
        post_bra=per_image_bra(decoder, x_adv, bits),
        linf=diff.abs().max(dim=1).values.tolist(), l2=diff.norm(dim=1).tolist(),
        wall_time=time.perf_counter() - started, threshold=threshold)


def _bit_loss_grad(decoder: nn.Module, x: torch.Tensor, bits: torch.Tensor,
                   transform: Callable[[torch.Tensor], torch.Tensor] | None = None) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    h = x if transform is None else transform(x)
    # summed over images so each image's gradient is independent of batch size
    loss = bit_cross_entropy(bits, decoder(h)) * len(x)
    (grad,) = torch.autograd.grad(loss, x)
    if not torch.isfinite(grad).all():
        raise NumericError("non-finite input gradient", component="attack")
    return grad


def fgsm_attack(x_w: torch.Tensor, decoder: nn.Module, bits: torch.Tensor, epsilon: float = 0.010,
                threshold: float = DEFAULT_THRESHOLD) -> AttackOutcome:
    """One signed-gradient step that increases the decoder's bit loss."""
    if epsilon < 0:
        raise ConfigError("epsilon must be non-negative")
    started = time.perf_counter()
    grad = _bit_loss_grad(decoder, x_w, bits)
    x_adv = torch.clamp(x_w.detach() + epsilon * grad.sign(), 0.0, 1.0)
    return _outcome(decoder, x_w, x_adv, bits, started, threshold)


def cw_attack(x_w: torch.Tensor, decoder: nn.Module, bits: torch.Tensor, steps: int = 200, c: float = 1.0,
              lr: float = 0.01, confidence: float = 0.0, threshold: float = DEFAULT_THRESHOLD) -> AttackOutcome:
    """Carlini-Wagner L2 in the tanh box.

    Minimizes ``||delta||^2 + c * f`` where ``f`` sums, over bits, the hinge
    ``max(s * z + confidence, 0)`` on decoder logits ``z`` with ``s = +1``
    for embedded ones and ``-1`` for zeros, so it reaches zero once every bit
    is misread. Per image, the smallest-distortion iterate that defeats
    detection is kept; otherwise the iterate with the lowest bit recovery.
    """
    if steps < 1:
        raise ConfigError("steps must be at least 1")
    started = time.perf_counter()
    x0 = x_w.detach()
    w = torch.atanh((2.0 * x0 - 1.0).clamp(-1 + 1e-6, 1 - 1e-6)).requires_grad_(True)
    opt = torch.optim.Adam([w], lr=lr)
    sign = 2.0 * bits - 1.0
    logits_fn = decoder.logits if hasattr(decoder, "logits") else (lambda t: torch.logit(decoder(t), eps=1e-7))
    n = len(x0)
    best = x0.clone()
    best_l2 = torch.full((n,), math.inf, dtype=torch.float64)
    best_bra = torch.full((n,), math.inf, dtype=torch.float64)
    tau = 100.0 * threshold
    for _ in range(steps):
        x_adv = (torch.tanh(w) + 1.0) / 2.0
        z = logits_fn(x_adv)
        dist = ((x_adv - x0) ** 2).flatten(1).sum(dim=1)
        f = torch.clamp(sign * z + confidence, min=0.0).sum(dim=1)
        loss = (dist + c * f).sum()
        if not torch.isfinite(loss):
            raise NumericError("C&W objective diverged", component="cw")
        opt.zero_grad()
        loss.backward()
        with torch.no_grad():
            bra = 100.0 * ((z >= 0).to(bits.dtype) == bits).double().mean(dim=1)
            d = dist.double()
            success = bra < tau - 1e-9
            better = torch.where(success, d < best_l2, (best_l2 == math.inf) & (bra < best_bra))
            best[better] = x_adv[better].detach()
            best_l2[better & success] = d[better & success]
            best_bra[better] = bra[better]
        opt.step()
    with torch.no_grad():
        x_final = (torch.tanh(w) + 1.0) / 2.0
        never = best_bra == math.inf
        best[never] = x_final[never]
    return _outcome(decoder, x_w, best, bits, started, threshold)


def straight_through(forward: Callable[[torch.Tensor], torch.Tensor]) -> Callable[[torch.Tensor], torch.Tensor]:
    """Run ``forward`` without gradients and pass gradients through as identity."""
    def wrapped(x):
        with torch.no_grad():
            y = forward(x)
        return x + (y - x).detach()
    return wrapped


def bpda_transform(spec: TransformSpec, backward: str = "identity") -> Callable[[torch.Tensor], torch.Tensor]:
    """Evaluation-time transform with a differentiable backward path.

    The real JPEG codec gets an identity backward pass (or the surrogate's
    gradient with ``backward='surrogate'``); other kinds are differentiable.
    """
    if spec.kind != "jpeg":
        return lambda x: apply_benign(x, spec)
    q = spec.params["quality"]
    if backward == "identity":
        return straight_through(lambda x: real_jpeg(x, q))
    if backward == "surrogate":
        def through_surrogate(x):
            approx = apply_benign(x, spec)
            with torch.no_grad():
                exact = real_jpeg(x, q)
            return approx + (exact - approx).detach()
        return through_surrogate
    raise ConfigError(f"unknown BPDA backward path {backward!r}")


def eot_gradient(x: torch.Tensor, decoder: nn.Module, bits: torch.Tensor, specs: Sequence[TransformSpec],
                 backward: str = "identity") -> torch.Tensor:
    """Mean over ``specs`` of the bit-loss input gradient through each transform."""
    grads = [_bit_loss_grad(decoder, x, bits, bpda_transform(s, backward)) for s in specs]
    return torch.stack(grads).mean(dim=0)


def bpda_eot_attack(x_w: torch.Tensor, decoder: nn.Module, bits: torch.Tensor,
                    sampler: Callable[[], TransformSpec] | None = None, steps: int = 20, k_samples: int = 4,
                    step_size: float = 0.004, epsilon: float | None = 0.03, backward: str = "identity",
                    seed: int = 0, threshold: float = DEFAULT_THRESHOLD) -> AttackOutcome:
    """Signed ascent on the bit loss averaged over sampled benign transforms.

    With ``epsilon`` set, iterates are projected onto the L-inf ball around
    ``x_w``.
    """
    if k_samples < 1 or steps < 1:
        raise ConfigError("steps and k_samples must be at least 1")
    started = time.perf_counter()
    if sampler is None:
        rng = random.Random(seed)
        sampler = lambda: sample_benign(rng, BenignConfig())  # noqa: E731
    x0 = x_w.detach()
    x = x0.clone()
    for _ in range(steps):
        specs = [sampler() for _ in range(k_samples)]
        grad = eot_gradient(x, decoder, bits, specs, backward)
        x = x + step_size * grad.sign()
        if epsilon is not None:
            x = torch.min(torch.max(x, x0 - epsilon), x0 + epsilon)
        x = x.clamp(0.0, 1.0)
    return _outcome(decoder, x_w, x, bits, started, threshold)


# ---------------------------------------------------------------------------
# VAE regeneration


class ConvVAE(nn.Module):
    """Four conv layers down, a linear latent, four conv layers back up."""

    def __init__(self, side: int = 32, latent_dim: int = 64, width: int = 32):
        super().__init__()
        if side % 8:
            raise ShapeError("VAE side must be a multiple of 8")
        self.side, self.latent_dim, self.width = side, latent_dim, width
        w, s = width, side // 8
        self.enc = nn.Sequential(
            nn.Conv2d(3, w, 3, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(w, w, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(w, 2 * w, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * w, 4 * w, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
        )
        self.to_stats = nn.Linear(4 * w * s * s, 2 * latent_dim)
        self.from_latent = nn.Linear(latent_dim, 4 * w * s * s)
        self.dec = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(4 * w, 2 * w, 3, padding=1), nn.LeakyReLU(0.2),
            nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(2 * w, w, 3, padding=1), nn.LeakyReLU(0.2),
            nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(w, w, 3, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(w, 3, 3, padding=1),
        )

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mu, logvar = self.to_stats(self.enc(x).flatten(1)).chunk(2, dim=1)
        return mu, logvar

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        s = self.side // 8
        return torch.sigmoid(self.dec(self.from_latent(z).view(-1, 4 * self.width, s, s)))

    def forward(self, x: torch.Tensor, generator: torch.Generator | None = None):
        mu, logvar = self.encode(x)
        noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        return self.decode(mu + torch.exp(0.5 * logvar) * noise), mu, logvar

    def fingerprint(self) -> dict:
        return {"side": self.side, "latent_dim": self.latent_dim, "width": self.width}

    def save(self, path) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            torch.save({"fingerprint": self.fingerprint(), "state": self.state_dict()}, path)
        except OSError as exc:
            raise StorageError(f"cannot write {path}: {exc}") from exc
        return path

    @classmethod
    def load(cls, path, side: int | None = None) -> "ConvVAE":
        blob = torch.load(Path(path), map_location="cpu", weights_only=True)
        fp = blob["fingerprint"]
        if side is not None and fp["side"] != side:
            raise FingerprintError(f"VAE trained for {fp['side']}px images, got {side}px")
        vae = cls(**fp)
        try:
            vae.load_state_dict(blob["state"])
        except RuntimeError as exc:
            raise FingerprintError(f"VAE checkpoint does not match its fingerprint: {exc}") from exc
        return vae.eval()


def train_vae(images: torch.Tensor, steps: int = 5000, batch_size: int = 32, lr: float = 1e-3,
              latent_dim: int = 64, width: int = 32, kl_weight: float = 1.0, seed: int = 0,
              log_every: int = 0) -> tuple[ConvVAE, list[float]]:
    """Fit the VAE with a summed squared-error reconstruction term plus the KL prior term."""
    gen = torch.Generator().manual_seed(seed)
    state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        vae = ConvVAE(images.shape[-1], latent_dim, width)
    finally:
        torch.random.set_rng_state(state)
    opt = torch.optim.Adam(vae.parameters(), lr=lr)
    history = []
    for step in range(steps):
        idx = torch.randint(len(images), (batch_size,), generator=gen)
        x = images[idx]
        recon, mu, logvar = vae(x, generator=gen)
        rec = ((recon - x) ** 2).flatten(1).sum(dim=1).mean()
        kl = (-0.5 * (1 + logvar - mu ** 2 - logvar.exp()).sum(dim=1)).mean()
        loss = rec + kl_weight * kl
        if not torch.isfinite(loss):
            raise NumericError("VAE loss diverged", component="vae")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
    return vae.eval(), history


def vae_regen_attack(x_w: torch.Tensor, decoder: nn.Module, bits: torch.Tensor, vae: ConvVAE,
                     sigma: float = 0.0, seed: int = 0, threshold: float = DEFAULT_THRESHOLD) -> AttackOutcome:
    """Reconstruct ``x_w`` from its latent mean plus Gaussian noise of scale ``sigma``."""
    if sigma < 0:
        raise ConfigError("sigma must be non-negative")
    if vae.side != x_w.shape[-1]:
        raise FingerprintError(f"VAE trained for {vae.side}px images, got {x_w.shape[-1]}px")
    started = time.perf_counter()
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        mu, _ = vae.encode(x_w.detach().to(torch.float32))
        z = mu + sigma * torch.randn(mu.shape, generator=gen)
        x_hat = vae.decode(z).to(x_w.dtype)
    return _outcome(decoder, x_w, x_hat, bits, started, threshold)


# ---------------------------------------------------------------------------
# perturbation transfer


@dataclass
class TransferOutcome:
    bra: list[float]
    pairs: list[tuple[int, int]]

    @property
    def mean_bra(self) -> float:
        return sum(self.bra) / len(self.bra)


def perturbation_transfer_attack(x: torch.Tensor, x_w: torch.Tensor, recipients: torch.Tensor,
                                 decoder: nn.Module, bits: torch.Tensor, all_pairs: bool = False) -> TransferOutcome:
    """Lift ``x_w - x`` from each donor onto a recipient and decode the donor's bits.

    Donor ``i`` goes onto recipient ``i`` unless ``all_pairs`` is set, in
    which case every donor is tried on every recipient.
    """
    if len(x) == 0 or len(recipients) == 0:
        raise ConfigError("donor and recipient sets must be non-empty")
    if x.shape != x_w.shape or x.shape[1:] != recipients.shape[1:]:
        raise ShapeError("donor originals, donor watermarked images and recipients must share a shape")
    if not all_pairs and len(recipients) != len(x):
        raise ShapeError("one-to-one transfer needs as many recipients as donors")
    residual = (x_w - x).detach()
    if all_pairs:
        pairs = [(i, j) for i in range(len(x)) for j in range(len(recipients))]
    else:
        pairs = [(i, i) for i in range(len(x))]
    bra: list[float] = []
    for start in range(0, len(pairs), 64):
        chunk = pairs[start:start + 64]
        donors = torch.tensor([p[0] for p in chunk])
        targets = torch.tensor([p[1] for p in chunk])
        forged = torch.clamp(recipients[targets].detach() + residual[donors], 0.0, 1.0)
        bra.extend(per_image_bra(decoder, forged, bits[donors]))
    return TransferOutcome(bra, pairs)


def spec_to_dict(spec: AttackSpec) -> dict:
    return asdict(spec)
