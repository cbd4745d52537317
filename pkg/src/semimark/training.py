"""Round-robin training of the five networks.

Each iteration updates, in order: encoder and decoder together, the patch
discriminator, the critic (followed by weight clipping), and the adversary.
"""

from __future__ import annotations

import logging
import random
from collections import Counter
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable

import torch

from .data import ImageSet
from .errors import ConfigError
from .losses import (
    LossWeights,
    adversary_losses,
    critic_losses,
    discriminator_objective,
    encoder_decoder_objective,
    image_reconstruction_loss,
    reconstruction_terms,
    require_finite,
    secret_retrieval_error,
)
from .networks import ModelBundle, NetworkConfig, fingerprints_match
from .transforms.benign import BenignConfig, TransformSpec, apply_benign, sample_benign
from .transforms.masks import apply_malicious_proxy, build_face_mask

log = logging.getLogger(__name__)

VARIANTS = ("baseline", "benign_only", "benign_and_malicious")


@dataclass(frozen=True)
class TrainingConfig:
    variant: str = "benign_and_malicious"
    iterations: int = 70_000
    batch_size: int = 64
    learning_rate: float = 1e-4
    side: int = 224
    message_length: int = 64
    retention: float = 0.0
    weights: LossWeights = field(default_factory=LossWeights)
    benign: BenignConfig = field(default_factory=BenignConfig)
    seed: int = 0
    base_width: int = 32
    depth: int | None = None
    critic_clip: float = 0.05
    log_every: int = 100
    checkpoint_every: int = 5_000

    def __post_init__(self):
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        if isinstance(self.benign, dict):
            object.__setattr__(self, "benign", BenignConfig.from_dict(self.benign))
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.iterations <= 0 or self.batch_size <= 0:
            raise ConfigError("iterations and batch_size must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if not 0.0 <= self.retention <= 1.0:
            raise ConfigError("retention must lie in [0, 1]")

    @classmethod
    def toy(cls, variant: str = "benign_and_malicious", **overrides) -> "TrainingConfig":
        """Desk-scale preset: 32x32 crops, 16-bit messages, 900 steps."""
        base = dict(variant=variant, iterations=900, batch_size=16, learning_rate=1e-3,
                    side=32, message_length=16, base_width=16, log_every=50,
                    checkpoint_every=300, benign=TOY_BENIGN, weights=TOY_WEIGHTS)
        base.update(overrides)
        return cls(**base)

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(side=self.side, message_length=self.message_length, depth=self.depth,
                             base_width=self.base_width, critic_clip=self.critic_clip)

    def fingerprint(self) -> dict:
        return {"network": asdict(self.network_config()), "variant": self.variant,
                "weights": self.weights.to_dict(), "retention": self.retention}

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["weights"] = self.weights.to_dict()
        d["benign"] = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.benign).items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training fields {sorted(unknown)}")
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        if "benign" in d:
            d["benign"] = BenignConfig.from_dict(d["benign"])
        return cls(**d)


# at full weight the bit terms swamp the image terms on 32-pixel crops (PSNR ~18 dB)
TOY_WEIGHTS = LossWeights(c_pips=3.0, c_RE=0.1, c_adv=0.1)

# 32-pixel crops cannot absorb the full-size shift and rescale ranges
TOY_BENIGN = BenignConfig(resize_scale=(1.5, 3.0), shift=(-2.0, 2.0), rotation=(-8.0, 8.0),
                          blur_kernel=(3, 5))


@dataclass
class LossBreakdown:
    L1_img: float
    L2_img: float
    L_pips: float
    L_d: float
    L_G: float
    L_image: float
    L_RE: float
    L_disc: float
    L_c: float
    L_w: float
    L_adv: float
    L_r: float
    L_total: float
    transform: str = "identity"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    x: torch.Tensor
    bits: torch.Tensor
    masks: torch.Tensor | None = None


@dataclass
class TrainState:
    bundle: ModelBundle
    config: TrainingConfig
    optimizers: dict
    torch_rng: torch.Generator
    transform_rng: random.Random
    step: int = 0
    counters: Counter = field(default_factory=Counter)

    @classmethod
    def create(cls, config: TrainingConfig, bundle: ModelBundle | None = None) -> "TrainState":
        bundle = bundle or ModelBundle.create(config.network_config(), seed=config.seed,
                                              fingerprint=config.fingerprint())
        if not fingerprints_match(bundle.fingerprint, config.fingerprint()):
            from .errors import FingerprintError
            raise FingerprintError("model bundle does not match the training configuration")
        lr = config.learning_rate
        adam = lambda params: torch.optim.Adam(params, lr=lr)  # noqa: E731
        optimizers = {
            "encoder_decoder": adam(list(bundle.encoder.parameters()) + list(bundle.decoder.parameters())),
            "discriminator": adam(bundle.discriminator.parameters()),
            "critic": adam(bundle.critic.parameters()),
            "adversary": adam(bundle.adversary.parameters()),
        }
        return cls(bundle, config, optimizers, torch.Generator().manual_seed(config.seed),
                   random.Random(config.seed))


def face_masks(data: ImageSet, retention: float) -> torch.Tensor:
    side_h, side_w = data.images.shape[-2:]
    return torch.stack([build_face_mask(lm, retention, side_h, side_w).as_tensor(data.images)
                        for lm in data.landmarks])


def sample_batch(state: TrainState, data: ImageSet, masks: torch.Tensor | None) -> Batch:
    cfg = state.config
    idx = torch.randint(len(data), (cfg.batch_size,), generator=state.torch_rng)
    bits = torch.randint(0, 2, (cfg.batch_size, cfg.message_length), generator=state.torch_rng)
    return Batch(data.images[idx], bits.to(data.images.dtype), None if masks is None else masks[idx])


def _zero(*opts):
    for o in opts:
        o.zero_grad(set_to_none=True)


def train_step(state: TrainState, batch: Batch) -> LossBreakdown:
    """One round-robin update of all five networks; mutates ``state`` in place."""
    cfg, nets, opts = state.config, state.bundle, state.optimizers
    w = cfg.weights
    x, b = batch.x, batch.bits

    # 1. encoder + decoder
    _zero(*opts.values())
    x_w = nets.encoder(x, b)
    spec = sample_benign(state.transform_rng, cfg.benign) if cfg.variant != "baseline" else TransformSpec("identity")
    if spec.kind != "identity":
        state.counters["benign"] += 1
    b_bt = nets.decoder(apply_benign(x_w, spec))
    b_mt = None
    if cfg.variant == "benign_and_malicious":
        if batch.masks is None:
            raise ConfigError("benign_and_malicious training needs face masks")
        state.counters["malicious"] += 1
        b_mt = nets.decoder(apply_malicious_proxy(x_w, x, batch.masks))
    terms = reconstruction_terms(x, x_w, w)
    image_reconstruction_loss(x, x_w, nets.discriminator, w, terms)
    terms["L_RE"] = secret_retrieval_error(b, b_bt, b_mt)
    terms["L_c"] = nets.critic(x_w).mean()
    terms["L_adv"], _ = adversary_losses(b, nets.decoder(nets.adversary(x_w)))
    objective = require_finite(encoder_decoder_objective(terms, w), "encoder_decoder")
    objective.backward()
    opts["encoder_decoder"].step()

    x_w = x_w.detach()
    # 2. discriminator
    _zero(*opts.values())
    l_disc = require_finite(discriminator_objective(nets.discriminator(x), nets.discriminator(x_w)), "discriminator")
    l_disc.backward()
    opts["discriminator"].step()

    # 3. critic
    _zero(*opts.values())
    _, l_w = critic_losses(nets.critic(x), nets.critic(x_w))
    require_finite(l_w, "critic").backward()
    opts["critic"].step()
    nets.critic.clip(cfg.critic_clip)

    # 4. adversary; decoder gradients from this pass are discarded
    _zero(*opts.values())
    _, l_r = adversary_losses(b, nets.decoder(nets.adversary(x_w)))
    require_finite(l_r, "adversary").backward()
    opts["adversary"].step()
    _zero(*opts.values())

    nets.assert_finite()
    state.step += 1
    item = lambda t: float(t.detach())  # noqa: E731
    l_total = terms["L_image"] + w.c_RE * terms["L_RE"] + l_disc + l_w + l_r
    return LossBreakdown(
        L1_img=item(terms["L1_img"]), L2_img=item(terms["L2_img"]), L_pips=item(terms["L_pips"]),
        L_d=item(terms["L_d"]), L_G=item(terms["L_G"]), L_image=item(terms["L_image"]),
        L_RE=item(terms["L_RE"]), L_disc=item(l_disc), L_c=item(terms["L_c"]), L_w=item(l_w),
        L_adv=item(terms["L_adv"]), L_r=item(l_r), L_total=item(l_total), transform=spec.label,
    )


def train(config: TrainingConfig, data: ImageSet, state: TrainState | None = None,
          callback: Callable[[TrainState, LossBreakdown], None] | None = None) -> tuple[TrainState, list[LossBreakdown]]:
    state = state or TrainState.create(config)
    masks = face_masks(data, config.retention) if config.variant == "benign_and_malicious" else None
    for net in state.bundle.networks().values():
        net.train()
    history = []
    while state.step < config.iterations:
        losses = train_step(state, sample_batch(state, data, masks))
        history.append(losses)
        if config.log_every and state.step % config.log_every == 0:
            log.info("step %d L_d=%.4g L_RE=%.4g L_adv=%.4g [%s]", state.step, losses.L_d,
                     losses.L_RE, losses.L_adv, losses.transform)
        if callback is not None:
            callback(state, losses)
    state.bundle.eval()
    return state, history


def with_overrides(config: TrainingConfig, **kwargs) -> TrainingConfig:
    return replace(config, **kwargs)
