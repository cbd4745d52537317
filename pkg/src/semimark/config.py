"""Run configuration files and run manifests.

A config is one YAML (or JSON) document::

    schema_version: 1
    seed: 0
    workers: 1
    dataset:            # an image directory ...
      root: faces/
      pattern: "*.png"
      landmarks: faces/landmarks.txt
      train_fraction: 0.8
      split_seed: 0
      center_crop: false
    # dataset: {synthetic: {n: 2000, seed: 1}}   # ... or the built-in generator
    training:
      preset: toy       # toy | paper; remaining keys override the preset
      variant: benign_and_malicious
      iterations: 900
    evaluation:
      threshold: 0.75
      max_images: 200
      transforms: [identity, {kind: jpeg, params: {quality: 75}}]
      attacks: [fgsm, cw]
    attacks:
      fgsm: {epsilon: 0.01}
      cw: {steps: 200, c: 1.0, lr: 0.01}
      bpda_eot: {steps: 20, k_samples: 4, step_size: 0.004, epsilon: 0.03}
      vae_regen: {sigma: 0.25, train_steps: 5000}
      perturbation_transfer: {pairs: 50}
    payload: {message: 0123456789ABCDEF, key: 133457799BBCDFF1}
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import platform
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import yaml

from .errors import ConfigError, StorageError
from .training import TrainingConfig

SCHEMA_VERSION = 1
SECTIONS = {"schema_version", "seed", "workers", "dataset", "training", "evaluation", "attacks", "payload"}

DEFAULT_ATTACKS = {
    "fgsm": {"epsilon": 0.010},
    "cw": {"steps": 200, "c": 1.0, "lr": 0.01},
    "bpda_eot": {"steps": 20, "k_samples": 4, "step_size": 0.004, "epsilon": 0.03, "backward": "identity"},
    "vae_regen": {"sigma": 0.25, "train_steps": 5000, "latent_dim": 64},
    "perturbation_transfer": {"pairs": 50},
}


def default_config() -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "seed": 0,
        "workers": 1,
        "dataset": {"synthetic": {"n": 2000, "seed": 1}},
        "training": {"preset": "toy"},
        "evaluation": {"threshold": 0.75, "max_images": 200, "transforms": None, "attacks": []},
        "attacks": copy.deepcopy(DEFAULT_ATTACKS),
        "payload": {},
    }


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def resolve_config(raw: dict | None) -> dict:
    """Fill defaults and validate; the result is what manifests record."""
    raw = dict(raw or {})
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    unknown = set(raw) - SECTIONS
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    dataset = raw.pop("dataset", None)
    cfg = _merge(default_config(), raw)
    if dataset is not None:
        cfg["dataset"] = dataset
    if not isinstance(cfg["seed"], int) or not isinstance(cfg["workers"], int) or cfg["workers"] < 1:
        raise ConfigError("seed must be an integer and workers a positive integer")
    unknown = set(cfg["attacks"]) - set(DEFAULT_ATTACKS)
    if unknown:
        raise ConfigError(f"unknown attacks {sorted(unknown)}")
    training_config(cfg)  # validates the training block
    return cfg


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return resolve_config(raw)


def training_config(cfg: dict) -> TrainingConfig:
    block = dict(cfg.get("training") or {})
    preset = block.pop("preset", "toy")
    block.setdefault("seed", cfg.get("seed", 0))
    try:
        if preset == "toy":
            weights = block.pop("weights", None)
            benign = block.pop("benign", None)
            tc = TrainingConfig.toy(block.pop("variant", "benign_and_malicious"), **block)
            d = tc.to_dict()
            if weights:
                d["weights"] = {**d["weights"], **weights}
            if benign:
                d["benign"] = {**d["benign"], **benign}
            return TrainingConfig.from_dict(d)
        if preset == "paper":
            return TrainingConfig.from_dict(block)
    except TypeError as exc:
        raise ConfigError(f"bad training block: {exc}") from exc
    raise ConfigError(f"unknown training preset {preset!r}")


def cache_dir() -> Path:
    """Derived-data cache, ``$SEMIMARK_CACHE`` or ``~/.cache/semimark``."""
    root = os.environ.get("SEMIMARK_CACHE") or Path.home() / ".cache" / "semimark"
    return Path(root)


def config_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    args: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    fingerprints: dict = field(default_factory=dict)
    # wall-clock seconds per stage; kept out of the result files so those stay reproducible
    timings: dict = field(default_factory=dict)
    started: str = field(default_factory=now)
    finished: str | None = None
    status: str = "running"
    version: str = field(default_factory=tool_version)
    python: str = field(default_factory=lambda: f"{sys.version.split()[0]} ({platform.machine()})")

    FILENAME = "manifest.json"

    def record_outputs(self, root: Path) -> None:
        """Hash every file under ``root`` except the manifest itself."""
        root = Path(root)
        self.outputs = {str(p.relative_to(root)): file_digest(p) for p in sorted(root.rglob("*"))
                        if p.is_file() and p.name != self.FILENAME}

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / self.FILENAME
        try:
            path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str) + "\n")
        except OSError as exc:
            raise StorageError(f"cannot write manifest {path}: {exc}") from exc
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / cls.FILENAME
        try:
            data = json.loads(path.read_text())
        except OSError as exc:
            raise StorageError(f"cannot read manifest {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed manifest {path}: {exc}") from exc
        return cls(**data)
