"""Image corpora: directory ingestion and a synthetic face generator.

The synthetic faces exist so training, tests and the CLI can run without a
face dataset. Each face is drawn from the same canonical polygons the
geometric landmark provider emits, so its landmarks are exact.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError, StorageError
from .transforms.masks import (
    FixtureLandmarks,
    GeometricLandmarks,
    LandmarkSet,
    canonical_landmarks,
    rasterize_polygon,
    write_landmark_file,
)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


def _smooth_noise(rng: np.random.Generator, side: int, cells: int) -> np.ndarray:
    coarse = torch.from_numpy(rng.random((1, 1, cells, cells)))
    fine = torch.nn.functional.interpolate(coarse, size=(side, side), mode="bicubic", align_corners=False)
    return fine[0, 0].numpy()


def synthetic_face(side: int, rng: np.random.Generator) -> tuple[np.ndarray, LandmarkSet]:
    """Render one ``(side, side, 3)`` face crop in [0, 1] with its landmarks."""
    s = float(side)
    jitter = rng.uniform(-0.04, 0.04, size=4) * s
    box = (0.1 * s + jitter[0], 0.1 * s + jitter[1], 0.9 * s + jitter[2], 0.92 * s + jitter[3])
    box = tuple(float(np.clip(v, 0.02 * s, 0.98 * s)) for v in box)
    lm = canonical_landmarks(box)

    base = rng.uniform(0.15, 0.85, size=3)
    tilt = rng.uniform(-0.25, 0.25, size=3)
    yy, xx = np.mgrid[0:side, 0:side] / s
    img = base + tilt * (yy[..., None] - 0.5) + 0.15 * (_smooth_noise(rng, side, 4)[..., None] - 0.5)

    cx, cy = (box[0] + box[2]) / 2, (box[1] + box[3]) / 2
    rx, ry = (box[2] - box[0]) / 2 * 1.05, (box[3] - box[1]) / 2 * 1.08
    centres_y, centres_x = np.mgrid[0:side, 0:side] + 0.5
    face = ((centres_x - cx) / rx) ** 2 + ((centres_y - cy) / ry) ** 2 <= 1.0
    skin = np.array([rng.uniform(0.45, 0.95), rng.uniform(0.3, 0.75), rng.uniform(0.2, 0.6)])
    shade = 1.0 - 0.25 * (((centres_x - cx) / rx) ** 2 + ((centres_y - cy) / ry) ** 2)
    img[face] = (skin * shade[..., None])[face]

    hair = face & (centres_y < box[1] + 0.18 * (box[3] - box[1]))
    img[hair] = rng.uniform(0.0, 0.45, size=3) + 0.05 * rng.standard_normal((int(hair.sum()), 3))

    nose = rasterize_polygon(lm.polygons["nose"], side, side)
    img[nose] = img[nose] * rng.uniform(0.75, 0.9)
    iris = rng.uniform(0.05, 0.5, size=3)
    for name in ("left_eye", "right_eye"):
        eye = rasterize_polygon(lm.polygons[name], side, side)
        img[eye] = rng.uniform(0.8, 0.95)
        pts = np.asarray(lm.polygons[name])
        ex, ey = pts.mean(axis=0)
        r = max(1.0, 0.5 * (pts[:, 1].max() - pts[:, 1].min()))
        pupil = eye & ((centres_x - ex) ** 2 + (centres_y - ey) ** 2 <= r * r)
        img[pupil] = iris
    lips = rasterize_polygon(lm.polygons["lips"], side, side)
    img[lips] = np.array([rng.uniform(0.55, 0.85), rng.uniform(0.1, 0.35), rng.uniform(0.15, 0.4)])

    texture = 0.04 * (_smooth_noise(rng, side, max(4, side // 2))[..., None] - 0.5)
    img = img + texture + rng.normal(0, 0.01, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32), lm


def synthetic_corpus(n: int, side: int, seed: int = 0) -> tuple[torch.Tensor, list[LandmarkSet]]:
    rng = np.random.default_rng(seed)
    faces, marks = zip(*(synthetic_face(side, rng) for _ in range(n)))
    # quantize to 8 bits so in-memory images match what a PNG round trip gives
    images = torch.from_numpy(np.round(np.stack(faces) * 255.0) / 255.0).permute(0, 3, 1, 2).float()
    return images.contiguous(), list(marks)


def write_synthetic_corpus(root, n: int, side: int, seed: int = 0) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    images, marks = synthetic_corpus(n, side, seed)
    records = {}
    for i, (img, lm) in enumerate(zip(images, marks)):
        name = f"face_{i:05d}.png"
        save_image(img, root / name)
        records[name] = lm
    write_landmark_file(root / "landmarks.txt", records)
    return root


def save_image(img: torch.Tensor, path, allow_lossy: bool = False) -> None:
    path = Path(path)
    if path.suffix.lower() in {".jpg", ".jpeg"} and not allow_lossy:
        raise ConfigError(f"refusing to write lossy {path.suffix} output without allow_lossy")
    arr = np.round(img.detach().cpu().double().clamp(0, 1).permute(1, 2, 0).numpy() * 255).astype(np.uint8)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(arr).save(path)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def load_image(path, side: int | None = None, center_crop: bool = False) -> torch.Tensor:
    try:
        img = Image.open(path).convert("RGB")
    except OSError as exc:
        raise StorageError(f"cannot read image {path}: {exc}") from exc
    if center_crop:
        w, h = img.size
        m = min(w, h)
        img = img.crop(((w - m) // 2, (h - m) // 2, (w - m) // 2 + m, (h - m) // 2 + m))
    if side is not None and img.size != (side, side):
        if not center_crop and img.size[0] != img.size[1]:
            raise ConfigError(f"{path} is {img.size[0]}x{img.size[1]}; use center_crop for non-square inputs")
        img = img.resize((side, side), Image.BILINEAR)
    return torch.from_numpy(np.asarray(img, dtype=np.float32) / 255.0).permute(2, 0, 1).contiguous()


@dataclass
class DatasetSpec:
    root: str
    pattern: str = "*"
    landmarks: str | None = None
    train_fraction: float = 0.8
    split_seed: int = 0
    center_crop: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(**d)

    def files(self) -> list[Path]:
        root = Path(self.root)
        if not root.is_dir():
            raise ConfigError(f"dataset root {root} is not a directory")
        files = sorted(p for p in root.glob(self.pattern) if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise ConfigError(f"no images matching {self.pattern!r} under {root}")
        return files

    def split(self) -> tuple[list[Path], list[Path]]:
        """Deterministic disjoint split keyed on file name and seed."""
        if not 0.0 <= self.train_fraction <= 1.0:
            raise ConfigError("train_fraction must lie in [0, 1]")
        files = self.files()

        def key(p: Path) -> str:
            return hashlib.sha256(f"{self.split_seed}:{p.name}".encode()).hexdigest()

        ordered = sorted(files, key=key)
        cut = round(self.train_fraction * len(ordered))
        return sorted(ordered[:cut]), sorted(ordered[cut:])

    def landmark_provider(self):
        path = self.landmarks
        if path is None and (Path(self.root) / "landmarks.txt").exists():
            path = Path(self.root) / "landmarks.txt"
        return FixtureLandmarks(path, fallback=GeometricLandmarks()) if path else GeometricLandmarks()


@dataclass
class ImageSet:
    ids: list[str]
    images: torch.Tensor
    landmarks: list[LandmarkSet] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> "ImageSet":
        idx = list(idx)
        return ImageSet([self.ids[i] for i in idx], self.images[idx], [self.landmarks[i] for i in idx])


def load_image_set(paths, side: int, provider=None, center_crop: bool = False) -> ImageSet:
    provider = provider or GeometricLandmarks()
    paths = list(paths)
    images = torch.stack([load_image(p, side, center_crop) for p in paths]) if paths else torch.empty(0, 3, side, side)
    ids = [Path(p).name for p in paths]
    return ImageSet(ids, images, [provider.landmarks(i, side, side) for i in ids])


def synthetic_image_set(n: int, side: int, seed: int = 0) -> ImageSet:
    images, marks = synthetic_corpus(n, side, seed)
    return ImageSet([f"synthetic_{seed}_{i:05d}" for i in range(n)], images, marks)
