"""Face-feature polygon masks and the masked-blend proxy for facial manipulation.

Landmark coordinates are ``(x, y)`` in pixel units with the image origin at
the top-left corner; pixel ``(i, j)`` (row, column) has its centre at
``(j + 0.5, i + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np
import torch

from ..errors import LandmarkError, ShapeError

FEATURES = ("lips", "nose", "left_eye", "right_eye")

Point = tuple[float, float]


@dataclass(frozen=True)
class LandmarkSet:
    polygons: Mapping[str, tuple[Point, ...]]

    def __post_init__(self):
        frozen = {name: tuple((float(x), float(y)) for x, y in pts)
                  for name, pts in self.polygons.items()}
        object.__setattr__(self, "polygons", frozen)

    def check_bounds(self, height: int, width: int) -> None:
        for name, pts in self.polygons.items():
            for x, y in pts:
                if not (0 <= x <= width and 0 <= y <= height):
                    raise LandmarkError(f"{name} point ({x}, {y}) outside {width}x{height} image")

    def to_record(self, image_id: str) -> str:
        fields = [image_id]
        for name, pts in self.polygons.items():
            fields.append(name + "=" + ";".join(f"{x:.6g},{y:.6g}" for x, y in pts))
        return " ".join(fields)

    @classmethod
    def from_record(cls, line: str) -> tuple[str, "LandmarkSet"]:
        image_id, *fields = line.split()
        polygons = {}
        for f in fields:
            name, _, coords = f.partition("=")
            try:
                polygons[name] = tuple(tuple(float(v) for v in pair.split(","))
                                       for pair in coords.split(";") if pair)
            except ValueError as exc:
                raise LandmarkError(f"bad landmark record for {image_id}: {f!r}") from exc
        return image_id, cls(polygons)


def rasterize_polygon(points: Sequence[Point], height: int, width: int) -> np.ndarray:
    """Even-odd scanline fill sampled at pixel centres.

    An edge counts on row ``y`` when ``min(y0, y1) <= y < max(y0, y1)``, and a
    centre ``cx`` inside a span ``[xa, xb)`` is filled.
    """
    if len(points) < 3:
        raise LandmarkError(f"polygon needs at least 3 points, got {len(points)}")
    pts = np.asarray(points, dtype=np.float64)
    x0, y0 = pts[:, 0], pts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    out = np.zeros((height, width), dtype=bool)
    centres = np.arange(width) + 0.5
    for i in range(height):
        y = i + 0.5
        active = (np.minimum(y0, y1) <= y) & (y < np.maximum(y0, y1))
        if not active.any():
            continue
        xs = x0[active] + (y - y0[active]) * (x1[active] - x0[active]) / (y1[active] - y0[active])
        xs.sort()
        for xa, xb in zip(xs[0::2], xs[1::2]):
            out[i] |= (centres >= xa) & (centres < xb)
    return out


@dataclass(frozen=True)
class FaceMask:
    values: np.ndarray  # (H, W, 3)
    retention: float

    def as_tensor(self, like: torch.Tensor | None = None) -> torch.Tensor:
        t = torch.from_numpy(np.ascontiguousarray(self.values.transpose(2, 0, 1)))
        if like is not None:
            t = t.to(dtype=like.dtype, device=like.device)
        return t


def build_face_mask(landmarks: LandmarkSet, retention: float, height: int, width: int,
                    features: Sequence[str] = FEATURES) -> FaceMask:
    if not 0.0 <= retention <= 1.0:
        raise LandmarkError(f"retention must lie in [0, 1], got {retention}")
    landmarks.check_bounds(height, width)
    inside = np.zeros((height, width), dtype=bool)
    for name in features:
        if name in landmarks.polygons:
            inside |= rasterize_polygon(landmarks.polygons[name], height, width)
    plane = np.where(inside, retention, 1.0)
    return FaceMask(np.repeat(plane[:, :, None], 3, axis=2), float(retention))


def apply_malicious_proxy(x_w: torch.Tensor, x: torch.Tensor, mask) -> torch.Tensor:
    """Blend ``mask * x_w + (1 - mask) * x``.

    ``mask`` may be a FaceMask, a ``(3, H, W)`` tensor shared by the batch,
    or a ``(N, 3, H, W)`` tensor with one mask per image.
    """
    m = mask.as_tensor(x_w) if isinstance(mask, FaceMask) else mask.to(dtype=x_w.dtype)
    if x_w.shape != x.shape or tuple(m.shape[-3:]) != tuple(x_w.shape[-3:]):
        raise ShapeError(f"shape mismatch: x_w {tuple(x_w.shape)}, x {tuple(x.shape)}, mask {tuple(m.shape)}")
    return m * x_w + (1.0 - m) * x


class LandmarkProvider(Protocol):
    def landmarks(self, image_id: str, height: int, width: int) -> LandmarkSet: ...


def _ellipse(cx, cy, rx, ry, n=10) -> tuple[Point, ...]:
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return tuple(zip(cx + rx * np.cos(t), cy + ry * np.sin(t)))


def canonical_landmarks(box: tuple[float, float, float, float]) -> LandmarkSet:
    """Place eye, nose and lip polygons at canonical positions inside a face box."""
    x0, y0, x1, y1 = box
    w, h = x1 - x0, y1 - y0
    at = lambda fx, fy: (x0 + fx * w, y0 + fy * h)  # noqa: E731
    return LandmarkSet({
        "left_eye": _ellipse(*at(0.32, 0.38), 0.13 * w, 0.07 * h),
        "right_eye": _ellipse(*at(0.68, 0.38), 0.13 * w, 0.07 * h),
        "nose": (at(0.5, 0.40), at(0.60, 0.64), at(0.40, 0.64)),
        "lips": _ellipse(*at(0.5, 0.79), 0.20 * w, 0.08 * h),
    })


class GeometricLandmarks:
    """Canonical polygons for a face crop filling ``margin``-inset bounds."""

    def __init__(self, margin: float = 0.1):
        self.margin = margin

    def landmarks(self, image_id: str, height: int, width: int) -> LandmarkSet:
        m = self.margin
        return canonical_landmarks((m * width, m * height, (1 - m) * width, (1 - m) * height))


class FixtureLandmarks:
    """Landmarks read from a text file holding one record per image."""

    def __init__(self, path, fallback: LandmarkProvider | None = None):
        self.path = Path(path)
        self.fallback = fallback
        self.records = read_landmark_file(self.path)

    def landmarks(self, image_id: str, height: int, width: int) -> LandmarkSet:
        found = self.records.get(image_id) or self.records.get(Path(image_id).stem)
        if found is None:
            if self.fallback is None:
                raise LandmarkError(f"no landmarks for {image_id} in {self.path}")
            return self.fallback.landmarks(image_id, height, width)
        return found


def read_landmark_file(path) -> dict[str, LandmarkSet]:
    records = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            image_id, lm = LandmarkSet.from_record(line)
            records[image_id] = lm
    return records


def write_landmark_file(path, records: Mapping[str, LandmarkSet]) -> None:
    lines = [lm.to_record(image_id) for image_id, lm in records.items()]
    Path(path).write_text("\n".join(lines) + "\n")
