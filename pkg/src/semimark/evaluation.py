"""Robustness and imperceptibility experiments over a transform matrix.

A suite embeds one payload into every image, applies each evaluation
transform, decodes, and records a :class:`EvalRecord` per (image,
transform). Tables are plain means over records.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch

from .codec import (
    DEFAULT_THRESHOLD,
    BitString,
    SecretKey,
    bit_recovery_accuracy,
    decrypt_payload,
    encrypt_payload,
)
from .data import ImageSet
from .errors import ConfigError, SemimarkError
from .metrics import psnr, ssim
from .networks import ModelBundle, decode_image, encode_image
from .transforms.benign import BENIGN_KINDS, TransformSpec, apply_benign_eval
from .transforms.filters import apply_filter_stack
from .transforms.masks import apply_malicious_proxy, build_face_mask
from .transforms.plugins import apply_external_manipulation

log = logging.getLogger(__name__)

CSV_COLUMNS = ("image_id", "variant", "dataset", "transform", "params", "psnr", "ssim",
               "embed_psnr", "embed_ssim", "matched_bits", "total_bits", "bra", "decision",
               "threshold", "plaintext_recovered", "error")


def fmt(value) -> str:
    """Serialize with 6 significant digits; infinities as ``inf``."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        if math.isnan(value):
            return "nan"
        return f"{value:.6g}"
    return str(value)


@dataclass
class EvalRecord:
    image_id: str
    transform: str
    params: dict = field(default_factory=dict)
    psnr: float | None = None
    ssim: float | None = None
    embed_psnr: float | None = None
    embed_ssim: float | None = None
    matched_bits: int | None = None
    total_bits: int | None = None
    threshold: float = DEFAULT_THRESHOLD
    plaintext_recovered: bool | None = None
    variant: str = ""
    dataset: str = ""
    error: str | None = None

    @property
    def bra(self) -> float | None:
        return None if self.total_bits is None else 100.0 * self.matched_bits / self.total_bits

    @property
    def decision(self) -> str | None:
        if self.total_bits is None:
            return None
        from .codec import RecoveryReport
        return RecoveryReport(self.matched_bits, self.total_bits, self.threshold).decision.value

    def row(self) -> dict:
        d = {c: getattr(self, c) for c in CSV_COLUMNS if c != "params"}
        d["params"] = json.dumps(self.params, sort_keys=True) if self.params else ""
        return {k: fmt(v) for k, v in d.items()}


@dataclass
class EvalTable:
    variant: str
    transform: str
    mean_bra: float
    mean_psnr: float | None
    mean_ssim: float | None
    detection_rate: float
    trials: int
    infinite_psnr: int = 0
    failures: int = 0

    def row(self) -> dict:
        return {k: fmt(v) for k, v in self.__dict__.items()}


def _mean(values):
    values = list(values)
    return sum(values) / len(values) if values else None


def aggregate(records: Sequence[EvalRecord]) -> list[EvalTable]:
    groups: dict[tuple[str, str], list[EvalRecord]] = defaultdict(list)
    for r in records:
        groups[(r.variant, r.transform)].append(r)
    tables = []
    for (variant, transform), rs in groups.items():
        ok = [r for r in rs if r.error is None]
        finite = [r.psnr for r in ok if r.psnr is not None and not math.isinf(r.psnr)]
        tables.append(EvalTable(
            variant=variant, transform=transform,
            mean_bra=_mean(r.bra for r in ok) if ok else float("nan"),
            mean_psnr=_mean(finite),
            mean_ssim=_mean(r.ssim for r in ok if r.ssim is not None),
            detection_rate=100.0 * _mean(r.decision == "watermarked" for r in ok) if ok else float("nan"),
            trials=len(ok),
            infinite_psnr=sum(1 for r in ok if r.psnr is not None and math.isinf(r.psnr)),
            failures=len(rs) - len(ok),
        ))
    return tables


def canonical_order(records: Sequence[EvalRecord]) -> list[EvalRecord]:
    return sorted(records, key=lambda r: (r.image_id, r.variant, r.transform))


def records_csv(records: Sequence[EvalRecord]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in canonical_order(records):
        writer.writerow(r.row())
    return buf.getvalue()


def tables_csv(tables: Sequence[EvalTable]) -> str:
    if not tables:
        return ""
    buf = io.StringIO()
    cols = list(tables[0].row())
    writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    writer.writeheader()
    for t in tables:
        writer.writerow(t.row())
    return buf.getvalue()


def tables_markdown(tables: Sequence[EvalTable]) -> str:
    head = "| variant | transform | BRA % | detection % | PSNR dB | SSIM | trials |"
    lines = [head, "|---|---|---:|---:|---:|---:|---:|"]
    for t in tables:
        r = t.row()
        lines.append(f"| {r['variant']} | {r['transform']} | {r['mean_bra']} | {r['detection_rate']} "
                     f"| {r['mean_psnr'] or '-'} | {r['mean_ssim'] or '-'} | {r['trials']} |")
    return "\n".join(lines) + "\n"


def write_report(out_dir, records: Sequence[EvalRecord], name: str = "results") -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tables = aggregate(canonical_order(records))
    paths = {"records": out_dir / f"{name}_records.csv", "tables": out_dir / f"{name}_tables.csv",
             "markdown": out_dir / f"{name}_tables.md"}
    paths["records"].write_text(records_csv(records))
    paths["tables"].write_text(tables_csv(tables))
    paths["markdown"].write_text(tables_markdown(tables))
    return paths


# ---------------------------------------------------------------------------
# evaluation transforms


@dataclass(frozen=True)
class EvalTransform:
    """One column of the transform matrix.

    ``kind`` is a benign kind, ``filter`` (params ``names``: ordered list),
    ``malicious_mask`` (params ``retention``) or ``external_plugin`` (params
    ``plugin`` and ``args``).
    """

    spec: TransformSpec
    name: str | None = None

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.spec.kind == "filter":
            return "+".join(self.spec.params["names"])
        return self.spec.label

    @classmethod
    def parse(cls, item) -> "EvalTransform":
        if isinstance(item, str):
            return cls(TransformSpec(item))
        item = dict(item)
        name = item.pop("name", None)
        kind = item.pop("kind")
        params = item.pop("params", None) or item
        return cls(TransformSpec(kind, params), name)


def apply_eval_transform(t: EvalTransform, x_w: torch.Tensor, x: torch.Tensor, data: ImageSet,
                         plugins=None, workers: int = 1) -> torch.Tensor:
    spec = t.spec
    if spec.kind in BENIGN_KINDS:
        return apply_benign_eval(x_w, spec)
    if spec.kind == "filter":
        return apply_filter_stack(x_w, spec.params["names"])
    if spec.kind == "malicious_mask":
        h, w = x.shape[-2:]
        masks = torch.stack([build_face_mask(lm, float(spec.params.get("retention", 0.0)), h, w).as_tensor(x)
                             for lm in data.landmarks])
        return apply_malicious_proxy(x_w, x, masks)
    if spec.kind == "external_plugin":
        return apply_external_manipulation(x_w, spec.params["plugin"], spec.params.get("args", ""),
                                           registry=plugins, workers=workers)
    raise ConfigError(f"{spec.kind!r} cannot be used as an evaluation transform")


def bits_tensor(bits: BitString, n: int) -> torch.Tensor:
    return torch.tensor(bits.bits, dtype=torch.float32).expand(n, -1).clone()


@dataclass
class Payload:
    message: BitString
    key: SecretKey | None = None

    @property
    def embedded(self) -> BitString:
        return encrypt_payload(self.message, self.key)


def _score(idx, image_id, label, params, embedded, payload, probs, x_eval, x_w, x, tau, variant, dataset):
    recovered = BitString(tuple(int(p >= 0.5) for p in probs.tolist()))
    report = bit_recovery_accuracy(embedded, recovered, tau)
    plaintext = None
    if payload.key is not None and len(embedded) % 64 == 0:
        plaintext = decrypt_payload(recovered, payload.key) == payload.message
    return EvalRecord(
        image_id=image_id, transform=label, params=params,
        psnr=psnr(x_eval, x_w), ssim=ssim(x_eval, x_w) if min(x.shape[-2:]) >= 11 else None,
        embed_psnr=psnr(x_w, x), embed_ssim=ssim(x_w, x) if min(x.shape[-2:]) >= 11 else None,
        matched_bits=report.matched_bits, total_bits=report.total_bits, threshold=tau,
        plaintext_recovered=plaintext, variant=variant, dataset=dataset,
    )


def embed_batch(bundle: ModelBundle, images: torch.Tensor, payload: Payload, batch_size: int = 64) -> torch.Tensor:
    out = []
    with torch.no_grad():
        for chunk in images.split(batch_size):
            out.append(encode_image(chunk, bits_tensor(payload.embedded, len(chunk)), bundle))
    return torch.cat(out) if out else images.clone()


def decode_batch(bundle: ModelBundle, images: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
    with torch.no_grad():
        return torch.cat([decode_image(chunk, bundle) for chunk in images.split(batch_size)])


def run_robustness_suite(bundle: ModelBundle, data: ImageSet, transforms: Sequence[EvalTransform],
                         payload: Payload, threshold: float = DEFAULT_THRESHOLD, variant: str = "",
                         dataset: str = "", plugins=None, workers: int = 1,
                         attacks: Sequence[Callable] = ()) -> list[EvalRecord]:
    """Embed, transform, decode and score every (image, transform) pair.

    A transform that raises is recorded on every affected row and the suite
    moves on. ``attacks`` are callables ``(x_w, x, bits) -> (label, params,
    attacked images)`` evaluated like transforms.
    """
    bundle.eval()
    x = data.images
    x_w = embed_batch(bundle, x, payload)
    embedded = payload.embedded
    bits = bits_tensor(embedded, len(x))

    def columns():
        for t in transforms:
            yield t.label, t.spec.params, lambda t=t: apply_eval_transform(t, x_w, x, data, plugins, workers)
        for attack in attacks:
            label, params, fn = attack(x_w, x, bits)
            yield label, params, fn

    records: list[EvalRecord] = []
    for label, params, produce in columns():
        try:
            x_eval = produce().to(x_w.dtype)
            probs = decode_batch(bundle, x_eval)
        except SemimarkError as exc:
            log.warning("transform %s failed: %s", label, exc)
            records.extend(EvalRecord(image_id=i, transform=label, params=params, threshold=threshold,
                                      variant=variant, dataset=dataset, error=str(exc)) for i in data.ids)
            continue
        args = [(k, data.ids[k], label, params, embedded, payload, probs[k], x_eval[k], x_w[k], x[k],
                 threshold, variant, dataset) for k in range(len(x))]
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                records.extend(pool.map(lambda a: _score(*a), args))
        else:
            records.extend(_score(*a) for a in args)
    return canonical_order(records)


DEFAULT_SUITE = (
    {"kind": "identity", "name": "none"},
    {"kind": "jpeg", "params": {"quality": 25}},
    {"kind": "jpeg", "params": {"quality": 50}},
    {"kind": "jpeg", "params": {"quality": 75}},
    {"kind": "gaussian_blur", "params": {"kernel": 3}},
    {"kind": "gaussian_blur", "params": {"kernel": 5}},
    {"kind": "saturation", "params": {"weight": 0.5}},
    {"kind": "contrast", "params": {"factor": 1.5}},
    {"kind": "resize_cycle", "params": {"scale": 2.0}},
    {"kind": "translate_rotate", "params": {"shift_h": 1.0, "shift_v": -1.0, "angle": 4.0}},
    {"kind": "filter", "params": {"names": ["aden"]}},
    {"kind": "filter", "params": {"names": ["brooklyn"]}},
    {"kind": "filter", "params": {"names": ["clarendon"]}},
    {"kind": "filter", "params": {"names": ["aden", "brooklyn"]}},
    {"kind": "filter", "params": {"names": ["aden", "brooklyn", "clarendon"]}},
    {"kind": "malicious_mask", "params": {"retention": 0.0}},
)


def default_suite() -> list[EvalTransform]:
    return [EvalTransform.parse(t) for t in DEFAULT_SUITE]
