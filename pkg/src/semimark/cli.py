"""``semimark`` command line: train, embed, verify, evaluate, attack.

Every command resolves one config (file plus flag overrides), writes only
under ``--output`` and leaves a ``manifest.json`` there that ``semimark
rerun`` can replay. Exit codes: 0 ok, 2 config, 3 numeric, 4 fingerprint,
5 I/O.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import logging
import random
import sys
from pathlib import Path

from . import attacks as atk
from .codec import BitString, SecretKey, bit_recovery_accuracy, decrypt_payload, read_key_file, read_message_file
from .config import (
    DEFAULT_ATTACKS,
    RunManifest,
    cache_dir,
    config_digest,
    load_config,
    now,
    resolve_config,
    training_config,
)
from .data import DatasetSpec, ImageSet, load_image_set, save_image, synthetic_image_set
from .data import write_synthetic_corpus
from .errors import ConfigError, LengthMismatch, NumericError, SemimarkError, StorageError
from .evaluation import (
    EvalTransform,
    Payload,
    aggregate,
    bits_tensor,
    decode_batch,
    default_suite,
    embed_batch,
    fmt,
    run_robustness_suite,
    write_report,
)
from .metrics import psnr, ssim
from .networks import ModelBundle
from .plotting import plot_attack_summary, plot_bra_bars, plot_training
from .training import TrainState, train

log = logging.getLogger("semimark")

COMMANDS = ("train", "embed", "verify", "evaluate", "attack")


# ---------------------------------------------------------------------------
# shared plumbing


def _prepare_output(out) -> Path:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def _csv(rows: list[dict], columns) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def _dataset_splits(cfg: dict, side: int) -> tuple[ImageSet, ImageSet]:
    """Train and test splits from the dataset block; fails before any output exists."""
    ds = dict(cfg["dataset"])
    if "synthetic" in ds:
        syn = dict(ds["synthetic"])
        n, seed = int(syn.get("n", 600)), int(syn.get("seed", 1))
        images = synthetic_image_set(n, side, seed)
        cut = round(float(ds.get("train_fraction", 0.8)) * n)
        return images.subset(range(cut)), images.subset(range(cut, n))
    try:
        spec = DatasetSpec.from_dict(ds)
    except TypeError as exc:
        raise ConfigError(f"bad dataset block: {exc}") from exc
    train_paths, test_paths = spec.split()
    provider = spec.landmark_provider()
    return (load_image_set(train_paths, side, provider, spec.center_crop),
            load_image_set(test_paths, side, provider, spec.center_crop))


def _input_images(directory, side: int, center_crop: bool, landmarks=None) -> ImageSet:
    spec = DatasetSpec(root=str(directory), landmarks=landmarks, train_fraction=1.0, center_crop=center_crop)
    paths = spec.files()
    return load_image_set(paths, side, spec.landmark_provider(), center_crop)


def _expected_fingerprint(cfg: dict | None) -> dict | None:
    if not cfg or not cfg.get("training"):
        return None
    return {"network": training_config(cfg).fingerprint()["network"]}


def _load_bundle(path, cfg: dict | None, strict: bool) -> ModelBundle:
    bundle = ModelBundle.load(path, _expected_fingerprint(cfg) if strict else None)
    return bundle.eval()


def _payload(opts: dict, cfg: dict, length: int) -> Payload:
    pay = cfg.get("payload") or {}
    if opts.get("message"):
        message = read_message_file(opts["message"])
    elif pay.get("message"):
        message = BitString.from_text(str(pay["message"]))
    else:
        message = BitString.random(length, random.Random(cfg["seed"]))
    if len(message) != length:
        raise LengthMismatch(f"message has {len(message)} bits but the model embeds {length}")
    key = None
    if opts.get("key"):
        key = read_key_file(opts["key"])
    elif pay.get("key"):
        key = SecretKey.from_hex(str(pay["key"]))
    return Payload(message, key)


def _finish(manifest: RunManifest, out: Path, status: str = "ok") -> None:
    manifest.status = status
    manifest.finished = now()
    manifest.record_outputs(out)
    manifest.write(out)


# ---------------------------------------------------------------------------
# commands; each takes the resolved config, command options and output dir


def run_train(cfg: dict, opts: dict, out) -> RunManifest:
    tc = training_config(cfg)
    train_set, _ = _dataset_splits(cfg, tc.side)
    if len(train_set) == 0:
        raise ConfigError("the training split is empty")
    out = _prepare_output(out)
    manifest = RunManifest("train", cfg, tc.seed, args=opts, inputs={"dataset": cfg["dataset"]},
                           fingerprints={"model": tc.fingerprint()})
    every = int(opts.get("checkpoint_every") or tc.checkpoint_every)
    state = TrainState.create(tc)

    def checkpoint(s, _losses):
        if every and s.step % every == 0:
            s.bundle.save(out / "checkpoints" / f"step_{s.step:06d}.pt")

    history = []
    try:
        _, history = train(tc, train_set, state, callback=lambda s, l: (history.append(l), checkpoint(s, l)))
    except NumericError:
        _write_history(out, history)
        _finish(manifest, out, status="numeric_failure")
        raise
    state.bundle.save(out / "model.pt")
    _write_history(out, history)
    plot_training(history, out / "figures" / "training.png")
    last = history[-1]
    log.info("trained %d steps: L_d=%s L_RE=%s", tc.iterations, fmt(last.L_d), fmt(last.L_RE))
    _finish(manifest, out)
    return manifest


def _write_history(out: Path, history) -> None:
    if not history:
        return
    rows = [{"step": i + 1, **{k: repr(v) if isinstance(v, float) else v for k, v in h.to_dict().items()}}
            for i, h in enumerate(history)]
    _write_text(out / "history.csv", _csv(rows, rows[0].keys()))


def run_embed(cfg: dict, opts: dict, out) -> RunManifest:
    bundle = _load_bundle(opts["checkpoint"], cfg, opts.get("strict", False))
    side = bundle.config.side
    suffix = "." + opts.get("format", "png").lstrip(".").lower()
    if suffix in {".jpg", ".jpeg"} and not opts.get("allow_lossy"):
        raise ConfigError("refusing to write lossy output; pass --allow-lossy to override")
    payload = _payload(opts, cfg, bundle.config.message_length)
    images = _input_images(opts["input"], side, opts.get("center_crop", False))
    out = _prepare_output(out)
    manifest = RunManifest("embed", cfg, cfg["seed"], args=opts,
                           inputs={"images": len(images)}, fingerprints={"model": bundle.fingerprint})
    x_w = embed_batch(bundle, images.images, payload)
    rows = []
    for name, x, xw in zip(images.ids, images.images, x_w):
        target = out / "images" / (Path(name).stem + suffix)
        save_image(xw, target, allow_lossy=opts.get("allow_lossy", False))
        rows.append({"image_id": name, "output": str(target.relative_to(out)),
                     "psnr": fmt(psnr(xw, x)), "ssim": fmt(ssim(xw, x)) if side >= 11 else ""})
    _write_text(out / "embed.csv", _csv(rows, ["image_id", "output", "psnr", "ssim"]))
    mean = sum(psnr(a, b) for a, b in zip(x_w, images.images)) / max(len(rows), 1)
    log.info("embedded %d images, mean PSNR %s dB", len(rows), fmt(mean))
    _finish(manifest, out)
    return manifest


VERIFY_COLUMNS = ("image_id", "matched_bits", "total_bits", "bra", "decision", "threshold", "plaintext_recovered")


def run_verify(cfg: dict, opts: dict, out) -> RunManifest:
    bundle = _load_bundle(opts["checkpoint"], cfg, opts.get("strict", False))
    payload = _payload(opts, cfg, bundle.config.message_length)
    tau = float(opts.get("threshold") or cfg["evaluation"]["threshold"])
    images = _input_images(opts["input"], bundle.config.side, opts.get("center_crop", False))
    out = _prepare_output(out)
    manifest = RunManifest("verify", cfg, cfg["seed"], args=opts,
                           inputs={"images": len(images)}, fingerprints={"model": bundle.fingerprint})
    probs = decode_batch(bundle, images.images)
    embedded = payload.embedded
    rows = []
    for name, p in zip(images.ids, probs):
        recovered = BitString(tuple(int(v >= 0.5) for v in p.tolist()))
        report = bit_recovery_accuracy(embedded, recovered, tau)
        plain = ""
        if payload.key is not None and len(embedded) % 64 == 0:
            plain = str(decrypt_payload(recovered, payload.key) == payload.message)
        rows.append({"image_id": name, "matched_bits": report.matched_bits, "total_bits": report.total_bits,
                     "bra": fmt(report.bra), "decision": report.decision.value, "threshold": fmt(tau),
                     "plaintext_recovered": plain})
    _write_text(out / "verify.csv", _csv(rows, VERIFY_COLUMNS))
    flagged = sum(r["decision"] == "watermarked" for r in rows)
    log.info("%d of %d images verified as watermarked", flagged, len(rows))
    _finish(manifest, out)
    return manifest


def _eval_images(cfg: dict, opts: dict, side: int) -> ImageSet:
    if opts.get("input"):
        images = _input_images(opts["input"], side, opts.get("center_crop", False))
    else:
        _, images = _dataset_splits(cfg, side)
    cap = cfg["evaluation"].get("max_images")
    if cap is not None and len(images) > cap:
        images = images.subset(range(int(cap)))
    if len(images) == 0:
        raise ConfigError("no evaluation images")
    return images


def _vae(cfg: dict, side: int, params: dict) -> atk.ConvVAE:
    if params.get("checkpoint"):
        return atk.ConvVAE.load(params["checkpoint"], side)
    train_set, _ = _dataset_splits(cfg, side)
    spec = {"dataset": cfg["dataset"], "side": side, "seed": cfg["seed"],
            **{k: params[k] for k in ("train_steps", "latent_dim") if k in params}}
    path = cache_dir() / f"vae-{config_digest(spec)}.pt"
    if path.exists():
        return atk.ConvVAE.load(path, side)
    log.info("training the regeneration VAE (%s steps); cached at %s", params.get("train_steps", 5000), path)
    vae, _ = atk.train_vae(train_set.images, steps=int(params.get("train_steps", 5000)),
                           latent_dim=int(params.get("latent_dim", 64)), seed=cfg["seed"])
    vae.save(path)
    return vae


def build_attacks(cfg: dict, names, bundle: ModelBundle) -> dict:
    """Map attack label to ``fn(x_w, bits) -> AttackOutcome``."""
    side = bundle.config.side
    tau = float(cfg["evaluation"]["threshold"])
    dec = bundle.decoder
    table = {}
    for name in names:
        params = {**DEFAULT_ATTACKS.get(name, {}), **(cfg["attacks"].get(name) or {})}
        spec = atk.AttackSpec(name, params)
        if name == "fgsm":
            fn = lambda xw, b, p=params: atk.fgsm_attack(xw, dec, b, p["epsilon"], tau)  # noqa: E731
        elif name == "cw":
            fn = lambda xw, b, p=params: atk.cw_attack(xw, dec, b, int(p["steps"]), float(p["c"]),  # noqa: E731
                                                     float(p["lr"]), float(p.get("confidence", 0.0)), tau)
        elif name == "bpda_eot":
            fn = lambda xw, b, p=params: atk.bpda_eot_attack(  # noqa: E731
                xw, dec, b, None, int(p["steps"]), int(p["k_samples"]), float(p["step_size"]),
                p.get("epsilon"), p.get("backward", "identity"), cfg["seed"], tau)
        elif name == "vae_regen":
            vae = _vae(cfg, side, params)
            fn = lambda xw, b, p=params, v=vae: atk.vae_regen_attack(  # noqa: E731
                xw, dec, b, v, float(p["sigma"]), cfg["seed"], tau)
        elif name == "perturbation_transfer":
            continue
        else:
            raise ConfigError(f"unknown attack {name!r}")
        table[spec.label] = fn
    return table


def run_evaluate(cfg: dict, opts: dict, out) -> RunManifest:
    bundle = _load_bundle(opts["checkpoint"], cfg, opts.get("strict", False))
    ev = cfg["evaluation"]
    transforms = [EvalTransform.parse(t) for t in ev["transforms"]] if ev.get("transforms") else default_suite()
    payload = _payload(opts, cfg, bundle.config.message_length)
    images = _eval_images(cfg, opts, bundle.config.side)
    attack_fns = build_attacks(cfg, ev.get("attacks") or [], bundle)
    out = _prepare_output(out)
    manifest = RunManifest("evaluate", cfg, cfg["seed"], args=opts, inputs={"images": images.ids},
                           fingerprints={"model": bundle.fingerprint})
    manifest.args = {**opts, "transforms": [{"label": t.label, "kind": t.spec.kind, "params": t.spec.params}
                                            for t in transforms]}
    wrapped = [lambda xw, x, b, label=label, fn=fn: (label, {}, lambda: fn(xw, b).images)
               for label, fn in attack_fns.items()]
    records = run_robustness_suite(bundle, images, transforms, payload, float(ev["threshold"]),
                                   variant=bundle.fingerprint.get("variant", ""),
                                   dataset=opts.get("dataset_name", ""), workers=cfg["workers"], attacks=wrapped)
    write_report(out, records)
    tables = aggregate(records)
    plot_bra_bars(tables, out / "figures" / "bra.png", float(ev["threshold"]))
    failed = [r for r in records if r.error]
    _finish(manifest, out, status="ok" if not failed else "partial")
    if failed and len(failed) == len(records):
        raise NumericError("every evaluation trial failed", component="evaluate")
    for t in tables:
        log.info("%-40s BRA %s  detect %s", t.transform, fmt(t.mean_bra), fmt(t.detection_rate))
    return manifest


ATTACK_COLUMNS = ("attack", "image_id", "pre_bra", "post_bra", "flipped", "linf", "l2", "psnr")


def run_attack(cfg: dict, opts: dict, out) -> RunManifest:
    bundle = _load_bundle(opts["checkpoint"], cfg, opts.get("strict", False))
    names = opts.get("attacks") or list(cfg["attacks"])
    payload = _payload(opts, cfg, bundle.config.message_length)
    images = _eval_images(cfg, opts, bundle.config.side)
    fns = build_attacks(cfg, names, bundle)
    out = _prepare_output(out)
    manifest = RunManifest("attack", cfg, cfg["seed"], args=opts, inputs={"images": images.ids},
                           fingerprints={"model": bundle.fingerprint})
    x = images.images
    x_w = embed_batch(bundle, x, payload)
    bits = bits_tensor(payload.embedded, len(x))
    rows, summary = [], {}
    clean = atk.per_image_bra(bundle.decoder, x_w, bits)
    summary["no attack"] = sum(clean) / len(clean)
    for label, fn in fns.items():
        outcome = fn(x_w, bits)
        summary[label] = outcome.mean_post_bra
        manifest.timings[label] = outcome.wall_time
        for i, name in enumerate(images.ids):
            rows.append({"attack": label, "image_id": name, "pre_bra": fmt(outcome.pre_bra[i]),
                         "post_bra": fmt(outcome.post_bra[i]), "flipped": outcome.flipped[i],
                         "linf": fmt(outcome.linf[i]), "l2": fmt(outcome.l2[i]),
                         "psnr": fmt(psnr(outcome.images[i], x_w[i]))})
    lines = ["| attack | mean BRA | flip rate |", "|---|---|---|", f"| no attack | {fmt(summary['no attack'])} | |"]
    for label in fns:
        flips = [r["flipped"] for r in rows if r["attack"] == label]
        lines.append(f"| {label} | {fmt(summary[label])} | {fmt(sum(flips) / len(flips))} |")
    if "perturbation_transfer" in names:
        pairs = min(int((cfg["attacks"].get("perturbation_transfer") or {}).get("pairs", 50)), len(x) // 2)
        if pairs < 1:
            raise ConfigError("perturbation transfer needs at least two evaluation images")
        res = atk.perturbation_transfer_attack(x[:pairs], x_w[:pairs], x[pairs:2 * pairs], bundle.decoder,
                                               bits[:pairs])
        summary["attack:perturbation_transfer"] = res.mean_bra
        lines.append(f"| attack:perturbation_transfer | {fmt(res.mean_bra)} | |")
        for (d, r), b in zip(res.pairs, res.bra):
            rows.append({"attack": "attack:perturbation_transfer", "image_id": f"{images.ids[d]}->"
                         f"{images.ids[pairs + r]}", "pre_bra": fmt(clean[d]), "post_bra": fmt(b),
                         "flipped": "", "linf": "", "l2": "", "psnr": ""})
    _write_text(out / "attacks.csv", _csv(rows, ATTACK_COLUMNS))
    _write_text(out / "attacks.md", "\n".join(lines) + "\n")
    plot_attack_summary(summary, out / "figures" / "attacks.png")
    for label, value in summary.items():
        log.info("%-50s BRA %s", label, fmt(value))
    _finish(manifest, out)
    return manifest


RUNNERS = {"train": run_train, "embed": run_embed, "verify": run_verify,
           "evaluate": run_evaluate, "attack": run_attack}


def rerun(manifest_path, out) -> RunManifest:
    """Execute a recorded run again with the same config and options."""
    m = RunManifest.read(manifest_path)
    if m.command not in RUNNERS:
        raise ConfigError(f"manifest records unknown command {m.command!r}")
    opts = {k: v for k, v in m.args.items() if k != "transforms"}
    return RUNNERS[m.command](resolve_config(copy.deepcopy(m.config)), opts, out)


# ---------------------------------------------------------------------------
# argument parsing


def _overrides(cfg_path, args) -> dict:
    cfg = load_config(cfg_path) if cfg_path else resolve_config({})
    if args.seed is not None:
        cfg["seed"] = args.seed
        cfg["training"]["seed"] = args.seed
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be positive")
        cfg["workers"] = args.workers
    if getattr(args, "dataset", None):
        cfg["dataset"] = {"root": args.dataset, "center_crop": bool(getattr(args, "center_crop", False))}
    for flag in ("iterations", "variant", "batch_size"):
        value = getattr(args, flag, None)
        if value is not None:
            cfg["training"][flag] = value
    if getattr(args, "threshold", None) is not None:
        cfg["evaluation"]["threshold"] = args.threshold
    if getattr(args, "max_images", None) is not None:
        cfg["evaluation"]["max_images"] = args.max_images
    return resolve_config(cfg)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semimark", description=__doc__.split("\n")[0])
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--output", "-o", required=True, help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int, help="parallel workers; results are bit-exact only with 1")
        return p

    p = command("train", "train the watermarking networks")
    p.add_argument("--dataset", help="image directory (overrides the config dataset)")
    p.add_argument("--center-crop", action="store_true")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--variant", choices=("baseline", "benign_only", "benign_and_malicious"))
    p.add_argument("--checkpoint-every", type=int)

    def model_io(p, needs_input):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--key", help="file holding a 16-hex-digit DES key")
        p.add_argument("--message", help="file holding the message (hex or 0/1 digits)")
        p.add_argument("--input", required=needs_input, help="image directory")
        p.add_argument("--center-crop", action="store_true")
        p.add_argument("--strict", action="store_true", help="require the checkpoint to match --config")

    p = command("embed", "embed the encrypted message into every input image")
    model_io(p, True)
    p.add_argument("--format", default="png")
    p.add_argument("--allow-lossy", action="store_true", help="permit JPEG output")

    p = command("verify", "decode and check every input image")
    model_io(p, True)
    p.add_argument("--threshold", type=float)

    p = command("evaluate", "run the robustness suite")
    model_io(p, False)
    p.add_argument("--threshold", type=float)
    p.add_argument("--max-images", type=int)

    p = command("attack", "run watermark-removal attacks")
    model_io(p, False)
    p.add_argument("--attacks", nargs="+", choices=atk.ATTACK_KINDS)
    p.add_argument("--threshold", type=float)
    p.add_argument("--max-images", type=int)

    p = sub.add_parser("rerun", help="repeat a run from its manifest")
    p.add_argument("manifest")
    p.add_argument("--output", "-o", required=True)

    p = sub.add_parser("synth", help="write a synthetic face corpus with landmarks")
    p.add_argument("--output", "-o", required=True)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    return parser


OPTION_KEYS = ("checkpoint", "key", "message", "input", "center_crop", "strict", "format", "allow_lossy",
               "attacks", "checkpoint_every")


def _options(args) -> dict:
    opts = {}
    for k in OPTION_KEYS:
        v = getattr(args, k, None)
        if v is None or v is False:
            continue
        if k in {"checkpoint", "key", "message", "input"}:
            v = str(Path(v).resolve())
        opts[k] = v
    return opts


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "synth":
            root = write_synthetic_corpus(args.output, args.n, args.side, args.seed)
            log.info("wrote %d images to %s", args.n, root)
        elif args.command == "rerun":
            rerun(args.manifest, args.output)
        else:
            cfg = _overrides(args.config, args)
            RUNNERS[args.command](cfg, _options(args), args.output)
    except SemimarkError as exc:
        print(f"semimark: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
