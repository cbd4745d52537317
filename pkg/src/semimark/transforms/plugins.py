"""External manipulation tools run as subprocesses.

A plugin is an argv template containing ``{input}``, ``{output}`` and
optionally ``{args}``. It reads a PNG, writes a PNG of the same size, and
exits 0. Results are detached tensors: they never carry training gradients.
"""

from __future__ import annotations

import shlex
import subprocess
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from PIL import Image

from ..errors import PluginNotFound, PluginOutputError
from .jpeg import from_uint8, to_uint8

BUILTIN_PLUGINS: dict[str, list[str]] = {
    "echo": [sys.executable, "-m", "semimark.plugins.echo", "{input}", "{output}", "{args}"],
    "shuffle": [sys.executable, "-m", "semimark.plugins.shuffle", "{input}", "{output}", "{args}"],
}


def resolve_plugin(plugin_id: str, registry: Mapping[str, Sequence[str] | str] | None = None) -> list[str]:
    table = {**BUILTIN_PLUGINS, **(registry or {})}
    if plugin_id not in table:
        raise PluginNotFound(f"no plugin registered as {plugin_id!r}")
    argv = table[plugin_id]
    return shlex.split(argv) if isinstance(argv, str) else list(argv)


def _run_one(img: torch.Tensor, argv: list[str], args: str, timeout: float, plugin_id: str) -> torch.Tensor:
    with tempfile.TemporaryDirectory(prefix="semimark-plugin-") as tmp:
        src, dst = Path(tmp) / "input.png", Path(tmp) / "output.png"
        Image.fromarray(to_uint8(img)).save(src)
        cmd = [a.format(input=src, output=dst, args=args) for a in argv]
        cmd = [c for c in cmd if c != ""]
        try:
            proc = subprocess.run(cmd, capture_output=True, timeout=timeout, text=True)
        except subprocess.TimeoutExpired as exc:
            raise PluginOutputError(f"plugin {plugin_id} timed out after {timeout}s") from exc
        except OSError as exc:
            raise PluginNotFound(f"plugin {plugin_id} could not start: {exc}") from exc
        if proc.returncode != 0:
            raise PluginOutputError(f"plugin {plugin_id} exited {proc.returncode}: {proc.stderr.strip()[-500:]}")
        if not dst.exists():
            raise PluginOutputError(f"plugin {plugin_id} wrote no output image")
        try:
            arr = np.array(Image.open(dst).convert("RGB"))
        except Exception as exc:
            raise PluginOutputError(f"plugin {plugin_id} wrote an unreadable image: {exc}") from exc
    if arr.shape[:2] != tuple(img.shape[-2:]):
        raise PluginOutputError(f"plugin {plugin_id} returned {arr.shape[1]}x{arr.shape[0]}, "
                                f"expected {img.shape[-1]}x{img.shape[-2]}")
    return from_uint8(arr, like=img)


def apply_external_manipulation(x_w: torch.Tensor, plugin_id: str, plugin_args: str = "",
                                registry=None, timeout: float = 120.0, workers: int = 1) -> torch.Tensor:
    argv = resolve_plugin(plugin_id, registry)
    batch = x_w.detach()
    single = batch.dim() == 3
    if single:
        batch = batch.unsqueeze(0)
    run = lambda img: _run_one(img, argv, plugin_args, timeout, plugin_id)  # noqa: E731
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(run, batch))
    else:
        outs = [run(img) for img in batch]
    out = torch.stack(outs)
    return out[0] if single else out
