"""Approximate social-media colour filters for evaluation only.

Each filter is a 3x3 colour matrix, a per-channel offset and a gamma curve.
They loosely imitate the look of the Aden, Brooklyn and Clarendon presets;
they are not pixel-exact reproductions and are never used in training.
"""

from __future__ import annotations

import torch

from ..errors import ConfigError

# (matrix rows, offset, gamma)
FILTERS = {
    "aden": (((0.92, 0.06, 0.02), (0.04, 0.90, 0.06), (0.06, 0.10, 0.84)), (0.06, 0.04, 0.06), 0.92),
    "brooklyn": (((0.95, 0.05, 0.00), (0.03, 0.97, 0.00), (0.00, 0.08, 0.92)), (0.04, 0.06, 0.05), 0.88),
    "clarendon": (((1.18, -0.12, -0.06), (-0.06, 1.12, -0.06), (-0.08, -0.04, 1.22)), (-0.04, -0.02, 0.02), 1.10),
}


def apply_filter(x: torch.Tensor, name: str) -> torch.Tensor:
    if name not in FILTERS:
        raise ConfigError(f"unknown filter {name!r}; known: {sorted(FILTERS)}")
    matrix, offset, gamma = FILTERS[name]
    m = torch.tensor(matrix, dtype=x.dtype, device=x.device)
    b = torch.tensor(offset, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
    out = torch.einsum("oc,nchw->nohw", m, x) + b
    return torch.clamp(out, 0.0, 1.0) ** gamma


def apply_filter_stack(x: torch.Tensor, names) -> torch.Tensor:
    """Apply filters left to right, e.g. ``["aden", "brooklyn"]``."""
    for name in names:
        x = apply_filter(x, name)
    return x
