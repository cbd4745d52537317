"""Semi-fragile neural image watermarking.

A U-Net encoder hides an encrypted bit string in a face image; the decoder
recovers it after benign processing but not after face manipulation.
"""

from importlib import metadata

try:
    __version__ = metadata.version("artifact")
except metadata.PackageNotFoundError:  # pragma: no cover - source checkout without install
    __version__ = "0+unknown"
