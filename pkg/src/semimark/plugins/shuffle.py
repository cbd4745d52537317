"""Scramble the pixels of the central face region.

Usage: ``python -m semimark.plugins.shuffle IN OUT [box=x0,y0,x1,y1] [seed=N]``

The box is given in fractions of the image size and defaults to the region
spanning the canonical eyes, nose and lips.
"""

import sys

import numpy as np
from PIL import Image


def main(argv):
    src, dst, *rest = argv
    opts = dict(item.split("=", 1) for arg in rest for item in arg.split() if "=" in item)
    box = [float(v) for v in opts.get("box", "0.2,0.25,0.8,0.9").split(",")]
    rng = np.random.default_rng(int(opts.get("seed", 0)))
    img = np.array(Image.open(src).convert("RGB"))
    h, w = img.shape[:2]
    x0, y0, x1, y1 = int(box[0] * w), int(box[1] * h), int(round(box[2] * w)), int(round(box[3] * h))
    region = img[y0:y1, x0:x1].reshape(-1, 3)
    img[y0:y1, x0:x1] = region[rng.permutation(len(region))].reshape(y1 - y0, x1 - x0, 3)
    Image.fromarray(img).save(dst)


if __name__ == "__main__":
    main(sys.argv[1:])
