"""
Grayscale panels (binary PGM) of dataset or prediction frames.

Each panel is min-max scaled on its own; the scale of every file goes to
scales.txt so pixel values can be mapped back to physical units.
"""
import logging
import os

import numpy as np
from PIL import Image

from errors import ConfigError

log = logging.getLogger(__name__)

SCALES_FILE = "scales.txt"


def to_gray(panel):
    """Return (uint8 image, lo, hi). A constant panel renders as all zeros."""
    panel = np.asarray(panel, dtype=np.float64)
    lo = float(panel.min())
    hi = float(panel.max())
    if hi > lo:
        pixels = np.rint((panel - lo) / (hi - lo) * 255.0)
    else:
        pixels = np.zeros_like(panel)
    return pixels.astype(np.uint8), lo, hi


def _pick(requested, n, what):
    if requested is None:
        return list(range(n))
    picked = [int(i) for i in requested]
    for i in picked:
        if not 0 <= i < n:
            raise ConfigError(f"{what} index {i} out of range (0..{n - 1})" if n else f"no {what}s to render")
    return picked


def render_dataset(ds, out_dir, frames=None, channels=None, prefix="frame"):
    """Write one PGM per (frame, dynamic channel); returns the written paths."""
    frames = _pick(frames, ds.n_frames, "frame")
    channels = _pick(channels, ds.n_dynamic, "channel")
    os.makedirs(out_dir, exist_ok=True)
    names = ds.dynamic_names
    paths = []
    scales = []
    for t in frames:
        for c in channels:
            pixels, lo, hi = to_gray(ds.dynamic[t, c])
            filename = f"{prefix}_{t:03d}_{names[c]}.pgm"
            path = os.path.join(out_dir, filename)
            Image.fromarray(pixels).save(path)
            paths.append(path)
            scales.append(f"{filename} min={lo:.9g} max={hi:.9g}")
    with open(os.path.join(out_dir, SCALES_FILE), "w", encoding="utf-8") as f:
        f.write("\n".join(scales) + "\n")
    log.info("Rendered %d panels into %s", len(paths), out_dir)
    return paths
