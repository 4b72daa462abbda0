"""Image files: 8-bit PNG for viewing, float32 raw sidecar for measurement.

Sidecar layout: one line of JSON (``{"width", "height", "channels"}``)
terminated by ``\\n``, then little-endian float32 pixels, row-major,
channels interleaved.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image


def write_float_image(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype="<f4")
    if img.ndim == 2:
        img = img[..., None]
    h, w, c = img.shape
    header = json.dumps({"width": w, "height": h, "channels": c}).encode()
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(np.ascontiguousarray(img).tobytes())


def read_float_image(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    cut = raw.index(b"\n")
    meta = json.loads(raw[:cut])
    img = np.frombuffer(raw[cut + 1 :], dtype="<f4").reshape(meta["height"], meta["width"], meta["channels"])
    img = img.astype(np.float32)
    return img[..., 0] if meta["channels"] == 1 else img


def write_png(path, image: np.ndarray) -> None:
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(img * 255).astype(np.uint8)).save(path)


def colormap(values: np.ndarray, vmin=None, vmax=None) -> np.ndarray:
    """Scalar map -> RGB using a small piecewise-linear 'inferno'-like ramp."""
    v = np.asarray(values, dtype=np.float64)
    lo = np.nanmin(v) if vmin is None else vmin
    hi = np.nanmax(v) if vmax is None else vmax
    s = np.clip((v - lo) / max(hi - lo, 1e-12), 0.0, 1.0)
    stops = np.array([[0.0, 0.0, 0.02], [0.34, 0.06, 0.43], [0.73, 0.21, 0.33], [0.98, 0.55, 0.04], [0.99, 1.0, 0.64]])
    pos = s * (len(stops) - 1)
    i = np.minimum(pos.astype(int), len(stops) - 2)
    f = (pos - i)[..., None]
    return stops[i] * (1 - f) + stops[i + 1] * f


def save_image_pair(stem, image: np.ndarray) -> None:
    """``stem.png`` + ``stem.f32``; scalar maps get a colormapped PNG."""
    stem = Path(stem)
    write_float_image(stem.with_suffix(".f32"), image)
    write_png(stem.with_suffix(".png"), image if np.ndim(image) == 3 else colormap(image))
