"""Raster images of particle clouds as binary PPM (P6).

P6 is a plain header (``P6 <width> <height> 255``) followed by 8-bit RGB
triples row by row from the top; every common image viewer reads it.
Each particle is splatted as a filled axis-aligned rectangle of its
current domain size at its current position.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import MPMError

WHITE = (255, 255, 255)
BACKGROUND = (255, 255, 255)


class RenderError(MPMError):
    pass


def hex_rgb(color: str):
    c = color.lstrip("#")
    if len(c) != 6:
        raise ValueError(f"bad colour {color!r}")
    return tuple(int(c[i:i + 2], 16) for i in (0, 2, 4))


def linear_map(values, lo=None, hi=None, c0=(255, 255, 255), c1=(20, 20, 20)):
    """Colours interpolated linearly between ``c0`` at ``lo`` and ``c1`` at ``hi``."""
    v = np.asarray(values, dtype=float)
    lo = float(np.min(v)) if lo is None else lo
    hi = float(np.max(v)) if hi is None else hi
    t = np.clip((v - lo) / (hi - lo), 0.0, 1.0) if hi > lo else np.zeros_like(v)
    c0, c1 = np.asarray(c0, float), np.asarray(c1, float)
    return np.rint(c0 + t[:, None] * (c1 - c0)).astype(np.uint8)


def diverging_map(values, limit=None):
    """Blue below zero, white at zero, red above; symmetric about zero."""
    v = np.asarray(values, dtype=float)
    limit = float(np.max(np.abs(v))) if limit is None else limit
    t = np.clip(v / limit, -1.0, 1.0) if limit > 0 else np.zeros_like(v)
    out = np.empty((v.size, 3))
    blue, red, white = np.array([40, 60, 200]), np.array([200, 40, 40]), np.array(WHITE, float)
    neg = t < 0
    out[neg] = white + (-t[neg])[:, None] * (blue - white)
    out[~neg] = white + t[~neg][:, None] * (red - white)
    return np.rint(out).astype(np.uint8)


def material_colors(fractions, colors, void_index=None):
    """Colour of the dominant material per particle (void drawn white)."""
    idx = np.argmax(np.asarray(fractions).reshape(len(fractions), -1), axis=1)
    table = np.array([hex_rgb(c) for c in colors], dtype=np.uint8)
    if void_index is not None:
        table[void_index] = WHITE
    return table[idx]


def rasterize(x, l, rgb, width=800, bounds=None, margin=0.05):
    """Image array (H, W, 3) with particles drawn in index order."""
    x = np.asarray(x, dtype=float)
    l = np.asarray(l, dtype=float)
    if bounds is None:
        lo = (x - 0.5 * l).min(axis=0)
        hi = (x + 0.5 * l).max(axis=0)
        pad = margin * (hi - lo).max()
        lo, hi = lo - pad, hi + pad
    else:
        lo, hi = np.asarray(bounds[:2], float), np.asarray(bounds[2:], float)
    span = hi - lo
    scale = width / span[0]
    height = max(1, int(round(span[1] * scale)))
    img = np.empty((height, width, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    x0 = np.floor((x[:, 0] - 0.5 * l[:, 0] - lo[0]) * scale).astype(int)
    x1 = np.ceil((x[:, 0] + 0.5 * l[:, 0] - lo[0]) * scale).astype(int)
    # image rows run top to bottom
    y0 = np.floor((hi[1] - x[:, 1] - 0.5 * l[:, 1]) * scale).astype(int)
    y1 = np.ceil((hi[1] - x[:, 1] + 0.5 * l[:, 1]) * scale).astype(int)
    x0, x1 = np.clip(x0, 0, width), np.clip(x1, 0, width)
    y0, y1 = np.clip(y0, 0, height), np.clip(y1, 0, height)
    for i in range(len(x)):
        img[y0[i]:max(y1[i], y0[i] + 1), x0[i]:max(x1[i], x0[i] + 1)] = rgb[i]
    return img


def write_ppm(path, img):
    path = Path(path)
    h, w, _ = img.shape
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(f"P6 {w} {h} 255\n".encode("ascii"))
            fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())
    except OSError as exc:
        raise RenderError(f"cannot write image {path}: {exc.strerror}") from exc
    return path


def read_ppm(path):
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise RenderError(f"{path} is not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise RenderError("only 8-bit PPM is supported")
    pix = np.frombuffer(parts[4], dtype=np.uint8, count=w * h * 3)
    return pix.reshape(h, w, 3)


def render_field(x, l, values, out_path, width=800, mode="linear", colors=None,
                 void_index=None, bounds=None, lo=None, hi=None):
    """Render per-particle ``values`` and write a PPM.

    ``mode`` is ``linear`` (e.g. pseudodensity), ``diverging`` (stress) or
    ``material`` (``values`` are volume fractions, ``colors`` per material).
    """
    if mode == "linear":
        rgb = linear_map(values, lo, hi)
    elif mode == "diverging":
        rgb = diverging_map(values, hi)
    elif mode == "material":
        if colors is None:
            raise ValueError("material rendering needs one colour per material")
        rgb = material_colors(values, colors, void_index)
    else:
        raise ValueError(f"unknown render mode {mode!r}")
    img = rasterize(x, l, rgb, width, bounds)
    return write_ppm(out_path, img)
