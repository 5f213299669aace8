"""Pixel-level preprocessing: normalization, resizing and augmentation."""

from __future__ import annotations

import numpy as np

from ..errors import ParameterError, ShapeError

AUGMENT_OPS = ("rot90", "rot180", "rot270", "flip_h", "flip_v", "flip_h_rot90", "contrast")
CONTRAST_PERCENTILES = (2.0, 98.0)


def normalize(image, dtype=np.float32):
    """Map 8-bit pixel values to ``[0, 1]``."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise ShapeError(f"normalize expects uint8 pixels, got {image.dtype}")
    return (image / np.float64(255.0)).astype(dtype)


def to_uint8(t):
    return np.clip(np.rint(np.asarray(t, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def _axis_samples(n_in, n_out):
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    i0 = np.floor(pos).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, pos - i0


def resize_bilinear(t, out_h, out_w):
    """Bilinear resize of an ``[H, W, C]`` tensor (pixel-centre aligned)."""
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"target size must be positive, got {out_h}x{out_w}")
    t = np.asarray(t)
    if t.ndim != 3:
        raise ShapeError(f"resize expects [H,W,C], got {t.shape}")
    dt = t.dtype if t.dtype.kind == "f" else np.float32
    y0, y1, fy = _axis_samples(t.shape[0], out_h)
    x0, x1, fx = _axis_samples(t.shape[1], out_w)
    fy = fy.astype(dt)[:, None, None]
    fx = fx.astype(dt)[None, :, None]
    top = t[y0].astype(dt, copy=False)
    bot = t[y1].astype(dt, copy=False)
    rows = top + (bot - top) * fy
    left = rows[:, x0]
    right = rows[:, x1]
    return left + (right - left) * fx


def contrast_stretch(t, percentiles=CONTRAST_PERCENTILES):
    """Per-channel linear stretch of the low/high percentiles onto 0/1."""
    t = np.asarray(t)
    out = np.empty(t.shape, dtype=t.dtype if t.dtype.kind == "f" else np.float32)
    for c in range(t.shape[-1]):
        ch = t[..., c].astype(np.float64)
        lo, hi = np.percentile(ch, percentiles)
        if hi - lo <= 1e-12:
            out[..., c] = ch
        else:
            out[..., c] = np.clip((ch - lo) / (hi - lo), 0.0, 1.0)
    return out


def augment(t, op):
    """Apply one augmentation to an ``[H, W, C]`` array.

    Geometric ops work on any dtype; rotations are clockwise, i.e. ``rot90``
    maps ``in[i, j]`` to ``out[j, H-1-i]``.
    """
    t = np.asarray(t)
    if op == "rot90":
        return np.ascontiguousarray(np.rot90(t, k=-1))
    if op == "rot180":
        return np.ascontiguousarray(t[::-1, ::-1])
    if op == "rot270":
        return np.ascontiguousarray(np.rot90(t, k=1))
    if op == "flip_h":
        return np.ascontiguousarray(t[:, ::-1])
    if op == "flip_v":
        return np.ascontiguousarray(t[::-1])
    if op == "flip_h_rot90":
        return augment(augment(t, "flip_h"), "rot90")
    if op == "contrast":
        if t.dtype == np.uint8:
            return to_uint8(contrast_stretch(normalize(t)))
        return contrast_stretch(t)
    raise ParameterError(f"unknown augmentation {op!r}; choose from {', '.join(AUGMENT_OPS)}")


def prepare(image, size):
    """uint8 image -> normalized float32 tensor at ``size x size``."""
    t = normalize(image)
    if t.shape[:2] == (size, size):
        return t
    return resize_bilinear(t, size, size).astype(np.float32)
