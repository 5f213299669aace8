"""Synthetic fundus-image dataset with a planted demarcation-ridge feature.

Each (patient, eye) gets one latent retina rendered on a square canvas in
normalized coordinates (retina radius 1).  Every image of that eye is a view
of the latent retina through a circular field covering 170/200 of it, rotated
and off-centred differently per image, so images of one eye share evidence
but may each miss part of the periphery.  Positive eyes carry a bright arc
ridge in the periphery.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from ..errors import ParameterError
from .manifest import QUALITY_DIMS, ImageRecord, Manifest, write_manifest
from .ppm import save_ppm
from .preprocess import to_uint8

LATENT_SIZE = 384
FIELD_FRACTION = 170 / 200


def _polar_grid(size):
    c = (np.arange(size, dtype=np.float32) + 0.5) / size * 2 - 1
    v, u = np.meshgrid(c, c, indexing="ij")
    return u, v, np.hypot(u, v), np.arctan2(v, u)


def _stamp_disc(mask, cy, cx, radius):
    size = mask.shape[0]
    y0, y1 = max(int(cy - radius - 1), 0), min(int(cy + radius + 2), size)
    x0, x1 = max(int(cx - radius - 1), 0), min(int(cx + radius + 2), size)
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.ogrid[y0:y1, x0:x1]
    hit = (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= radius * radius
    mask[y0:y1, x0:x1] |= hit


def latent_eye(rng, positive, size=LATENT_SIZE):
    """Render one latent retina as float32 ``[size, size, 3]`` in [0, 1]."""
    u, v, r, theta = _polar_grid(size)
    base = np.array([0.78, 0.36, 0.18]) + rng.normal(0, [0.05, 0.04, 0.03])
    img = base[None, None, :] * (1 - 0.4 * r[..., None] ** 2)
    # low-frequency choroidal texture
    for _ in range(4):
        k = rng.uniform(2, 6, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        img *= (1 + 0.04 * np.sin(k[0] * u + k[1] * v + phase))[..., None]

    disc_angle = rng.uniform(0, 2 * np.pi)
    disc_r = rng.uniform(0.2, 0.32)
    dc = np.array([disc_r * math.cos(disc_angle), disc_r * math.sin(disc_angle)])
    disc_size = rng.uniform(0.08, 0.11)
    d2 = ((u - dc[0]) ** 2 + (v - dc[1]) ** 2) / disc_size ** 2
    img += (np.exp(-d2 ** 2) * 0.45)[..., None] * np.array([1.0, 0.85, 0.55])

    vessels = np.zeros((size, size), dtype=bool)
    scale = size / 2
    for _ in range(rng.integers(8, 13)):
        pos = dc.copy()
        heading = rng.uniform(0, 2 * np.pi)
        width = rng.uniform(0.009, 0.016)
        for _ in range(220):
            outward = math.atan2(pos[1], pos[0])
            heading += rng.normal(0, 0.25) + 0.08 * math.sin(outward - heading)
            pos += 0.012 * np.array([math.cos(heading), math.sin(heading)])
            if np.hypot(*pos) > 0.99:
                break
            _stamp_disc(vessels, (pos[1] + 1) * scale, (pos[0] + 1) * scale, max(width * scale, 1.0))
            width = max(width * 0.993, 0.004)
    img[vessels] *= np.array([0.62, 0.38, 0.40])

    if positive:
        ridge_r = rng.uniform(0.65, 0.84)
        centre = rng.uniform(-np.pi, np.pi)
        half_span = rng.uniform(np.radians(70), np.radians(120))
        thickness = rng.uniform(0.035, 0.05)
        strength = rng.uniform(0.6, 0.75)
        dtheta = np.angle(np.exp(1j * (theta - centre)))
        along = np.clip((half_span - np.abs(dtheta)) / np.radians(10), 0, 1)
        across = np.exp(-0.5 * ((r - ridge_r) / thickness) ** 2)
        img += (strength * along * across)[..., None] * np.array([1.0, 0.95, 0.85])

    img[r > 1] = 0
    return np.clip(img, 0, 1).astype(np.float32)


def _bilinear_sample(canvas, py, px):
    size = canvas.shape[0]
    py = np.clip(py, 0, size - 1)
    px = np.clip(px, 0, size - 1)
    y0 = np.floor(py).astype(np.intp)
    x0 = np.floor(px).astype(np.intp)
    y1 = np.minimum(y0 + 1, size - 1)
    x1 = np.minimum(x0 + 1, size - 1)
    fy = (py - y0)[..., None]
    fx = (px - x0)[..., None]
    top = canvas[y0, x0] + (canvas[y0, x1] - canvas[y0, x0]) * fx
    bot = canvas[y1, x0] + (canvas[y1, x1] - canvas[y1, x0]) * fx
    return top + (bot - top) * fy


def render_view(latent, height, width, rotation, offset):
    """View of ``latent`` through the camera field, as float32 ``[H, W, 3]``.

    The field circle is inscribed in the frame; ``rotation`` (radians) and
    ``offset`` (centre of the field in retina coordinates) select the window.
    """
    radius = height / 2
    ys = (np.arange(height, dtype=np.float32) + 0.5 - height / 2) / radius
    xs = (np.arange(width, dtype=np.float32) + 0.5 - width / 2) / radius
    q, p = np.meshgrid(ys, xs, indexing="ij")
    inside = p * p + q * q <= 1
    c, s = math.cos(rotation), math.sin(rotation)
    u = FIELD_FRACTION * (c * p - s * q) + offset[0]
    v = FIELD_FRACTION * (s * p + c * q) + offset[1]
    size = latent.shape[0]
    out = _bilinear_sample(latent, (v + 1) * size / 2 - 0.5, (u + 1) * size / 2 - 0.5)
    out[~inside] = 0
    return out


def _finish(view, quality, rng):
    view = view * rng.uniform(0.85, 1.1) + rng.normal(0, 0.015, view.shape).astype(np.float32)
    if quality == "low":
        # simplified colour: 3 bits per channel, half-resolution sensor
        view = np.round(np.clip(view, 0, 1) * 7) / 7
        return to_uint8(view).repeat(2, axis=0).repeat(2, axis=1)
    return to_uint8(view)


def synth_generate(n_patients, images_per_eye, positive_rate, quality_mix, seed, out_dir,
                   manifest_name="manifest.csv"):
    """Generate images plus ``manifest.csv`` under ``out_dir``.

    ``positive_rate`` is the per-eye probability of ROP; ``quality_mix`` the
    per-image probability of the low-quality (1200x1600, 3-bit) tier.
    """
    if n_patients < 1 or images_per_eye < 1:
        raise ParameterError("n_patients and images_per_eye must be >= 1")
    if not 0 <= positive_rate <= 1 or not 0 <= quality_mix <= 1:
        raise ParameterError("positive_rate and quality_mix must lie in [0, 1]")
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for pi in range(n_patients):
        pid = f"P{pi + 1:04d}"
        for ei, eye in enumerate(("L", "R")):
            rng = np.random.default_rng([seed, pi, ei])
            positive = bool(rng.random() < positive_rate)
            latent = latent_eye(rng, positive)
            first = rng.uniform(0, 2 * np.pi)
            for k in range(images_per_eye):
                irng = np.random.default_rng([seed, pi, ei, k])
                quality = "low" if irng.random() < quality_mix else "high"
                h, w = QUALITY_DIMS[quality]
                direction = first + 2 * np.pi * k / images_per_eye + irng.normal(0, 0.4)
                shift = irng.uniform(0.1, 0.22)
                offset = (shift * math.cos(direction), shift * math.sin(direction))
                if quality == "low":
                    h, w = h // 2, w // 2
                view = render_view(latent, h, w, irng.normal(0, 0.2), offset)
                path = (img_dir / f"{pid}_{eye}_{k}.ppm").resolve()
                save_ppm(_finish(view, quality, irng), path)
                records.append(ImageRecord(path, pid, eye, int(positive), quality, "unassigned"))
    manifest = Manifest(records, provenance="synthetic", source=f"synth(seed={seed})")
    write_manifest(manifest, out_dir / manifest_name)
    return manifest
