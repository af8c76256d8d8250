"""Overlay rendering for visual inspection of anomaly maps."""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ValidationError
from .features import atomic_write_bytes
from .scorer import read_anomaly_map


def _ramp_rgb(t: np.ndarray) -> np.ndarray:
    """Linear cold-to-hot ramp: blue at 0 through red at 1."""
    r = np.clip(255.0 * t, 0, 255)
    g = np.clip(96.0 * t, 0, 255)
    b = np.clip(255.0 * (1.0 - t), 0, 255)
    return np.stack([r, g, b], axis=-1)


def render_overlay(
    anomaly_map: np.ndarray, image: np.ndarray, threshold: float | None = None
) -> np.ndarray:
    """Heatmap blend next to the thresholded mask, as one uint8 RGB array.

    The blend alpha scales with the score, so a zero map reproduces the
    input image exactly.  Without an explicit threshold, half the map
    maximum is used for the side-by-side mask.
    """
    scores = np.asarray(anomaly_map, dtype=np.float64)
    rgb = np.asarray(image, dtype=np.float64)
    if rgb.ndim == 2:
        rgb = np.repeat(rgb[:, :, None], 3, axis=2)
    if rgb.shape[:2] != scores.shape:
        raise ValidationError(f"image {rgb.shape[:2]} and map {scores.shape} dims differ")
    vmax = float(scores.max())
    t = scores / vmax if vmax > 0 else np.zeros_like(scores)
    alpha = (0.5 * t)[:, :, None]
    blended = rgb * (1.0 - alpha) + _ramp_rgb(t) * alpha
    if threshold is None:
        threshold = 0.5 * vmax
    mask = np.where(scores > threshold, 255.0, 0.0)
    mask_rgb = np.repeat(mask[:, :, None], 3, axis=2)
    side_by_side = np.concatenate([blended, mask_rgb], axis=1)
    return np.clip(np.rint(side_by_side), 0, 255).astype(np.uint8)


def cmd_overlay(
    map_path: str | Path,
    image_path: str | Path,
    out_path: str | Path,
    threshold: float | None = None,
) -> None:
    scores = read_anomaly_map(map_path)
    with Image.open(image_path) as img:
        pixels = np.asarray(img.convert("RGB"))
    rendered = render_overlay(scores, pixels, threshold=threshold)
    buf = io.BytesIO()
    Image.fromarray(rendered, mode="RGB").save(buf, format="PNG")
    atomic_write_bytes(out_path, buf.getvalue())
