"""B-mode background with per-patch benign/cancer overlay, written as binary PPM."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from .data import BiopsyCore, extract_patches, window_grid
from .nn import ModelState
from .rf_signal import analytic_signal
from .train import cancer_probability

log = logging.getLogger(__name__)

BLUE = np.array([0.0, 0.0, 255.0])
RED = np.array([255.0, 0.0, 0.0])


def bmode(frame: np.ndarray, dynamic_range_db: float = 60.0) -> np.ndarray:
    """Log-compressed envelope mapped to [0, 255] gray levels."""
    env = np.abs(analytic_signal(frame, axis=0))
    peak = env.max()
    if peak == 0:
        return np.zeros(frame.shape)
    db = 20 * np.log10(np.maximum(env / peak, 1e-12))
    return (np.clip(db, -dynamic_range_db, 0) + dynamic_range_db) / dynamic_range_db * 255


def composite(
    background: np.ndarray, windows: list[tuple[int, int, int, int]], classes: list[int], alpha: float = 0.5
) -> np.ndarray:
    """Blend the averaged class color of overlapping windows over a gray image.

    Returns a float ``H x W x 3`` image in [0, 255].
    """
    rgb = np.repeat(background[:, :, None], 3, axis=2).astype(np.float64)
    acc = np.zeros(background.shape)
    cnt = np.zeros(background.shape)
    for (top, left, wh, ww), c in zip(windows, classes):
        acc[top : top + wh, left : left + ww] += c
        cnt[top : top + wh, left : left + ww] += 1
    hit = cnt > 0
    frac = np.zeros(background.shape)
    frac[hit] = acc[hit] / cnt[hit]
    color = frac[:, :, None] * RED + (1 - frac[:, :, None]) * BLUE
    rgb[hit] = (1 - alpha) * rgb[hit] + alpha * color[hit]
    return rgb


def to_ppm(rgb: np.ndarray) -> bytes:
    img = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode() + img.tobytes()


def read_ppm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM image")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def _physical_resample(img: np.ndarray, core: BiopsyCore, px_per_mm: float) -> np.ndarray:
    f = core.frame
    out_h = max(1, int(round(f.axial_extent_mm * px_per_mm)))
    out_w = max(1, int(round(f.lateral_extent_mm * px_per_mm)))
    rows = np.minimum((np.arange(out_h) + 0.5) * f.axial_count / out_h, f.axial_count - 1).astype(int)
    cols = np.minimum((np.arange(out_w) + 0.5) * f.lateral_count / out_w, f.lateral_count - 1).astype(int)
    return img[rows][:, cols]


def render_heatmap(
    model: ModelState,
    core: BiopsyCore,
    stride_mm: float = 1.0,
    threshold: float = 0.5,
    px_per_mm: float = 10.0,
    alpha: float = 0.5,
    **extract_kw,
) -> bytes:
    """Render one core: B-mode background, blue/red overlay inside needle and prostate."""
    size = model.arch.input_size
    windows = window_grid(core, "needle", stride_mm=stride_mm, **extract_kw)
    classes: list[int] = []
    if windows:
        recs = extract_patches(core, "needle", stride_mm=stride_mm, patch_size=size, **extract_kw)
        probs = cancer_probability(model, np.stack([r.patch for r in recs]))
        classes = [int(p >= threshold) for p in probs]
    else:
        log.warning("core %s: empty needle region, rendering background only", core.core_id)
    rgb = composite(bmode(core.frame.samples), windows, classes, alpha)
    return to_ppm(_physical_resample(rgb, core, px_per_mm))


def write_heatmap(path, image: bytes) -> None:
    Path(path).write_bytes(image)
