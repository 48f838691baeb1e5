"""Analytic-signal tools and RF patch augmentations.

Patches are 2D arrays with rows along the axial (depth) direction and one RF
line per column. Every augmentation here treats columns as independent RF
lines and applies the *same* random draw to all of them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

CATEGORIES = ("translate", "erase", "vflip", "hflip", "phase_shift", "envelope_distort")


# ---------------------------------------------------------------------------
# analytic signal
# ---------------------------------------------------------------------------


def _hilbert_weights(n: int) -> np.ndarray:
    h = np.zeros(n)
    h[0] = 1.0
    if n % 2 == 0:
        h[n // 2] = 1.0
        h[1 : n // 2] = 2.0
    else:
        h[1 : (n + 1) // 2] = 2.0
    return h


def analytic_signal(x: np.ndarray, axis: int = 0) -> np.ndarray:
    """Return the discrete analytic signal ``x + j H(x)`` along ``axis``.

    Uses the one-sided spectrum construction: DC and (for even length) the
    Nyquist bin are kept, positive frequencies are doubled and negative
    frequencies are zeroed.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        raise ValueError("analytic_signal needs at least one dimension")
    n = x.shape[axis]
    if n < 4:
        raise ValueError(f"RF line must have at least 4 samples, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("RF line contains non-finite samples")
    spec = np.fft.fft(x, axis=axis)
    shape = [1] * x.ndim
    shape[axis] = n
    return np.fft.ifft(spec * _hilbert_weights(n).reshape(shape), axis=axis)


@dataclass
class EnvelopePhase:
    envelope: np.ndarray
    phase: np.ndarray
    inst_frequency: np.ndarray


def envelope_and_phase(sa: np.ndarray, axis: int = 0) -> EnvelopePhase:
    """Split an analytic signal into envelope, unwrapped phase and its derivative.

    Phase is set to 0 wherever the modulus is exactly zero. Instantaneous
    frequency is in radians per sample.
    """
    sa = np.asarray(sa, dtype=np.complex128)
    env = np.abs(sa)
    raw = np.where(env > 0, np.angle(sa), 0.0)
    phase = np.unwrap(raw, axis=axis)
    freq = np.gradient(phase, axis=axis)
    return EnvelopePhase(envelope=env, phase=phase, inst_frequency=freq)


# ---------------------------------------------------------------------------
# physics-inspired augmentations
# ---------------------------------------------------------------------------


def _check_patch(patch: np.ndarray) -> np.ndarray:
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 2 or min(patch.shape) < 1:
        raise ValueError(f"patch must be a non-empty 2D array, got shape {patch.shape}")
    if not np.all(np.isfinite(patch)):
        raise ValueError("patch contains non-finite pixels")
    return patch


def phase_shift_augment(patch: np.ndarray, theta: float) -> np.ndarray:
    """Rotate the phase of every RF line by ``theta`` radians."""
    patch = _check_patch(patch)
    sa = analytic_signal(patch, axis=0)
    return np.real(sa * np.exp(1j * theta))


def lowpass_noise(
    length: int, rng: np.random.Generator, std: float = 0.2, cutoff: float = 0.1, clip: float = 0.9
) -> np.ndarray:
    """Gaussian white noise low-passed by zeroing DFT bins above ``cutoff`` x Nyquist.

    The result is scaled to standard deviation ``std`` and then clamped to lie
    strictly inside ``(-clip, clip)``.
    """
    if std == 0:
        return np.zeros(length)
    white = rng.standard_normal(length)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(length)  # cycles/sample, Nyquist = 0.5
    spec[freqs > cutoff * 0.5] = 0.0
    spec[0] = 0.0
    noise = np.fft.irfft(spec, n=length)
    sd = noise.std()
    if sd > 0:
        noise *= std / sd
    bound = np.nextafter(clip, 0.0)
    return np.clip(noise, -bound, bound)


def envelope_distort_augment(
    patch: np.ndarray,
    rng: np.random.Generator | None = None,
    *,
    std: float = 0.2,
    cutoff: float = 0.1,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """Multiply every line's envelope by the same smooth factor ``1 + n(t)``.

    Pass ``noise`` to reuse a specific realization; otherwise one is drawn
    from ``rng``.
    """
    if not 0 <= std < 1:
        raise ValueError(f"envelope noise std must be in [0, 1), got {std}")
    patch = _check_patch(patch)
    if noise is None:
        if rng is None:
            raise ValueError("need either rng or an explicit noise realization")
        noise = lowpass_noise(patch.shape[0], rng, std=std, cutoff=cutoff)
    return np.real(modulated_analytic(patch, noise))


def modulated_analytic(patch: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """``s_a * (1 + n)`` per column: the complex signal whose real part is the
    envelope-distorted patch. Its argument equals that of ``s_a`` wherever
    ``1 + n > 0``."""
    patch = _check_patch(patch)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != (patch.shape[0],):
        raise ValueError("noise length must equal the patch height")
    if np.any(noise <= -1):
        raise ValueError("1 + n(t) must stay positive")
    return analytic_signal(patch, axis=0) * (1.0 + noise)[:, None]


# ---------------------------------------------------------------------------
# rigid / masking augmentations
# ---------------------------------------------------------------------------


def translate(patch: np.ndarray, dy: float, dx: float, fill: float = 0.5, max_fraction: float = 0.2) -> np.ndarray:
    """Shift by fractions ``dy`` (axial) and ``dx`` (lateral) of the patch size."""
    patch = _check_patch(patch)
    if abs(dy) > max_fraction or abs(dx) > max_fraction:
        raise ValueError(f"translation fractions ({dy}, {dx}) exceed {max_fraction}")
    h, w = patch.shape
    sy, sx = int(round(dy * h)), int(round(dx * w))
    out = np.full_like(patch, fill)
    src_y = slice(max(0, -sy), h - max(0, sy))
    dst_y = slice(max(0, sy), h - max(0, -sy))
    src_x = slice(max(0, -sx), w - max(0, sx))
    dst_x = slice(max(0, sx), w - max(0, -sx))
    out[dst_y, dst_x] = patch[src_y, src_x]
    return out


def erase_box(shape: tuple[int, int], fh: float, fw: float, uy: float, ux: float) -> tuple[int, int, int, int]:
    """Resolve an erase rectangle as ``(top, left, height, width)`` in pixels.

    ``uy``/``ux`` in [0, 1) pick the position among all placements that fit.
    """
    h, w = shape
    eh = max(1, int(round(fh * h)))
    ew = max(1, int(round(fw * w)))
    top = min(int(uy * (h - eh + 1)), h - eh)
    left = min(int(ux * (w - ew + 1)), w - ew)
    return top, left, eh, ew


def erase(
    patch: np.ndarray,
    fh: float,
    fw: float,
    uy: float = 0.0,
    ux: float = 0.0,
    fill: float = 0.5,
    min_fraction: float = 0.02,
    max_fraction: float = 0.1,
) -> np.ndarray:
    patch = _check_patch(patch)
    for f in (fh, fw):
        if not min_fraction <= f <= max_fraction:
            raise ValueError(f"erase fraction {f} outside [{min_fraction}, {max_fraction}]")
    if not (0 <= uy < 1 and 0 <= ux < 1):
        raise ValueError("erase position draws must lie in [0, 1)")
    top, left, eh, ew = erase_box(patch.shape, fh, fw, uy, ux)
    out = patch.copy()
    out[top : top + eh, left : left + ew] = fill
    return out


def hflip(patch: np.ndarray) -> np.ndarray:
    return _check_patch(patch)[:, ::-1].copy()


def vflip(patch: np.ndarray) -> np.ndarray:
    return _check_patch(patch)[::-1, :].copy()


def geometric_augment(patch: np.ndarray, kind: str, params: dict | None = None, fill: float = 0.5) -> np.ndarray:
    """Dispatch one of ``translate``, ``erase``, ``hflip``, ``vflip``."""
    params = params or {}
    if kind == "translate":
        return translate(patch, params.get("dy", 0.0), params.get("dx", 0.0), fill=fill)
    if kind == "erase":
        return erase(patch, params["fh"], params["fw"], params.get("uy", 0.0), params.get("ux", 0.0), fill=fill)
    if kind == "hflip":
        return hflip(patch)
    if kind == "vflip":
        return vflip(patch)
    raise ValueError(f"unknown geometric augmentation {kind!r}")


# ---------------------------------------------------------------------------
# augmentation sampling
# ---------------------------------------------------------------------------


@dataclass
class AugmentationConfig:
    skip_probability: float = 0.5
    translation_max_fraction: float = 0.2
    erase_min_fraction: float = 0.02
    erase_max_fraction: float = 0.1
    fill_value: float = 0.5
    envelope_noise_std: float = 0.2
    envelope_noise_cutoff: float = 0.1
    enabled: tuple[str, ...] = CATEGORIES
    # apply phase/envelope transforms to the zero-mean part of each line only
    preserve_dc: bool = True

    def __post_init__(self):
        self.enabled = tuple(self.enabled)
        if not 0 <= self.skip_probability <= 1:
            raise ValueError("skip_probability must be in [0, 1]")
        if self.erase_min_fraction > self.erase_max_fraction:
            raise ValueError("erase_min_fraction must not exceed erase_max_fraction")
        if not 0 <= self.envelope_noise_std < 1:
            raise ValueError("envelope_noise_std must be in [0, 1)")
        unknown = set(self.enabled) - set(CATEGORIES)
        if unknown:
            raise ValueError(f"unknown augmentation categories: {sorted(unknown)}")


@dataclass(frozen=True)
class Transform:
    """A concrete, fully parameterized augmentation."""

    kind: str
    params: dict = field(default_factory=dict)

    def __call__(self, patch: np.ndarray, cfg: AugmentationConfig | None = None) -> np.ndarray:
        cfg = cfg or AugmentationConfig()
        p = self.params
        if self.kind == "translate":
            return translate(patch, p["dy"], p["dx"], fill=cfg.fill_value, max_fraction=cfg.translation_max_fraction)
        if self.kind == "erase":
            return erase(
                patch, p["fh"], p["fw"], p["uy"], p["ux"], fill=cfg.fill_value,
                min_fraction=cfg.erase_min_fraction, max_fraction=cfg.erase_max_fraction,
            )
        if self.kind == "vflip":
            return vflip(patch)
        if self.kind == "hflip":
            return hflip(patch)
        if self.kind == "phase_shift":
            return _with_dc(patch, cfg.preserve_dc, lambda x: phase_shift_augment(x, p["theta"]))
        if self.kind == "envelope_distort":
            rng = np.random.default_rng(p["seed"])
            return _with_dc(
                patch, cfg.preserve_dc, lambda x: envelope_distort_augment(x, rng, std=p["std"], cutoff=p["cutoff"])
            )
        raise ValueError(f"unknown transform kind {self.kind!r}")


def _with_dc(patch: np.ndarray, preserve: bool, fn: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    if not preserve:
        return fn(patch)
    patch = _check_patch(patch)
    dc = patch.mean(axis=0, keepdims=True)
    return fn(patch - dc) + dc


def sample_augmentation(cfg: AugmentationConfig, rng: np.random.Generator) -> list[Transform]:
    """Draw one concrete pipeline: each enabled category is skipped or sampled.

    Categories are visited in the fixed order of ``CATEGORIES``. The number
    of draws consumed per category does not depend on whether it is skipped,
    so the stream stays aligned across configurations.
    """
    out = []
    for kind in CATEGORIES:
        if kind not in cfg.enabled:
            continue
        skip = rng.random() < cfg.skip_probability
        u = rng.random(4)
        if skip:
            continue
        if kind == "translate":
            m = cfg.translation_max_fraction
            params = {"dy": float(-m + 2 * m * u[0]), "dx": float(-m + 2 * m * u[1])}
        elif kind == "erase":
            lo, hi = cfg.erase_min_fraction, cfg.erase_max_fraction
            params = {
                "fh": float(lo + (hi - lo) * u[0]),
                "fw": float(lo + (hi - lo) * u[1]),
                "uy": float(u[2]),
                "ux": float(u[3]),
            }
        elif kind == "phase_shift":
            params = {"theta": float(2 * np.pi * u[0])}
        elif kind == "envelope_distort":
            params = {
                "seed": int(u[0] * 2**62),
                "std": cfg.envelope_noise_std,
                "cutoff": cfg.envelope_noise_cutoff,
            }
        else:
            params = {}
        out.append(Transform(kind, params))
    return out


def apply_transforms(patch: np.ndarray, transforms: Sequence[Transform], cfg: AugmentationConfig | None = None) -> np.ndarray:
    out = np.asarray(patch, dtype=np.float64)
    for t in transforms:
        out = t(out, cfg)
    return out


def augment(patch: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    return apply_transforms(patch, sample_augmentation(cfg, rng), cfg)


# ---------------------------------------------------------------------------
# normalization / resizing
# ---------------------------------------------------------------------------


def instance_normalize(patch: np.ndarray, n_std: float = 4.0) -> tuple[np.ndarray, bool]:
    """Clamp to mean +/- ``n_std`` std and map that window affinely onto [0, 1].

    Returns ``(normalized, degenerate)``; a zero-variance patch comes back as
    a constant 0.5 patch with ``degenerate=True``.
    """
    patch = _check_patch(patch)
    m = patch.mean()
    s = patch.std()
    if not s > 0:
        return np.full_like(patch, 0.5), True
    lo, hi = m - n_std * s, m + n_std * s
    out = (np.clip(patch, lo, hi) - lo) / (hi - lo)
    return np.clip(out, 0.0, 1.0), False


def resize_bilinear(raw: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize on a corner-aligned grid (first/last samples map to first/last pixels)."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.size == 0:
        raise ValueError(f"resize needs a non-empty 2D array, got shape {raw.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    h, w = raw.shape
    if (h, w) == (out_h, out_w):
        return raw.copy()

    def axis_weights(n_in: int, n_out: int):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        i0 = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, pos - i0

    y0, y1, wy = axis_weights(h, out_h)
    x0, x1, wx = axis_weights(w, out_w)
    rows = raw[y0] * (1 - wy)[:, None] + raw[y1] * wy[:, None]
    return rows[:, x0] * (1 - wx)[None, :] + rows[:, x1] * wx[None, :]


def augment_batch(
    patches: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator
) -> np.ndarray:
    """Independently augment every patch of an ``n x H x W`` stack."""
    return np.stack([augment(p, cfg, rng) for p in patches])


AugmentFn = Callable[[np.ndarray, np.random.Generator], np.ndarray]
