"""Frames, biopsy cores, patch extraction, splits and the synthetic RF phantom."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .container import ContainerFormatError, read_container, write_container
from .rf_signal import instance_normalize, resize_bilinear

log = logging.getLogger(__name__)

CANONICAL_AXIAL = 10016
CANONICAL_LATERAL = 512
CANONICAL_AXIAL_MM = 28.0
CANONICAL_LATERAL_MM = 46.0

DATASET_MAGIC = b"RFSSLDS\x00"
CORES_MAGIC = b"RFSSLCR\x00"


@dataclass
class RfFrame:
    samples: np.ndarray  # axial x lateral
    lateral_extent_mm: float = CANONICAL_LATERAL_MM
    axial_extent_mm: float = CANONICAL_AXIAL_MM
    frame_id: str = ""

    def __post_init__(self):
        if self.samples.ndim != 2 or min(self.samples.shape) < 1:
            raise ValueError(f"frame must be a non-empty 2D array, got {self.samples.shape}")
        if self.lateral_extent_mm <= 0 or self.axial_extent_mm <= 0:
            raise ValueError("physical extents must be positive")

    @property
    def axial_count(self) -> int:
        return self.samples.shape[0]

    @property
    def lateral_count(self) -> int:
        return self.samples.shape[1]


@dataclass
class BiopsyCore:
    core_id: str
    patient_id: str
    frame: RfFrame
    prostate_mask: np.ndarray
    needle_mask: np.ndarray
    label: int
    involvement_percent: float = 0.0
    gleason_score: int | None = None

    def __post_init__(self):
        shape = self.frame.samples.shape
        for name in ("prostate_mask", "needle_mask"):
            m = np.asarray(getattr(self, name), dtype=bool)
            if m.shape != shape:
                raise ValueError(f"{name} shape {m.shape} does not match frame {shape}")
            setattr(self, name, m)
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if not 0 <= self.involvement_percent <= 100:
            raise ValueError("involvement must be within [0, 100]")
        if self.label == 0 and self.involvement_percent != 0:
            raise ValueError("benign cores must have zero involvement")


@dataclass
class PatchRecord:
    patch: np.ndarray
    core_id: str
    patient_id: str
    axial_origin_mm: float
    lateral_origin_mm: float
    weak_label: int
    region: str
    involvement_percent: float = 0.0


@dataclass
class SplitManifest:
    train_patients: list[str]
    val_patients: list[str]
    test_patients: list[str]
    seed: int

    def __post_init__(self):
        a, b, c = set(self.train_patients), set(self.val_patients), set(self.test_patients)
        if a & b or a & c or b & c:
            raise ValueError("patient splits overlap")

    def split_of(self, patient_id: str) -> str | None:
        for name in ("train", "val", "test"):
            if patient_id in getattr(self, f"{name}_patients"):
                return name
        return None

    def to_dict(self) -> dict:
        return {
            "train_patients": list(self.train_patients),
            "val_patients": list(self.val_patients),
            "test_patients": list(self.test_patients),
            "seed": self.seed,
        }


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def mm_to_samples(frame: RfFrame, mm_lateral: float, mm_axial: float) -> tuple[int, int]:
    """Convert a physical size to ``(lines, samples)`` on ``frame``'s grid."""
    if mm_lateral <= 0 or mm_axial <= 0:
        raise ValueError("sizes must be positive")
    if mm_lateral > frame.lateral_extent_mm or mm_axial > frame.axial_extent_mm:
        raise ValueError(
            f"{mm_lateral} x {mm_axial} mm exceeds frame extent "
            f"{frame.lateral_extent_mm} x {frame.axial_extent_mm} mm"
        )
    lines = int(round(mm_lateral * frame.lateral_count / frame.lateral_extent_mm))
    samples = int(round(mm_axial * frame.axial_count / frame.axial_extent_mm))
    return max(lines, 1), max(samples, 1)


def _window_fractions(mask: np.ndarray, wh: int, ww: int, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    sat = np.zeros((mask.shape[0] + 1, mask.shape[1] + 1), dtype=np.int64)
    sat[1:, 1:] = np.cumsum(np.cumsum(mask, axis=0, dtype=np.int64), axis=1)
    y0, x0 = ys[:, None], xs[None, :]
    counts = sat[y0 + wh, x0 + ww] - sat[y0, x0 + ww] - sat[y0 + wh, x0] + sat[y0, x0]
    return counts / float(wh * ww)


def window_grid(
    core: BiopsyCore,
    region: str,
    patch_mm: float = 5.0,
    stride_mm: float = 5.0,
    needle_overlap_min: float = 0.66,
    prostate_overlap_min: float = 0.9,
) -> list[tuple[int, int, int, int]]:
    """Qualifying windows as ``(top, left, height, width)`` in samples/lines.

    Windows are laid on a regular grid starting at the frame origin and must
    lie fully inside the frame.
    """
    if region not in ("prostate", "needle"):
        raise ValueError(f"region must be 'prostate' or 'needle', got {region!r}")
    if stride_mm <= 0:
        raise ValueError("stride must be positive")
    frame = core.frame
    ww, wh = mm_to_samples(frame, patch_mm, patch_mm)
    sx, sy = mm_to_samples(frame, min(stride_mm, frame.lateral_extent_mm), min(stride_mm, frame.axial_extent_mm))
    ys = np.arange(0, frame.axial_count - wh + 1, sy)
    xs = np.arange(0, frame.lateral_count - ww + 1, sx)
    if ys.size == 0 or xs.size == 0:
        return []
    eps = 1e-12
    keep = _window_fractions(core.prostate_mask, wh, ww, ys, xs) >= prostate_overlap_min - eps
    if region == "needle":
        keep &= _window_fractions(core.needle_mask, wh, ww, ys, xs) >= needle_overlap_min - eps
    iy, ix = np.nonzero(keep)
    return [(int(ys[i]), int(xs[j]), wh, ww) for i, j in zip(iy, ix)]


def make_patch(raw: np.ndarray, size: int) -> np.ndarray:
    """Resize a raw crop to ``size x size`` and instance-normalize it."""
    out, degenerate = instance_normalize(resize_bilinear(raw, size, size))
    if degenerate:
        log.debug("zero-variance patch normalized to constant 0.5")
    return out


def extract_patches(
    core: BiopsyCore,
    region: str,
    patch_mm: float = 5.0,
    stride_mm: float = 5.0,
    needle_overlap_min: float = 0.66,
    prostate_overlap_min: float = 0.9,
    patch_size: int = 256,
) -> list[PatchRecord]:
    """Crop, resize and normalize every qualifying window of one core.

    ``region="prostate"`` keeps windows mostly inside the prostate mask;
    ``region="needle"`` additionally requires the needle-overlap threshold.
    """
    frame = core.frame
    mm_per_sample = frame.axial_extent_mm / frame.axial_count
    mm_per_line = frame.lateral_extent_mm / frame.lateral_count
    out = []
    for top, left, wh, ww in window_grid(core, region, patch_mm, stride_mm, needle_overlap_min, prostate_overlap_min):
        crop = frame.samples[top : top + wh, left : left + ww]
        out.append(
            PatchRecord(
                patch=make_patch(crop, patch_size).astype(np.float32),
                core_id=core.core_id,
                patient_id=core.patient_id,
                axial_origin_mm=top * mm_per_sample,
                lateral_origin_mm=left * mm_per_line,
                weak_label=core.label,
                region=region,
                involvement_percent=core.involvement_percent,
            )
        )
    return out


# ---------------------------------------------------------------------------
# splits and filtering
# ---------------------------------------------------------------------------


def split_patients(
    cores: Sequence[BiopsyCore],
    test_cancer_fraction: float = 0.25,
    seed: int = 0,
    val_fraction: float = 0.2,
) -> SplitManifest:
    """Patient-level split: draw random patients into the test set until it
    holds at least ``test_cancer_fraction`` of all cancer cores, then hold
    out ``val_fraction`` of the remaining patients for validation."""
    if not 0 <= test_cancer_fraction <= 1:
        raise ValueError("test_cancer_fraction must be in [0, 1]")
    patients = sorted({c.patient_id for c in cores})
    cancer_by_patient = {p: 0 for p in patients}
    for c in cores:
        cancer_by_patient[c.patient_id] += c.label
    total_cancer = sum(cancer_by_patient.values())
    if sum(1 for v in cancer_by_patient.values() if v > 0) < 2 and test_cancer_fraction > 0:
        raise ValueError("need at least two patients with cancer cores to split")

    rng = np.random.default_rng(seed)
    order = [patients[i] for i in rng.permutation(len(patients))]
    test: list[str] = []
    got = 0
    if test_cancer_fraction > 0:
        for p in order:
            if got / total_cancer >= test_cancer_fraction:
                break
            test.append(p)
            got += cancer_by_patient[p]
        if got / total_cancer < test_cancer_fraction:
            raise ValueError("test cancer fraction is unreachable")
    rest = [p for p in order if p not in set(test)]
    n_val = int(round(val_fraction * len(rest)))
    val = rest[:n_val]
    train = rest[n_val:]
    return SplitManifest(sorted(train), sorted(val), sorted(test), seed)


def balance_and_filter(cores: Sequence, min_involvement: float = 40.0, balance: bool = True, seed: int = 0) -> list:
    """Drop cancer cores below ``min_involvement`` percent, then optionally
    undersample benign cores to the cancer count. Exactly ``min_involvement``
    is kept. Works on anything with ``label`` and ``involvement_percent``."""
    kept_cancer = [c for c in cores if c.label == 1 and c.involvement_percent >= min_involvement]
    benign = [c for c in cores if c.label == 0]
    if balance and len(benign) > len(kept_cancer):
        rng = np.random.default_rng(seed)
        pick = set(rng.choice(len(benign), size=len(kept_cancer), replace=False).tolist())
        benign = [c for i, c in enumerate(benign) if i in pick]
    keep = {id(c) for c in kept_cancer} | {id(c) for c in benign}
    return [c for c in cores if id(c) in keep]


# ---------------------------------------------------------------------------
# synthetic phantom
# ---------------------------------------------------------------------------


@dataclass
class PhantomConfig:
    """Parameters of the synthetic RF phantom.

    Frequencies are spatial, in cycles per mm of depth. Class 1 uses
    ``density_ratio`` times the class-0 scatterer density and Student-t
    amplitudes with ``tail_df`` degrees of freedom.
    """

    axial_count: int = 1024
    lateral_count: int = 128
    axial_extent_mm: float = CANONICAL_AXIAL_MM
    lateral_extent_mm: float = CANONICAL_LATERAL_MM
    density: float = 2.0  # class-0 scatterers per mm^2
    density_ratio: float = 3.0
    tail_df: float = 3.0
    density_jitter: float = 0.0
    pulse_center_freq: float = 2.3
    pulse_bandwidth: float = 0.6
    noise_std: float = 0.0
    prostate_area_fraction: float = 0.6
    needle_area_fraction: float = 0.07
    needle_width_mm: float = 6.0
    needle_angle_deg: float = 15.0

    def __post_init__(self):
        if self.density < 0:
            raise ValueError("scatterer density must be non-negative")
        if self.pulse_center_freq <= 0 or self.pulse_bandwidth <= 0:
            raise ValueError("pulse frequency and bandwidth must be positive")
        if self.axial_count < 4 or self.lateral_count < 1:
            raise ValueError("frame too small")


def gaussian_pulse(cfg: PhantomConfig) -> np.ndarray:
    """Gaussian-modulated sinusoid sampled on the axial grid.

    ``pulse_bandwidth`` is the -6 dB fractional bandwidth.
    """
    dz = cfg.axial_extent_mm / cfg.axial_count
    f0 = cfg.pulse_center_freq
    # -6 dB half-width in frequency -> Gaussian sigma in space
    sigma_f = cfg.pulse_bandwidth * f0 / (2 * np.sqrt(2 * np.log(2)))
    sigma_z = 1.0 / (2 * np.pi * sigma_f)
    half = int(np.ceil(4 * sigma_z / dz))
    z = np.arange(-half, half + 1) * dz
    return np.exp(-0.5 * (z / sigma_z) ** 2) * np.cos(2 * np.pi * f0 * z)


def phantom_masks(cfg: PhantomConfig) -> tuple[np.ndarray, np.ndarray]:
    """Prostate rectangle (central, ``prostate_area_fraction`` of the frame)
    and a straight needle band through the frame centre."""
    h, w = cfg.axial_count, cfg.lateral_count
    zmm = (np.arange(h) + 0.5) * cfg.axial_extent_mm / h
    xmm = (np.arange(w) + 0.5) * cfg.lateral_extent_mm / w
    side = np.sqrt(cfg.prostate_area_fraction)
    cz, cx = cfg.axial_extent_mm / 2, cfg.lateral_extent_mm / 2
    hz, hx = side * cfg.axial_extent_mm / 2, side * cfg.lateral_extent_mm / 2
    prostate = (np.abs(zmm - cz)[:, None] <= hz) & (np.abs(xmm - cx)[None, :] <= hx)

    area = cfg.axial_extent_mm * cfg.lateral_extent_mm
    length = cfg.needle_area_fraction * area / cfg.needle_width_mm
    a = np.deg2rad(cfg.needle_angle_deg)
    dz, dx = zmm[:, None] - cz, xmm[None, :] - cx
    along = dx * np.cos(a) + dz * np.sin(a)
    across = -dx * np.sin(a) + dz * np.cos(a)
    needle = (np.abs(along) <= length / 2) & (np.abs(across) <= cfg.needle_width_mm / 2)
    return prostate, needle


def _amplitudes(rng: np.random.Generator, n: int, class_id: int, cfg: PhantomConfig) -> np.ndarray:
    if class_id == 0:
        return rng.standard_normal(n)
    t = rng.standard_t(cfg.tail_df, size=n)
    # unit variance so only the tail shape differs
    return t / np.sqrt(cfg.tail_df / (cfg.tail_df - 2)) if cfg.tail_df > 2 else t


def generate_phantom_frame(
    class_id: int,
    rng: np.random.Generator,
    cfg: PhantomConfig | None = None,
    core_id: str = "core",
    patient_id: str = "patient",
) -> BiopsyCore:
    """Simulate one RF frame and wrap it as a biopsy core.

    Point scatterers are dropped independently on the sample grid with
    probability ``density x cell area`` and every RF line is convolved with
    the transmit pulse.
    """
    cfg = cfg or PhantomConfig()
    if class_id not in (0, 1):
        raise ValueError("class_id must be 0 or 1")
    h, w = cfg.axial_count, cfg.lateral_count
    cell = (cfg.axial_extent_mm / h) * (cfg.lateral_extent_mm / w)
    density = cfg.density * (cfg.density_ratio if class_id == 1 else 1.0)
    if cfg.density_jitter > 0:
        density *= float(np.exp(cfg.density_jitter * rng.standard_normal()))
    p = min(density * cell, 1.0)
    occupied = rng.random((h, w)) < p
    tissue = np.zeros((h, w))
    tissue[occupied] = _amplitudes(rng, int(occupied.sum()), class_id, cfg)
    pulse = gaussian_pulse(cfg)
    n_fft = h + pulse.size - 1
    spec = np.fft.rfft(tissue, n=n_fft, axis=0) * np.fft.rfft(pulse, n=n_fft)[:, None]
    full = np.fft.irfft(spec, n=n_fft, axis=0)
    start = (pulse.size - 1) // 2
    rf = full[start : start + h]
    if not occupied.any():
        rf = np.zeros((h, w))
    if cfg.noise_std > 0:
        rf = rf + cfg.noise_std * rng.standard_normal((h, w))
    prostate, needle = phantom_masks(cfg)
    frame = RfFrame(rf, cfg.lateral_extent_mm, cfg.axial_extent_mm, frame_id=core_id)
    return BiopsyCore(
        core_id=core_id,
        patient_id=patient_id,
        frame=frame,
        prostate_mask=prostate,
        needle_mask=needle,
        label=class_id,
        involvement_percent=100.0 if class_id == 1 else 0.0,
        gleason_score=7 if class_id == 1 else None,
    )


def generate_cohort(
    n_patients: int,
    cores_per_patient: int,
    seed: int,
    cfg: PhantomConfig | None = None,
    cancer_patient_fraction: float = 0.5,
    prefix: str = "",
) -> list[BiopsyCore]:
    """Phantom cores grouped by patient; each patient is entirely benign or
    entirely cancerous. Each core draws from its own seeded substream."""
    cfg = cfg or PhantomConfig()
    root = np.random.SeedSequence(seed)
    label_rng = np.random.default_rng(root.spawn(1)[0])
    n_cancer = int(round(cancer_patient_fraction * n_patients))
    labels = np.zeros(n_patients, dtype=int)
    labels[label_rng.permutation(n_patients)[:n_cancer]] = 1
    children = root.spawn(n_patients * cores_per_patient + 1)[1:]
    cores = []
    for p in range(n_patients):
        for k in range(cores_per_patient):
            rng = np.random.default_rng(children[p * cores_per_patient + k])
            cores.append(
                generate_phantom_frame(
                    int(labels[p]), rng, cfg, core_id=f"{prefix}p{p:04d}c{k:02d}", patient_id=f"{prefix}p{p:04d}"
                )
            )
    return cores


# ---------------------------------------------------------------------------
# storage
# ---------------------------------------------------------------------------

_RECORD_FIELDS = ("core_id", "patient_id", "axial_origin_mm", "lateral_origin_mm", "weak_label", "region", "involvement_percent")


def store_dataset(records: Sequence[PatchRecord], path, extra_meta: dict | None = None) -> dict:
    """Write patch records; pixels go out as one little-endian float32 block."""
    shapes = {r.patch.shape for r in records}
    if len(shapes) > 1:
        raise ValueError(f"all patches must share one shape, got {sorted(shapes)}")
    shape = shapes.pop() if shapes else (0, 0)
    pixels = np.stack([np.asarray(r.patch, dtype=np.float32) for r in records]) if records else np.zeros((0, *shape), np.float32)
    meta = {
        "kind": "patch_dataset",
        "count": len(records),
        "patch_shape": list(shape),
        "records": [{k: getattr(r, k) for k in _RECORD_FIELDS} for r in records],
        "extra": extra_meta or {},
    }
    write_container(path, DATASET_MAGIC, meta, {"pixels": pixels})
    return {k: v for k, v in meta.items() if k != "records"}


def load_dataset(path) -> list[PatchRecord]:
    meta, arrays = read_container(path, DATASET_MAGIC)
    if meta.get("kind") != "patch_dataset":
        raise ContainerFormatError(f"{path}: not a patch dataset")
    pixels = arrays["pixels"]
    if len(meta["records"]) != pixels.shape[0]:
        raise ContainerFormatError(f"{path}: record count does not match pixel block")
    return [PatchRecord(patch=pixels[i], **rec) for i, rec in enumerate(meta["records"])]


def dataset_arrays(records: Sequence[PatchRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Stack records into ``(n, H, W)`` float32 pixels and ``(n,)`` labels."""
    x = np.stack([r.patch for r in records]).astype(np.float32)
    y = np.array([r.weak_label for r in records], dtype=np.int64)
    return x, y


def store_cores(cores: Sequence[BiopsyCore], path) -> None:
    meta = {"kind": "cores", "cores": []}
    arrays = {}
    for i, c in enumerate(cores):
        meta["cores"].append(
            {
                "core_id": c.core_id,
                "patient_id": c.patient_id,
                "label": c.label,
                "involvement_percent": c.involvement_percent,
                "gleason_score": c.gleason_score,
                "lateral_extent_mm": c.frame.lateral_extent_mm,
                "axial_extent_mm": c.frame.axial_extent_mm,
                "frame_id": c.frame.frame_id,
            }
        )
        arrays[f"{i}/frame"] = c.frame.samples.astype(np.float64)
        arrays[f"{i}/prostate"] = c.prostate_mask
        arrays[f"{i}/needle"] = c.needle_mask
    write_container(path, CORES_MAGIC, meta, arrays)


def load_cores(path) -> list[BiopsyCore]:
    meta, arrays = read_container(path, CORES_MAGIC)
    if meta.get("kind") != "cores":
        raise ContainerFormatError(f"{path}: not a core file")
    out = []
    for i, m in enumerate(meta["cores"]):
        frame = RfFrame(arrays[f"{i}/frame"], m["lateral_extent_mm"], m["axial_extent_mm"], m["frame_id"])
        out.append(
            BiopsyCore(
                core_id=m["core_id"],
                patient_id=m["patient_id"],
                frame=frame,
                prostate_mask=arrays[f"{i}/prostate"],
                needle_mask=arrays[f"{i}/needle"],
                label=m["label"],
                involvement_percent=m["involvement_percent"],
                gleason_score=m["gleason_score"],
            )
        )
    return out


def cores_manifest(cores: Iterable[BiopsyCore], split: SplitManifest | None = None) -> dict:
    """JSON-ready listing of per-core metadata and (optionally) the split."""
    entries = []
    for c in cores:
        entries.append(
            {
                "core_id": c.core_id,
                "patient_id": c.patient_id,
                "label": c.label,
                "involvement_percent": c.involvement_percent,
                "gleason_score": c.gleason_score,
                "split": split.split_of(c.patient_id) if split else None,
            }
        )
    return {"version": 1, "cores": entries, "split": split.to_dict() if split else None}
