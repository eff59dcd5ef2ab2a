"""Procedural pseudo-tomosynthesis studies with rare planted lesions.

Every patient gets one study with four volumes (L/R x CC/MLO). Tissue is a
breast-shaped region filled with three octaves of smooth value noise that
varies slowly across depth; the area outside the breast is dark. An abnormal
patient has one abnormal side: both views of that side carry a bright
ellipsoidal lesion spanning ``lesion_z_extent`` consecutive slices, and only
the central slice is annotated.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .data import (
    ABNORMAL,
    LATERALITIES,
    NORMAL,
    VIEWS,
    Annotation,
    StudyManifest,
    VolumeRecord,
    write_manifest,
    write_volume,
)

log = logging.getLogger(__name__)

INTENSITY_SCALE = 65535


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 20
    abnormal_fraction: float = 0.1
    slices_per_volume: int = 24
    slice_shape: tuple[int, int] = (128, 128)
    lesion_intensity_boost: float = 0.4
    lesion_radius_range: tuple[int, int] = (6, 10)
    lesion_z_extent: int = 9
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "slice_shape", tuple(int(v) for v in self.slice_shape))
        object.__setattr__(self, "lesion_radius_range", tuple(int(v) for v in self.lesion_radius_range))
        if self.n_patients < 1:
            raise ValueError("n_patients must be >= 1")
        if not 0.0 < self.abnormal_fraction < 1.0:
            raise ValueError("abnormal_fraction must lie in (0, 1)")
        if self.n_abnormal < 1:
            raise ValueError(
                f"abnormal_fraction * n_patients = {self.abnormal_fraction * self.n_patients:.3f} "
                "yields no abnormal patient"
            )
        if self.lesion_intensity_boost <= 0:
            raise ValueError("lesion_intensity_boost must be > 0")
        if self.slices_per_volume < 1:
            raise ValueError("slices_per_volume must be >= 1")
        rmin, rmax = self.lesion_radius_range
        h, w = self.slice_shape
        if not 1 <= rmin <= rmax:
            raise ValueError(f"invalid lesion_radius_range {self.lesion_radius_range}")
        if 2 * rmax + 1 > min(h, w) // 3:
            raise ValueError(
                f"lesion radius {rmax} does not fit inside the breast region of a {h}x{w} slice"
            )
        if not 1 <= self.lesion_z_extent <= self.slices_per_volume:
            raise ValueError("lesion_z_extent must lie in [1, slices_per_volume]")

    @property
    def n_abnormal(self) -> int:
        return int(math.floor(self.abnormal_fraction * self.n_patients + 0.5))


@dataclass
class _Lesion:
    # position in normalized breast coordinates: depth from chest wall, vertical offset
    depth: float
    vertical: float
    radius: tuple[int, int]  # (rx, ry) in pixels
    center_slice: int


def _value_noise(rng: np.random.Generator, shape: tuple[int, int, int], cell: int) -> np.ndarray:
    """Smooth noise in [-1, 1]: a coarse random lattice upsampled trilinearly."""
    z, h, w = shape
    cz = max(2, math.ceil(z / max(1, cell // 2)) + 1)
    coarse = rng.uniform(-1.0, 1.0, size=(cz, math.ceil(h / cell) + 2, math.ceil(w / cell) + 2))
    zz = np.linspace(0, cz - 1, z)
    # random sub-cell phase so lattice points do not align across volumes
    oy, ox = rng.uniform(0, 1, size=2)
    yy = oy + np.arange(h) / cell
    xx = ox + np.arange(w) / cell
    grid = np.meshgrid(zz, yy, xx, indexing="ij")
    return ndimage.map_coordinates(coarse, grid, order=1, mode="nearest")


def _breast_mask(shape: tuple[int, int], laterality: str, view: str, extent: float) -> np.ndarray:
    """Soft half-ellipse anchored on the chest-wall edge (left for L, right for R)."""
    h, w = shape
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    cy = h * (0.5 if view == "CC" else 0.45)
    a = w * extent
    b = h * (0.46 if view == "CC" else 0.5)
    dx = x if laterality == "L" else (w - 1 - x)
    r = np.sqrt((dx / a) ** 2 + ((y - cy) / b) ** 2)
    return np.clip((1.0 - r) * 12.0, 0.0, 1.0)


def _lesion_geometry(shape, laterality, view, extent, lesion: _Lesion) -> tuple[float, float]:
    h, w = shape
    cy = h * (0.5 if view == "CC" else 0.45)
    b = h * (0.46 if view == "CC" else 0.5)
    # MLO is an oblique projection: the lesion sits slightly higher in the image
    shift = 0.0 if view == "CC" else -0.08 * h
    dx = lesion.depth * w * extent
    cx = dx if laterality == "L" else (w - 1 - dx)
    ly = cy + lesion.vertical * b + shift
    rx, ry = lesion.radius
    ly = float(np.clip(ly, ry + 1, h - ry - 2))
    cx = float(np.clip(cx, rx + 1, w - rx - 2))
    return cx, ly


def _render_volume(
    rng: np.random.Generator,
    config: SynthConfig,
    laterality: str,
    view: str,
    density: float,
    lesion: Optional[_Lesion],
) -> tuple[np.ndarray, Optional[Annotation]]:
    z = config.slices_per_volume
    h, w = config.slice_shape
    extent = rng.uniform(0.72, 0.86)
    mask = _breast_mask((h, w), laterality, view, extent)

    tissue = np.zeros((z, h, w))
    for weight, cell in ((0.55, 32), (0.3, 16), (0.15, 8)):
        tissue += weight * _value_noise(rng, (z, h, w), max(2, cell * min(h, w) // 128))
    img = mask[None] * (density + 0.12 * tissue)
    img += 0.02 + 0.01 * rng.standard_normal(size=(z, h, w))

    annotation = None
    if lesion is not None:
        cx, cy = _lesion_geometry((h, w), laterality, view, extent, lesion)
        rx, ry = lesion.radius
        y, x = np.mgrid[0:h, 0:w].astype(np.float64)
        rho2 = ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2
        bump = np.where(rho2 <= 1.0, np.exp(-0.5 * rho2), 0.0)
        e = config.lesion_z_extent
        first = lesion.center_slice - e // 2
        for s in range(first, first + e):
            dz = (s - lesion.center_slice) / max(1.0, e / 2)
            img[s] += config.lesion_intensity_boost * (1.0 - 0.5 * dz * dz) * bump
        inside = np.argwhere(rho2 <= 1.0)
        y0, x0 = inside.min(axis=0)
        y1, x1 = inside.max(axis=0)
        annotation = Annotation(lesion.center_slice, int(x0), int(y0), int(x1 - x0 + 1), int(y1 - y0 + 1))

    vol = np.clip(img, 0.0, 1.0) * INTENSITY_SCALE
    return np.rint(vol).astype(np.uint16), annotation


def _generate_patient(config: SynthConfig, index: int, abnormal_side: Optional[str], out_dir: Path):
    rng = np.random.default_rng([config.seed, index])
    patient_id = f"P{index:04d}"
    study_id = "S0"
    lesion = None
    if abnormal_side is not None:
        rmin, rmax = config.lesion_radius_range
        e = config.lesion_z_extent
        lesion = _Lesion(
            depth=rng.uniform(0.3, 0.65),
            vertical=rng.uniform(-0.4, 0.4),
            radius=(int(rng.integers(rmin, rmax + 1)), int(rng.integers(rmin, rmax + 1))),
            center_slice=int(rng.integers(e // 2, config.slices_per_volume - (e - e // 2) + 1)),
        )
    records = []
    for laterality in LATERALITIES:
        density = rng.uniform(0.3, 0.5)  # shared by both views of one breast
        for view in VIEWS:
            vol_lesion = lesion if laterality == abnormal_side else None
            volume, annotation = _render_volume(rng, config, laterality, view, density, vol_lesion)
            rel = f"{patient_id}/{study_id}/{laterality}_{view}"
            write_volume(out_dir / rel, volume)
            records.append(
                VolumeRecord(
                    patient_id, study_id, laterality, view, rel, config.slices_per_volume,
                    ABNORMAL if annotation is not None else NORMAL, annotation,
                )
            )
    return records


def generate_dataset(
    config: SynthConfig, out_dir, workers: int = 1, manifest_name: str = "manifest.csv"
) -> StudyManifest:
    """Render the dataset under ``out_dir`` and write ``manifest.csv`` + ``provenance.json``.

    Each patient is rendered from its own generator seeded by
    ``(config.seed, patient_index)``, so output is identical for any ``workers``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    assign = np.random.default_rng([config.seed, 2**31 - 1])
    abnormal_idx = set(assign.choice(config.n_patients, size=config.n_abnormal, replace=False).tolist())
    sides = {i: LATERALITIES[int(assign.integers(2))] for i in sorted(abnormal_idx)}

    jobs = [(config, i, sides.get(i), out_dir) for i in range(config.n_patients)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_patient = list(pool.map(_generate_patient, *zip(*jobs)))
    else:
        per_patient = [_generate_patient(*job) for job in jobs]

    manifest = StudyManifest([rec for recs in per_patient for rec in recs], out_dir)
    write_manifest(manifest, out_dir / manifest_name)
    (out_dir / "provenance.json").write_text(
        json.dumps({"generator": "synthetic", "config": asdict(config)}, indent=2, sort_keys=True) + "\n"
    )
    log.info("generated %d patients (%d abnormal) in %s", config.n_patients, len(abnormal_idx), out_dir)
    return manifest
