"""Slice resizing and Otsu background cropping shared across a volume."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
from PIL import Image

from .data import (
    Annotation,
    StudyManifest,
    VolumeRecord,
    read_volume,
    write_manifest,
    write_volume,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CropRect:
    """Half-open pixel rectangle ``[x0, x1) x [y0, y1)``."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (0 <= self.x0 < self.x1 and 0 <= self.y0 < self.y1):
            raise ValueError(f"invalid crop rect {self}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    def contains(self, other: "CropRect") -> bool:
        return (
            self.x0 <= other.x0 and self.y0 <= other.y0 and other.x1 <= self.x1 and other.y1 <= self.y1
        )

    def apply(self, image: np.ndarray) -> np.ndarray:
        return image[..., self.y0:self.y1, self.x0:self.x1]

    def as_dict(self) -> dict:
        return {"x0": self.x0, "y0": self.y0, "x1": self.x1, "y1": self.y1}


class OtsuResult(NamedTuple):
    level: int
    degenerate: bool


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def short_side_shape(height: int, width: int, target: int) -> tuple[int, int]:
    if height <= width:
        return target, _round_half_up(width * target / height)
    return _round_half_up(height * target / width), target


def resize_short_side(image: np.ndarray, target: int = 1024) -> np.ndarray:
    """Bilinear resize so that ``min(height, width) == target``.

    Integer inputs are rounded and clipped back to their dtype.
    """
    if image.ndim != 2 or image.size == 0:
        raise ValueError(f"expected a non-empty 2-D image, got shape {image.shape}")
    if target < 1:
        raise ValueError("target must be >= 1")
    h, w = image.shape
    new_h, new_w = short_side_shape(h, w, target)
    if (new_h, new_w) == (h, w):
        return image.copy()
    resized = np.asarray(
        Image.fromarray(image.astype(np.float32)).resize((new_w, new_h), Image.BILINEAR)
    )
    if np.issubdtype(image.dtype, np.integer):
        info = np.iinfo(image.dtype)
        resized = np.clip(np.rint(resized), info.min, info.max)
    return resized.astype(image.dtype)


def otsu_threshold(histogram) -> OtsuResult:
    """Level ``t`` maximizing the between-class variance of ``{<= t}`` vs ``{> t}``.

    Uses exact integer arithmetic (counts must be non-negative integers), so
    ties are real ties and resolve to the lowest level. A histogram whose
    mass sits in a single bin has zero variance at every split; that bin's
    level is returned with ``degenerate=True``.
    """
    counts = [int(c) for c in np.asarray(histogram).ravel()]
    if any(c < 0 for c in counts):
        raise ValueError("histogram counts must be non-negative")
    total = sum(counts)
    if total <= 0:
        raise ValueError("histogram is empty")
    nonzero = [i for i, c in enumerate(counts) if c]
    if len(nonzero) == 1:
        return OtsuResult(nonzero[0], True)

    total_sum = sum(i * c for i, c in enumerate(counts))
    # sigma_b^2(t) = (S0*N - S*W0)^2 / (N^2 * W0 * W1); compare num/den by cross-multiplying.
    best_t, best_num, best_den = 0, -1, 1
    w0 = s0 = 0
    for t in range(len(counts) - 1):
        w0 += counts[t]
        s0 += t * counts[t]
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            continue
        num = (s0 * total - total_sum * w0) ** 2
        den = w0 * w1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return OtsuResult(best_t, False)


def intensity_bins(volume: np.ndarray) -> Optional[np.ndarray]:
    """Map a stack to 256 bins by linear min/max scaling; None if constant."""
    lo, hi = float(volume.min()), float(volume.max())
    if hi <= lo:
        return None
    scaled = (volume.astype(np.float64) - lo) * (256.0 / (hi - lo))
    return np.minimum(scaled.astype(np.int64), 255)


def volume_crop_bounds(volume: np.ndarray, pad: int = 8) -> CropRect:
    """Bounding box of the union of per-slice Otsu foregrounds, padded and clipped.

    ``volume`` is a ``(n_slices, H, W)`` stack (a single 2-D slice is accepted).
    """
    volume = np.asarray(volume)
    if volume.ndim == 2:
        volume = volume[None]
    if volume.ndim != 3 or volume.size == 0:
        raise ValueError(f"expected a non-empty slice stack, got shape {volume.shape}")
    _, h, w = volume.shape
    full = CropRect(0, 0, w, h)

    bins = intensity_bins(volume)
    union = np.zeros((h, w), dtype=bool)
    if bins is not None:
        for sl in bins:
            level, degenerate = otsu_threshold(np.bincount(sl.ravel(), minlength=256))
            if not degenerate:
                union |= sl > level
    if not union.any():
        warnings.warn("every slice is constant; using the full image as crop", RuntimeWarning)
        return full

    ys = np.flatnonzero(union.any(axis=1))
    xs = np.flatnonzero(union.any(axis=0))
    return CropRect(
        max(0, int(xs[0]) - pad),
        max(0, int(ys[0]) - pad),
        min(w, int(xs[-1]) + 1 + pad),
        min(h, int(ys[-1]) + 1 + pad),
    )


def remap_annotation(
    annotation: Annotation, scale_xy: tuple[float, float], rect: CropRect
) -> Annotation:
    """Map a bbox through ``resize(scale) -> crop(rect)``, rounding outward and clipping."""
    sx, sy = scale_xy
    x0 = math.floor(annotation.x * sx) - rect.x0
    y0 = math.floor(annotation.y * sy) - rect.y0
    x1 = math.ceil((annotation.x + annotation.width) * sx) - rect.x0
    y1 = math.ceil((annotation.y + annotation.height) * sy) - rect.y0
    x0, y0 = max(0, x0), max(0, y0)
    x1, y1 = min(rect.width, x1), min(rect.height, y1)
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"annotation {annotation.bbox} falls outside crop {rect}")
    return Annotation(annotation.slice_index, x0, y0, x1 - x0, y1 - y0)


@dataclass
class PreprocessResult:
    volume: np.ndarray
    rect: CropRect
    scale_xy: tuple[float, float]
    annotation: Optional[Annotation]


def preprocess_volume(
    volume: np.ndarray,
    annotation: Optional[Annotation] = None,
    short_side: int = 1024,
    pad: int = 8,
) -> PreprocessResult:
    """Resize every slice, then crop the whole stack with one Otsu rectangle."""
    resized = np.stack([resize_short_side(s, short_side) for s in volume])
    h, w = volume.shape[1:]
    scale = (resized.shape[2] / w, resized.shape[1] / h)
    rect = volume_crop_bounds(resized, pad=pad)
    new_annot = remap_annotation(annotation, scale, rect) if annotation is not None else None
    return PreprocessResult(np.ascontiguousarray(rect.apply(resized)), rect, scale, new_annot)


def preprocess_manifest(
    manifest: StudyManifest, out_dir, short_side: int = 1024, pad: int = 8
) -> StudyManifest:
    """Preprocess every volume of ``manifest`` into ``out_dir``.

    Writes the volumes in the same directory layout, ``manifest.csv`` with
    remapped annotations and ``crops.json`` with per-volume crop rectangles.
    Returns the new manifest.
    """
    out_dir = Path(out_dir)
    records, crops = [], {}
    for rec in manifest.entries:
        raw = read_volume(manifest.volume_dir(rec))
        res = preprocess_volume(raw, rec.annotation, short_side=short_side, pad=pad)
        write_volume(out_dir / rec.path, res.volume)
        crops[rec.volume_id] = {
            "rect": res.rect.as_dict(),
            "scale_xy": list(res.scale_xy),
            "shape": list(res.volume.shape[1:]),
        }
        records.append(
            VolumeRecord(rec.patient_id, rec.study_id, rec.laterality, rec.view, rec.path,
                         rec.n_slices, rec.class_label, res.annotation)
        )
        log.debug("%s crop %s", rec.volume_id, res.rect)
    new = StudyManifest(records, out_dir)
    write_manifest(new, out_dir / "manifest.csv")
    (out_dir / "crops.json").write_text(json.dumps(crops, indent=2, sort_keys=True) + "\n")
    return new
