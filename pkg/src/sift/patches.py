"""Square patch windows over a slice, with the tumor-containment rule for training."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import ABNORMAL, NORMAL, SliceRef
from .preprocess import CropRect


@dataclass(frozen=True)
class PatchSample:
    window: CropRect
    label: str
    source: Optional[SliceRef] = None


def _axis_range(extent: int, size: int, lo: Optional[int], length: Optional[int]) -> tuple[int, int]:
    """Inclusive range of window starts along one axis."""
    last = extent - size
    if lo is None:
        return 0, last
    if length <= size:
        # whole box inside the window
        return max(0, lo + length - size), min(lo, last)
    center = lo + length // 2
    return max(0, center - size + 1), min(center, last)


def sample_window(
    height: int,
    width: int,
    patch_size: int,
    rng: np.random.Generator,
    bbox: Optional[tuple[int, int, int, int]] = None,
) -> CropRect:
    """Uniform window position; with ``bbox`` only positions that contain it.

    Per axis: if the box fits in the patch the window must contain the whole
    box extent, otherwise it must contain the box center. Slices smaller than
    the patch are assumed to be padded up to ``patch_size`` first.
    """
    height, width = max(height, patch_size), max(width, patch_size)
    if bbox is None:
        (y_lo, y_hi), (x_lo, x_hi) = _axis_range(height, patch_size, None, None), _axis_range(
            width, patch_size, None, None
        )
    else:
        bx, by, bw, bh = bbox
        x_lo, x_hi = _axis_range(width, patch_size, bx, bw)
        y_lo, y_hi = _axis_range(height, patch_size, by, bh)
        if x_lo > x_hi or y_lo > y_hi:
            raise ValueError(f"bbox {bbox} cannot be contained in a {patch_size} patch of {width}x{height}")
    x0 = int(rng.integers(x_lo, x_hi + 1))
    y0 = int(rng.integers(y_lo, y_hi + 1))
    return CropRect(x0, y0, x0 + patch_size, y0 + patch_size)


def sample_patch(
    slice_image: np.ndarray,
    label: str,
    bbox: Optional[tuple[int, int, int, int]],
    patch_size: int,
    rng: np.random.Generator,
    training: bool = True,
    source: Optional[SliceRef] = None,
) -> PatchSample:
    """Pick a patch window; abnormal training patches must contain the lesion box."""
    if label not in (NORMAL, ABNORMAL):
        raise ValueError(f"unknown label {label!r}")
    constrained = training and label == ABNORMAL
    if constrained and bbox is None:
        raise ValueError("abnormal training patch requires the volume's bbox")
    h, w = slice_image.shape
    window = sample_window(h, w, patch_size, rng, bbox if constrained else None)
    return PatchSample(window, label, source)


def pad_to(image: np.ndarray, size: int) -> np.ndarray:
    """Reflect-pad on the bottom/right so both sides are at least ``size``."""
    h, w = image.shape
    if h >= size and w >= size:
        return image
    return np.pad(image, ((0, max(0, size - h)), (0, max(0, size - w))), mode="reflect")


def extract_patch(image: np.ndarray, window: CropRect) -> np.ndarray:
    return window.apply(pad_to(image, window.width))
