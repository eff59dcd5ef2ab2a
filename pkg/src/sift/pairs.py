"""Positive-pair policies for contrastive pre-training and view augmentation."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .data import SliceRef, StudyManifest, VIEWS

log = logging.getLogger(__name__)

PolicyKind = Literal["sift", "same_image_only", "same_patient_any", "inter_slice_only"]
POLICY_KINDS = ("sift", "same_image_only", "same_patient_any", "inter_slice_only")

SAME_SLICE = "same_slice"
INTER_SLICE = "inter_slice"
INTER_VIEW = "inter_view"
# only produced by same_patient_any: other side or other study of the patient
SAME_PATIENT = "same_patient"
PAIR_KINDS = (SAME_SLICE, INTER_SLICE, INTER_VIEW, SAME_PATIENT)


@dataclass(frozen=True)
class PairPolicy:
    kind: str = "sift"
    view_prob: float = 0.5
    k: int = 9

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown pair policy {self.kind!r}; expected one of {POLICY_KINDS}")
        if not 0.0 <= self.view_prob <= 1.0:
            raise ValueError("view_prob must lie in [0, 1]")
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass(frozen=True)
class AugmentParams:
    crop_scale_range: tuple[float, float] = (0.6, 1.0)
    crop_ratio_range: tuple[float, float] = (3 / 4, 4 / 3)
    jitter_strength: float = 0.2
    flip_prob: float = 0.5
    blur_prob: float = 0.5
    blur_sigma_range: tuple[float, float] = (0.1, 1.0)
    output_size: int = 64

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"crop_scale_range must satisfy 0 < min <= max <= 1, got {self.crop_scale_range}")
        if self.crop_ratio_range[0] > self.crop_ratio_range[1] or self.crop_ratio_range[0] <= 0:
            raise ValueError("invalid crop_ratio_range")
        if self.jitter_strength < 0:
            raise ValueError("jitter_strength must be >= 0")
        for name in ("flip_prob", "blur_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.output_size < 1:
            raise ValueError("output_size must be >= 1")


@dataclass(frozen=True)
class PairSample:
    anchor: SliceRef
    positive: SliceRef
    pair_kind: str


def is_negative(anchor: SliceRef, candidate: SliceRef) -> bool:
    """True unless ``candidate`` is positive-eligible for ``anchor``.

    Positive-eligible means the same breast in the same study: the same
    volume, or the other view of that side. Other sides, other studies of
    the same patient, and other patients are all negatives.
    """
    return anchor.volume.side_key != candidate.volume.side_key


def _other_view(anchor: SliceRef, manifest: StudyManifest):
    v = anchor.volume
    other = VIEWS[1 - VIEWS.index(v.view)]
    return manifest.find(v.patient_id, v.study_id, v.laterality, other)


def _neighbor(anchor: SliceRef, k: int, rng: np.random.Generator) -> PairSample:
    n = anchor.volume.n_slices
    i = anchor.slice_index
    if n == 1:
        log.debug("single-slice volume %s: falling back to same-slice pair", anchor.volume.volume_id)
        return PairSample(anchor, anchor, SAME_SLICE)
    # Uniform over in-bounds offsets in {-k..-1, 1..k}; same law as redrawing until in bounds.
    offsets = [d for d in range(-k, k + 1) if d != 0 and 0 <= i + d < n]
    d = offsets[int(rng.integers(len(offsets)))]
    return PairSample(anchor, SliceRef(anchor.volume, i + d), INTER_SLICE)


def sample_positive(
    anchor: SliceRef, manifest: StudyManifest, policy: PairPolicy, rng: np.random.Generator
) -> PairSample:
    if policy.kind == "same_image_only":
        return PairSample(anchor, anchor, SAME_SLICE)
    if policy.kind == "inter_slice_only":
        return _neighbor(anchor, policy.k, rng)
    if policy.kind == "same_patient_any":
        vols = manifest.patient_volumes(anchor.volume.patient_id)
        sizes = np.array([v.n_slices for v in vols])
        flat = int(rng.integers(sizes.sum()))
        vi = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
        vol = vols[vi]
        pos = SliceRef(vol, flat - int(sizes[:vi].sum()))
        if vol.key == anchor.volume.key:
            kind = SAME_SLICE if pos.slice_index == anchor.slice_index else INTER_SLICE
        elif vol.side_key == anchor.volume.side_key:
            kind = INTER_VIEW
        else:
            kind = SAME_PATIENT
        return PairSample(anchor, pos, kind)

    # sift: other view with probability view_prob, otherwise a neighbouring slice
    if rng.random() < policy.view_prob:
        other = _other_view(anchor, manifest)
        if other is not None:
            return PairSample(anchor, SliceRef(other, int(rng.integers(other.n_slices))), INTER_VIEW)
        log.debug("no other view for %s: falling back to inter-slice pair", anchor.volume.volume_id)
    return _neighbor(anchor, policy.k, rng)


def pair_kind_counts(pairs) -> dict[str, int]:
    counts = Counter(p.pair_kind for p in pairs)
    return {kind: counts.get(kind, 0) for kind in PAIR_KINDS}


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def _resized_crop_box(h: int, w: int, params: AugmentParams, rng: np.random.Generator):
    area = h * w
    log_lo, log_hi = math.log(params.crop_ratio_range[0]), math.log(params.crop_ratio_range[1])
    for _ in range(10):
        target = area * rng.uniform(*params.crop_scale_range)
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        cw = int(round(math.sqrt(target * ratio)))
        ch = int(round(math.sqrt(target / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            y0 = int(rng.integers(h - ch + 1))
            x0 = int(rng.integers(w - cw + 1))
            return y0, x0, ch, cw
    return 0, 0, h, w


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    if image.shape == (size, size):
        return image.astype(np.float32, copy=True)
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None, None]
    return F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)[0, 0].numpy()


def flip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1].copy()


def augment(image: np.ndarray, params: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    """Random resized crop -> horizontal flip -> brightness/contrast -> blur.

    Brightness multiplies by ``b ~ U[1-s, 1+s]``; contrast blends towards the
    image mean with ``c ~ U[1-s, 1+s]`` (``s = jitter_strength``). Output is a
    float32 ``output_size`` square clipped to [0, 1].
    """
    h, w = image.shape
    n = params.output_size
    if h < n or w < n:
        raise ValueError(f"image {h}x{w} is smaller than the {n}x{n} augmentation output")
    y0, x0, ch, cw = _resized_crop_box(h, w, params, rng)
    out = resize_bilinear(image[y0:y0 + ch, x0:x0 + cw], n)
    if rng.random() < params.flip_prob:
        out = flip(out)
    s = params.jitter_strength
    if s > 0:
        b = rng.uniform(1 - s, 1 + s)
        c = rng.uniform(1 - s, 1 + s)
        out = out * b
        out = c * out + (1 - c) * out.mean()
        out = np.clip(out, 0.0, 1.0)
    if rng.random() < params.blur_prob:
        out = ndimage.gaussian_filter(out, sigma=rng.uniform(*params.blur_sigma_range), mode="reflect")
    return out.astype(np.float32, copy=False)
