import json
import math
import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sift.data import Annotation
from sift.preprocess import (
    CropRect,
    otsu_threshold,
    preprocess_manifest,
    preprocess_volume,
    remap_annotation,
    resize_short_side,
    volume_crop_bounds,
)


def between_class_variance(hist, t):
    """Exact sigma_b^2 for classes {<= t} and {> t}; None if a class is empty."""
    n = sum(hist)
    w0 = sum(hist[: t + 1])
    w1 = n - w0
    if w0 == 0 or w1 == 0:
        return None
    mu0 = Fraction(sum(i * c for i, c in enumerate(hist[: t + 1])), w0)
    mu1 = Fraction(sum(i * c for i, c in enumerate(hist) if i > t), w1)
    return Fraction(w0 * w1, n * n) * (mu0 - mu1) ** 2


def otsu_oracle(hist):
    """All maximizing levels from an exhaustive scan over every threshold."""
    scores = {t: between_class_variance(hist, t) for t in range(len(hist))}
    scores = {t: v for t, v in scores.items() if v is not None}
    best = max(scores.values())
    return sorted(t for t, v in scores.items() if v == best)


# ---- resize ---------------------------------------------------------------


def test_resize_exact_scale():
    out = resize_short_side(np.zeros((2000, 3000), dtype=np.float32), 1024)
    assert out.shape == (1024, 1536)


def test_resize_identity_when_at_target():
    img = np.random.default_rng(0).random((1024, 1500)).astype(np.float32)
    out = resize_short_side(img, 1024)
    np.testing.assert_array_equal(out, img)


def test_resize_rounds_long_side():
    assert round(1777 * 1024 / 1000) == 1820
    assert resize_short_side(np.zeros((1000, 1777), dtype=np.uint16), 1024).shape == (1024, 1820)
    # portrait input: the width is the short side
    assert resize_short_side(np.zeros((1777, 1000), dtype=np.uint16), 1024).shape == (1820, 1024)


def test_resize_is_bilinear_and_keeps_dtype():
    ramp = np.tile(np.arange(8, dtype=np.float32), (8, 1))
    out = resize_short_side(ramp, 16)
    assert out.shape == (16, 16)
    # a linear ramp stays linear (away from the clamped borders)
    row = out[8, 2:-2]
    np.testing.assert_allclose(np.diff(row), 0.5, atol=1e-5)
    img16 = (ramp * 1000).astype(np.uint16)
    assert resize_short_side(img16, 16).dtype == np.uint16


def test_resize_errors():
    with pytest.raises(ValueError):
        resize_short_side(np.zeros((0, 5)))
    with pytest.raises(ValueError):
        resize_short_side(np.zeros((5, 5)), 0)


# ---- otsu -----------------------------------------------------------------


def test_otsu_bimodal():
    hist = [0] * 256
    hist[10] = 100
    hist[200] = 100
    level, degenerate = otsu_threshold(hist)
    assert not degenerate
    # every t in [10, 199] separates the modes equally; the lowest one is returned
    assert 10 <= level < 200
    assert level == otsu_oracle(hist)[0]


def test_otsu_constant_is_degenerate():
    hist = [0] * 256
    hist[0] = 4096
    assert otsu_threshold(hist) == (0, True)
    hist = [0] * 256
    hist[77] = 5
    assert otsu_threshold(hist) == (77, True)


def test_otsu_empty_raises():
    with pytest.raises(ValueError):
        otsu_threshold([0] * 256)


def random_hist(rng):
    kind = rng.integers(3)
    if kind == 0:
        hist = rng.integers(0, 50, 256)
    elif kind == 1:
        hist = np.zeros(256, dtype=np.int64)
        idx = rng.choice(256, size=int(rng.integers(2, 6)), replace=False)
        hist[idx] = rng.integers(1, 30, idx.size)
    else:
        x = np.concatenate([rng.normal(rng.uniform(20, 100), 10, 500), rng.normal(rng.uniform(120, 230), 15, 300)])
        hist = np.bincount(np.clip(x, 0, 255).astype(int), minlength=256)
    if np.count_nonzero(hist) < 2:
        hist[0] += 1
        hist[255] += 1
    return [int(c) for c in hist]


def test_otsu_matches_exhaustive_scan_1000():
    rng = np.random.default_rng(1000)
    for _ in range(1000):
        hist = random_hist(rng)
        level, degenerate = otsu_threshold(hist)
        assert not degenerate
        assert level == otsu_oracle(hist)[0]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_otsu_mirror(seed):
    hist = random_hist(np.random.default_rng(seed))
    mirrored = hist[::-1]
    maximizers = otsu_oracle(hist)
    # split {<=t} | {>t} maps to {<=254-t} | {>254-t}; the lowest mirrored maximizer
    # therefore comes from the highest original one
    assert otsu_threshold(mirrored).level == 254 - maximizers[-1]
    assert otsu_oracle(mirrored) == sorted(254 - t for t in maximizers)


# ---- crop bounds ----------------------------------------------------------


def test_crop_bright_square():
    img = np.zeros((256, 256), dtype=np.uint16)
    img[50:150, 50:150] = 4000
    rect = volume_crop_bounds(img, pad=8)
    assert rect.contains(CropRect(50, 50, 150, 150))
    assert rect == CropRect(42, 42, 158, 158)


def test_crop_union_of_slices():
    vol = np.zeros((2, 200, 300), dtype=np.uint16)
    vol[0, 10:40, 20:60] = 1000
    vol[1, 150:190, 200:290] = 1000
    rect = volume_crop_bounds(vol, pad=8)
    assert rect.contains(CropRect(20, 10, 60, 40)) and rect.contains(CropRect(200, 150, 290, 190))
    assert rect == CropRect(12, 2, 298, 198)


def test_crop_clips_to_image():
    img = np.zeros((64, 64), dtype=np.uint16)
    img[0:10, 60:64] = 9
    assert volume_crop_bounds(img, pad=8) == CropRect(52, 0, 64, 18)


def test_crop_all_black_warns():
    with pytest.warns(RuntimeWarning):
        rect = volume_crop_bounds(np.zeros((3, 40, 50), dtype=np.uint16))
    assert rect == CropRect(0, 0, 50, 40)


def test_crop_idempotent_on_recrop():
    rng = np.random.default_rng(4)
    vol = np.zeros((3, 120, 160), dtype=np.float32)
    vol[:, 30:90, 40:100] = 0.8 + 0.1 * rng.random((3, 60, 60))
    first = volume_crop_bounds(vol)
    cropped = first.apply(vol)
    second = volume_crop_bounds(cropped)
    assert second == CropRect(0, 0, cropped.shape[2], cropped.shape[1])


def test_crop_rect_invariants():
    with pytest.raises(ValueError):
        CropRect(5, 0, 5, 3)
    with pytest.raises(ValueError):
        CropRect(-1, 0, 5, 3)


# ---- annotation mapping ---------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_resize_then_crop_keeps_bbox_inside(seed):
    rng = np.random.default_rng(seed)
    h, w = int(rng.integers(40, 90)), int(rng.integers(40, 90))
    vol = np.zeros((2, h, w), dtype=np.uint16)
    y0, x0 = int(rng.integers(2, h // 3)), int(rng.integers(2, w // 3))
    vol[:, y0:h - 2, x0:w - 3] = 30000
    bw, bh = int(rng.integers(1, 8)), int(rng.integers(1, 8))
    bx, by = int(rng.integers(x0, w - 3 - bw)), int(rng.integers(y0, h - 2 - bh))
    annot = Annotation(1, bx, by, bw, bh)
    target = int(rng.integers(24, 80))
    res = preprocess_volume(vol, annot, short_side=target, pad=4)
    a = res.annotation
    _, H, W = res.volume.shape
    assert 0 <= a.x and a.x + a.width <= W and 0 <= a.y and a.y + a.height <= H
    sx, sy = res.scale_xy
    # affine: scale then shift by the crop offset, rounded outward
    assert a.x == max(0, math.floor(bx * sx) - res.rect.x0)
    assert a.y == max(0, math.floor(by * sy) - res.rect.y0)
    assert a.x + a.width == min(W, math.ceil((bx + bw) * sx) - res.rect.x0)
    assert a.y + a.height == min(H, math.ceil((by + bh) * sy) - res.rect.y0)
    # the bright region carried the box, so the box lands on foreground
    assert res.volume[1, a.y:a.y + a.height, a.x:a.x + a.width].mean() > 15000


def test_remap_outside_crop_raises():
    with pytest.raises(ValueError):
        remap_annotation(Annotation(0, 0, 0, 2, 2), (1.0, 1.0), CropRect(10, 10, 20, 20))


def test_preprocess_manifest_writes_outputs(tiny_manifest, tmp_path):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        new = preprocess_manifest(tiny_manifest, tmp_path, short_side=48, pad=4)
    assert (tmp_path / "manifest.csv").is_file()
    crops = json.loads((tmp_path / "crops.json").read_text())
    assert set(crops) == {r.volume_id for r in tiny_manifest.entries}
    from sift.data import load_manifest, read_volume

    loaded = load_manifest(tmp_path / "manifest.csv")
    assert loaded.entries == new.entries
    for rec in loaded.entries:
        vol = read_volume(loaded.volume_dir(rec))
        assert vol.shape[0] == rec.n_slices
        assert list(vol.shape[1:]) == crops[rec.volume_id]["shape"]
