from collections import Counter

import numpy as np
import pytest
from scipy import stats

from sift.data import NORMAL, SliceRef, StudyManifest, VolumeRecord
from sift.pairs import (
    INTER_SLICE,
    INTER_VIEW,
    SAME_SLICE,
    AugmentParams,
    PairPolicy,
    augment,
    flip,
    is_negative,
    pair_kind_counts,
    resize_bilinear,
    sample_positive,
)


def vol(pid="P", study="S1", lat="L", view="CC", n=64):
    return VolumeRecord(pid, study, lat, view, f"{pid}/{study}/{lat}_{view}", n, NORMAL)


def study_manifest(n=64, studies=("S1",), views=("CC", "MLO")):
    entries = [vol("P", s, lat, v, n) for s in studies for lat in ("L", "R") for v in views]
    entries += [vol("Q", "S1", lat, v, n) for lat in ("L", "R") for v in views]
    return StudyManifest(entries)


class ForcedRng:
    """Wraps a generator but pins the branch draw."""

    def __init__(self, first_random, seed=0):
        self._first = first_random
        self._rng = np.random.default_rng(seed)

    def random(self):
        return self._first

    def integers(self, *a, **k):
        return self._rng.integers(*a, **k)


# ---- positive sampling --------------------------------------------------


def test_view_branch_gives_other_view():
    m = study_manifest()
    anchor = SliceRef(m.find("P", "S1", "L", "CC"), 12)
    for seed in range(50):
        pair = sample_positive(anchor, m, PairPolicy(), ForcedRng(0.0, seed))
        assert pair.pair_kind == INTER_VIEW
        v = pair.positive.volume
        assert (v.patient_id, v.study_id, v.laterality, v.view) == ("P", "S1", "L", "MLO")


def test_slice_branch_offsets():
    m = study_manifest()
    anchor = SliceRef(m.find("P", "S1", "L", "CC"), 30)
    seen = set()
    for seed in range(300):
        pair = sample_positive(anchor, m, PairPolicy(k=9), ForcedRng(0.99, seed))
        assert pair.pair_kind == INTER_SLICE and pair.positive.volume == anchor.volume
        seen.add(pair.positive.slice_index)
    assert seen == set(range(21, 40)) - {30}


def test_edge_anchor_stays_in_bounds():
    m = study_manifest(n=20)
    anchor = SliceRef(m.find("P", "S1", "L", "CC"), 1)
    idx = Counter(
        sample_positive(anchor, m, PairPolicy(k=9), ForcedRng(0.99, s)).positive.slice_index for s in range(4000)
    )
    allowed = {0} | set(range(2, 11))
    assert set(idx) == allowed
    # resampling (not clamping) keeps the admissible offsets uniform
    assert stats.chisquare([idx[i] for i in sorted(allowed)]).pvalue > 0.01


def test_missing_other_view_falls_back():
    m = study_manifest(views=("CC",))
    anchor = SliceRef(m.find("P", "S1", "L", "CC"), 5)
    pair = sample_positive(anchor, m, PairPolicy(), ForcedRng(0.0))
    assert pair.pair_kind == INTER_SLICE


def test_single_slice_volume_falls_back_to_same_slice():
    m = StudyManifest([vol(n=1)])
    anchor = SliceRef(m.entries[0], 0)
    pair = sample_positive(anchor, m, PairPolicy(kind="inter_slice_only"), np.random.default_rng(0))
    assert pair.pair_kind == SAME_SLICE and pair.positive == anchor


def test_ten_thousand_draws_distribution_and_soundness():
    m = study_manifest()
    anchor = SliceRef(m.find("P", "S1", "L", "CC"), 30)
    rng = np.random.default_rng(2024)
    pairs = [sample_positive(anchor, m, PairPolicy(), rng) for _ in range(10_000)]
    counts = pair_kind_counts(pairs)
    assert 0.485 <= counts[INTER_VIEW] / 10_000 <= 0.515
    offsets = Counter(p.positive.slice_index - 30 for p in pairs if p.pair_kind == INTER_SLICE)
    assert sorted(offsets) == [d for d in range(-9, 10) if d != 0]
    assert stats.chisquare(list(offsets.values())).pvalue > 0.01
    assert sum(is_negative(p.anchor, p.positive) for p in pairs) == 0


def test_same_image_only_and_same_patient_any():
    m = study_manifest(studies=("S1", "S2"))
    anchor = SliceRef(m.find("P", "S1", "L", "CC"), 7)
    rng = np.random.default_rng(1)
    assert sample_positive(anchor, m, PairPolicy(kind="same_image_only"), rng).positive == anchor
    pairs = [sample_positive(anchor, m, PairPolicy(kind="same_patient_any"), rng) for _ in range(2000)]
    assert {p.positive.volume.patient_id for p in pairs} == {"P"}
    assert len({p.positive.volume.key for p in pairs}) == 8
    # the looser policy emits pairs the metadata policy would treat as negatives
    assert any(is_negative(p.anchor, p.positive) for p in pairs)
    sift_pairs = [sample_positive(anchor, m, PairPolicy(), rng) for _ in range(2000)]
    assert not any(is_negative(p.anchor, p.positive) for p in sift_pairs)


def test_sampling_deterministic():
    m = study_manifest()
    anchor = SliceRef(m.find("P", "S1", "R", "MLO"), 40)
    r1, r2 = np.random.default_rng(5), np.random.default_rng(5)
    seq1 = [sample_positive(anchor, m, PairPolicy(), r1) for _ in range(200)]
    seq2 = [sample_positive(anchor, m, PairPolicy(), r2) for _ in range(200)]
    assert seq1 == seq2


def test_policy_validation():
    with pytest.raises(ValueError):
        PairPolicy(kind="medaug")
    with pytest.raises(ValueError):
        PairPolicy(view_prob=1.5)
    with pytest.raises(ValueError):
        PairPolicy(k=0)


# ---- negatives ---------------------------------------------------------


def test_is_negative_cases():
    m = study_manifest(studies=("S1", "S2"))
    a = SliceRef(m.find("P", "S1", "L", "CC"), 10)
    assert is_negative(a, SliceRef(m.find("P", "S1", "R", "CC"), 10))
    assert is_negative(a, SliceRef(m.find("P", "S2", "L", "CC"), 10))
    assert is_negative(a, SliceRef(m.find("Q", "S1", "L", "CC"), 10))
    assert not is_negative(a, SliceRef(m.find("P", "S1", "L", "CC"), 11))
    assert not is_negative(a, SliceRef(m.find("P", "S1", "L", "MLO"), 50))


# ---- augmentation ------------------------------------------------------


def smooth_image(seed=0, size=96):
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:size, 0:size] / size
    return (0.4 + 0.15 * np.sin(6 * x + rng.uniform(0, 6)) * np.cos(4 * y)).astype(np.float32)


def test_identity_parameters():
    img = smooth_image()
    p = AugmentParams(crop_scale_range=(1.0, 1.0), jitter_strength=0.0, flip_prob=0.0, blur_prob=0.0,
                      output_size=48)
    out = augment(img, p, np.random.default_rng(0))
    np.testing.assert_array_equal(out, resize_bilinear(img, 48))
    p_same = AugmentParams(crop_scale_range=(1.0, 1.0), jitter_strength=0.0, flip_prob=0.0, blur_prob=0.0,
                           output_size=96)
    np.testing.assert_array_equal(augment(img, p_same, np.random.default_rng(0)), img)


def test_flip_involution():
    img = smooth_image(1)
    np.testing.assert_array_equal(flip(flip(img)), img)
    p = AugmentParams(crop_scale_range=(1.0, 1.0), jitter_strength=0.0, flip_prob=1.0, blur_prob=0.0,
                      output_size=96)
    np.testing.assert_array_equal(augment(augment(img, p, np.random.default_rng(0)), p,
                                          np.random.default_rng(1)), img)


def test_jitter_keeps_mean_within_25_percent():
    img = smooth_image(2)
    p = AugmentParams(crop_scale_range=(1.0, 1.0), jitter_strength=0.2, output_size=64)
    rng = np.random.default_rng(3)
    ref = resize_bilinear(img, 64).mean()
    for _ in range(1000):
        out = augment(img, p, rng)
        assert abs(out.mean() - ref) <= 0.25 * ref


def test_augment_output_and_determinism():
    img = smooth_image(4, 128)
    p = AugmentParams(output_size=64)
    a = augment(img, p, np.random.default_rng(7))
    b = augment(img, p, np.random.default_rng(7))
    assert a.shape == (64, 64) and a.dtype == np.float32
    np.testing.assert_array_equal(a, b)
    assert 0.0 <= a.min() and a.max() <= 1.0


def test_augment_rejects_small_image():
    with pytest.raises(ValueError):
        augment(np.zeros((32, 32), dtype=np.float32), AugmentParams(output_size=64), np.random.default_rng(0))


def test_augment_param_validation():
    with pytest.raises(ValueError):
        AugmentParams(crop_scale_range=(0.9, 0.5))
    with pytest.raises(ValueError):
        AugmentParams(flip_prob=1.2)
    with pytest.raises(ValueError):
        AugmentParams(jitter_strength=-0.1)
