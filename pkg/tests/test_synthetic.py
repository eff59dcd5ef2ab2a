import filecmp

import numpy as np
import pytest

from sift.data import ABNORMAL, VolumeStore, load_manifest, read_volume, slice_label
from sift.synthetic import SynthConfig, _Lesion, _render_volume, generate_dataset

SMALL = dict(slices_per_volume=10, slice_shape=(64, 64), lesion_radius_range=(3, 5), lesion_z_extent=5)


@pytest.fixture(scope="module")
def twenty(tmp_path_factory):
    cfg = SynthConfig(n_patients=20, abnormal_fraction=0.1, seed=7, **SMALL)
    out = tmp_path_factory.mktemp("synth20")
    return cfg, out, generate_dataset(cfg, out)


def test_counts(twenty):
    _, _, m = twenty
    s = m.summary()
    assert s == {"patients": 20, "volumes": 80, "abnormal_volumes": 4}
    abnormal_patients = {r.patient_id for r in m.entries if r.is_abnormal}
    assert len(abnormal_patients) == 2
    for pid in abnormal_patients:
        sides = {r.laterality for r in m.patient_volumes(pid) if r.is_abnormal}
        views = {r.view for r in m.patient_volumes(pid) if r.is_abnormal}
        assert len(sides) == 1 and views == {"CC", "MLO"}


def test_byte_identical_rerun_and_parallel(twenty, tmp_path):
    cfg, out, _ = twenty
    generate_dataset(cfg, tmp_path / "a", workers=2)
    assert (tmp_path / "a" / "manifest.csv").read_bytes() == (out / "manifest.csv").read_bytes()
    for rel in ("P0000/S0/L_CC", "P0013/S0/R_MLO"):
        names = sorted(p.name for p in (out / rel).iterdir())
        match, mismatch, errors = filecmp.cmpfiles(out / rel, tmp_path / "a" / rel, names, shallow=False)
        assert not mismatch and not errors


def test_manifest_roundtrip_from_disk(twenty):
    _, out, m = twenty
    assert load_manifest(out / "manifest.csv").entries == m.entries


def test_lesion_contrast_at_annotated_slice(twenty):
    cfg, _, m = twenty
    store = VolumeStore(m)
    for rec in m.entries:
        if not rec.is_abnormal:
            continue
        a = rec.annotation
        vol = store.volume(rec).astype(np.float64) / 65535.0
        img = vol[a.slice_index]
        inside = np.zeros(img.shape, dtype=bool)
        inside[a.y:a.y + a.height, a.x:a.x + a.width] = True
        assert img[inside].mean() - img[~inside].mean() >= cfg.lesion_intensity_boost / 2


def test_imbalance_within_one_patient():
    for n, frac in ((20, 0.1), (33, 0.1), (50, 0.07), (9, 0.3)):
        cfg = SynthConfig(n_patients=n, abnormal_fraction=frac, **SMALL)
        assert abs(cfg.n_abnormal - frac * n) <= 1


@pytest.mark.parametrize("extent", [1, 4, 5, 9])
def test_lesion_spans_exact_extent(extent):
    cfg = SynthConfig(n_patients=4, abnormal_fraction=0.25, slices_per_volume=16, slice_shape=(64, 64),
                      lesion_radius_range=(3, 5), lesion_z_extent=extent)
    lesion = _Lesion(depth=0.5, vertical=0.0, radius=(4, 3), center_slice=8)
    plain, _ = _render_volume(np.random.default_rng(11), cfg, "L", "CC", 0.4, None)
    with_lesion, annot = _render_volume(np.random.default_rng(11), cfg, "L", "CC", 0.4, lesion)
    changed = np.flatnonzero((with_lesion != plain).reshape(16, -1).any(axis=1)).tolist()
    first = 8 - extent // 2
    assert changed == list(range(first, first + extent))
    assert annot.slice_index == 8
    from sift.data import VolumeRecord

    rec = VolumeRecord("P", "S", "L", "CC", "x", 16, ABNORMAL, annot)
    marked = {i for i in range(16) if slice_label(rec, i, extent // 2) == ABNORMAL}
    assert set(changed) <= marked


def test_lesion_never_on_normal_side(twenty):
    _, _, m = twenty
    for rec in m.entries:
        if rec.is_abnormal:
            other = [r for r in m.patient_volumes(rec.patient_id) if r.laterality != rec.laterality]
            assert all(not r.is_abnormal for r in other)


def test_invalid_configs(tmp_path):
    with pytest.raises(ValueError):
        SynthConfig(n_patients=4, abnormal_fraction=0.1)
    with pytest.raises(ValueError):
        SynthConfig(slice_shape=(32, 32), lesion_radius_range=(6, 10))
    with pytest.raises(ValueError):
        SynthConfig(slices_per_volume=5, lesion_z_extent=9)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        generate_dataset(SynthConfig(n_patients=10, abnormal_fraction=0.1, **SMALL), blocker / "sub")


def test_views_share_side_density(twenty):
    _, _, m = twenty
    pid = m.patients[0]
    means = {(r.laterality, r.view): read_volume(m.volume_dir(r)).mean() for r in m.patient_volumes(pid)}
    # same breast, two views: similar overall brightness
    assert abs(means[("L", "CC")] - means[("L", "MLO")]) < 0.25 * means[("L", "CC")]
