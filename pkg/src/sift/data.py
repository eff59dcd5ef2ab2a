"""Study / volume / slice data model, manifest I/O and subject-wise splitting.

A manifest is a CSV with one row per volume::

    patient_id,study_id,laterality,view,path,n_slices,class_label,
    annot_slice,annot_x,annot_y,annot_w,annot_h

Annotation columns are empty for normal volumes. ``path`` is relative to the
directory holding the CSV and names a directory of index-ordered 16-bit PNG
slices (``000.png``, ``001.png``, ...).
"""

from __future__ import annotations

import csv
import json
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image

NORMAL = "normal"
ABNORMAL = "abnormal"
LATERALITIES = ("L", "R")
VIEWS = ("CC", "MLO")

MANIFEST_COLUMNS = (
    "patient_id",
    "study_id",
    "laterality",
    "view",
    "path",
    "n_slices",
    "class_label",
    "annot_slice",
    "annot_x",
    "annot_y",
    "annot_w",
    "annot_h",
)


class ManifestError(ValueError):
    """Raised when a manifest violates its schema or invariants."""


@dataclass(frozen=True)
class Annotation:
    """Single annotated slice with a bounding box ``(x, y, width, height)``."""

    slice_index: int
    x: int
    y: int
    width: int
    height: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ManifestError(f"annotation bbox must have positive size, got {self.bbox}")
        if self.x < 0 or self.y < 0:
            raise ManifestError(f"annotation bbox has negative origin: {self.bbox}")

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, self.width, self.height)

    @property
    def center(self) -> tuple[int, int]:
        return (self.x + self.width // 2, self.y + self.height // 2)


@dataclass(frozen=True)
class VolumeRecord:
    patient_id: str
    study_id: str
    laterality: str
    view: str
    path: str
    n_slices: int
    class_label: str
    annotation: Optional[Annotation] = None

    def __post_init__(self):
        if self.laterality not in LATERALITIES:
            raise ManifestError(f"laterality must be one of {LATERALITIES}, got {self.laterality!r}")
        if self.view not in VIEWS:
            raise ManifestError(f"view must be one of {VIEWS}, got {self.view!r}")
        if self.n_slices < 1:
            raise ManifestError(f"n_slices must be >= 1, got {self.n_slices}")
        if self.class_label not in (NORMAL, ABNORMAL):
            raise ManifestError(f"class_label must be normal/abnormal, got {self.class_label!r}")
        if (self.class_label == ABNORMAL) != (self.annotation is not None):
            raise ManifestError(
                f"volume {self.volume_id}: class_label={self.class_label} requires "
                f"{'an' if self.class_label == ABNORMAL else 'no'} annotation"
            )
        if self.annotation is not None and not 0 <= self.annotation.slice_index < self.n_slices:
            raise ManifestError(
                f"volume {self.volume_id}: annotated slice {self.annotation.slice_index} "
                f"outside [0, {self.n_slices})"
            )

    @property
    def volume_id(self) -> str:
        return f"{self.patient_id}_{self.study_id}_{self.laterality}_{self.view}"

    @property
    def key(self) -> tuple[str, str, str, str]:
        return (self.patient_id, self.study_id, self.laterality, self.view)

    @property
    def side_key(self) -> tuple[str, str, str]:
        """(patient, study, laterality): the breast this volume images."""
        return (self.patient_id, self.study_id, self.laterality)

    @property
    def is_abnormal(self) -> bool:
        return self.class_label == ABNORMAL


@dataclass(frozen=True)
class SliceRef:
    volume: VolumeRecord
    slice_index: int

    def __post_init__(self):
        if not 0 <= self.slice_index < self.volume.n_slices:
            raise IndexError(
                f"slice {self.slice_index} out of range for {self.volume.volume_id} "
                f"({self.volume.n_slices} slices)"
            )


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r <= 0 for r in self.ratios):
            raise ValueError(f"split ratios must be three positive numbers, got {self.ratios}")
        if not math.isclose(sum(self.ratios), 1.0, abs_tol=1e-9):
            raise ValueError(f"split ratios must sum to 1, got {sum(self.ratios)}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass
class StudyManifest:
    entries: list[VolumeRecord]
    root_path: Path = field(default_factory=Path)

    def __post_init__(self):
        self.root_path = Path(self.root_path)
        seen = set()
        for rec in self.entries:
            if rec.key in seen:
                raise ManifestError(f"duplicate (patient, study, laterality, view): {rec.key}")
            seen.add(rec.key)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[VolumeRecord]:
        return iter(self.entries)

    def __eq__(self, other) -> bool:
        if not isinstance(other, StudyManifest):
            return NotImplemented
        return self.entries == other.entries and self.root_path.resolve() == other.root_path.resolve()

    @cached_property
    def _by_key(self) -> dict[tuple, VolumeRecord]:
        return {rec.key: rec for rec in self.entries}

    @cached_property
    def _by_patient(self) -> dict[str, list[VolumeRecord]]:
        out = defaultdict(list)
        for rec in self.entries:
            out[rec.patient_id].append(rec)
        return dict(out)

    def find(self, patient_id: str, study_id: str, laterality: str, view: str) -> Optional[VolumeRecord]:
        return self._by_key.get((patient_id, study_id, laterality, view))

    def patient_volumes(self, patient_id: str) -> list[VolumeRecord]:
        return self._by_patient.get(patient_id, [])

    @property
    def patients(self) -> list[str]:
        return sorted(self._by_patient)

    def volume_dir(self, rec: VolumeRecord) -> Path:
        return self.root_path / rec.path

    def slices(self) -> list[SliceRef]:
        return [SliceRef(rec, i) for rec in self.entries for i in range(rec.n_slices)]

    def subset(self, entries: Sequence[VolumeRecord]) -> "StudyManifest":
        return StudyManifest(list(entries), self.root_path)

    def summary(self) -> dict:
        return {
            "patients": len(self._by_patient),
            "volumes": len(self.entries),
            "abnormal_volumes": sum(rec.is_abnormal for rec in self.entries),
        }


# ---------------------------------------------------------------------------
# Volume storage
# ---------------------------------------------------------------------------


def slice_filename(index: int, n_slices: int) -> str:
    width = max(3, len(str(n_slices - 1)))
    return f"{index:0{width}d}.png"


def write_volume(directory: Path, volume: np.ndarray) -> None:
    """Write a ``(n_slices, H, W)`` uint16 stack as zero-padded PNG files."""
    if volume.ndim != 3:
        raise ValueError(f"volume must be 3-D, got shape {volume.shape}")
    if volume.dtype != np.uint16:
        raise TypeError(f"volume must be uint16, got {volume.dtype}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n = volume.shape[0]
    for i in range(n):
        Image.fromarray(np.ascontiguousarray(volume[i])).save(directory / slice_filename(i, n))


def list_slice_files(directory: Path) -> list[Path]:
    return sorted(Path(directory).glob("*.png"), key=lambda p: int(p.stem))


def read_volume(directory: Path) -> np.ndarray:
    files = list_slice_files(directory)
    if not files:
        raise FileNotFoundError(f"no PNG slices in {directory}")
    return np.stack([np.array(Image.open(f)) for f in files]).astype(np.uint16, copy=False)


def slice_shape(directory: Path) -> tuple[int, int]:
    """(height, width) of the first slice, read from the PNG header only."""
    files = list_slice_files(directory)
    if not files:
        raise FileNotFoundError(f"no PNG slices in {directory}")
    with Image.open(files[0]) as im:
        w, h = im.size
    return h, w


class VolumeStore:
    """Lazy, cached access to slice pixels as float32 in [0, 1]."""

    def __init__(self, manifest: StudyManifest):
        self.manifest = manifest
        self._cache: dict[str, np.ndarray] = {}

    def volume(self, rec: VolumeRecord) -> np.ndarray:
        arr = self._cache.get(rec.path)
        if arr is None:
            arr = read_volume(self.manifest.volume_dir(rec))
            if arr.shape[0] != rec.n_slices:
                raise ManifestError(
                    f"{rec.volume_id}: manifest says {rec.n_slices} slices, found {arr.shape[0]}"
                )
            self._cache[rec.path] = arr
        return arr

    def slice(self, ref: SliceRef) -> np.ndarray:
        return self.volume(ref.volume)[ref.slice_index].astype(np.float32) / 65535.0


# ---------------------------------------------------------------------------
# Manifest I/O
# ---------------------------------------------------------------------------


def _parse_int(value: str, column: str, row: int) -> int:
    try:
        return int(value)
    except (TypeError, ValueError):
        raise ManifestError(f"row {row}: column {column!r} must be an integer, got {value!r}") from None


def _parse_row(row: dict, rownum: int) -> VolumeRecord:
    annot_cols = MANIFEST_COLUMNS[7:]
    present = [bool((row.get(c) or "").strip()) for c in annot_cols]
    annotation = None
    if any(present):
        if not all(present):
            raise ManifestError(f"row {rownum}: annotation columns must be all set or all empty")
        vals = [_parse_int(row[c], c, rownum) for c in annot_cols]
        try:
            annotation = Annotation(*vals)
        except ManifestError as exc:
            raise ManifestError(f"row {rownum}: {exc}") from None
    try:
        return VolumeRecord(
            patient_id=row["patient_id"].strip(),
            study_id=row["study_id"].strip(),
            laterality=row["laterality"].strip(),
            view=row["view"].strip(),
            path=row["path"].strip(),
            n_slices=_parse_int(row["n_slices"], "n_slices", rownum),
            class_label=row["class_label"].strip(),
            annotation=annotation,
        )
    except ManifestError as exc:
        raise ManifestError(f"row {rownum}: {exc}") from None


def load_manifest(path: os.PathLike | str, check_files: bool = True) -> StudyManifest:
    """Read and validate a manifest CSV.

    Row numbers in error messages count the header as row 1, so the first
    data row is row 2 (what a spreadsheet shows).
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    entries = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
            raise ManifestError(
                f"manifest header must be {','.join(MANIFEST_COLUMNS)}; got {reader.fieldnames}"
            )
        for rownum, row in enumerate(reader, start=2):
            rec = _parse_row(row, rownum)
            if check_files:
                vdir = root / rec.path
                if not vdir.is_dir():
                    raise ManifestError(f"row {rownum}: volume directory missing: {vdir}")
                if rec.annotation is not None:
                    h, w = slice_shape(vdir)
                    a = rec.annotation
                    if a.x + a.width > w or a.y + a.height > h:
                        raise ManifestError(
                            f"row {rownum}: bbox {a.bbox} exceeds slice bounds {w}x{h}"
                        )
            entries.append(rec)
    try:
        return StudyManifest(entries, root)
    except ManifestError as exc:
        raise ManifestError(f"{path}: {exc}") from None


def write_manifest(manifest: StudyManifest, path: os.PathLike | str) -> Path:
    """Write a manifest CSV; volume paths are rewritten relative to ``path``'s directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out_root = path.parent.resolve()
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for rec in manifest.entries:
            rel = os.path.relpath((manifest.root_path / rec.path).resolve(), out_root)
            a = rec.annotation
            annot = ["", "", "", "", ""] if a is None else [a.slice_index, a.x, a.y, a.width, a.height]
            writer.writerow(
                [rec.patient_id, rec.study_id, rec.laterality, rec.view, Path(rel).as_posix(),
                 rec.n_slices, rec.class_label, *annot]
            )
    return path


# ---------------------------------------------------------------------------
# Splitting and labelling
# ---------------------------------------------------------------------------


def _cut_counts(n: int, ratios: Sequence[float], min_one: bool) -> tuple[int, int, int]:
    n_val = math.floor(ratios[1] * n)
    n_test = math.floor(ratios[2] * n)
    if min_one:
        n_val, n_test = max(1, n_val), max(1, n_test)
    return n - n_val - n_test, n_val, n_test


def split_subjectwise(
    manifest: StudyManifest, spec: SplitSpec, stratify: bool = False
) -> tuple[StudyManifest, StudyManifest, StudyManifest]:
    """Split volumes into train/val/test so that no patient crosses splits.

    Patients are shuffled with ``spec.seed``; val and test each take
    ``floor(ratio * n_patients)`` (at least one), the remainder goes to train.

    With ``stratify=True`` the same rule is applied separately to patients
    with and without an abnormal volume, which keeps rare positives present
    in every split of a small dataset. A stratum with fewer than three
    patients puts its remainder in train.
    """
    patients = manifest.patients
    if len(patients) < 3:
        raise ValueError(f"need at least 3 patients to split, got {len(patients)}")
    rng = np.random.default_rng(spec.seed)

    if stratify:
        abnormal = {p for p in patients if any(r.is_abnormal for r in manifest.patient_volumes(p))}
        strata = [[p for p in patients if p not in abnormal], [p for p in patients if p in abnormal]]
    else:
        strata = [patients]

    assignment: dict[str, int] = {}
    for stratum in strata:
        if not stratum:
            continue
        order = [stratum[i] for i in rng.permutation(len(stratum))]
        n_train, n_val, _ = _cut_counts(len(order), spec.ratios, min_one=len(order) >= 3)
        for i, p in enumerate(order):
            assignment[p] = 0 if i < n_train else (1 if i < n_train + n_val else 2)

    parts = [[rec for rec in manifest.entries if assignment[rec.patient_id] == s] for s in range(3)]
    return tuple(manifest.subset(part) for part in parts)  # type: ignore[return-value]


def write_split(
    splits: Sequence[StudyManifest], out_dir: os.PathLike | str, names=("train", "val", "test")
) -> dict:
    out_dir = Path(out_dir)
    summary = {}
    for name, part in zip(names, splits):
        write_manifest(part, out_dir / f"{name}.csv")
        summary[name] = part.summary()
    (out_dir / "split_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def slice_label(volume: VolumeRecord, slice_index: int, window: int = 9) -> str:
    """Abnormal iff the volume is annotated and the slice lies within ``window`` of it."""
    if not 0 <= slice_index < volume.n_slices:
        raise IndexError(f"slice {slice_index} out of range for {volume.volume_id}")
    if window < 0:
        raise ValueError("window must be non-negative")
    a = volume.annotation
    if a is not None and abs(slice_index - a.slice_index) <= window:
        return ABNORMAL
    return NORMAL
