"""Multi-patch slice scoring, max aggregation to volumes, and ScoreTable I/O."""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .data import ABNORMAL, StudyManifest, VolumeStore, slice_label
from .patches import extract_patch, sample_window


def aggregate_patch_scores(probabilities: Sequence[float]) -> float:
    """Slice score = arithmetic mean of the patch probabilities."""
    if len(probabilities) == 0:
        raise ValueError("no patch probabilities to aggregate")
    return float(np.mean(probabilities))


@torch.no_grad()
def patch_probabilities(model: nn.Module, patches: np.ndarray) -> np.ndarray:
    """Softmax probability of the abnormal class for a ``(N, P, P)`` patch batch."""
    x = torch.from_numpy(np.ascontiguousarray(patches, dtype=np.float32)).unsqueeze(1)
    return torch.softmax(model(x), dim=1)[:, 1].double().numpy()


def score_slice(
    slice_image: np.ndarray, model: nn.Module, n_patches: int, patch_size: int, rng: np.random.Generator
) -> float:
    """Mean abnormal probability over ``n_patches`` unconstrained random patches."""
    if n_patches < 1:
        raise ValueError("n_patches must be >= 1")
    h, w = slice_image.shape
    windows = [sample_window(h, w, patch_size, rng) for _ in range(n_patches)]
    patches = np.stack([extract_patch(slice_image, win) for win in windows])
    return aggregate_patch_scores(patch_probabilities(model, patches))


def score_volume(slice_scores: Sequence[float]) -> float:
    """Volume score = max slice score."""
    if len(slice_scores) == 0:
        raise ValueError("volume has no slice scores")
    return float(max(slice_scores))


def slice_rng(seed: int, volume_id: str, slice_index: int) -> np.random.Generator:
    # keyed per slice so results do not depend on evaluation order
    return np.random.default_rng([seed, zlib.crc32(volume_id.encode()), slice_index])


@dataclass
class ScoreTable:
    volume_ids: list[str] = field(default_factory=list)
    slice_indices: list[int] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)
    labels: list[int] = field(default_factory=list)
    volume_rollup: list[tuple[str, float, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.scores)

    @property
    def volume_scores(self) -> np.ndarray:
        return np.array([r[1] for r in self.volume_rollup])

    @property
    def volume_labels(self) -> np.ndarray:
        return np.array([r[2] for r in self.volume_rollup])

    def write(self, slices_path, volumes_path) -> None:
        with open(slices_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["volume_id", "slice_index", "score", "label"])
            for row in zip(self.volume_ids, self.slice_indices, self.scores, self.labels):
                w.writerow([row[0], row[1], repr(float(row[2])), row[3]])
        with open(volumes_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["volume_id", "score", "label"])
            for vid, score, label in self.volume_rollup:
                w.writerow([vid, repr(float(score)), label])

    @classmethod
    def read(cls, slices_path, volumes_path: Optional[Path] = None) -> "ScoreTable":
        table = cls()
        with open(slices_path, newline="") as fh:
            for r in csv.DictReader(fh):
                table.volume_ids.append(r["volume_id"])
                table.slice_indices.append(int(r["slice_index"]))
                table.scores.append(float(r["score"]))
                table.labels.append(int(r["label"]))
        if volumes_path is not None and Path(volumes_path).is_file():
            with open(volumes_path, newline="") as fh:
                table.volume_rollup = [
                    (r["volume_id"], float(r["score"]), int(r["label"])) for r in csv.DictReader(fh)
                ]
        else:
            table.volume_rollup = rollup(table)
        return table


def rollup(table: ScoreTable) -> list[tuple[str, float, int]]:
    """Volume rows from slice rows: max score; label abnormal if any slice is.

    Only used when a volume file is missing; :func:`evaluate` labels volumes
    from the manifest's class label.
    """
    by_vol: dict[str, list] = {}
    for vid, score, label in zip(table.volume_ids, table.scores, table.labels):
        entry = by_vol.setdefault(vid, [[], 0])
        entry[0].append(score)
        entry[1] = max(entry[1], label)
    return [(vid, score_volume(s), lab) for vid, (s, lab) in sorted(by_vol.items())]


def evaluate(
    model: nn.Module,
    manifest: StudyManifest,
    n_patches: int,
    patch_size: int,
    seed: int,
    label_window: int = 9,
    store: Optional[VolumeStore] = None,
) -> ScoreTable:
    """Score every slice of every volume and roll up to volume scores."""
    model.eval()
    store = store or VolumeStore(manifest)
    table = ScoreTable()
    for rec in sorted(manifest.entries, key=lambda r: r.volume_id):
        volume = store.volume(rec).astype(np.float32) / 65535.0
        scores = []
        for i in range(rec.n_slices):
            score = score_slice(volume[i], model, n_patches, patch_size, slice_rng(seed, rec.volume_id, i))
            scores.append(score)
            table.volume_ids.append(rec.volume_id)
            table.slice_indices.append(i)
            table.scores.append(score)
            table.labels.append(int(slice_label(rec, i, label_window) == ABNORMAL))
        table.volume_rollup.append((rec.volume_id, score_volume(scores), int(rec.is_abnormal)))
    return table
