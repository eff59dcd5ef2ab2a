"""Local multi-patch supervised fine-tuning with balanced batches.

Three strategies: ``linear_probe`` trains only the 2-class head,
``full`` trains everything at one rate, ``discriminative`` gives block ``j``
(counted from the head, ``j = 0``) the rate ``base_lr / eta**j``.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .contrastive import cosine_schedule, derive_rng
from .data import ABNORMAL, NORMAL, SliceRef, StudyManifest, VolumeStore, slice_label
from .inference import evaluate
from .metrics import auc
from .models import Classifier, EncoderSpec, block_partition, build_classifier, init_from_contrastive
from .patches import PatchSample, extract_patch, sample_patch  # noqa: F401  (re-exported)

log = logging.getLogger(__name__)

FINETUNE_MODES = ("linear_probe", "full", "discriminative")


@dataclass(frozen=True)
class FinetuneConfig:
    patch_size: int = 448
    mode: str = "discriminative"
    base_lr: float = 1e-2
    eta: float = 2.8
    epochs: int = 50
    batch_size: int = 32
    target_batch_ratio: float = 0.5
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    label_window: int = 9
    # epoch length: each abnormal slice drawn about this many times
    draws_per_abnormal: int = 4
    max_batches_per_epoch: Optional[int] = None
    val_n_patches: int = 1
    exclude_abnormal_volumes_from_normals: bool = False

    def __post_init__(self):
        if self.mode not in FINETUNE_MODES:
            raise ValueError(f"unknown fine-tuning mode {self.mode!r}; expected one of {FINETUNE_MODES}")
        if self.eta <= 1:
            raise ValueError("eta must be > 1")
        if self.patch_size < 1 or self.batch_size < 2 or self.epochs < 1:
            raise ValueError("patch_size >= 1, batch_size >= 2 and epochs >= 1 required")
        if self.target_batch_ratio != 0.5:
            raise ValueError("only the 1:1 batch ratio (target_batch_ratio=0.5) is supported")


def discriminative_lr(base_lr: float, eta: float, block_index_from_output: int, n_blocks: int) -> float:
    if not 0 <= block_index_from_output < n_blocks:
        raise ValueError(f"block index {block_index_from_output} outside [0, {n_blocks})")
    return base_lr / eta**block_index_from_output


def build_param_groups(model: Classifier, config: FinetuneConfig) -> list[dict]:
    """Optimizer parameter groups for the configured strategy.

    ``linear_probe`` also freezes the backbone (``requires_grad=False``).
    """
    blocks = block_partition(model)
    if config.mode == "linear_probe":
        for p in model.backbone.parameters():
            p.requires_grad_(False)
        return [{"params": blocks[-1], "lr": config.base_lr, "block": len(blocks) - 1}]
    if config.mode == "full":
        return [{"params": [p for b in blocks for p in b], "lr": config.base_lr, "block": -1}]
    n = len(blocks)
    return [
        {"params": params, "lr": discriminative_lr(config.base_lr, config.eta, n - 1 - i, n), "block": i}
        for i, params in enumerate(blocks)
    ]


def balanced_batch_indices(
    labels: Sequence[int], batch_size: int, rng: np.random.Generator, n_batches: Optional[int] = None
) -> Iterator[np.ndarray]:
    """Yield index batches with ``ceil(B/2)`` abnormal and ``floor(B/2)`` normal samples.

    Abnormal indices are drawn with replacement (over-sampling). Normal
    indices are taken without replacement from a shuffled pass; when fewer
    remain than a batch needs, a fresh shuffle starts. With ``n_batches``
    None the stream is infinite.
    """
    labels = np.asarray(labels)
    abnormal = np.flatnonzero(labels == 1)
    normal = np.flatnonzero(labels == 0)
    if abnormal.size == 0:
        raise ValueError("no abnormal samples: both classes are required")
    if normal.size == 0:
        raise ValueError("no normal samples: both classes are required")
    n_abn, n_norm = math.ceil(batch_size / 2), batch_size // 2
    perm, cursor = rng.permutation(normal), 0
    produced = 0
    while n_batches is None or produced < n_batches:
        abn = rng.choice(abnormal, size=n_abn, replace=True)
        if n_norm > normal.size:
            norm = rng.choice(normal, size=n_norm, replace=True)
        else:
            if cursor + n_norm > perm.size:
                perm, cursor = rng.permutation(normal), 0
            norm = perm[cursor:cursor + n_norm]
            cursor += n_norm
        yield np.concatenate([abn, norm])
        produced += 1


@dataclass
class FinetuneResult:
    model: Classifier
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_auc: float = float("nan")
    unmatched_keys: list[str] = field(default_factory=list)


def training_slices(manifest: StudyManifest, config: FinetuneConfig) -> tuple[list[SliceRef], np.ndarray]:
    refs, labels = [], []
    for ref in manifest.slices():
        label = slice_label(ref.volume, ref.slice_index, config.label_window)
        if label == NORMAL and config.exclude_abnormal_volumes_from_normals and ref.volume.is_abnormal:
            continue
        refs.append(ref)
        labels.append(int(label == ABNORMAL))
    return refs, np.array(labels)


def finetune(
    manifest: StudyManifest,
    config: FinetuneConfig,
    encoder_spec: EncoderSpec,
    seed: int,
    pretrained_state: Optional[dict] = None,
    val_manifest: Optional[StudyManifest] = None,
    store: Optional[VolumeStore] = None,
    val_store: Optional[VolumeStore] = None,
) -> FinetuneResult:
    """Train a 2-class classifier on single patches; keep the best validation-AUC epoch.

    ``pretrained_state`` is a contrastive state dict (None: random init).
    Without a validation manifest the last epoch is kept.
    """
    store = store or VolumeStore(manifest)
    refs, labels = training_slices(manifest, config)
    if labels.sum() == 0 or labels.sum() == labels.size:
        raise ValueError("fine-tuning needs both normal and abnormal training slices")

    torch.manual_seed(seed)
    model = build_classifier(encoder_spec)
    unmatched = init_from_contrastive(model, pretrained_state) if pretrained_state is not None else []
    groups = build_param_groups(model, config)
    for g in groups:
        g["initial_lr"] = g["lr"]
    optimizer = torch.optim.SGD(groups, lr=config.base_lr, momentum=config.sgd_momentum,
                                weight_decay=config.weight_decay)

    n_abn_per_batch = math.ceil(config.batch_size / 2)
    n_batches = math.ceil(config.draws_per_abnormal * int(labels.sum()) / n_abn_per_batch)
    if config.max_batches_per_epoch is not None:
        n_batches = min(n_batches, config.max_batches_per_epoch)
    total = config.epochs * n_batches

    if val_manifest is not None:
        val_store = val_store or VolumeStore(val_manifest)
    result = FinetuneResult(model, unmatched_keys=unmatched)
    best_state, step = None, 0
    for epoch in range(config.epochs):
        rng = derive_rng(seed, 1, epoch)
        if config.mode == "linear_probe":
            model.backbone.eval()
            model.head.train()
        else:
            model.train()
        losses = []
        for idx in balanced_batch_indices(labels, config.batch_size, rng, n_batches):
            factor = cosine_schedule(step, total, 1.0, 0.0)
            for g in optimizer.param_groups:
                g["lr"] = g["initial_lr"] * factor
            patches = []
            for i in idx:
                ref = refs[i]
                image = store.slice(ref)
                label = ABNORMAL if labels[i] else NORMAL
                bbox = ref.volume.annotation.bbox if labels[i] else None
                ps = sample_patch(image, label, bbox, config.patch_size, rng, training=True, source=ref)
                patches.append(extract_patch(image, ps.window))
            x = torch.from_numpy(np.stack(patches)).unsqueeze(1)
            y = torch.from_numpy(labels[idx]).long()
            loss = F.cross_entropy(model(x), y)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite fine-tuning loss at epoch {epoch}, step {step}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
            step += 1

        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_auc": float("nan")}
        if val_manifest is not None:
            table = evaluate(model, val_manifest, config.val_n_patches, config.patch_size,
                             seed=seed, label_window=config.label_window, store=val_store)
            row["val_auc"] = auc(table.scores, table.labels)
            if best_state is None or row["val_auc"] > result.best_val_auc:
                best_state = copy.deepcopy(model.state_dict())
                result.best_epoch, result.best_val_auc = epoch, row["val_auc"]
        result.history.append(row)
        log.info("finetune epoch %d loss %.4f val_auc %.4f", epoch, row["train_loss"], row["val_auc"])

    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        result.best_epoch = config.epochs - 1
    model.eval()
    return result
