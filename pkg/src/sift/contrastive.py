"""Momentum-contrast pre-training: InfoNCE, EMA key encoder, FIFO key queue."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import StudyManifest, VolumeStore
from .models import ContrastiveEncoder, EncoderSpec, build_encoder
from .pairs import AugmentParams, PairPolicy, augment, pair_kind_counts, sample_positive

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.2
    momentum: float = 0.99
    momentum_end: float = 1.0
    queue_size: int = 4096
    epochs: int = 4000
    batch_size: int = 128
    base_lr: float = 1.5e-2
    lr_end: float = 0.0
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    # None: every slice of the manifest is an anchor once per epoch
    anchors_per_epoch: Optional[int] = None
    strict_queue_filter: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        for name in ("momentum", "momentum_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.queue_size < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("queue_size, batch_size and epochs must be >= 1")
        if self.batch_size > self.queue_size:
            raise ValueError("batch_size must not exceed queue_size")


def info_nce_loss(
    query: torch.Tensor,
    positive_key: torch.Tensor,
    negative_keys: Optional[torch.Tensor],
    temperature: float,
    negative_mask: Optional[torch.Tensor] = None,
    reduction: str = "mean",
) -> torch.Tensor:
    """``-log(exp(q.k+/t) / sum_i exp(q.k_i/t))`` over the positive and all negatives.

    Accepts a single query ``(D,)`` or a batch ``(B, D)``; ``negative_keys``
    is ``(K, D)`` (may be empty or None during queue warm-up).
    ``negative_mask`` (``(B, K)`` bool) drops masked negatives from the sum.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    single = query.dim() == 1
    q = query.unsqueeze(0) if single else query
    kp = positive_key.unsqueeze(0) if positive_key.dim() == 1 else positive_key
    if q.shape != kp.shape:
        raise ValueError(f"query {tuple(q.shape)} and positive {tuple(kp.shape)} differ")
    pos = (q * kp).sum(dim=1, keepdim=True)
    if negative_keys is not None and negative_keys.numel() > 0:
        if negative_keys.dim() != 2 or negative_keys.shape[1] != q.shape[1]:
            raise ValueError(
                f"negative keys {tuple(negative_keys.shape)} do not match embedding dim {q.shape[1]}"
            )
        neg = q @ negative_keys.T
        if negative_mask is not None:
            neg = neg.masked_fill(negative_mask, float("-inf"))
        logits = torch.cat([pos, neg], dim=1)
    else:
        logits = pos
    loss = -F.log_softmax(logits / temperature, dim=1)[:, 0]
    if single:
        return loss[0]
    if reduction == "mean":
        return loss.mean()
    if reduction == "none":
        return loss
    raise ValueError(f"unknown reduction {reduction!r}")


ParamSource = Union[nn.Module, Iterable[torch.Tensor]]


def _params(source: ParamSource) -> list[torch.Tensor]:
    return list(source.parameters()) if isinstance(source, nn.Module) else list(source)


@torch.no_grad()
def ema_update(online: ParamSource, momentum_params: ParamSource, m: float) -> None:
    """In place: ``theta' <- m * theta' + (1 - m) * theta``; ``online`` is untouched."""
    if not 0.0 <= m <= 1.0:
        raise ValueError("m must lie in [0, 1]")
    src, dst = _params(online), _params(momentum_params)
    if len(src) != len(dst) or any(a.shape != b.shape for a, b in zip(src, dst)):
        raise ValueError("online and momentum parameters differ in structure")
    for p, pk in zip(src, dst):
        pk.mul_(m).add_(p.detach(), alpha=1.0 - m)


class MemoryQueue:
    """Fixed-capacity FIFO ring buffer of L2-normalized key embeddings.

    Optional integer ``tags`` travel with each key (used to mask keys from
    the anchor's own breast when strict filtering is on).
    """

    def __init__(self, capacity: int, dim: int, dtype=torch.float32):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self.keys = torch.zeros(capacity, dim, dtype=dtype)
        self.tags = torch.full((capacity,), -1, dtype=torch.long)
        self.write_cursor = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    @torch.no_grad()
    def enqueue(self, new_keys: torch.Tensor, tags: Optional[torch.Tensor] = None) -> "MemoryQueue":
        b = new_keys.shape[0]
        if new_keys.dim() != 2 or new_keys.shape[1] != self.dim:
            raise ValueError(f"keys must be (B, {self.dim}), got {tuple(new_keys.shape)}")
        if b > self.capacity:
            raise ValueError(f"batch of {b} keys exceeds queue capacity {self.capacity}")
        norms = new_keys.norm(dim=1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=1e-4):
            raise ValueError("queue keys must be L2-normalized")
        idx = (self.write_cursor + torch.arange(b)) % self.capacity
        self.keys[idx] = new_keys.detach().to(self.keys.dtype)
        self.tags[idx] = -1 if tags is None else tags.to(torch.long)
        self.write_cursor = (self.write_cursor + b) % self.capacity
        self.size = min(self.capacity, self.size + b)
        return self

    def _order(self) -> torch.Tensor:
        start = (self.write_cursor - self.size) % self.capacity
        return (start + torch.arange(self.size)) % self.capacity

    def contents(self) -> torch.Tensor:
        """Stored keys, oldest first."""
        return self.keys[self._order()]

    def content_tags(self) -> torch.Tensor:
        return self.tags[self._order()]


def cosine_schedule(step: int, total_steps: int, start: float, end: float) -> float:
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return end + 0.5 * (start - end) * (1.0 + math.cos(math.pi * step / total_steps))


def derive_rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in keys])


@dataclass
class PretrainResult:
    model: ContrastiveEncoder
    history: list[dict] = field(default_factory=list)
    steps: int = 0


def contrastive_loss(
    model: torch.nn.Module,
    key_model: torch.nn.Module,
    xq: torch.Tensor,
    xk: torch.Tensor,
    negatives: torch.Tensor,
    temperature: float,
    negative_mask: Optional[torch.Tensor] = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """InfoNCE for one batch. Keys come from ``key_model`` with gradients stopped."""
    q = model(xq)
    with torch.no_grad():
        k = key_model(xk)
    return info_nce_loss(q, k, negatives, temperature, negative_mask=negative_mask), k


def _to_batch(images: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(images)).unsqueeze(1)


def pretrain(
    manifest: StudyManifest,
    policy: PairPolicy,
    config: ContrastiveConfig,
    encoder_spec: EncoderSpec,
    seed: int,
    augment_params: AugmentParams = AugmentParams(),
    store: Optional[VolumeStore] = None,
) -> PretrainResult:
    """Momentum-contrast training of ``encoder_spec`` on slices of ``manifest``.

    Per step: query = online encoder on an augmented anchor; key = momentum
    encoder (no gradient) on an augmented policy-sampled positive; InfoNCE
    against the queue; SGD step; EMA update; enqueue keys. The learning rate
    and the EMA momentum follow per-step cosine schedules.
    """
    if len(manifest) == 0:
        raise ValueError("pretrain needs a non-empty manifest")
    store = store or VolumeStore(manifest)
    torch.manual_seed(seed)
    model = build_encoder(encoder_spec)
    key_model = copy.deepcopy(model)
    for p in key_model.parameters():
        p.requires_grad_(False)

    optimizer = torch.optim.SGD(
        model.parameters(), lr=config.base_lr, momentum=config.sgd_momentum,
        weight_decay=config.weight_decay,
    )
    queue = MemoryQueue(config.queue_size, encoder_spec.embedding_dim)
    side_ids = {key: i for i, key in enumerate(sorted({v.side_key for v in manifest}))}

    anchors = manifest.slices()
    per_epoch = len(anchors) if config.anchors_per_epoch is None else min(len(anchors), config.anchors_per_epoch)
    steps_per_epoch = math.ceil(per_epoch / config.batch_size)
    total = config.epochs * steps_per_epoch
    result = PretrainResult(model)
    step = 0
    for epoch in range(config.epochs):
        rng = derive_rng(seed, epoch)
        order = rng.permutation(len(anchors))[:per_epoch]
        losses, pairs = [], []
        lr = m = float("nan")
        for start in range(0, per_epoch, config.batch_size):
            batch = [anchors[i] for i in order[start:start + config.batch_size]]
            batch_pairs = [sample_positive(a, manifest, policy, rng) for a in batch]
            pairs += batch_pairs
            xq = _to_batch([augment(store.slice(p.anchor), augment_params, rng) for p in batch_pairs])
            xk = _to_batch([augment(store.slice(p.positive), augment_params, rng) for p in batch_pairs])
            tags = torch.tensor([side_ids[p.anchor.volume.side_key] for p in batch_pairs])

            lr = cosine_schedule(step, total, config.base_lr, config.lr_end)
            m = cosine_schedule(step, total, config.momentum, config.momentum_end)
            for group in optimizer.param_groups:
                group["lr"] = lr

            mask = None
            if config.strict_queue_filter and len(queue):
                mask = tags[:, None] == queue.content_tags()[None, :]
            loss, k = contrastive_loss(model, key_model, xq, xk, queue.contents(), config.temperature, mask)
            if not torch.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite contrastive loss at epoch {epoch} step {step} (lr={lr:.3g}, m={m:.4f})"
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            ema_update(model, key_model, m)
            queue.enqueue(k, tags)
            losses.append(loss.item())
            step += 1

        row = {"epoch": epoch, "mean_loss": float(np.mean(losses)), "lr": lr, "m": m}
        row.update(pair_kind_counts(pairs))
        result.history.append(row)
        log.info("pretrain epoch %d loss %.4f lr %.4g m %.5f", epoch, row["mean_loss"], lr, m)
    result.steps = step
    return result
