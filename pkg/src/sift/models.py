"""Backbones with an ordered block partition, plus contrastive and classifier heads.

Both model types share the ``backbone.*`` parameter namespace and keep their
head under ``head.*``, so a contrastive checkpoint loads into a classifier
with only the head left unmatched.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

ENCODER_KINDS = ("small_cnn", "residual")


@dataclass(frozen=True)
class EncoderSpec:
    kind: str = "small_cnn"
    input_size: tuple[int, int] = (64, 64)
    embedding_dim: int = 128
    width: int = 16
    # residual only: basic blocks per stage; (3, 4, 6, 3) gives a ResNet-34-like depth
    stage_depths: tuple[int, int, int, int] = (1, 1, 1, 1)
    # fixed input standardization (x - mean) / std applied inside the backbone
    input_mean: float = 0.3
    input_std: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "stage_depths", tuple(int(v) for v in self.stage_depths))
        if self.kind not in ENCODER_KINDS:
            raise ValueError(f"unsupported encoder kind {self.kind!r}; expected one of {ENCODER_KINDS}")
        if self.embedding_dim < 8:
            raise ValueError("embedding_dim must be >= 8")
        if self.width < 4:
            raise ValueError("width must be >= 4")
        if len(self.stage_depths) != 4 or min(self.stage_depths) < 1:
            raise ValueError("stage_depths must be four positive integers")
        if self.input_std <= 0:
            raise ValueError("input_std must be > 0")

    @property
    def n_blocks(self) -> int:
        """Feature blocks plus the head."""
        return 8 if self.kind == "small_cnn" else 6

    def to_dict(self) -> dict:
        return asdict(self)


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels // 4) or 1, channels)


class ConvStage(nn.Sequential):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__(
            nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
            _norm(cout),
            nn.ReLU(inplace=True),
        )


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.norm1 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.norm2 = _norm(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), _norm(cout))

    def forward(self, x):
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


class Backbone(nn.Module):
    """Ordered feature blocks followed by global average pooling."""

    def __init__(self, blocks: Sequence[nn.Module], out_features: int, mean: float = 0.0, std: float = 1.0):
        super().__init__()
        self.blocks = nn.ModuleList(blocks)
        self.out_features = out_features
        self.mean, self.std = float(mean), float(std)

    def forward(self, x):
        x = (x - self.mean) / self.std
        for block in self.blocks:
            x = block(x)
        return torch.flatten(F.adaptive_avg_pool2d(x, 1), 1)


def small_cnn_backbone(width: int) -> Backbone:
    # 7 conv stages, stride 2 on stages 1, 3, 5, 7
    chans = [width, width, 2 * width, 2 * width, 4 * width, 4 * width, 8 * width]
    blocks, cin = [], 1
    for i, cout in enumerate(chans):
        blocks.append(ConvStage(cin, cout, stride=2 if i % 2 == 0 else 1))
        cin = cout
    return Backbone(blocks, chans[-1])


def residual_backbone(width: int, depths: Sequence[int]) -> Backbone:
    stem = nn.Sequential(
        nn.Conv2d(1, width, 5, stride=2, padding=2, bias=False), _norm(width), nn.ReLU(inplace=True)
    )
    blocks, cin = [stem], width
    for i, depth in enumerate(depths):
        cout = width * 2**i
        layers = [BasicBlock(cin, cout, stride=1 if i == 0 else 2)]
        layers += [BasicBlock(cout, cout, 1) for _ in range(depth - 1)]
        blocks.append(nn.Sequential(*layers))
        cin = cout
    return Backbone(blocks, cin)


def build_backbone(spec: EncoderSpec) -> Backbone:
    if spec.kind == "small_cnn":
        bb = small_cnn_backbone(spec.width)
    else:
        bb = residual_backbone(spec.width, spec.stage_depths)
    bb.mean, bb.std = spec.input_mean, spec.input_std
    return bb


class ContrastiveEncoder(nn.Module):
    """Backbone + 2-layer projection head emitting L2-normalized embeddings."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        self.backbone = build_backbone(spec)
        d = self.backbone.out_features
        self.head = nn.Sequential(nn.Linear(d, d), nn.ReLU(inplace=True), nn.Linear(d, spec.embedding_dim))

    def forward(self, x):
        return F.normalize(self.head(self.backbone(x)), dim=1)


class Classifier(nn.Module):
    """Backbone + 2-class linear head (logits: normal, abnormal)."""

    def __init__(self, spec: EncoderSpec, n_classes: int = 2):
        super().__init__()
        self.spec = spec
        self.backbone = build_backbone(spec)
        self.head = nn.Linear(self.backbone.out_features, n_classes)

    def forward(self, x):
        return self.head(self.backbone(x))


def build_encoder(spec: EncoderSpec) -> ContrastiveEncoder:
    return ContrastiveEncoder(spec)


def build_classifier(spec: EncoderSpec) -> Classifier:
    return Classifier(spec)


def block_partition(model: nn.Module) -> list[list[nn.Parameter]]:
    """Parameter groups ordered from the input-side block to the head."""
    groups = [list(block.parameters()) for block in model.backbone.blocks]
    groups.append(list(model.head.parameters()))
    return groups


def init_from_contrastive(classifier: Classifier, state_dict: dict) -> list[str]:
    """Load backbone weights from a contrastive checkpoint; returns unmatched keys."""
    result = classifier.load_state_dict(state_dict, strict=False)
    unmatched = sorted(result.missing_keys) + sorted(result.unexpected_keys)
    bad = [k for k in unmatched if not k.startswith("head.")]
    if bad:
        raise ValueError(f"incompatible checkpoint: backbone keys unmatched: {bad[:5]}")
    return unmatched


# ---------------------------------------------------------------------------
# Checkpoints: weights.pt + checkpoint.json in one directory
# ---------------------------------------------------------------------------


def save_checkpoint(
    directory,
    model: nn.Module,
    spec: EncoderSpec,
    phase: str,
    epoch: int,
    config_hash: str = "",
    metrics: Optional[dict] = None,
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), directory / "weights.pt")
    meta = {
        "spec": spec.to_dict(),
        "phase": phase,
        "epoch": epoch,
        "config_hash": config_hash,
        "metrics": metrics or {},
    }
    (directory / "checkpoint.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory) -> tuple[dict, dict]:
    """Return ``(state_dict, meta)``; meta["spec"] is an :class:`EncoderSpec`."""
    directory = Path(directory)
    meta_path = directory / "checkpoint.json"
    if not meta_path.is_file():
        raise FileNotFoundError(f"not a checkpoint directory: {directory}")
    meta = json.loads(meta_path.read_text())
    meta["spec"] = EncoderSpec(**meta["spec"])
    state = torch.load(directory / "weights.pt", map_location="cpu", weights_only=True)
    return state, meta


def load_classifier(directory) -> tuple[Classifier, dict]:
    state, meta = load_checkpoint(directory)
    if meta["phase"] != "finetune":
        raise ValueError(f"checkpoint {directory} is a {meta['phase']!r} checkpoint, not finetune")
    model = build_classifier(meta["spec"])
    model.load_state_dict(state)
    model.eval()
    return model, meta
