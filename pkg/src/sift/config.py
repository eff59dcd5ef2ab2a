"""Run configuration: a validated JSON tree of per-stage sections.

Every section maps onto one dataclass; unknown keys are rejected by name.
Defaults are the full-scale hyperparameters (``full.json`` spells them
out); ``desk.json`` is a CPU-sized preset for synthetic data.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
import platform
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Optional

from .contrastive import ContrastiveConfig
from .finetune import FinetuneConfig
from .models import EncoderSpec
from .pairs import AugmentParams, PairPolicy
from .synthetic import SynthConfig


class ConfigError(ValueError):
    pass


def _fields(cls) -> dict:
    return {
        f.name: (f.default if f.default is not dataclasses.MISSING else f.default_factory())
        for f in dataclasses.fields(cls)
    }


def _jsonable(value):
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    return value


DATACLASS_SECTIONS = {
    "synth": SynthConfig,
    "policy": PairPolicy,
    "augment": AugmentParams,
    "encoder": EncoderSpec,
    "pretrain": ContrastiveConfig,
    "finetune": FinetuneConfig,
}

PLAIN_SECTIONS = {
    "preprocess": {"short_side": 1024, "pad": 8},
    "split": {"ratios": [0.7, 0.1, 0.2], "stratify": False},
    "evaluate": {"n_patches": 20, "sweep": [1, 2, 4, 8, 16, 20]},
}


def default_tree() -> dict:
    tree: dict[str, Any] = {"seed": 0}
    for name, cls in DATACLASS_SECTIONS.items():
        tree[name] = {k: _jsonable(v) for k, v in _fields(cls).items()}
    tree.update(copy.deepcopy(PLAIN_SECTIONS))
    tree["finetune"]["init"] = "pretrained"
    return tree


def _merge(base: dict, update: dict, path: str = "") -> None:
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where} must be an object")
            _merge(base[key], value, where + ".")
        else:
            base[key] = value


def parse_override(text: str) -> dict:
    """``"pretrain.epochs=2"`` -> ``{"pretrain": {"epochs": 2}}`` (value parsed as JSON if possible)."""
    if "=" not in text:
        raise ConfigError(f"override must look like section.key=value, got {text!r}")
    dotted, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    node = out
    parts = dotted.strip().split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value
    return out


def preset_path(name: str) -> Path:
    return Path(str(resources.files("sift") / "presets" / f"{name}.json"))


class RunConfig:
    """Merged, validated configuration tree."""

    def __init__(self, tree: Optional[dict] = None):
        self.tree = default_tree()
        if tree:
            _merge(self.tree, tree)
        self.validate()

    @classmethod
    def load(cls, path=None, overrides: Iterable[str] = ()) -> "RunConfig":
        cfg = cls()
        if path is not None:
            p = Path(path)
            if not p.is_file() and not p.suffix and preset_path(str(path)).is_file():
                p = preset_path(str(path))
            try:
                _merge(cfg.tree, json.loads(p.read_text()))
            except FileNotFoundError:
                raise ConfigError(f"config file not found: {path}") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        for text in overrides:
            _merge(cfg.tree, parse_override(text))
        cfg.validate()
        return cfg

    def validate(self) -> None:
        for name, cls in DATACLASS_SECTIONS.items():
            try:
                self._build(name, cls)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid [{name}] section: {exc}") from None
        if self.tree["finetune"]["init"] not in ("pretrained", "random"):
            raise ConfigError("finetune.init must be 'pretrained' or 'random'")
        ratios = self.tree["split"]["ratios"]
        if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1) > 1e-9:
            raise ConfigError(f"split.ratios must be three positive numbers summing to 1, got {ratios}")
        if int(self.tree["evaluate"]["n_patches"]) < 1:
            raise ConfigError("evaluate.n_patches must be >= 1")

    def _build(self, name, cls):
        values = {k: v for k, v in self.tree[name].items() if k in {f.name for f in dataclasses.fields(cls)}}
        for k, v in values.items():
            if isinstance(v, list):
                values[k] = tuple(v)
        return cls(**values)

    # typed views
    @property
    def seed(self) -> int:
        return int(self.tree["seed"])

    def synth(self) -> SynthConfig:
        return self._build("synth", SynthConfig)

    def policy(self) -> PairPolicy:
        return self._build("policy", PairPolicy)

    def augment(self) -> AugmentParams:
        return self._build("augment", AugmentParams)

    def encoder(self) -> EncoderSpec:
        return self._build("encoder", EncoderSpec)

    def pretrain(self) -> ContrastiveConfig:
        return self._build("pretrain", ContrastiveConfig)

    def finetune(self) -> FinetuneConfig:
        return self._build("finetune", FinetuneConfig)

    def section(self, name: str) -> dict:
        return self.tree[name]

    def to_json(self) -> str:
        return json.dumps(self.tree, sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def versions() -> dict:
    import numpy
    import scipy
    import torch

    from . import __version__

    return {
        "sift": __version__,
        "python": platform.python_version(),
        "numpy": numpy.__version__,
        "scipy": scipy.__version__,
        "torch": torch.__version__,
    }


def write_provenance(out_dir, command: str, config: RunConfig, seed: int, inputs: Iterable = (), extra=None) -> Path:
    """Write ``provenance.json``: command, seed, config (and hash), versions, input hashes."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    hashed = {}
    for p in inputs:
        p = Path(p)
        if p.is_file():
            hashed[p.name] = file_sha256(p)
        elif p.is_dir():
            for f in sorted(p.glob("*.json")) + sorted(p.glob("*.pt")) + sorted(p.glob("*.csv")):
                hashed[f"{p.name}/{f.name}"] = file_sha256(f)
    record = {
        "command": command,
        "seed": seed,
        "config_hash": config.hash,
        "config": config.tree,
        "inputs": hashed,
        "versions": versions(),
    }
    if extra:
        record.update(extra)
    path = out_dir / "provenance.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return path


def num_workers() -> int:
    """Loader/generator parallelism cap from ``SIFT_NUM_WORKERS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("SIFT_NUM_WORKERS", "1")))
    except ValueError:
        return 1
