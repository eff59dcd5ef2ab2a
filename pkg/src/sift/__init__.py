"""Metadata-aware contrastive pre-training and local multi-patch fine-tuning
for extremely imbalanced slice/volume classification."""

__version__ = "0.1.0"
