"""Modality-aware feature distillation for multimodal continual learning, at desk scale."""

__version__ = "0.1.0"
