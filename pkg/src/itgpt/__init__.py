"""Irregular-time multimodal attention models trained with reverse-mode autodiff on numpy."""

__version__ = "0.1.0"
