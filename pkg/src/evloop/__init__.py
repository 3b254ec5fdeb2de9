"""Iterative visual-evidence augmentation for weakly-supervised lesion localization."""

__version__ = "0.1.0"
