"""Adversarial robustness harness for a toy text-conditioned segmentation model."""

__version__ = "0.1.0"
