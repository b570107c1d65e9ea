"""Chest X-ray lung segmentation with SegNet and residual U-Net, built on numpy."""

__version__ = "0.1.0"
