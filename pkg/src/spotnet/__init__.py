"""Anchor-free keypoint detection with a segmentation head used as self-attention."""

__version__ = "0.1.0"
