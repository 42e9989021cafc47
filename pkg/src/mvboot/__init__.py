"""Multiview bootstrapping for keypoint detectors."""

__version__ = "0.1.0"
