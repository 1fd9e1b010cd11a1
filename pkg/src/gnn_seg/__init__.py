"""Superpixel graph neural network segmentation of brain tissue slices."""

__version__ = "0.1.0"
