"""Pancreatic tumor screening by multi-scale 3D segmentation and a voxel-count rule."""

__version__ = "0.1.0"
