"""Vitiligo lesion segmentation toolkit: mini U-Nets, Jaccard scoring and seeded watershed refinement."""

__version__ = "0.1.0"
