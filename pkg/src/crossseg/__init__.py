"""Dual-network cross-pseudo-supervision with a contrastive coupling, for three-class segmentation."""

__version__ = "0.1.0"
