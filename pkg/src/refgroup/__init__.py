"""Referring image segmentation by contrastive query-token grouping, on a numpy autograd core."""

__version__ = "0.1.0"
