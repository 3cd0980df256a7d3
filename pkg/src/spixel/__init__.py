"""Superpixel graph infusion for image classifiers.

SLIC segmentation, radius graphs over superpixel centroids, and joint
training of a coupled CNN+GNN classifier with a blended loss.
"""

from . import errors, graphgen, imaging, models, slic, tensor, train

__all__ = ["errors", "graphgen", "imaging", "models", "slic", "tensor", "train"]
__version__ = "0.1.0"
