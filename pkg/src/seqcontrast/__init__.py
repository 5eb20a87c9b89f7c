"""Contrastive pre-training of 3D point-cloud features from moving-object sequences.

The package generates synthetic 4D sequences (a rigid object moving through a
static scene) with exact point correspondences, encodes them with sparse 3D and
4D convolutional U-Nets, and trains the 3D encoder under joint 3D-3D, 3D-4D,
and 4D-4D contrastive constraints.
"""

from .geom import PointCloud, SimilarityTransform, OccupancyMap2D
from .trainer import ContrastivePretrainer, TrainConfig

__version__ = "0.1.0"

__all__ = [
    "PointCloud",
    "SimilarityTransform",
    "OccupancyMap2D",
    "ContrastivePretrainer",
    "TrainConfig",
    "__version__",
]
