"""strataforest: multi-layer vegetation structure from aerial LiDAR scans.

Classifies forest point clouds into six classes, produces per-layer
occupancy and height rasters, and reconstructs watertight meshes for the
ground vegetation, understory, and overstory layers.
"""

__version__ = "0.1.0"

from .core import (
    LAYERS,
    N_CLASSES,
    UNLABELED,
    Cylinder,
    LayerSpec,
    PlotCloud,
    PointRecord,
    StrataError,
    VegClass,
    extract_cylinder,
    inference_grid,
    training_grid,
)
