"""Domain types shared across the pipeline: class taxonomy, vegetation layer
thresholds, plot point clouds, and cylindrical sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

UNLABELED = -1


class VegClass(IntEnum):
    GROUND = 0
    GROUND_VEG = 1
    UNDERSTORY = 2
    STEM = 3
    DECIDUOUS = 4
    CONIFEROUS = 5


N_CLASSES = 6
CLASS_NAMES = ("ground", "ground_veg", "understory", "stem", "deciduous", "coniferous")

LAYERS = ("gv", "understory", "overstory")

# layer occupancy is defined by these point classes (stem and ground never
# contribute to vegetation coverage)
LAYER_CLASSES = {
    "gv": (VegClass.GROUND_VEG,),
    "understory": (VegClass.UNDERSTORY,),
    "overstory": (VegClass.DECIDUOUS, VegClass.CONIFEROUS),
}

# cylinder feature channels
F_DX, F_DY, F_Z, F_INTENSITY, F_RETURN = range(5)
N_FEATURES = 5

INTENSITY_PCT = 95.0     # per-plot normalization percentile
INTENSITY_CLIP = 1.5
RETURN_DIVISOR = 3.0     # echoes beyond 3 saturate
MIN_TRAIN_POINTS = 64    # cylinders sparser than this are skipped in training


class StrataError(Exception):
    """Base class for errors raised by this package."""


@dataclass(frozen=True)
class PointRecord:
    """A single LiDAR return with ground-normalized elevation."""

    x: float
    y: float
    z: float
    intensity: int = 0
    return_number: int = 1
    label: int = UNLABELED

    def __post_init__(self):
        if self.z < 0:
            raise ValueError(f"point elevation must be >= 0, got {self.z}")
        if self.return_number < 1:
            raise ValueError(f"return_number must be >= 1, got {self.return_number}")
        if self.intensity < 0:
            raise ValueError(f"intensity must be >= 0, got {self.intensity}")
        if self.label != UNLABELED and self.label not in range(N_CLASSES):
            raise ValueError(f"label must be -1 (unlabeled) or 0..5, got {self.label}")


@dataclass(frozen=True)
class LayerSpec:
    """Height thresholds separating the three vegetation layers.

    Ground vegetation tops lie in (gv_low, gv_high], understory tops in
    (gv_high, under_high], overstory tops above under_high.
    """

    gv_low: float = 0.5
    gv_high: float = 1.5
    under_high: float = 5.0

    def __post_init__(self):
        if not (0.0 < self.gv_low < self.gv_high < self.under_high):
            raise ValueError(
                f"layer thresholds must satisfy 0 < gv_low < gv_high < under_high, "
                f"got {self.gv_low}, {self.gv_high}, {self.under_high}"
            )


@dataclass
class PlotCloud:
    """A georeferenced plot point cloud stored as parallel attribute arrays."""

    plot_id: str
    origin: tuple[float, float]
    extent: tuple[float, float]
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    intensity: np.ndarray
    return_number: np.ndarray
    label: np.ndarray
    _intensity_scale: float | None = field(default=None, repr=False, compare=False)

    @classmethod
    def from_arrays(cls, plot_id, x, y, z, intensity, return_number, label,
                    origin=None, extent=None):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        intensity = np.asarray(intensity, dtype=np.float64)
        return_number = np.asarray(return_number, dtype=np.int64)
        label = np.asarray(label, dtype=np.int64)
        if origin is None:
            origin = (float(x.min()), float(y.min())) if len(x) else (0.0, 0.0)
        if extent is None:
            extent = (
                (float(x.max()) - origin[0], float(y.max()) - origin[1])
                if len(x) else (0.0, 0.0)
            )
        cloud = cls(plot_id, tuple(origin), tuple(extent),
                    x, y, z, intensity, return_number, label)
        cloud.validate()
        return cloud

    @classmethod
    def from_records(cls, plot_id, records, origin=None, extent=None):
        recs = list(records)
        return cls.from_arrays(
            plot_id,
            [p.x for p in recs], [p.y for p in recs], [p.z for p in recs],
            [p.intensity for p in recs], [p.return_number for p in recs],
            [p.label for p in recs], origin=origin, extent=extent,
        )

    @property
    def n_points(self) -> int:
        return len(self.x)

    def validate(self):
        n = self.n_points
        for name in ("y", "z", "intensity", "return_number", "label"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"attribute array '{name}' length mismatch")
        if n == 0:
            return
        if self.z.min() < 0:
            raise ValueError("all point elevations must be >= 0")
        if self.return_number.min() < 1:
            raise ValueError("all return numbers must be >= 1")
        bad = (self.label != UNLABELED) & ((self.label < 0) | (self.label >= N_CLASSES))
        if bad.any():
            raise ValueError("labels must be -1 (unlabeled) or 0..5")
        x0, y0 = self.origin
        w, h = self.extent
        eps = 1e-9
        if (self.x.min() < x0 - eps or self.x.max() > x0 + w + eps
                or self.y.min() < y0 - eps or self.y.max() > y0 + h + eps):
            raise ValueError(f"plot {self.plot_id}: points outside the bounding box")

    def intensity_scale(self) -> float:
        """Per-plot intensity normalizer: the 95th percentile of raw intensity."""
        if self._intensity_scale is None:
            if self.n_points == 0:
                scale = 1.0
            else:
                scale = float(np.percentile(self.intensity, INTENSITY_PCT))
                if scale <= 0:
                    scale = 1.0
            self._intensity_scale = scale
        return self._intensity_scale


@dataclass(frozen=True)
class Cylinder:
    """Points of a plot within horizontal distance <= radius of a center.

    Vertical extent is unbounded. Features per point: (dx, dy, z,
    normalized intensity, normalized return number); dx/dy are relative to
    the cylinder center.
    """

    center: tuple[float, float]
    radius: float
    point_indices: np.ndarray
    features: np.ndarray

    @property
    def n_points(self) -> int:
        return len(self.point_indices)

    @property
    def is_empty(self) -> bool:
        return self.n_points == 0

    @property
    def xyz(self) -> np.ndarray:
        """(dx, dy, z) columns used as 3D geometry by the classifier."""
        return self.features[:, :3]


def extract_cylinder(cloud: PlotCloud, center, radius: float) -> Cylinder:
    """Extract all cloud points within horizontal distance <= radius of center."""
    if radius <= 0:
        raise ValueError(f"cylinder radius must be positive, got {radius}")
    cx, cy = float(center[0]), float(center[1])
    dx = cloud.x - cx
    dy = cloud.y - cy
    mask = dx * dx + dy * dy <= radius * radius
    idx = np.nonzero(mask)[0]
    feats = np.empty((len(idx), N_FEATURES), dtype=np.float64)
    feats[:, F_DX] = dx[idx]
    feats[:, F_DY] = dy[idx]
    feats[:, F_Z] = cloud.z[idx]
    feats[:, F_INTENSITY] = np.clip(
        cloud.intensity[idx] / cloud.intensity_scale(), 0.0, INTENSITY_CLIP)
    feats[:, F_RETURN] = np.clip(
        cloud.return_number[idx] / RETURN_DIVISOR, 0.0, 1.0)
    return Cylinder((cx, cy), float(radius), idx, feats)


def _axis_coords(start: float, length: float, step: float, pad: bool) -> np.ndarray:
    # pad=True rounds the span up so the last coordinate reaches or passes
    # start+length; pad=False keeps coordinates inside the span
    if pad:
        n = math.ceil(length / step - 1e-9) + 1
    else:
        n = math.floor(length / step + 1e-9) + 1
    return start + step * np.arange(max(n, 1), dtype=np.float64)


def _grid(cloud: PlotCloud, step: float, pad: bool) -> np.ndarray:
    x0, y0 = cloud.origin
    w, h = cloud.extent
    xs = _axis_coords(x0, w, step, pad)
    ys = _axis_coords(y0, h, step, pad)
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


def training_grid(cloud: PlotCloud, radius: float) -> np.ndarray:
    """Candidate cylinder centers on a regular grid with step radius/5."""
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    return _grid(cloud, radius / 5.0, pad=False)


def inference_grid(cloud: PlotCloud, radius: float) -> np.ndarray:
    """Cylinder centers on a step-radius grid padded so the union of disks of
    that radius covers the whole plot extent."""
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    return _grid(cloud, radius, pad=True)
