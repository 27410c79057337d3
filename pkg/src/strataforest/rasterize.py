"""Tri-state ground-truth occupancy rasters for the three vegetation layers,
plus the ASCII grid format used for every raster product.

Truth construction is two-phase: crown and understory labels are projected
first (phase 1), then per-pixel maximum heights of the remaining unlabeled
points fill in ground vegetation and the still-undecided cells (phase 2)
without ever overwriting a phase-1 full cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import UNLABELED, LayerSpec, PlotCloud, StrataError, VegClass

FULL = 1
EMPTY = 0
NODATA = -1

NODATA_SENTINEL = -9999


class RasterError(StrataError):
    pass


@dataclass(frozen=True)
class GridGeometry:
    """Origin, pixel size, and shape of a north-up raster.

    Row 0 is the southernmost row in memory (row index grows with y); the
    ASCII writer flips rows so that the first file line is the northernmost,
    as the format requires.
    """

    origin: tuple[float, float]
    pixel_size: float
    shape: tuple[int, int]

    def __post_init__(self):
        h, w = self.shape
        if h < 1 or w < 1:
            raise RasterError(f"raster shape must be at least 1x1, got {self.shape}")
        if self.pixel_size <= 0:
            raise RasterError(f"pixel_size must be positive, got {self.pixel_size}")

    @classmethod
    def for_extent(cls, origin, extent, pixel_size: float) -> "GridGeometry":
        w = max(1, math.ceil(extent[0] / pixel_size - 1e-9))
        h = max(1, math.ceil(extent[1] / pixel_size - 1e-9))
        return cls((float(origin[0]), float(origin[1])), float(pixel_size), (h, w))

    @property
    def n_rows(self) -> int:
        return self.shape[0]

    @property
    def n_cols(self) -> int:
        return self.shape[1]

    def pixel_of(self, x, y):
        """Vectorized point-to-pixel mapping; see module-level pixel_of."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        h, w = self.shape
        fx = (x - self.origin[0]) / self.pixel_size
        fy = (y - self.origin[1]) / self.pixel_size
        # 1e-9 pixels of slack absorbs float dust from coordinate round trips
        tol = 1e-9
        if np.any(fx < -tol) or np.any(fy < -tol) \
                or np.any(fx > w + tol) or np.any(fy > h + tol):
            raise RasterError("point outside the raster footprint")
        col = np.floor(fx).astype(np.int64)
        row = np.floor(fy).astype(np.int64)
        # points exactly on the outer edge belong to the last row/column
        np.clip(col, 0, w - 1, out=col)
        np.clip(row, 0, h - 1, out=row)
        return row, col

    def centers(self):
        """(ys, xs) 1-D arrays of pixel-center coordinates."""
        x0, y0 = self.origin
        r = self.pixel_size
        xs = x0 + r * (np.arange(self.n_cols) + 0.5)
        ys = y0 + r * (np.arange(self.n_rows) + 0.5)
        return ys, xs

    def window(self, xmin, xmax, ymin, ymax):
        """Pixel index ranges (r0, r1, c0, c1), end-exclusive, of all pixels
        overlapping the given rectangle, clipped to the raster."""
        r = self.pixel_size
        c0 = int(math.floor((xmin - self.origin[0]) / r))
        c1 = int(math.floor((xmax - self.origin[0]) / r)) + 1
        r0 = int(math.floor((ymin - self.origin[1]) / r))
        r1 = int(math.floor((ymax - self.origin[1]) / r)) + 1
        c0 = max(c0, 0)
        r0 = max(r0, 0)
        c1 = min(c1, self.n_cols)
        r1 = min(r1, self.n_rows)
        if r0 >= r1 or c0 >= c1:
            raise RasterError("window does not intersect the raster")
        return r0, r1, c0, c1

    def subgrid(self, r0, r1, c0, c1) -> "GridGeometry":
        x0 = self.origin[0] + c0 * self.pixel_size
        y0 = self.origin[1] + r0 * self.pixel_size
        return GridGeometry((x0, y0), self.pixel_size, (r1 - r0, c1 - c0))


def pixel_of(point, origin, pixel_size: float, shape=None):
    """Map a point to (row, col) with row = floor((y-y0)/r), col = floor((x-x0)/r).

    A point exactly on an interior right/top pixel boundary falls into the
    higher-index pixel; on the raster's outer edge it falls into the last
    pixel. Points outside the footprint raise RasterError. When shape is
    omitted the footprint is treated as unbounded above.
    """
    if shape is None:
        x = float(point[0]) - origin[0]
        y = float(point[1]) - origin[1]
        if x < 0 or y < 0:
            raise RasterError("point outside the raster footprint")
        return int(math.floor(y / pixel_size)), int(math.floor(x / pixel_size))
    geom = GridGeometry(tuple(origin), pixel_size, tuple(shape))
    row, col = geom.pixel_of([point[0]], [point[1]])
    return int(row[0]), int(col[0])


@dataclass
class TriStateRaster:
    """Per-layer occupancy ground truth with cells in {FULL, EMPTY, NODATA}."""

    geometry: GridGeometry
    cells: np.ndarray

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.int8)
        if self.cells.shape != self.geometry.shape:
            raise RasterError("cell array shape does not match geometry")
        ok = np.isin(self.cells, (FULL, EMPTY, NODATA))
        if not ok.all():
            raise RasterError("tri-state cells must be FULL, EMPTY, or NODATA")

    @classmethod
    def filled(cls, geometry: GridGeometry, value=NODATA) -> "TriStateRaster":
        return cls(geometry, np.full(geometry.shape, value, dtype=np.int8))


@dataclass
class LayerTruth:
    """The three tri-state rasters (shared geometry) for gv/understory/overstory."""

    gv: TriStateRaster
    understory: TriStateRaster
    overstory: TriStateRaster

    def __post_init__(self):
        if not (self.gv.geometry == self.understory.geometry == self.overstory.geometry):
            raise RasterError("layer rasters must share one geometry")

    @property
    def geometry(self) -> GridGeometry:
        return self.gv.geometry

    def layer(self, name: str) -> TriStateRaster:
        return getattr(self, name)

    def window(self, r0, r1, c0, c1) -> "LayerTruth":
        geom = self.geometry.subgrid(r0, r1, c0, c1)
        return LayerTruth(
            TriStateRaster(geom, self.gv.cells[r0:r1, c0:c1].copy()),
            TriStateRaster(geom, self.understory.cells[r0:r1, c0:c1].copy()),
            TriStateRaster(geom, self.overstory.cells[r0:r1, c0:c1].copy()),
        )


def build_layer_truth(cloud: PlotCloud, layers: LayerSpec | None = None,
                      pixel_size: float = 0.5,
                      geometry: GridGeometry | None = None) -> LayerTruth:
    """Build the tri-state truth rasters for a labeled plot.

    Phase 1 projects explicit labels: deciduous/coniferous points mark the
    overstory full, understory points mark the understory full; stem and
    ground labels are never projected. Phase 2 uses the remaining points
    (unlabeled ones, plus ground-vegetation-labeled ones, which stand in for
    the unlabeled low vegetation of the source data) and classifies each
    pixel by the maximum height h of those points:

      h < gv_low             -> all three layers empty
      gv_low  <= h < gv_high -> gv full, understory and overstory empty
      gv_high <= h < under_high -> gv no-data, understory full, overstory empty
      h >= under_high        -> overstory full, gv and understory no-data

    Phase 2 never overwrites a phase-1 full cell. Pixels untouched by both
    phases are no-data everywhere.
    """
    if cloud.n_points == 0:
        raise RasterError("cannot rasterize an empty cloud")
    layers = layers or LayerSpec()
    geom = geometry or GridGeometry.for_extent(cloud.origin, cloud.extent, pixel_size)
    rows, cols = geom.pixel_of(cloud.x, cloud.y)
    flat = rows * geom.n_cols + cols
    n_pix = geom.n_rows * geom.n_cols

    gv = np.full(n_pix, NODATA, dtype=np.int8)
    und = np.full(n_pix, NODATA, dtype=np.int8)
    over = np.full(n_pix, NODATA, dtype=np.int8)

    # phase 1: explicit labels
    crown = (cloud.label == VegClass.DECIDUOUS) | (cloud.label == VegClass.CONIFEROUS)
    over[flat[crown]] = FULL
    und[flat[cloud.label == VegClass.UNDERSTORY]] = FULL

    # phase 2: per-pixel max height of the leftover points
    leftover = (cloud.label == UNLABELED) | (cloud.label == VegClass.GROUND_VEG)
    hmax = np.full(n_pix, -np.inf)
    np.maximum.at(hmax, flat[leftover], cloud.z[leftover])
    seen = hmax > -np.inf

    b_empty = seen & (hmax < layers.gv_low)
    b_gv = seen & (hmax >= layers.gv_low) & (hmax < layers.gv_high)
    b_und = seen & (hmax >= layers.gv_high) & (hmax < layers.under_high)
    b_over = seen & (hmax >= layers.under_high)

    gv[b_empty] = EMPTY
    gv[b_gv] = FULL
    gv[b_und] = NODATA
    gv[b_over] = NODATA

    not_full_und = und != FULL
    und[b_empty & not_full_und] = EMPTY
    und[b_gv & not_full_und] = EMPTY
    und[b_und] = FULL
    und[b_over & not_full_und] = NODATA

    not_full_over = over != FULL
    over[b_empty & not_full_over] = EMPTY
    over[b_gv & not_full_over] = EMPTY
    over[b_und & not_full_over] = EMPTY
    over[b_over] = FULL

    shape = geom.shape
    return LayerTruth(
        TriStateRaster(geom, gv.reshape(shape)),
        TriStateRaster(geom, und.reshape(shape)),
        TriStateRaster(geom, over.reshape(shape)),
    )


def _format_value(v) -> str:
    if float(v) == int(v):
        return str(int(v))
    return repr(float(v))


def write_ascii_grid(values: np.ndarray, geometry: GridGeometry, path,
                     nodata=NODATA_SENTINEL) -> None:
    """Write a raster as an ASCII grid; the first data line is the
    northernmost row."""
    values = np.asarray(values)
    if values.shape != geometry.shape:
        raise RasterError("value array shape does not match geometry")
    lines = [
        f"ncols {geometry.n_cols}",
        f"nrows {geometry.n_rows}",
        f"xllcorner {_format_value(geometry.origin[0])}",
        f"yllcorner {_format_value(geometry.origin[1])}",
        f"cellsize {_format_value(geometry.pixel_size)}",
        f"NODATA_value {nodata}",
    ]
    for r in range(geometry.n_rows - 1, -1, -1):
        lines.append(" ".join(_format_value(v) for v in values[r]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_ascii_grid(path):
    """Read an ASCII grid; returns (values float array, geometry, nodata)."""
    with open(path) as fh:
        raw = [ln.strip() for ln in fh if ln.strip()]
    header = {}
    for ln in raw[:6]:
        key, val = ln.split(None, 1)
        header[key.lower()] = val
    try:
        ncols = int(header["ncols"])
        nrows = int(header["nrows"])
        x0 = float(header["xllcorner"])
        y0 = float(header["yllcorner"])
        cell = float(header["cellsize"])
        nodata = float(header["nodata_value"])
    except KeyError as exc:
        raise RasterError(f"{path}: missing header field {exc}") from exc
    data = raw[6:]
    if len(data) != nrows:
        raise RasterError(f"{path}: expected {nrows} data rows, found {len(data)}")
    values = np.empty((nrows, ncols), dtype=np.float64)
    for i, ln in enumerate(data):
        fields = ln.split()
        if len(fields) != ncols:
            raise RasterError(f"{path}: row {i} has {len(fields)} values, expected {ncols}")
        values[nrows - 1 - i] = [float(f) for f in fields]
    geom = GridGeometry((x0, y0), cell, (nrows, ncols))
    return values, geom, nodata


def write_tri_raster(raster: TriStateRaster, path) -> None:
    """Serialize a tri-state raster: full=1, empty=0, no-data=-9999."""
    out = raster.cells.astype(np.int64)
    out[raster.cells == NODATA] = NODATA_SENTINEL
    write_ascii_grid(out, raster.geometry, path)


def read_tri_raster(path) -> TriStateRaster:
    values, geom, nodata = read_ascii_grid(path)
    cells = np.full(values.shape, NODATA, dtype=np.int8)
    cells[values == 1] = FULL
    cells[values == 0] = EMPTY
    other = (values != 1) & (values != 0) & (values != nodata)
    if other.any():
        raise RasterError(f"{path}: unexpected cell values in tri-state raster")
    return TriStateRaster(geom, cells)
