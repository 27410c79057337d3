"""Whole-plot inference: averaged per-point probabilities, hard labels,
per-layer occupancy and height rasters, and watertight layer meshes.

Meshes extrude each 4-connected component of occupied pixels into a closed
surface: a top sheet at the per-pixel maximum height, a bottom sheet at the
minimum height, and vertical walls along the boundary. Corner vertices are
shared between pixels that are edge-connected around that corner (a
"wedge"), with corner heights averaged over the wedge, so every edge ends
up in exactly two triangles even where components touch diagonally. Flat
mode instead emits one closed box per pixel at its own heights, which makes
the total mesh volume exactly the sum of pixel_area * (max - min).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    LAYER_CLASSES,
    LAYERS,
    LayerSpec,
    PlotCloud,
    StrataError,
    extract_cylinder,
    inference_grid,
)
from . import network
from .rasterize import GridGeometry, write_ascii_grid

HEIGHT_NODATA = -9999.0


class InferError(StrataError):
    pass


@dataclass
class LayerProduct:
    """Binary occupancy plus min/max height rasters for the three layers."""

    geometry: GridGeometry
    occupancy: dict
    min_height: dict
    max_height: dict

    def __post_init__(self):
        for layer in LAYERS:
            occ = self.occupancy[layer]
            hmin = self.min_height[layer]
            hmax = self.max_height[layer]
            if occ.shape != self.geometry.shape:
                raise InferError("occupancy shape does not match geometry")
            if np.any(hmin[occ] > hmax[occ]) or np.any(hmin[occ] < 0):
                raise InferError("heights must satisfy 0 <= min <= max on "
                                 "occupied pixels")


@dataclass
class LayerMesh:
    """Triangle mesh of one vegetation layer (vertices in plot coordinates)."""

    layer: str
    vertices: np.ndarray   # (V, 3) float
    triangles: np.ndarray  # (T, 3) int, outward-oriented

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0


def predict_plot(params, cloud: PlotCloud, s_points: int, radius: float,
                 seed: int = 0, forward_fn=None) -> np.ndarray:
    """Average the forward probabilities of every covering cylinder for each
    point of the plot; the inference grid guarantees full coverage."""
    if cloud.n_points == 0:
        raise InferError("cannot predict an empty plot")
    forward_fn = forward_fn or network.forward
    sums = np.zeros((cloud.n_points, network.N_OUT))
    counts = np.zeros(cloud.n_points, dtype=np.int64)
    for k, center in enumerate(inference_grid(cloud, radius)):
        cyl = extract_cylinder(cloud, center, radius)
        if cyl.is_empty:
            continue
        sub_seed = int(np.random.SeedSequence((seed, 7000 + k)).generate_state(1)[0])
        probs = forward_fn(params, cyl, s_points, sub_seed)
        sums[cyl.point_indices] += probs
        counts[cyl.point_indices] += 1
    if np.any(counts == 0):
        raise InferError("internal error: some points were not covered by "
                         "any inference cylinder")
    return sums / counts[:, None]


def hard_labels(probs: np.ndarray) -> np.ndarray:
    """Most probable class per point; ties resolve to the lowest class id."""
    return np.argmax(probs, axis=1)


def layer_products(cloud: PlotCloud, labels: np.ndarray,
                   layers: LayerSpec | None = None, pixel_size: float = 0.5,
                   geometry: GridGeometry | None = None) -> LayerProduct:
    """Occupancy and min/max height rasters from hard point labels.

    A pixel is occupied when at least one point of the layer's classes falls
    in it; stem and ground points never contribute. The lower bound of the
    gv and understory layers is pinned to 0.
    """
    del layers  # thresholds only matter for truth rasters; kept for symmetry
    geom = geometry or GridGeometry.for_extent(cloud.origin, cloud.extent,
                                               pixel_size)
    rows, cols = geom.pixel_of(cloud.x, cloud.y)
    flat = rows * geom.n_cols + cols
    n_pix = geom.n_rows * geom.n_cols
    occupancy, hmin, hmax = {}, {}, {}
    for layer in LAYERS:
        member = np.isin(cloud.label if labels is None else labels,
                         LAYER_CLASSES[layer])
        lo = np.full(n_pix, np.inf)
        hi = np.full(n_pix, -np.inf)
        np.minimum.at(lo, flat[member], cloud.z[member])
        np.maximum.at(hi, flat[member], cloud.z[member])
        occ = hi > -np.inf
        lo[~occ] = HEIGHT_NODATA
        hi[~occ] = HEIGHT_NODATA
        if layer in ("gv", "understory"):
            lo[occ] = 0.0
        occupancy[layer] = occ.reshape(geom.shape)
        hmin[layer] = lo.reshape(geom.shape)
        hmax[layer] = hi.reshape(geom.shape)
    return LayerProduct(geom, occupancy, hmin, hmax)


def _box_mesh(x0, x1, y0, y1, z0, z1, v_off):
    verts = np.array([
        [x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
        [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1],
    ])
    quads = [
        (4, 5, 6, 7),  # top (+z)
        (3, 2, 1, 0),  # bottom (-z)
        (0, 1, 5, 4),  # south (-y)
        (2, 3, 7, 6),  # north (+y)
        (1, 2, 6, 5),  # east (+x)
        (3, 0, 4, 7),  # west (-x)
    ]
    tris = []
    for a, b, c, d in quads:
        tris.append((a + v_off, b + v_off, c + v_off))
        tris.append((a + v_off, c + v_off, d + v_off))
    return verts, tris


# cyclic pixel offsets around a lattice corner: consecutive entries share
# the pixel edge through that corner
_CORNER_CYCLE = ((-1, -1), (-1, 0), (0, 0), (0, -1))


def _corner_wedges(occ, ci, cj):
    """Partition the occupied pixels around corner (ci, cj) into wedges:
    maximal cyclic runs of occupied pixels."""
    h, w = occ.shape
    present = []
    for di, dj in _CORNER_CYCLE:
        pi, pj = ci + di, cj + dj
        present.append(0 <= pi < h and 0 <= pj < w and occ[pi, pj])
    if not any(present):
        return []
    if all(present):
        return [[(ci + di, cj + dj) for di, dj in _CORNER_CYCLE]]
    # rotate so the cycle starts right after a gap, then collect runs
    start = next(k for k in range(4) if not present[k])
    wedges = []
    run = []
    for s in range(1, 5):
        k = (start + s) % 4
        if present[k]:
            run.append((ci + _CORNER_CYCLE[k][0], cj + _CORNER_CYCLE[k][1]))
        elif run:
            wedges.append(run)
            run = []
    if run:
        wedges.append(run)
    return wedges


def build_mesh(product: LayerProduct, layer: str, flat: bool = False) -> LayerMesh:
    """Closed triangle mesh of one layer; empty occupancy gives an empty mesh."""
    occ = product.occupancy[layer]
    hmin = product.min_height[layer]
    hmax = product.max_height[layer]
    geom = product.geometry
    x0, y0 = geom.origin
    r = geom.pixel_size
    if not occ.any():
        return LayerMesh(layer, np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    if flat:
        verts = []
        tris = []
        for i, j in zip(*np.nonzero(occ)):
            v, t = _box_mesh(x0 + j * r, x0 + (j + 1) * r,
                             y0 + i * r, y0 + (i + 1) * r,
                             hmin[i, j], hmax[i, j], len(verts))
            verts.extend(v)
            tris.extend(t)
        return LayerMesh(layer, np.asarray(verts, dtype=np.float64),
                         np.asarray(tris, dtype=np.int64))

    # shared-vertex surface: one (top, bottom) vertex pair per corner wedge
    vert_ids = {}
    verts = []

    def vertex(ci, cj, wedge, top):
        key = (ci, cj, min(wedge), top)
        if key not in vert_ids:
            hs = [(hmax if top else hmin)[p] for p in wedge]
            vert_ids[key] = len(verts)
            verts.append((x0 + cj * r, y0 + ci * r, float(np.mean(hs))))
        return vert_ids[key]

    wedge_of = {}  # (corner, pixel) -> wedge pixel list
    h, w = occ.shape
    for ci in range(h + 1):
        for cj in range(w + 1):
            for wedge in _corner_wedges(occ, ci, cj):
                for p in wedge:
                    wedge_of[(ci, cj, p)] = wedge

    tris = []
    for i, j in zip(*np.nonzero(occ)):
        p = (i, j)
        # corners in CCW order seen from above: SW, SE, NE, NW
        cs = ((i, j), (i, j + 1), (i + 1, j + 1), (i + 1, j))
        top = [vertex(ci, cj, wedge_of[(ci, cj, p)], True) for ci, cj in cs]
        bot = [vertex(ci, cj, wedge_of[(ci, cj, p)], False) for ci, cj in cs]
        tris.append((top[0], top[1], top[2]))
        tris.append((top[0], top[2], top[3]))
        tris.append((bot[0], bot[2], bot[1]))
        tris.append((bot[0], bot[3], bot[2]))
        # walls on sides facing empty space, wound outward:
        # (side corner pair a->b chosen so that outside is to the left)
        sides = (
            (i - 1, j, 0, 1),   # south neighbor, corners SW->SE
            (i, j + 1, 1, 2),   # east neighbor, SE->NE
            (i + 1, j, 2, 3),   # north neighbor, NE->NW
            (i, j - 1, 3, 0),   # west neighbor, NW->SW
        )
        for ni, nj, a, b in sides:
            if 0 <= ni < h and 0 <= nj < w and occ[ni, nj]:
                continue
            tris.append((bot[a], bot[b], top[b]))
            tris.append((bot[a], top[b], top[a]))
    return LayerMesh(layer, np.asarray(verts, dtype=np.float64),
                     np.asarray(tris, dtype=np.int64))


def mesh_volume(mesh: LayerMesh) -> float:
    """Signed volume by the divergence theorem; positive for outward-oriented
    closed surfaces."""
    if mesh.is_empty:
        return 0.0
    v = mesh.vertices
    t = mesh.triangles
    a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    return float(np.sum(np.einsum("ij,ij->i", a, np.cross(b, c))) / 6.0)


def edge_incidence(mesh: LayerMesh) -> dict:
    """Count of triangles incident to each undirected edge."""
    counts = {}
    for tri in mesh.triangles:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (min(a, b), max(a, b))
            counts[key] = counts.get(key, 0) + 1
    return counts


def is_watertight(mesh: LayerMesh) -> bool:
    """Every undirected edge must be shared by exactly two triangles."""
    if mesh.is_empty:
        return True
    return all(c == 2 for c in edge_incidence(mesh).values())


def write_obj(mesh: LayerMesh, path) -> None:
    """Text OBJ with v/f records; face indices are 1-based."""
    with open(path, "w") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {float(x)!r} {float(y)!r} {float(z)!r}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")


def read_obj(path) -> LayerMesh:
    verts, tris = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(v) for v in parts[1:4]])
            elif parts[0] == "f":
                tris.append([int(v.split("/")[0]) - 1 for v in parts[1:4]])
    return LayerMesh("unknown",
                     np.asarray(verts, dtype=np.float64).reshape(-1, 3),
                     np.asarray(tris, dtype=np.int64).reshape(-1, 3))


def write_products(product: LayerProduct, meshes: dict, out_dir,
                   plot_id: str) -> None:
    """Write occupancy/height rasters and meshes using the standard naming:
    <plot>_<layer>_{occ,hmin,hmax}.asc and <plot>_<layer>.obj."""
    geom = product.geometry
    for layer in LAYERS:
        occ = product.occupancy[layer].astype(np.int64)
        write_ascii_grid(occ, geom, f"{out_dir}/{plot_id}_{layer}_occ.asc")
        write_ascii_grid(product.min_height[layer], geom,
                         f"{out_dir}/{plot_id}_{layer}_hmin.asc")
        write_ascii_grid(product.max_height[layer], geom,
                         f"{out_dir}/{plot_id}_{layer}_hmax.asc")
        if layer in meshes:
            write_obj(meshes[layer], f"{out_dir}/{plot_id}_{layer}.obj")
