"""Procedural generator of labeled synthetic forest plots.

Scenes are built from simple solids: jittered ground returns, half-ellipsoid
ground-vegetation patches and understory shrubs, stem cylinders, ellipsoid
deciduous crowns, and cone coniferous crowns. Per-class intensity
distributions overlap, return numbers grow with canopy depth, and point
density under crowns is thinned by an occlusion factor. Every point carries
its true label, which keeps truth rasters and evaluation exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import UNLABELED, PlotCloud, StrataError, VegClass


class SceneError(StrataError):
    pass


# mean/sd of raw intensity per class; deliberately overlapping
INTENSITY_MODEL = {
    VegClass.GROUND: (170.0, 35.0),
    VegClass.GROUND_VEG: (120.0, 35.0),
    VegClass.UNDERSTORY: (105.0, 35.0),
    VegClass.STEM: (80.0, 25.0),
    VegClass.DECIDUOUS: (140.0, 40.0),
    VegClass.CONIFEROUS: (95.0, 30.0),
}


@dataclass(frozen=True)
class SceneConfig:
    plot_id: str = "synthetic"
    extent: tuple[float, float] = (20.0, 20.0)
    seed: int = 0
    ground_density: float = 22.0          # points / m^2
    ground_jitter: float = 0.02
    n_gv_patches: int = 12
    gv_density: float = 55.0              # points / m^2 of patch footprint
    gv_radius: tuple[float, float] = (0.6, 1.6)
    gv_top: tuple[float, float] = (0.6, 1.4)
    n_shrubs: int = 6
    shrub_density: float = 45.0
    shrub_radius: tuple[float, float] = (0.9, 2.0)
    shrub_top: tuple[float, float] = (2.0, 4.5)
    n_deciduous: int = 4
    n_coniferous: int = 3
    crown_density: float = 32.0
    decid_radius: tuple[float, float] = (1.6, 2.8)
    decid_top: tuple[float, float] = (8.0, 14.0)
    decid_base: tuple[float, float] = (2.5, 5.0)
    conif_radius: tuple[float, float] = (1.2, 2.2)
    conif_top: tuple[float, float] = (7.0, 13.0)
    conif_base: tuple[float, float] = (1.5, 3.5)
    stem_radius: tuple[float, float] = (0.08, 0.18)
    stem_points_per_meter: float = 26.0
    occlusion: float = 0.55               # keep probability under crowns
    # fraction of ground returns left unannotated, as in real campaigns;
    # these drive the empty cells of the truth rasters
    unlabeled_ground_fraction: float = 0.5

    def __post_init__(self):
        if self.extent[0] <= 0 or self.extent[1] <= 0:
            raise SceneError("plot extent must be positive")
        for name in ("ground_density", "gv_density", "shrub_density",
                     "crown_density", "stem_points_per_meter"):
            if getattr(self, name) < 0:
                raise SceneError(f"{name} must be non-negative")
        for name in ("n_gv_patches", "n_shrubs", "n_deciduous", "n_coniferous"):
            if getattr(self, name) < 0:
                raise SceneError(f"{name} must be non-negative")
        if not (0.0 < self.occlusion <= 1.0):
            raise SceneError("occlusion must be in (0, 1]")
        if not (0.0 <= self.unlabeled_ground_fraction <= 1.0):
            raise SceneError("unlabeled_ground_fraction must be in [0, 1]")


def _unit_ball(rng, n):
    # Marsaglia-style: normalize gaussians, then push inward by u^(1/3)
    v = rng.normal(size=(n, 3))
    v /= np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)
    return v * rng.random((n, 1)) ** (1.0 / 3.0)


def _half_ellipsoid(rng, n, center, radius, top):
    pts = _unit_ball(rng, n)
    pts[:, 2] = np.abs(pts[:, 2])
    return np.column_stack([
        center[0] + radius * pts[:, 0],
        center[1] + radius * pts[:, 1],
        top * pts[:, 2],
    ])


def _ellipsoid(rng, n, center, radius, z_lo, z_hi):
    pts = _unit_ball(rng, n)
    half = 0.5 * (z_hi - z_lo)
    return np.column_stack([
        center[0] + radius * pts[:, 0],
        center[1] + radius * pts[:, 1],
        0.5 * (z_lo + z_hi) + half * pts[:, 2],
    ])


def _cone(rng, n, center, radius, z_base, z_top):
    # apex at the top; radius shrinks linearly toward it
    u = rng.random(n)
    frac = 1.0 - u ** (1.0 / 3.0)        # height fraction above the base
    zs = z_base + (z_top - z_base) * frac
    r_at = radius * (1.0 - frac)
    ang = rng.uniform(0.0, 2.0 * np.pi, n)
    rad = r_at * np.sqrt(rng.random(n))
    return np.column_stack([
        center[0] + rad * np.cos(ang),
        center[1] + rad * np.sin(ang),
        zs,
    ])


def _cylinder_solid(rng, n, center, radius, z_lo, z_hi):
    ang = rng.uniform(0.0, 2.0 * np.pi, n)
    rad = radius * np.sqrt(rng.random(n))
    return np.column_stack([
        center[0] + rad * np.cos(ang),
        center[1] + rad * np.sin(ang),
        rng.uniform(z_lo, z_hi, n),
    ])


def _intensity(rng, label, n):
    mean, sd = INTENSITY_MODEL[label]
    return np.maximum(np.rint(rng.normal(mean, sd, n)), 0.0).astype(np.int64)


@dataclass
class _Instance:
    kind: str
    label: int
    xyz: np.ndarray
    meta: dict = field(default_factory=dict)


def generate_plot(cfg: SceneConfig):
    """Build a fully labeled synthetic plot; returns (PlotCloud, manifest).

    The manifest lists every instance with its shape parameters so tests can
    check geometric consequences against the generated points.
    """
    w, h = cfg.extent
    root = np.random.SeedSequence(cfg.seed)
    n_instances = (2 + cfg.n_gv_patches + cfg.n_shrubs
                   + cfg.n_deciduous + cfg.n_coniferous)
    streams = [np.random.default_rng(s) for s in root.spawn(n_instances + 1)]
    placer = streams[0]
    instances: list[_Instance] = []

    crowns = []  # (cx, cy, radius, top) footprints used for occlusion/returns
    stream_i = 1

    for i in range(cfg.n_deciduous + cfg.n_coniferous):
        rng = streams[stream_i]
        stream_i += 1
        conif = i >= cfg.n_deciduous
        rr = cfg.conif_radius if conif else cfg.decid_radius
        tt = cfg.conif_top if conif else cfg.decid_top
        bb = cfg.conif_base if conif else cfg.decid_base
        center = (placer.uniform(0, w), placer.uniform(0, h))
        radius = rng.uniform(*rr)
        top = rng.uniform(*tt)
        base = rng.uniform(*bb)
        n_crown = max(1, round(cfg.crown_density * np.pi * radius ** 2))
        if conif:
            xyz = _cone(rng, n_crown, center, radius, base, top)
            label = VegClass.CONIFEROUS
        else:
            xyz = _ellipsoid(rng, n_crown, center, radius, base, top)
            label = VegClass.DECIDUOUS
        instances.append(_Instance(
            "coniferous" if conif else "deciduous", label, xyz,
            {"center": center, "radius": radius, "top": top, "base": base}))
        crowns.append((center[0], center[1], radius, top))

        stem_r = rng.uniform(*cfg.stem_radius)
        n_stem = max(1, round(cfg.stem_points_per_meter * base))
        stem = _cylinder_solid(rng, n_stem, center, stem_r, 0.0, base)
        instances.append(_Instance(
            "stem", VegClass.STEM, stem,
            {"center": center, "radius": stem_r, "top": base, "base": 0.0}))

    for _ in range(cfg.n_gv_patches):
        rng = streams[stream_i]
        stream_i += 1
        center = (placer.uniform(0, w), placer.uniform(0, h))
        radius = rng.uniform(*cfg.gv_radius)
        top = rng.uniform(*cfg.gv_top)
        n = max(1, round(cfg.gv_density * np.pi * radius ** 2))
        xyz = _half_ellipsoid(rng, n, center, radius, top)
        instances.append(_Instance(
            "gv_patch", VegClass.GROUND_VEG, xyz,
            {"center": center, "radius": radius, "top": top, "base": 0.0}))

    for _ in range(cfg.n_shrubs):
        rng = streams[stream_i]
        stream_i += 1
        center = (placer.uniform(0, w), placer.uniform(0, h))
        radius = rng.uniform(*cfg.shrub_radius)
        top = rng.uniform(*cfg.shrub_top)
        n = max(1, round(cfg.shrub_density * np.pi * radius ** 2))
        xyz = _half_ellipsoid(rng, n, center, radius, top)
        instances.append(_Instance(
            "shrub", VegClass.UNDERSTORY, xyz,
            {"center": center, "radius": radius, "top": top, "base": 0.0}))

    rng = streams[stream_i]
    n_ground = rng.poisson(cfg.ground_density * w * h)
    ground = np.column_stack([
        rng.uniform(0, w, n_ground),
        rng.uniform(0, h, n_ground),
        np.maximum(rng.uniform(-cfg.ground_jitter, cfg.ground_jitter, n_ground), 0.0),
    ])
    instances.append(_Instance("ground", VegClass.GROUND, ground,
                               {"density": cfg.ground_density}))

    xs, ys, zs, labels, kinds = [], [], [], [], []
    for inst in instances:
        xyz = inst.xyz
        keep = ((xyz[:, 0] >= 0) & (xyz[:, 0] <= w)
                & (xyz[:, 1] >= 0) & (xyz[:, 1] <= h))
        xyz = xyz[keep]
        xs.append(xyz[:, 0])
        ys.append(xyz[:, 1])
        zs.append(np.maximum(xyz[:, 2], 0.0))
        labels.append(np.full(len(xyz), int(inst.label), dtype=np.int64))
        kinds.append(inst)
        inst.meta["points"] = int(len(xyz))

    x = np.concatenate(xs)
    y = np.concatenate(ys)
    z = np.concatenate(zs)
    label = np.concatenate(labels)

    # canopy depth per point: how far below the tallest covering crown top
    depth = np.zeros(len(x))
    under_crown = np.zeros(len(x), dtype=bool)
    for cx, cy, cr, ctop in crowns:
        inside = (x - cx) ** 2 + (y - cy) ** 2 <= cr * cr
        covered = inside & (z < ctop)
        under_crown |= covered
        d = np.clip((ctop - z) / max(ctop, 1e-9), 0.0, 1.0)
        depth = np.where(covered, np.maximum(depth, d), depth)

    post = np.random.default_rng(root.spawn(1)[0])
    # occlusion thins everything below a crown except the crown points themselves
    crown_pt = (label == VegClass.DECIDUOUS) | (label == VegClass.CONIFEROUS)
    drop = under_crown & ~crown_pt & (post.random(len(x)) > cfg.occlusion)
    keep = ~drop
    x, y, z, label, depth = x[keep], y[keep], z[keep], label[keep], depth[keep]

    return_number = 1 + post.binomial(2, np.clip(0.75 * depth, 0.0, 1.0))
    intensity = np.empty(len(x), dtype=np.int64)
    for cls in VegClass:
        m = label == cls
        if m.any():
            intensity[m] = _intensity(post, cls, int(m.sum()))

    # part of the ground returns stays unannotated (as in real campaigns);
    # their heights anchor the empty cells of the truth rasters
    ground_idx = np.nonzero(label == VegClass.GROUND)[0]
    n_unlab = int(round(cfg.unlabeled_ground_fraction * len(ground_idx)))
    if n_unlab:
        drop_label = post.choice(ground_idx, size=n_unlab, replace=False)
        label = label.copy()
        label[drop_label] = UNLABELED

    cloud = PlotCloud.from_arrays(cfg.plot_id, x, y, z, intensity,
                                  return_number, label,
                                  origin=(0.0, 0.0), extent=(float(w), float(h)))
    manifest = {
        "plot_id": cfg.plot_id,
        "seed": cfg.seed,
        "extent": [float(w), float(h)],
        "n_points": cloud.n_points,
        "instances": [
            {"kind": inst.kind, "label": int(inst.label), **_jsonable(inst.meta)}
            for inst in instances
        ],
    }
    return cloud, manifest


def _jsonable(meta: dict) -> dict:
    out = {}
    for key, val in meta.items():
        if isinstance(val, tuple):
            out[key] = [float(v) for v in val]
        elif isinstance(val, (np.floating, float)):
            out[key] = float(val)
        else:
            out[key] = val
    return out


def write_manifest(manifest: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
