"""Supervision terms: point-wise cross-entropy, pixel-wise occupancy BCE on
soft-projected probabilities, and the unsupervised elevation prior, plus
their combination and the gradients of each term with respect to the
per-point class probabilities.

All losses are means, finite for any valid input thanks to clamping, and
pure functions of their arguments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import UNLABELED, Cylinder, N_CLASSES, StrataError, VegClass
from .elevation import Z_FLOOR, GammaMixture, gamma_log_pdf
from .rasterize import FULL, NODATA, GridGeometry, LayerTruth

LOG_CLAMP = 1e-12        # floor for probabilities inside any log
BCE_CLAMP = 1e-7         # occupancy clamp for the pixel-wise BCE

LOWER_STRATUM = (VegClass.GROUND, VegClass.GROUND_VEG)
HIGHER_STRATUM = (VegClass.UNDERSTORY, VegClass.DECIDUOUS,
                  VegClass.CONIFEROUS, VegClass.STEM)


class LossError(StrataError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_2d: float = 1.0
    mu_elevation: float = 0.1

    def __post_init__(self):
        if self.lambda_2d < 0 or self.mu_elevation < 0:
            raise LossError("loss weights must be non-negative")


@dataclass(frozen=True)
class LossSpec:
    """Which losses apply and how the 3D term weighs classes."""

    weights: LossWeights = field(default_factory=LossWeights)
    supervise_gv_3d: bool = False
    class_weights: tuple = tuple(1.0 for _ in range(N_CLASSES))


@dataclass
class SoftOccupancy:
    """Per-layer soft occupancy grids in [0,1] with a shared validity mask
    (a pixel is valid when at least one point projects into it)."""

    geometry: GridGeometry
    gv: np.ndarray
    understory: np.ndarray
    overstory: np.ndarray
    valid: np.ndarray

    def layer(self, name: str) -> np.ndarray:
        return getattr(self, name)


@dataclass
class TrainSample:
    """One supervised cylinder: point labels and elevations, the truth window
    it is scored against, and the frozen elevation densities at its points.

    proj_seg pins each point's pixel in the truth window using its original
    geographic position, so augmentation can rotate the network inputs
    without detaching points from their supervised pixels."""

    cylinder: Cylinder
    labels: np.ndarray
    truth: LayerTruth
    density_lower: np.ndarray
    density_higher: np.ndarray
    subsample_seed: int
    proj_seg: np.ndarray | None = None


def loss_3d(probs: np.ndarray, labels: np.ndarray,
            spec: LossSpec | None = None) -> float:
    return _loss_3d(probs, labels, spec or LossSpec(), with_grad=False)[0]


def loss_3d_grad(probs, labels, spec=None):
    return _loss_3d(probs, labels, spec or LossSpec(), with_grad=True)


def _loss_3d(probs, labels, spec, with_grad):
    labels = np.asarray(labels)
    if len(labels) != len(probs):
        raise LossError("probs and labels lengths differ")
    mask = labels != UNLABELED
    if not spec.supervise_gv_3d:
        mask &= labels != VegClass.GROUND_VEG
    grad = np.zeros_like(probs) if with_grad else None
    if not mask.any():
        return 0.0, grad
    idx = np.nonzero(mask)[0]
    lbl = labels[idx]
    w = np.asarray(spec.class_weights, dtype=np.float64)[lbl]
    p = probs[idx, lbl]
    p_safe = np.maximum(p, LOG_CLAMP)
    wsum = float(np.sum(w))
    value = float(np.sum(w * -np.log(p_safe)) / wsum)
    if with_grad:
        live = p > LOG_CLAMP  # clamped entries carry no gradient
        g = np.where(live, -w / (p_safe * wsum), 0.0)
        np.add.at(grad, (idx, lbl), g)
    return value, grad


def _project_indices(cylinder: Cylinder, geometry: GridGeometry):
    x = cylinder.center[0] + cylinder.features[:, 0]
    y = cylinder.center[1] + cylinder.features[:, 1]
    rows, cols = geometry.pixel_of(x, y)
    return rows * geometry.n_cols + cols


def _segment_max(values: np.ndarray, seg: np.ndarray, n_seg: int):
    """Per-segment maximum and the index of the first point attaining it."""
    out = np.full(n_seg, -np.inf)
    np.maximum.at(out, seg, values)
    # first point index achieving the segment max (ties -> lowest index)
    order = np.lexsort((np.arange(len(seg)), -values, seg))
    seg_sorted = seg[order]
    first = np.ones(len(seg), dtype=bool)
    first[1:] = seg_sorted[1:] != seg_sorted[:-1]
    argmax = np.full(n_seg, -1, dtype=np.int64)
    argmax[seg_sorted[first]] = order[first]
    return out, argmax


_LAYER_CHANNELS = {
    "gv": (VegClass.GROUND_VEG,),
    "understory": (VegClass.UNDERSTORY,),
    "overstory": (VegClass.DECIDUOUS, VegClass.CONIFEROUS),
}


def project_soft(probs: np.ndarray, cylinder: Cylinder,
                 geometry: GridGeometry) -> SoftOccupancy:
    """Project per-point probabilities to per-pixel soft occupancies.

    Each pixel takes the maximum over its points of the layer-relevant
    probability (deciduous plus coniferous for the overstory); stem and
    ground probabilities are never projected. Pixels without points are
    invalid and carry 0.
    """
    return _project_soft(probs, cylinder, geometry)[0]


def _project_soft(probs, cylinder, geometry, seg=None):
    n_pix = geometry.n_rows * geometry.n_cols
    shape = geometry.shape
    if cylinder.is_empty:
        zeros = np.zeros(shape)
        occ = SoftOccupancy(geometry, zeros, zeros.copy(), zeros.copy(),
                            np.zeros(shape, dtype=bool))
        return occ, None, {}
    if seg is None:
        seg = _project_indices(cylinder, geometry)
    counts = np.bincount(seg, minlength=n_pix)
    valid = counts > 0

    grids = {}
    argmaxes = {}
    for layer, channels in _LAYER_CHANNELS.items():
        vals = probs[:, channels[0]].copy()
        for ch in channels[1:]:
            vals += probs[:, ch]
        mx, am = _segment_max(vals, seg, n_pix)
        mx[~valid] = 0.0
        grids[layer] = mx.reshape(shape)
        argmaxes[layer] = am
    occ = SoftOccupancy(geometry, grids["gv"], grids["understory"],
                        grids["overstory"], valid.reshape(shape))
    return occ, seg, argmaxes


def loss_2d(pred: SoftOccupancy, truth: LayerTruth) -> float:
    """Mean binary cross-entropy over the supervised pixels of the three
    layers: pixels valid in the prediction and not no-data in the truth."""
    total = 0.0
    count = 0
    for layer in _LAYER_CHANNELS:
        o = pred.layer(layer)
        t = truth.layer(layer).cells
        mask = pred.valid & (t != NODATA)
        if not mask.any():
            continue
        o_c = np.clip(o[mask], BCE_CLAMP, 1.0 - BCE_CLAMP)
        target = (t[mask] == FULL).astype(np.float64)
        total += float(np.sum(-(target * np.log(o_c)
                                + (1.0 - target) * np.log(1.0 - o_c))))
        count += int(mask.sum())
    return total / count if count else 0.0


def loss_2d_grad(probs, cylinder, geometry, truth: LayerTruth, seg=None):
    """2D loss for one cylinder plus its gradient w.r.t. the point probs.

    The gradient of each pixel's BCE flows to the probability channels of
    the single point attaining the per-pixel maximum.
    """
    pred, seg, argmaxes = _project_soft(probs, cylinder, geometry, seg=seg)
    grad = np.zeros_like(probs)
    total = 0.0
    count = 0
    contribs = []
    for layer, channels in _LAYER_CHANNELS.items():
        o = pred.layer(layer).ravel()
        t = truth.layer(layer).cells.ravel()
        mask = pred.valid.ravel() & (t != NODATA)
        pix = np.nonzero(mask)[0]
        if len(pix) == 0:
            continue
        o_raw = o[pix]
        o_c = np.clip(o_raw, BCE_CLAMP, 1.0 - BCE_CLAMP)
        target = (t[pix] == FULL).astype(np.float64)
        total += float(np.sum(-(target * np.log(o_c)
                                + (1.0 - target) * np.log(1.0 - o_c))))
        count += len(pix)
        d_o = (o_c - target) / (o_c * (1.0 - o_c))
        d_o[(o_raw < BCE_CLAMP) | (o_raw > 1.0 - BCE_CLAMP)] = 0.0
        contribs.append((argmaxes[layer][pix], channels, d_o))
    if count == 0:
        return 0.0, grad
    for am, channels, d_o in contribs:
        for ch in channels:
            np.add.at(grad, (am, ch), d_o / count)
    return total / count, grad


def loss_elevation(probs, z, mixture: GammaMixture) -> float:
    z = np.asarray(z, dtype=np.float64)
    zf = np.maximum(z, Z_FLOOR)
    dens_l = np.exp(gamma_log_pdf(zf, mixture.lower.shape, mixture.lower.scale))
    dens_h = np.exp(gamma_log_pdf(zf, mixture.higher.shape, mixture.higher.scale))
    return loss_elevation_from_densities(probs, dens_l, dens_h)


def loss_elevation_from_densities(probs, dens_lower, dens_higher) -> float:
    return _loss_elevation(probs, dens_lower, dens_higher, with_grad=False)[0]


def loss_elevation_grad(probs, dens_lower, dens_higher):
    return _loss_elevation(probs, dens_lower, dens_higher, with_grad=True)


def _loss_elevation(probs, dens_lower, dens_higher, with_grad):
    """Mean negative log-likelihood of point elevations under the frozen
    mixture, with the lower stratum carried by ground + ground vegetation
    probabilities and the higher stratum by the rest."""
    m = len(probs)
    if m == 0:
        raise LossError("elevation loss of an empty cylinder")
    p_low = probs[:, LOWER_STRATUM[0]] + probs[:, LOWER_STRATUM[1]]
    p_high = np.zeros(m)
    for ch in HIGHER_STRATUM:
        p_high += probs[:, ch]
    q = p_low * dens_lower + p_high * dens_higher
    q_safe = np.maximum(q, LOG_CLAMP)
    value = float(np.mean(-np.log(q_safe)))
    if not with_grad:
        return value, None
    grad = np.zeros_like(probs)
    live = q > LOG_CLAMP
    scale = np.where(live, -1.0 / (q_safe * m), 0.0)
    for ch in LOWER_STRATUM:
        grad[:, ch] = scale * dens_lower
    for ch in HIGHER_STRATUM:
        grad[:, ch] = scale * dens_higher
    return value, grad


def total_loss(l3d: float, l2d: float, lelev: float,
               weights: LossWeights | None = None) -> float:
    w = weights or LossWeights()
    return l3d + w.lambda_2d * l2d + w.mu_elevation * lelev
