"""Evaluation: 3D point-class IoU/OA, per-layer 2D occupancy IoU/OA, and
height MAE/MRE, plus the reference scores of the full WildForest3D benchmark
(not reachable at desk scale; kept for full-data runs)."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import CLASS_NAMES, LAYERS, N_CLASSES, UNLABELED, StrataError, VegClass
from .rasterize import FULL, NODATA, LayerTruth

# classes scored in 3D; ground vegetation has no 3D annotation
EVAL_3D_CLASSES = (VegClass.GROUND, VegClass.UNDERSTORY, VegClass.STEM,
                   VegClass.DECIDUOUS, VegClass.CONIFEROUS)

HEIGHT_TARGETS = ("gv_top", "understory_top", "overstory_base", "overstory_top")

MRE_MIN_TRUE_HEIGHT = 0.05  # meters; guards the relative-error division

REFERENCE_3D = {
    "oa": 90.5, "miou": 53.5,
    "iou": {"ground": 95.1, "understory": 43.3, "deciduous": 90.0,
            "coniferous": 23.5, "stem": 15.5},
}
REFERENCE_2D = {
    "oa": 92.3, "miou": 80.6,
    "iou": {"gv": 81.5, "understory": 61.0, "overstory": 99.3},
}
REFERENCE_HEIGHTS = {
    "mae": {"gv_top": 0.03, "understory_top": 0.3, "overstory_base": 1.1,
            "overstory_top": 0.1},
    "mre": {"gv_top": 2.9, "understory_top": 22.0, "overstory_base": 26.5,
            "overstory_top": 0.7},
}


class MetricsError(StrataError):
    pass


@dataclass
class ConfusionMatrix:
    """Truth on rows, prediction on columns."""

    counts: np.ndarray

    @classmethod
    def from_labels(cls, truth, pred, n_classes: int) -> "ConfusionMatrix":
        truth = np.asarray(truth, dtype=np.int64)
        pred = np.asarray(pred, dtype=np.int64)
        if truth.shape != pred.shape:
            raise MetricsError("truth and prediction lengths differ")
        flat = truth * n_classes + pred
        counts = np.bincount(flat, minlength=n_classes * n_classes)
        return cls(counts.reshape(n_classes, n_classes))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def overall_accuracy(self) -> float:
        if self.total == 0:
            raise MetricsError("empty confusion matrix")
        return float(np.trace(self.counts)) / self.total * 100.0

    def iou(self, c: int):
        tp = int(self.counts[c, c])
        denom = int(self.counts[c, :].sum()) + int(self.counts[:, c].sum()) - tp
        if denom == 0:
            return None
        return tp / denom * 100.0


@dataclass
class Eval3D:
    iou: dict
    mean_iou: float
    oa: float
    confusion: ConfusionMatrix
    n_points: int


def eval_3d(pred_labels, true_labels) -> Eval3D:
    """Point-class scores over labeled, non-ground-vegetation truth points.

    Per-class IoU over the five evaluated classes; classes absent from both
    truth and prediction are reported as None and left out of the mean with
    a warning.
    """
    pred = np.asarray(pred_labels, dtype=np.int64)
    true = np.asarray(true_labels, dtype=np.int64)
    mask = (true != UNLABELED) & (true != VegClass.GROUND_VEG)
    if not mask.any():
        raise MetricsError("no evaluable 3D points (all unlabeled or gv)")
    cm = ConfusionMatrix.from_labels(true[mask], pred[mask], N_CLASSES)
    iou = {}
    defined = []
    for c in EVAL_3D_CLASSES:
        value = cm.iou(int(c))
        iou[CLASS_NAMES[c]] = value
        if value is None:
            warnings.warn(f"class '{CLASS_NAMES[c]}' absent from truth and "
                          f"prediction; excluded from mean IoU")
        else:
            defined.append(value)
    return Eval3D(iou, float(np.mean(defined)), cm.overall_accuracy(), cm,
                  int(mask.sum()))


@dataclass
class Eval2D:
    iou: dict
    mean_iou: float
    oa: float
    n_pixels: int


def eval_2d(pred_occupancy: dict, truth: LayerTruth) -> Eval2D:
    """Binary occupancy scores per layer; no-data truth pixels are skipped.

    IoU is of the full class. The mean is over layers with a defined IoU;
    OA pools every evaluated pixel of the three layers.
    """
    iou = {}
    defined = []
    correct = 0
    total = 0
    for layer in LAYERS:
        pred = np.asarray(pred_occupancy[layer], dtype=bool)
        cells = truth.layer(layer).cells
        mask = cells != NODATA
        t = cells[mask] == FULL
        p = pred[mask]
        tp = int(np.sum(p & t))
        fp = int(np.sum(p & ~t))
        fn = int(np.sum(~p & t))
        denom = tp + fp + fn
        if denom == 0:
            iou[layer] = None
            warnings.warn(f"layer '{layer}' has no full pixels in truth or "
                          f"prediction; IoU undefined")
        else:
            iou[layer] = tp / denom * 100.0
            defined.append(iou[layer])
        correct += int(np.sum(p == t))
        total += int(mask.sum())
    if total == 0:
        raise MetricsError("no evaluable 2D pixels")
    if not defined:
        raise MetricsError("IoU undefined for every layer")
    return Eval2D(iou, float(np.mean(defined)), correct / total * 100.0, total)


def eval_heights(pred, truth) -> dict:
    """MAE (m) and MRE (%) of the four height targets over pixels occupied in
    both products; targets with no such pixels are reported as None."""
    grids = {
        "gv_top": ("gv", "max_height"),
        "understory_top": ("understory", "max_height"),
        "overstory_base": ("overstory", "min_height"),
        "overstory_top": ("overstory", "max_height"),
    }
    out = {}
    for target in HEIGHT_TARGETS:
        layer, attr = grids[target]
        mask = pred.occupancy[layer] & truth.occupancy[layer]
        if not mask.any():
            out[target] = None
            continue
        p = getattr(pred, attr)[layer][mask]
        t = getattr(truth, attr)[layer][mask]
        err = np.abs(p - t)
        mae = float(np.mean(err))
        rel_mask = t >= MRE_MIN_TRUE_HEIGHT
        mre = (float(np.mean(err[rel_mask] / t[rel_mask]) * 100.0)
               if rel_mask.any() else None)
        out[target] = {"mae": mae, "mre": mre, "pixels": int(mask.sum())}
    return out


def format_report(eval3d: Eval3D | None = None, eval2d: Eval2D | None = None,
                  heights: dict | None = None) -> str:
    """Aligned, human-readable metric table."""
    lines = []
    if eval3d is not None:
        lines.append("3D point classification")
        for name, value in eval3d.iou.items():
            shown = "   n/a" if value is None else f"{value:6.1f}"
            lines.append(f"  IoU {name:<11s} {shown}")
        lines.append(f"  mIoU3D          {eval3d.mean_iou:6.1f}")
        lines.append(f"  OA              {eval3d.oa:6.1f}")
    if eval2d is not None:
        lines.append("2D occupancy")
        for layer in LAYERS:
            value = eval2d.iou[layer]
            shown = "   n/a" if value is None else f"{value:6.1f}"
            lines.append(f"  IoU {layer:<11s} {shown}")
        lines.append(f"  mIoU2D          {eval2d.mean_iou:6.1f}")
        lines.append(f"  OA              {eval2d.oa:6.1f}")
    if heights is not None:
        lines.append("layer heights")
        for target in HEIGHT_TARGETS:
            rec = heights.get(target)
            if rec is None:
                lines.append(f"  {target:<15s}    n/a")
            else:
                mre = "  n/a" if rec["mre"] is None else f"{rec['mre']:6.1f}%"
                lines.append(f"  {target:<15s} MAE {rec['mae']:6.3f} m  "
                             f"MRE {mre}")
    return "\n".join(lines)
