"""Stage orchestration shared by the CLI and the test-suite: prepare plots
(truth rasters + elevation mixture), assemble training data, run whole-plot
inference, and pool evaluation metrics across plots."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import metrics
from .core import LAYERS, LayerSpec, PlotCloud, StrataError
from .elevation import GammaMixture, default_init, ecm_fit, load_mixture, save_mixture
from .infer import (
    LayerProduct,
    build_mesh,
    hard_labels,
    layer_products,
    predict_plot,
    write_products,
)
from .pointfile import read_points
from .rasterize import (
    LayerTruth,
    build_layer_truth,
    read_ascii_grid,
    read_tri_raster,
    write_tri_raster,
)
from .train import PlotData


class PipelineError(StrataError):
    pass


def plot_paths(plots_dir) -> list[Path]:
    paths = sorted(Path(plots_dir).glob("*.txt"))
    if not paths:
        raise PipelineError(f"no plot files (*.txt) in {plots_dir}")
    return paths


def truth_paths(truth_dir, plot_id: str) -> dict:
    base = Path(truth_dir)
    out = {layer: base / f"{plot_id}_truth_{layer}.asc" for layer in LAYERS}
    out["mixture"] = base / f"{plot_id}_mixture.txt"
    return out


def prepare_plot(cloud: PlotCloud, layers: LayerSpec, pixel_size: float,
                 truth_dir=None) -> tuple[LayerTruth, GammaMixture]:
    """Build truth rasters and fit the per-plot elevation mixture; write both
    when truth_dir is given."""
    truth = build_layer_truth(cloud, layers, pixel_size)
    mixture = ecm_fit(cloud.z, init=default_init(cloud.z))
    if truth_dir is not None:
        paths = truth_paths(truth_dir, cloud.plot_id)
        for layer in LAYERS:
            write_tri_raster(truth.layer(layer), paths[layer])
        save_mixture(mixture, paths["mixture"])
    return truth, mixture


def load_plot_data(plot_path, truth_dir) -> PlotData:
    cloud = read_points(plot_path)
    paths = truth_paths(truth_dir, cloud.plot_id)
    for key, p in paths.items():
        if not p.exists():
            raise PipelineError(
                f"missing prepared file {p}; run the prepare step first")
    rasters = {layer: read_tri_raster(paths[layer]) for layer in LAYERS}
    truth = LayerTruth(rasters["gv"], rasters["understory"], rasters["overstory"])
    mixture = load_mixture(paths["mixture"])
    return PlotData(cloud, truth, mixture)


def infer_plot(params, cloud: PlotCloud, cfg, out_dir=None,
               flat_meshes: bool = False):
    """Predict labels and derive products and meshes for one plot; optionally
    write everything using the standard file naming."""
    probs = predict_plot(params, cloud, cfg.s_points, cfg.radius, seed=cfg.seed)
    labels = hard_labels(probs)
    product = layer_products(cloud, labels, pixel_size=cfg.pixel_size)
    meshes = {layer: build_mesh(product, layer, flat=flat_meshes)
              for layer in LAYERS}
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_products(product, meshes, out_dir, cloud.plot_id)
        write_labels(labels, out_dir / f"{cloud.plot_id}_labels.txt")
    return labels, product, meshes


def write_labels(labels, path) -> None:
    with open(path, "w") as fh:
        fh.write("# predicted class id per point, input order\n")
        for v in labels:
            fh.write(f"{int(v)}\n")


def read_labels(path) -> np.ndarray:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            out.append(int(line))
    return np.asarray(out, dtype=np.int64)


def read_product(pred_dir, plot_id: str) -> LayerProduct:
    """Load the occupancy/height rasters written by infer_plot."""
    pred_dir = Path(pred_dir)
    occupancy, hmin, hmax = {}, {}, {}
    geometry = None
    for layer in LAYERS:
        occ_v, geom, _ = read_ascii_grid(pred_dir / f"{plot_id}_{layer}_occ.asc")
        lo_v, _, _ = read_ascii_grid(pred_dir / f"{plot_id}_{layer}_hmin.asc")
        hi_v, _, _ = read_ascii_grid(pred_dir / f"{plot_id}_{layer}_hmax.asc")
        occupancy[layer] = occ_v == 1
        hmin[layer] = lo_v
        hmax[layer] = hi_v
        geometry = geom
    return LayerProduct(geometry, occupancy, hmin, hmax)


def evaluate_plots(pairs3d=(), pairs2d=(), height_pairs=()):
    """Pool metrics across plots.

    pairs3d: (pred_labels, true_labels); pairs2d: (pred_occupancy dict,
    LayerTruth); height_pairs: (pred LayerProduct, truth LayerProduct).
    Returns a dict with whichever of eval3d/eval2d/heights had input.
    """
    out = {}
    if pairs3d:
        preds = np.concatenate([np.asarray(p) for p, _ in pairs3d])
        trues = np.concatenate([np.asarray(t) for _, t in pairs3d])
        out["eval3d"] = metrics.eval_3d(preds, trues)
    if pairs2d:
        out["eval2d"] = _pooled_eval_2d(pairs2d)
    if height_pairs:
        out["heights"] = _pooled_eval_heights(height_pairs)
    return out


def _pooled_eval_2d(pairs):
    from .rasterize import FULL, NODATA
    import warnings

    iou = {}
    defined = []
    correct = 0
    total = 0
    for layer in LAYERS:
        tp = fp = fn = 0
        for pred_occ, truth in pairs:
            cells = truth.layer(layer).cells
            mask = cells != NODATA
            t = cells[mask] == FULL
            p = np.asarray(pred_occ[layer], dtype=bool)[mask]
            tp += int(np.sum(p & t))
            fp += int(np.sum(p & ~t))
            fn += int(np.sum(~p & t))
            correct += int(np.sum(p == t))
            total += int(mask.sum())
        denom = tp + fp + fn
        if denom == 0:
            iou[layer] = None
            warnings.warn(f"layer '{layer}' IoU undefined over the pooled plots")
        else:
            iou[layer] = tp / denom * 100.0
            defined.append(iou[layer])
    if total == 0 or not defined:
        raise PipelineError("no evaluable 2D pixels across plots")
    return metrics.Eval2D(iou, float(np.mean(defined)),
                          correct / total * 100.0, total)


def _pooled_eval_heights(pairs):
    grids = {
        "gv_top": ("gv", "max_height"),
        "understory_top": ("understory", "max_height"),
        "overstory_base": ("overstory", "min_height"),
        "overstory_top": ("overstory", "max_height"),
    }
    out = {}
    for target in metrics.HEIGHT_TARGETS:
        layer, attr = grids[target]
        errs = []
        trues = []
        for pred, truth in pairs:
            mask = pred.occupancy[layer] & truth.occupancy[layer]
            if not mask.any():
                continue
            p = getattr(pred, attr)[layer][mask]
            t = getattr(truth, attr)[layer][mask]
            errs.append(np.abs(p - t))
            trues.append(t)
        if not errs:
            out[target] = None
            continue
        err = np.concatenate(errs)
        true = np.concatenate(trues)
        rel = true >= metrics.MRE_MIN_TRUE_HEIGHT
        out[target] = {
            "mae": float(np.mean(err)),
            "mre": float(np.mean(err[rel] / true[rel]) * 100.0) if rel.any() else None,
            "pixels": int(len(err)),
        }
    return out


def truth_products(cloud: PlotCloud, pixel_size: float,
                   geometry=None) -> LayerProduct:
    """Label-derived occupancy/height products of a fully labeled cloud,
    used as the height ground truth."""
    return layer_products(cloud, cloud.label, pixel_size=pixel_size,
                          geometry=geometry)
