"""Command-line surface: synth, prepare, train, infer, baseline, eval, and
ablate subcommands tying the pipeline together."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import metrics
from .baselines import (
    fit_forest,
    fit_linreg,
    fit_logistic,
    pixel_features,
    predict_forest,
    predict_linreg,
    predict_logistic,
    save_forest,
)
from .core import LAYERS, StrataError
from .network import load_params
from .pipeline import (
    PipelineError,
    evaluate_plots,
    infer_plot,
    load_plot_data,
    plot_paths,
    prepare_plot,
    read_labels,
    read_product,
    truth_paths,
    truth_products,
)
from .pointfile import read_points, write_points
from .rasterize import FULL, NODATA, build_layer_truth
from .runconfig import ConfigError, RunConfig, load_config, write_manifest
from .synthgen import SceneConfig, generate_plot, write_manifest as write_scene
from .train import fit

ABLATE_PARAMS = {
    "S": "s_points", "s_points": "s_points",
    "R": "radius", "radius": "radius",
    "r": "pixel_size", "pixel_size": "pixel_size",
    "lambda": "lambda_2d", "lambda_2d": "lambda_2d",
    "mu": "mu_elevation", "mu_elevation": "mu_elevation",
}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="key=value config file to load first")
    for f in fields(RunConfig):
        kwargs = {"default": None, "dest": f.name}
        if f.type in ("bool", bool):
            kwargs["choices"] = ("true", "false")
        sub.add_argument(_flag(f.name), **kwargs)


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg = load_config(args.config, base=cfg)
    for f in fields(RunConfig):
        raw = getattr(args, f.name, None)
        if raw is None:
            continue
        if f.type in ("bool", bool):
            value = raw == "true"
        elif f.type in ("int", int):
            value = int(raw)
        elif f.type in ("float", float):
            value = float(raw)
        else:
            value = raw
        setattr(cfg, f.name, value)
    return cfg


def _require(cfg: RunConfig, *names):
    for name in names:
        if not getattr(cfg, name):
            raise ConfigError(f"{_flag(name)} is required for this command")


def _out_dir(cfg: RunConfig) -> Path:
    _require(cfg, "output_dir")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(cfg)
    written = []
    for i in range(cfg.synth_plots):
        scene = SceneConfig(plot_id=f"plot_{i:02d}",
                            extent=(cfg.synth_extent, cfg.synth_extent),
                            seed=cfg.seed * 10007 + i)
        cloud, manifest = generate_plot(scene)
        path = out / f"{cloud.plot_id}.txt"
        write_points(cloud, path)
        write_scene(manifest, out / f"{cloud.plot_id}_scene.json")
        written.append(path)
        print(f"wrote {path} ({cloud.n_points} points)")
    write_manifest(cfg, out / "run_manifest.cfg", input_paths=written)
    return 0


def cmd_prepare(args) -> int:
    cfg = _resolve_config(args)
    _require(cfg, "plots_dir")
    truth_dir = Path(cfg.truth_dir or cfg.plots_dir)
    truth_dir.mkdir(parents=True, exist_ok=True)
    inputs = plot_paths(cfg.plots_dir)
    for path in inputs:
        cloud = read_points(path)
        truth, mixture = prepare_plot(cloud, cfg.layer_spec(), cfg.pixel_size,
                                      truth_dir=truth_dir)
        n_full = sum(int(np.sum(truth.layer(l).cells == FULL)) for l in LAYERS)
        print(f"prepared {cloud.plot_id}: {n_full} full cells, mixture "
              f"pi={mixture.weight_lower:.3f} after {mixture.n_iterations} "
              f"iterations")
    write_manifest(cfg, truth_dir / "run_manifest.cfg", input_paths=inputs)
    return 0


def _load_training_set(cfg: RunConfig):
    _require(cfg, "plots_dir")
    truth_dir = cfg.truth_dir or cfg.plots_dir
    return [load_plot_data(p, truth_dir) for p in plot_paths(cfg.plots_dir)]


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(cfg)
    plots = _load_training_set(cfg)
    inputs = plot_paths(cfg.plots_dir)
    inputs += [p for data in plots
               for p in truth_paths(cfg.truth_dir or cfg.plots_dir,
                                    data.cloud.plot_id).values()]
    write_manifest(cfg, out / "run_manifest.cfg", input_paths=inputs)
    with open(out / "train_log.jsonl", "w") as log_stream:
        params, log = fit(plots, cfg.train_config(), out_dir=str(out),
                          log_stream=log_stream)
    print(f"trained {cfg.epochs} epochs; final total loss "
          f"{log[-1]['total']:.4f}; checkpoint {out / 'checkpoint_final.snp'}")
    return 0


def cmd_infer(args) -> int:
    cfg = _resolve_config(args)
    _require(cfg, "plots_dir", "params_path")
    out = _out_dir(cfg)
    params = load_params(cfg.params_path)
    inputs = plot_paths(cfg.plots_dir)
    for path in inputs:
        cloud = read_points(path)
        labels, product, _ = infer_plot(params, cloud, cfg.train_config(),
                                        out_dir=out)
        occupied = {l: int(product.occupancy[l].sum()) for l in LAYERS}
        print(f"inferred {cloud.plot_id}: occupied pixels {occupied}")
    write_manifest(cfg, out / "run_manifest.cfg",
                   input_paths=list(inputs) + [cfg.params_path])
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    _require(cfg, "plots_dir", "pred_dir")
    pairs3d, pairs2d, height_pairs = [], [], []
    for path in plot_paths(cfg.plots_dir):
        cloud = read_points(path)
        pred_labels = read_labels(Path(cfg.pred_dir) / f"{cloud.plot_id}_labels.txt")
        if len(pred_labels) != cloud.n_points:
            raise PipelineError(f"{cloud.plot_id}: prediction/point count mismatch")
        truth = build_layer_truth(cloud, cfg.layer_spec(), cfg.pixel_size)
        pred_product = read_product(cfg.pred_dir, cloud.plot_id)
        truth_product = truth_products(cloud, cfg.pixel_size,
                                       geometry=truth.geometry)
        pairs3d.append((pred_labels, cloud.label))
        pairs2d.append((pred_product.occupancy, truth))
        height_pairs.append((pred_product, truth_product))
    result = evaluate_plots(pairs3d, pairs2d, height_pairs)
    report = metrics.format_report(result.get("eval3d"), result.get("eval2d"),
                                   result.get("heights"))
    print(report)
    if cfg.output_dir:
        out = _out_dir(cfg)
        with open(out / "eval_report.txt", "w") as fh:
            fh.write(report + "\n")
        with open(out / "eval_metrics.json", "w") as fh:
            json.dump(_metrics_json(result), fh, indent=2)
            fh.write("\n")
    return 0


def _metrics_json(result) -> dict:
    out = {}
    if "eval3d" in result:
        e = result["eval3d"]
        out["eval3d"] = {"iou": e.iou, "mean_iou": e.mean_iou, "oa": e.oa,
                         "n_points": e.n_points}
    if "eval2d" in result:
        e = result["eval2d"]
        out["eval2d"] = {"iou": e.iou, "mean_iou": e.mean_iou, "oa": e.oa,
                         "n_pixels": e.n_pixels}
    if "heights" in result:
        out["heights"] = result["heights"]
    return out


def _baseline_rows(cloud, cfg):
    """Per-pixel features and targets for one plot."""
    truth = build_layer_truth(cloud, cfg.layer_spec(), cfg.pixel_size)
    grid = pixel_features(cloud, cfg.pixel_size, geometry=truth.geometry)
    product = truth_products(cloud, cfg.pixel_size, geometry=truth.geometry)
    return grid, truth, product


HEIGHT_GRIDS = {
    "gv_top": ("gv", "max_height"),
    "understory_top": ("understory", "max_height"),
    "overstory_base": ("overstory", "min_height"),
    "overstory_top": ("overstory", "max_height"),
}


def cmd_baseline(args) -> int:
    cfg = _resolve_config(args)
    _require(cfg, "plots_dir", "test_dir")
    out = _out_dir(cfg)
    train_data = [_baseline_rows(read_points(p), cfg)
                  for p in plot_paths(cfg.plots_dir)]
    test_data = [_baseline_rows(read_points(p), cfg)
                 for p in plot_paths(cfg.test_dir)]

    feats_train = np.concatenate(
        [g.features[g.has_points] for g, _, _ in train_data])
    masks_train = np.concatenate(
        [g.has_points.ravel() for g, _, _ in train_data])
    del masks_train

    report = {}
    lines = []
    for kind, enabled in (("logistic", cfg.baseline_logistic),
                          ("forest", cfg.baseline_forest)):
        if not enabled:
            continue
        pairs2d = []
        models = {}
        for layer in LAYERS:
            ys, xs = [], []
            for g, truth, _ in train_data:
                cells = truth.layer(layer).cells
                mask = g.has_points & (cells != NODATA)
                xs.append(g.features[mask])
                ys.append((cells[mask] == FULL).astype(np.int64))
            x = np.concatenate(xs)
            y = np.concatenate(ys)
            if kind == "logistic":
                model = fit_logistic(x, y)
                models[layer] = model
                predict = lambda f, m=model: predict_logistic(m, f) >= 0.5
            else:
                model = fit_forest(x, y, "classification", seed=cfg.seed)
                models[layer] = model
                save_forest(model, out / f"forest_occupancy_{layer}.json")
                predict = lambda f, m=model: predict_forest(m, f).astype(bool)
            for g, truth, _ in test_data:
                occ = np.zeros(g.geometry.shape, dtype=bool)
                if g.has_points.any():
                    occ[g.has_points] = predict(g.features[g.has_points])
                pairs2d.append(({layer: occ}, truth))
        pooled = _pool_single_layer_pairs(pairs2d)
        report[kind] = {"iou": pooled.iou, "mean_iou": pooled.mean_iou,
                        "oa": pooled.oa}
        lines.append(f"{kind} occupancy: mIoU2D {pooled.mean_iou:.1f}  "
                     f"OA {pooled.oa:.1f}")

    for kind, enabled in (("linreg", cfg.baseline_linreg),
                          ("forest_reg", cfg.baseline_forest)):
        if not enabled:
            continue
        heights = {}
        for target, (layer, attr) in HEIGHT_GRIDS.items():
            xs, ys = [], []
            for g, _, product in train_data:
                mask = g.has_points & product.occupancy[layer]
                xs.append(g.features[mask])
                ys.append(getattr(product, attr)[layer][mask])
            x = np.concatenate(xs)
            y = np.concatenate(ys)
            if len(x) == 0:
                heights[target] = None
                continue
            if kind == "linreg":
                model = fit_linreg(x, y)
                predict = lambda f, m=model: predict_linreg(m, f)
            else:
                model = fit_forest(x, y, "regression", seed=cfg.seed)
                predict = lambda f, m=model: predict_forest(m, f)
            pairs = []
            for g, _, product in test_data:
                pred = _regression_product(g, product, layer, attr, predict)
                pairs.append((pred, product))
            from .pipeline import _pooled_eval_heights
            heights[target] = _pooled_eval_heights(pairs)[target]
        report[kind] = heights
        shown = {t: (None if h is None else round(h["mae"], 3))
                 for t, h in heights.items()}
        lines.append(f"{kind} heights MAE: {shown}")

    text = "\n".join(lines)
    print(text)
    with open(out / "baseline_report.txt", "w") as fh:
        fh.write(text + "\n")
    with open(out / "baseline_metrics.json", "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    return 0


def _regression_product(grid, truth_product, layer, attr, predict):
    from .infer import LayerProduct

    geom = grid.geometry
    occupancy = {l: np.zeros(geom.shape, dtype=bool) for l in LAYERS}
    hmin = {l: np.zeros(geom.shape) for l in LAYERS}
    hmax = {l: np.zeros(geom.shape) for l in LAYERS}
    mask = grid.has_points & truth_product.occupancy[layer]
    occupancy[layer] = mask
    values = np.zeros(geom.shape)
    if mask.any():
        values[mask] = np.maximum(predict(grid.features[mask]), 0.0)
    if attr == "min_height":
        hmin[layer] = values
        hmax[layer] = np.full(geom.shape, values.max() if mask.any() else 0.0)
    else:
        hmax[layer] = values
    return LayerProduct(geom, occupancy, hmin, hmax)


def _pool_single_layer_pairs(pairs):
    """Pool (single-layer occupancy, truth) pairs into an Eval2D by padding
    the missing layers with nothing to evaluate."""
    import warnings

    iou = {}
    defined = []
    correct = 0
    total = 0
    for layer in LAYERS:
        tp = fp = fn = 0
        seen = False
        for pred_occ, truth in pairs:
            if layer not in pred_occ:
                continue
            seen = True
            cells = truth.layer(layer).cells
            mask = cells != NODATA
            t = cells[mask] == FULL
            p = pred_occ[layer][mask]
            tp += int(np.sum(p & t))
            fp += int(np.sum(p & ~t))
            fn += int(np.sum(~p & t))
            correct += int(np.sum(p == t))
            total += int(mask.sum())
        if not seen:
            continue
        denom = tp + fp + fn
        if denom == 0:
            iou[layer] = None
            warnings.warn(f"layer '{layer}' IoU undefined")
        else:
            iou[layer] = tp / denom * 100.0
            defined.append(iou[layer])
    if not defined or total == 0:
        raise PipelineError("no evaluable pixels for the baseline")
    return metrics.Eval2D(iou, float(np.mean(defined)),
                          correct / total * 100.0, total)


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    _require(cfg, "plots_dir", "test_dir")
    out = _out_dir(cfg)
    if args.param not in ABLATE_PARAMS:
        raise ConfigError(f"unknown ablation parameter '{args.param}'; choose "
                          f"from {sorted(set(ABLATE_PARAMS))}")
    field_name = ABLATE_PARAMS[args.param]
    field_type = {"s_points": int, "radius": float, "pixel_size": float,
                  "lambda_2d": float, "mu_elevation": float}[field_name]
    values = [field_type(v) for v in args.values.split(",") if v.strip() != ""]
    if not values:
        raise ConfigError("no ablation values given")

    rows = []
    for value in values:
        run_cfg = replace(cfg)
        setattr(run_cfg, field_name, value)
        run_dir = out / f"{field_name}_{value}"
        run_dir.mkdir(parents=True, exist_ok=True)
        plots = _load_training_set(run_cfg)
        params, _ = fit(plots, run_cfg.train_config(), out_dir=str(run_dir))
        pairs3d, pairs2d, height_pairs = [], [], []
        for path in plot_paths(run_cfg.test_dir):
            cloud = read_points(path)
            labels, product, _ = infer_plot(params, cloud,
                                            run_cfg.train_config())
            truth = build_layer_truth(cloud, run_cfg.layer_spec(),
                                      run_cfg.pixel_size)
            pairs3d.append((labels, cloud.label))
            pairs2d.append((product.occupancy, truth))
            height_pairs.append((product,
                                 truth_products(cloud, run_cfg.pixel_size,
                                                geometry=truth.geometry)))
        result = evaluate_plots(pairs3d, pairs2d, height_pairs)
        row = {"param": field_name, "value": value,
               **_metrics_json(result)}
        rows.append(row)
        print(f"{field_name}={value}: mIoU2D "
              f"{result['eval2d'].mean_iou:.1f}, mIoU3D "
              f"{result['eval3d'].mean_iou:.1f}")

    with open(out / "ablate_results.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    lines = [f"{'value':>12s} {'mIoU2D':>8s} {'mIoU3D':>8s} {'OA3D':>8s}"]
    for row in rows:
        lines.append(f"{row['value']:>12} {row['eval2d']['mean_iou']:8.1f} "
                     f"{row['eval3d']['mean_iou']:8.1f} "
                     f"{row['eval3d']['oa']:8.1f}")
    table = "\n".join(lines)
    print(table)
    with open(out / "ablate_report.txt", "w") as fh:
        fh.write(table + "\n")
    write_manifest(cfg, out / "run_manifest.cfg")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="strataforest",
        description="Multi-layer vegetation structure from aerial LiDAR")
    subs = parser.add_subparsers(dest="command", required=True)
    for name, func, help_text in (
            ("synth", cmd_synth, "generate labeled synthetic plots"),
            ("prepare", cmd_prepare, "build truth rasters and fit elevation "
                                     "mixtures"),
            ("train", cmd_train, "train the point classifier"),
            ("infer", cmd_infer, "predict labels, rasters, and meshes"),
            ("baseline", cmd_baseline, "fit and evaluate per-pixel baselines"),
            ("eval", cmd_eval, "score predictions against labeled truth"),
            ("ablate", cmd_ablate, "sweep one parameter and report metrics")):
        sub = subs.add_parser(name, help=help_text)
        _add_config_flags(sub)
        if name == "ablate":
            sub.add_argument("--param", required=True,
                             help="one of S, R, r, lambda, mu (or the config "
                                  "key name)")
            sub.add_argument("--values", required=True,
                             help="comma-separated values to sweep")
        sub.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StrataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
