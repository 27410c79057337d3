"""Per-pixel baseline models: handcrafted column descriptors feeding logistic
regression (occupancy), ridge least squares (heights), and random forests
for both tasks. All models are implemented here directly so their behavior
is fully pinned down."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import PlotCloud, StrataError
from .rasterize import GridGeometry

BIN_EDGES = (0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 5.0, 8.0, 12.0, 18.0, 30.0)

FEATURE_NAMES = tuple(
    ["max_z", "min_z", "mean_z", "std_z", "mean_intensity", "mean_return"]
    + [f"bin_{lo}_{hi}" for lo, hi in zip(BIN_EDGES[:-1], BIN_EDGES[1:])]
)
N_PIXEL_FEATURES = len(FEATURE_NAMES)  # 16


class BaselineError(StrataError):
    pass


@dataclass
class PixelFeatureGrid:
    geometry: GridGeometry
    features: np.ndarray   # (H, W, 16)
    has_points: np.ndarray  # (H, W) bool


def pixel_features(cloud: PlotCloud, pixel_size: float = 0.5,
                   geometry: GridGeometry | None = None) -> PixelFeatureGrid:
    """Column statistics per pixel: z extremes/mean/std (population), mean
    intensity, mean return number, and point counts in the fixed elevation
    bins over [0, 30] m. Empty pixels are flagged and zero-filled."""
    geom = geometry or GridGeometry.for_extent(cloud.origin, cloud.extent,
                                               pixel_size)
    n_pix = geom.n_rows * geom.n_cols
    feats = np.zeros((n_pix, N_PIXEL_FEATURES))
    if cloud.n_points:
        rows, cols = geom.pixel_of(cloud.x, cloud.y)
        flat = rows * geom.n_cols + cols
        count = np.bincount(flat, minlength=n_pix).astype(np.float64)
        occupied = count > 0
        safe = np.maximum(count, 1.0)

        zmax = np.full(n_pix, -np.inf)
        np.maximum.at(zmax, flat, cloud.z)
        zmin = np.full(n_pix, np.inf)
        np.minimum.at(zmin, flat, cloud.z)
        zsum = np.bincount(flat, weights=cloud.z, minlength=n_pix)
        zmean = zsum / safe
        zsq = np.bincount(flat, weights=cloud.z ** 2, minlength=n_pix)
        zvar = np.maximum(zsq / safe - zmean ** 2, 0.0)

        feats[:, 0] = np.where(occupied, zmax, 0.0)
        feats[:, 1] = np.where(occupied, zmin, 0.0)
        feats[:, 2] = zmean
        feats[:, 3] = np.sqrt(zvar)
        feats[:, 4] = np.bincount(flat, weights=cloud.intensity,
                                  minlength=n_pix) / safe
        feats[:, 5] = np.bincount(flat, weights=cloud.return_number,
                                  minlength=n_pix) / safe
        # histogram bins: [lo, hi) except the last, which includes 30 m
        for b in range(10):
            lo, hi = BIN_EDGES[b], BIN_EDGES[b + 1]
            if b == 9:
                in_bin = (cloud.z >= lo) & (cloud.z <= hi)
            else:
                in_bin = (cloud.z >= lo) & (cloud.z < hi)
            feats[:, 6 + b] = np.bincount(flat[in_bin], minlength=n_pix)
    else:
        occupied = np.zeros(n_pix, dtype=bool)
    return PixelFeatureGrid(geom, feats.reshape(geom.shape + (N_PIXEL_FEATURES,)),
                            occupied.reshape(geom.shape))


def _standardize(x):
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return (x - mean) / std, mean, std


@dataclass
class LogisticModel:
    mean: np.ndarray
    std: np.ndarray
    weights: np.ndarray
    bias: float
    constant: float | None = None  # set when training saw a single class


def fit_logistic(features: np.ndarray, targets: np.ndarray,
                 l2: float = 1e-4, iterations: int = 500,
                 lr: float = 0.1) -> LogisticModel:
    """Binary logistic regression by full-batch gradient descent on the mean
    log-loss plus an L2 penalty, on standardized features."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if x.ndim != 2 or len(x) != len(y):
        raise BaselineError("features must be (n, d) with matching targets")
    xs, mean, std = _standardize(x)
    if y.min() == y.max():
        warnings.warn("single-class training set; using a constant predictor")
        p = min(max(float(y.mean()), 1e-3), 1.0 - 1e-3)
        return LogisticModel(mean, std, np.zeros(x.shape[1]), 0.0, constant=p)
    w = np.zeros(x.shape[1])
    b = 0.0
    n = len(y)
    for _ in range(iterations):
        p = _sigmoid(xs @ w + b)
        err = p - y
        gw = xs.T @ err / n + l2 * w
        gb = float(err.mean())
        w -= lr * gw
        b -= lr * gb
    return LogisticModel(mean, std, w, b)


def _sigmoid(t):
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def predict_logistic(model: LogisticModel, features: np.ndarray) -> np.ndarray:
    """Probability of the positive class per row."""
    if model.constant is not None:
        return np.full(len(features), model.constant)
    xs = (np.asarray(features, dtype=np.float64) - model.mean) / model.std
    return _sigmoid(xs @ model.weights + model.bias)


def logistic_log_loss(model: LogisticModel, features, targets,
                      l2: float = 1e-4) -> float:
    p = np.clip(predict_logistic(model, features), 1e-12, 1.0 - 1e-12)
    y = np.asarray(targets, dtype=np.float64)
    data = float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))
    return data + 0.5 * l2 * float(np.dot(model.weights, model.weights))


@dataclass
class LinearModel:
    mean: np.ndarray
    std: np.ndarray
    weights: np.ndarray
    bias: float


def fit_linreg(features: np.ndarray, targets: np.ndarray,
               ridge: float = 1e-8) -> LinearModel:
    """Least squares via the normal equations with a small ridge term on
    standardized features."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if len(x) < x.shape[1] + 1:
        raise BaselineError(
            f"need at least {x.shape[1] + 1} samples, got {len(x)}")
    xs, mean, std = _standardize(x)
    xa = np.column_stack([xs, np.ones(len(xs))])
    gram = xa.T @ xa + ridge * np.eye(xa.shape[1])
    try:
        beta = np.linalg.solve(gram, xa.T @ y)
    except np.linalg.LinAlgError as exc:
        raise BaselineError(f"normal equations are singular: {exc}") from exc
    if not np.all(np.isfinite(beta)):
        raise BaselineError("normal equations produced non-finite coefficients")
    return LinearModel(mean, std, beta[:-1], float(beta[-1]))


def predict_linreg(model: LinearModel, features: np.ndarray) -> np.ndarray:
    xs = (np.asarray(features, dtype=np.float64) - model.mean) / model.std
    return xs @ model.weights + model.bias


@dataclass
class TreeNode:
    feature: int = -1            # -1 marks a leaf
    threshold: float = 0.0
    left: int = -1
    right: int = -1
    value: float = 0.0           # class id or regression mean


@dataclass
class DecisionTree:
    nodes: list[TreeNode] = field(default_factory=list)

    def predict(self, x: np.ndarray) -> np.ndarray:
        feat = np.array([n.feature for n in self.nodes])
        thr = np.array([n.threshold for n in self.nodes])
        left = np.array([n.left for n in self.nodes])
        right = np.array([n.right for n in self.nodes])
        value = np.array([n.value for n in self.nodes])
        cur = np.zeros(len(x), dtype=np.int64)
        while True:
            f = feat[cur]
            rows = np.nonzero(f >= 0)[0]
            if len(rows) == 0:
                break
            go_left = x[rows, f[rows]] < thr[cur[rows]]
            cur[rows] = np.where(go_left, left[cur[rows]], right[cur[rows]])
        return value[cur]


@dataclass
class ForestModel:
    task: str                    # "classification" or "regression"
    trees: list[DecisionTree]
    n_classes: int = 2
    max_depth: int = 4
    seed: int = 0


def _gini(counts: np.ndarray) -> float:
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return float(1.0 - np.sum(p * p))


def _best_split(x, y, feat_idx, task, n_classes):
    best = None  # (score, feature, threshold)
    n = len(y)
    for f in feat_idx:
        vals = x[:, f]
        order = np.argsort(vals, kind="stable")
        sv = vals[order]
        sy = y[order]
        uniq = np.nonzero(sv[1:] > sv[:-1])[0]
        if len(uniq) == 0:
            continue
        if task == "classification":
            total = np.bincount(sy.astype(np.int64), minlength=n_classes)
            left = np.zeros(n_classes)
            for cut in range(len(sv) - 1):
                left[int(sy[cut])] += 1
                if sv[cut + 1] <= sv[cut]:
                    continue
                nl = cut + 1
                score = (nl * _gini(left) + (n - nl) * _gini(total - left)) / n
                thr = 0.5 * (sv[cut] + sv[cut + 1])
                if best is None or score < best[0] - 1e-15:
                    best = (score, f, thr)
        else:
            csum = np.cumsum(sy)
            csq = np.cumsum(sy ** 2)
            for cut in uniq:
                nl = cut + 1
                nr = n - nl
                sl, ql = csum[cut], csq[cut]
                sr, qr = csum[-1] - sl, csq[-1] - ql
                score = (ql - sl * sl / nl) + (qr - sr * sr / nr)
                thr = 0.5 * (sv[cut] + sv[cut + 1])
                if best is None or score < best[0] - 1e-15:
                    best = (score, f, thr)
    return best


def _grow_tree(x, y, rng, task, n_classes, max_depth, n_split_features):
    tree = DecisionTree()

    def leaf_value(idx):
        if task == "classification":
            counts = np.bincount(y[idx].astype(np.int64), minlength=n_classes)
            return float(np.argmax(counts))  # ties -> lowest class id
        return float(np.mean(y[idx]))

    def grow(idx, depth):
        node_id = len(tree.nodes)
        tree.nodes.append(TreeNode())
        node = tree.nodes[node_id]
        values = y[idx]
        pure = values.min() == values.max()
        if depth >= max_depth or len(idx) < 2 or pure:
            node.value = leaf_value(idx)
            return node_id
        feat_idx = rng.choice(x.shape[1], size=n_split_features, replace=False)
        found = _best_split(x[idx], values, sorted(feat_idx), task, n_classes)
        if found is None:
            node.value = leaf_value(idx)
            return node_id
        _, f, thr = found
        mask = x[idx, f] < thr
        node.feature = int(f)
        node.threshold = float(thr)
        node.left = grow(idx[mask], depth + 1)
        node.right = grow(idx[~mask], depth + 1)
        return node_id

    grow(np.arange(len(y)), 0)
    return tree


def fit_forest(features: np.ndarray, targets: np.ndarray, task: str,
               n_trees: int = 100, max_depth: int = 4,
               seed: int = 0) -> ForestModel:
    """Bootstrap forest of depth-limited CART trees: Gini splits with sqrt(d)
    feature subsampling for classification, variance splits with d/3 for
    regression."""
    if task not in ("classification", "regression"):
        raise BaselineError(f"unknown task '{task}'")
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if len(x) == 0:
        raise BaselineError("empty training set")
    d = x.shape[1]
    if task == "classification":
        n_classes = int(y.max()) + 1 if len(y) else 2
        n_split = max(1, int(np.sqrt(d)))
    else:
        n_classes = 0
        n_split = max(1, d // 3)
    root = np.random.SeedSequence(seed)
    trees = []
    for child in root.spawn(n_trees):
        rng = np.random.default_rng(child)
        boot = rng.integers(0, len(x), size=len(x))
        trees.append(_grow_tree(x[boot], y[boot], rng, task,
                                max(n_classes, 2), max_depth, n_split))
    return ForestModel(task, trees, max(n_classes, 2), max_depth, seed)


def predict_forest(model: ForestModel, features: np.ndarray) -> np.ndarray:
    """Majority vote (ties to the lowest class) or mean across trees."""
    x = np.asarray(features, dtype=np.float64)
    votes = np.stack([tree.predict(x) for tree in model.trees])
    if model.task == "regression":
        return votes.mean(axis=0)
    counts = np.stack([
        np.sum(votes == c, axis=0) for c in range(model.n_classes)])
    return np.argmax(counts, axis=0).astype(np.int64)


def save_forest(model: ForestModel, path) -> None:
    """Structured text dump: one JSON document with per-tree split records."""
    doc = {
        "task": model.task,
        "n_classes": model.n_classes,
        "max_depth": model.max_depth,
        "seed": model.seed,
        "trees": [
            [[n.feature, n.threshold, n.left, n.right, n.value]
             for n in tree.nodes]
            for tree in model.trees
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_forest(path) -> ForestModel:
    with open(path) as fh:
        doc = json.load(fh)
    trees = []
    for rows in doc["trees"]:
        trees.append(DecisionTree(
            [TreeNode(int(f), float(t), int(l), int(r), float(v))
             for f, t, l, r, v in rows]))
    return ForestModel(doc["task"], trees, int(doc["n_classes"]),
                       int(doc["max_depth"]), int(doc["seed"]))
