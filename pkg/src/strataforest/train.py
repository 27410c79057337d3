"""Training loop: cylinder sampling from the fine grid, augmentation, the
combined loss, Adam with decoupled weight decay, and the step-halving
learning rate schedule."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .core import (
    MIN_TRAIN_POINTS,
    UNLABELED,
    Cylinder,
    PlotCloud,
    StrataError,
    extract_cylinder,
    training_grid,
)
from .elevation import Z_FLOOR, GammaMixture, gamma_log_pdf
from .losses import LossSpec, LossWeights, TrainSample
from .network import NetParams, init_params, param_count, save_params, value_and_grad
from .rasterize import NODATA, LayerTruth

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainError(StrataError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    cylinders_per_epoch: int = 1000
    batch_size: int = 5
    weight_decay: float = 1e-3
    learning_rate: float = 5e-4
    lr_halving_period: int = 20
    s_points: int = 16384
    radius: float = 5.0
    pixel_size: float = 0.5
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    noise_sigma: float = 0.01
    noise_clip: float = 0.03
    supervise_gv_3d: bool = False
    checkpoint_every: int = 20
    n_workers: int = 1

    def __post_init__(self):
        positive = ("epochs", "cylinders_per_epoch", "batch_size",
                    "learning_rate", "lr_halving_period", "s_points",
                    "radius", "pixel_size")
        for name in positive:
            if getattr(self, name) <= 0:
                raise TrainError(f"{name} must be positive")
        if self.weight_decay < 0 or self.noise_sigma < 0 or self.noise_clip < 0:
            raise TrainError("decay and noise settings must be non-negative")
        if self.batch_size > self.cylinders_per_epoch:
            raise TrainError("batch_size cannot exceed cylinders_per_epoch")

    def loss_spec(self) -> LossSpec:
        return LossSpec(weights=self.weights,
                        supervise_gv_3d=self.supervise_gv_3d)


@dataclass
class PlotData:
    """One training plot: labeled cloud, truth rasters, fitted elevation
    mixture, and the per-point mixture densities (computed once)."""

    cloud: PlotCloud
    truth: LayerTruth
    mixture: GammaMixture
    density_lower: np.ndarray = None
    density_higher: np.ndarray = None

    def __post_init__(self):
        if self.density_lower is None:
            zf = np.maximum(self.cloud.z, Z_FLOOR)
            self.density_lower = np.exp(gamma_log_pdf(
                zf, self.mixture.lower.shape, self.mixture.lower.scale))
            self.density_higher = np.exp(gamma_log_pdf(
                zf, self.mixture.higher.shape, self.mixture.higher.scale))


def learning_rate_at(epoch: int, cfg: TrainConfig) -> float:
    return cfg.learning_rate / (2.0 ** (epoch // cfg.lr_halving_period))


def augment(cylinder: Cylinder, seed, noise_sigma: float = 0.01,
            noise_clip: float = 0.03) -> Cylinder:
    """Random rotation about the z-axis plus clipped Gaussian noise on the
    normalized intensity channel; elevations, returns, and labels untouched."""
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    feats = cylinder.features.copy()
    if cylinder.n_points:
        c, s = np.cos(theta), np.sin(theta)
        dx = feats[:, 0].copy()
        dy = feats[:, 1].copy()
        feats[:, 0] = c * dx - s * dy
        feats[:, 1] = s * dx + c * dy
        noise = rng.normal(0.0, noise_sigma, cylinder.n_points)
        feats[:, 3] += np.clip(noise, -noise_clip, noise_clip)
    return Cylinder(cylinder.center, cylinder.radius,
                    cylinder.point_indices, feats)


@dataclass
class AdamState:
    step: int
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(0, np.zeros(n), np.zeros(n))


def optimizer_step(params: NetParams, grads: np.ndarray, state: AdamState,
                   lr: float, weight_decay: float) -> AdamState:
    """One Adam update with decoupled weight decay, applied in place."""
    if grads.shape != params.vector.shape:
        raise TrainError("gradient and parameter shapes differ")
    if not np.all(np.isfinite(grads)):
        from .network import block_slices
        for name, sl in block_slices():
            if not np.all(np.isfinite(grads[sl])):
                raise TrainError(f"non-finite gradient in block '{name}'")
    t = state.step + 1
    state.m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * grads
    state.v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * grads * grads
    m_hat = state.m / (1.0 - ADAM_BETA1 ** t)
    v_hat = state.v / (1.0 - ADAM_BETA2 ** t)
    params.vector -= lr * (m_hat / (np.sqrt(v_hat) + ADAM_EPS))
    params.vector -= lr * weight_decay * params.vector
    state.step = t
    return state


def make_train_sample(plot: PlotData, center, cfg: TrainConfig,
                      subsample_seed: int, augment_seed=None) -> TrainSample | None:
    """Build the supervised sample for one cylinder center, or None when the
    cylinder is too sparse to train on.

    The truth window is the plot raster clipped to the cylinder's bounding
    square, with pixels whose centers fall outside the disk masked to
    no-data so they never contribute to the 2D loss.
    """
    cyl = extract_cylinder(plot.cloud, center, cfg.radius)
    if cyl.n_points < MIN_TRAIN_POINTS:
        return None
    cx, cy = cyl.center
    r = cyl.radius
    geom = plot.truth.geometry
    win_idx = geom.window(cx - r, cx + r, cy - r, cy + r)
    win = plot.truth.window(*win_idx)
    ys, xs = win.geometry.centers()
    outside = ((xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2) > r * r
    for layer in (win.gv, win.understory, win.overstory):
        layer.cells[outside] = NODATA
    # pixel assignment uses the original cloud coordinates (exact, and fixed
    # before augmentation, which only perturbs the classifier's inputs)
    idx = cyl.point_indices
    rows, cols = win.geometry.pixel_of(plot.cloud.x[idx], plot.cloud.y[idx])
    seg = rows * win.geometry.n_cols + cols
    if augment_seed is not None:
        cyl = augment(cyl, augment_seed, cfg.noise_sigma, cfg.noise_clip)
    return TrainSample(cyl, plot.cloud.label[idx], win,
                       plot.density_lower[idx], plot.density_higher[idx],
                       subsample_seed, proj_seg=seg)


def _epoch_centers(plots: list[PlotData], cfg: TrainConfig, epoch: int):
    """Draw cylinders_per_epoch (plot, center) pairs, uniformly without
    replacement from the pooled fine grids (with replacement only if the
    pool is smaller than the draw)."""
    pool = []
    for pi, plot in enumerate(plots):
        for center in training_grid(plot.cloud, cfg.radius):
            pool.append((pi, center[0], center[1]))
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 1000 + epoch)))
    n = cfg.cylinders_per_epoch
    if len(pool) >= n:
        chosen = rng.choice(len(pool), size=n, replace=False)
    else:
        chosen = np.concatenate([np.arange(len(pool)),
                                 rng.choice(len(pool), size=n - len(pool),
                                            replace=True)])
    return [pool[i] for i in chosen]


def fit(plots: list[PlotData], cfg: TrainConfig, out_dir=None,
        log_stream=None):
    """Train the classifier; returns (params, per-epoch log records).

    Each epoch draws fresh cylinder centers, augments every cylinder,
    averages the combined loss over batches, and steps Adam; the learning
    rate halves every lr_halving_period epochs. Checkpoints go to out_dir
    when given.
    """
    if not plots:
        raise TrainError("no training plots")
    for plot in plots:
        if not np.any(plot.cloud.label != UNLABELED):
            raise TrainError(f"plot {plot.cloud.plot_id} has no labels")
    params = init_params(cfg.seed)
    state = AdamState.zeros(param_count())
    spec = cfg.loss_spec()
    log = []
    for epoch in range(cfg.epochs):
        t0 = time.time()
        lr = learning_rate_at(epoch, cfg)
        centers = _epoch_centers(plots, cfg, epoch)
        samples = []
        for k, (pi, cx, cy) in enumerate(centers):
            seeds = np.random.SeedSequence((cfg.seed, epoch, k)).generate_state(2)
            sample = make_train_sample(plots[pi], (cx, cy), cfg,
                                       subsample_seed=int(seeds[0]),
                                       augment_seed=int(seeds[1]))
            if sample is not None:
                samples.append(sample)
        if not samples:
            raise TrainError(f"epoch {epoch}: every sampled cylinder was empty "
                             f"or too sparse")
        sums = {"loss_3d": 0.0, "loss_2d": 0.0, "loss_elevation": 0.0,
                "total": 0.0}
        n_cyl = 0
        for b0 in range(0, len(samples), cfg.batch_size):
            batch = samples[b0:b0 + cfg.batch_size]
            loss, grad, parts = value_and_grad(params, batch, spec,
                                               cfg.s_points,
                                               n_workers=cfg.n_workers)
            state = optimizer_step(params, grad, state, lr, cfg.weight_decay)
            for key in ("loss_3d", "loss_2d", "loss_elevation"):
                sums[key] += parts[key] * len(batch)
            sums["total"] += loss * len(batch)
            n_cyl += len(batch)
        record = {
            "epoch": epoch,
            "loss_3d": sums["loss_3d"] / n_cyl,
            "loss_2d": sums["loss_2d"] / n_cyl,
            "loss_elevation": sums["loss_elevation"] / n_cyl,
            "total": sums["total"] / n_cyl,
            "lr": lr,
            "cylinders": n_cyl,
            "seconds": round(time.time() - t0, 3),
        }
        log.append(record)
        if log_stream is not None:
            log_stream.write(json.dumps(record) + "\n")
            log_stream.flush()
        if out_dir is not None and cfg.checkpoint_every > 0 \
                and (epoch + 1) % cfg.checkpoint_every == 0:
            save_params(params, f"{out_dir}/checkpoint_{epoch + 1:04d}.snp")
    if out_dir is not None:
        save_params(params, f"{out_dir}/checkpoint_final.snp")
    return params, log
