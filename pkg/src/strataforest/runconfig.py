"""Run configuration: a flat key=value file whose every key is also a CLI
flag. Unknown keys are rejected; defaults follow the published training
protocol (100 epochs of 1000 cylinders, batch 5, lr 5e-4 halved every 20
epochs, weight decay 1e-3, S 16384, R 5 m, 0.5 m pixels, lambda 1, mu 0.1)."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

from .core import LayerSpec, StrataError
from .losses import LossWeights
from .train import TrainConfig


class ConfigError(StrataError):
    pass


@dataclass
class RunConfig:
    # training protocol
    epochs: int = 100
    cylinders_per_epoch: int = 1000
    batch_size: int = 5
    weight_decay: float = 1e-3
    learning_rate: float = 5e-4
    lr_halving_period: int = 20
    s_points: int = 16384
    radius: float = 5.0
    pixel_size: float = 0.5
    lambda_2d: float = 1.0
    mu_elevation: float = 0.1
    seed: int = 0
    noise_sigma: float = 0.01
    noise_clip: float = 0.03
    supervise_gv_3d: bool = False
    checkpoint_every: int = 20
    n_workers: int = 1
    # layer thresholds
    gv_low: float = 0.5
    gv_high: float = 1.5
    under_high: float = 5.0
    # baseline toggles
    baseline_logistic: bool = True
    baseline_forest: bool = True
    baseline_linreg: bool = True
    # synthetic generation
    synth_plots: int = 6
    synth_extent: float = 20.0
    # paths
    plots_dir: str = ""
    truth_dir: str = ""
    output_dir: str = ""
    params_path: str = ""
    pred_dir: str = ""
    test_dir: str = ""

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            cylinders_per_epoch=self.cylinders_per_epoch,
            batch_size=self.batch_size,
            weight_decay=self.weight_decay,
            learning_rate=self.learning_rate,
            lr_halving_period=self.lr_halving_period,
            s_points=self.s_points,
            radius=self.radius,
            pixel_size=self.pixel_size,
            weights=LossWeights(self.lambda_2d, self.mu_elevation),
            seed=self.seed,
            noise_sigma=self.noise_sigma,
            noise_clip=self.noise_clip,
            supervise_gv_3d=self.supervise_gv_3d,
            checkpoint_every=self.checkpoint_every,
            n_workers=self.n_workers,
        )

    def layer_spec(self) -> LayerSpec:
        return LayerSpec(self.gv_low, self.gv_high, self.under_high)


def config_fields():
    return {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, raw: str, typ):
    raw = raw.strip()
    if typ in ("bool", bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"key '{key}': cannot parse '{raw}' as a boolean")
    try:
        if typ in ("int", int):
            return int(raw)
        if typ in ("float", float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"key '{key}': {exc}") from exc
    return raw


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    """Read key=value lines into a RunConfig; # comments and blanks are
    skipped, unknown keys are an error."""
    cfg = base or RunConfig()
    known = config_fields()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, raw = line.partition("=")
            key = key.strip()
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            if key not in known:
                raise ConfigError(f"{path}:{lineno}: unknown key '{key}'")
            setattr(cfg, key, _parse_value(key, raw, known[key]))
    return cfg


def dump_config(cfg: RunConfig, path, extra_comments=()) -> None:
    with open(path, "w") as fh:
        for comment in extra_comments:
            fh.write(f"# {comment}\n")
        for f in fields(RunConfig):
            value = getattr(cfg, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            fh.write(f"{f.name}={value}\n")


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(cfg: RunConfig, path, input_paths=()) -> None:
    """The run manifest is a loadable config file; input digests ride along
    as comments so reruns can verify their inputs."""
    comments = ["strataforest run manifest"]
    for p in sorted(str(p) for p in input_paths):
        comments.append(f"input {p} sha256={file_digest(p)}")
    dump_config(cfg, path, extra_comments=comments)
