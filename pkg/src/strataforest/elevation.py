"""Two-component Gamma mixture over point elevations, fitted without stratum
labels by expectation / conditional-maximization.

The lower component ends up covering ground and ground vegetation returns,
the higher one everything taller; the fitted densities later act as a fixed
elevation prior during classifier training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammaln, polygamma

from .core import StrataError

Z_FLOOR = 0.01          # elevations at or below this are ground echoes
SHAPE_BOUNDS = (1e-3, 1e3)


class ElevationError(StrataError):
    pass


@dataclass(frozen=True)
class GammaComponent:
    shape: float
    scale: float

    def __post_init__(self):
        if self.shape <= 0 or self.scale <= 0:
            raise ElevationError(
                f"gamma parameters must be positive, got shape={self.shape}, "
                f"scale={self.scale}")

    @property
    def mean(self) -> float:
        return self.shape * self.scale


@dataclass(frozen=True)
class GammaMixture:
    """lower/higher strata components plus the lower-component weight."""

    lower: GammaComponent
    higher: GammaComponent
    weight_lower: float
    n_iterations: int = 0
    final_log_likelihood: float = float("nan")
    log_likelihoods: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if not (0.0 < self.weight_lower < 1.0):
            raise ElevationError(
                f"mixture weight must lie in (0, 1), got {self.weight_lower}")
        if self.lower.mean > self.higher.mean * (1.0 + 1e-9):
            raise ElevationError(
                "lower component mean must not exceed the higher component mean")


def gamma_log_pdf(z, shape: float, scale: float):
    """Log-density of Gamma(shape, scale) at z; arguments must be positive."""
    if shape <= 0 or scale <= 0:
        raise ElevationError(
            f"gamma parameters must be positive, got shape={shape}, scale={scale}")
    z = np.asarray(z, dtype=np.float64)
    if np.any(z <= 0):
        raise ElevationError("gamma_log_pdf requires z > 0")
    return ((shape - 1.0) * np.log(z) - z / scale
            - shape * np.log(scale) - gammaln(shape))


def mixture_log_pdf(z, mixture: GammaMixture):
    """Log of the mixture density pi*lower + (1-pi)*higher, computed stably."""
    lo = np.log(mixture.weight_lower) + gamma_log_pdf(
        z, mixture.lower.shape, mixture.lower.scale)
    hi = np.log1p(-mixture.weight_lower) + gamma_log_pdf(
        z, mixture.higher.shape, mixture.higher.scale)
    top = np.maximum(lo, hi)
    return top + np.log(np.exp(lo - top) + np.exp(hi - top))


def _moment_match(z: np.ndarray) -> GammaComponent | None:
    if len(z) == 0:
        return None
    m = float(np.mean(z))
    v = float(np.var(z))
    if m <= 0 or v <= 0:
        return None
    return GammaComponent(m * m / v, v / m)


def default_init(z) -> GammaMixture:
    """Moment-matched starting mixture: the lower component from points below
    1 m, the higher from points at or above 2 m; the weight is the sub-1 m
    fraction. Empty or degenerate subsets fall back to fixed values."""
    z = np.asarray(z, dtype=np.float64)
    z = z[z > Z_FLOOR]
    if len(z) == 0:
        raise ElevationError("no points above the ground floor to initialize from")
    lower = _moment_match(z[z < 1.0]) or GammaComponent(1.5, 0.3)
    higher = _moment_match(z[z >= 2.0]) or GammaComponent(3.0, 4.0)
    pi = float(np.mean(z < 1.0))
    if not (0.0 < pi < 1.0):
        pi = 0.3
    return GammaMixture(lower, higher, pi)


def _weighted_shape_mle(log_gap: float, k0: float) -> float:
    """Solve log(k) - digamma(k) = log_gap by Newton with a bisection fallback.

    log_gap = log(weighted mean of z) - weighted mean of log z, which is
    strictly positive for non-degenerate samples; the left-hand side is
    strictly decreasing in k, so the root is unique.
    """
    lo, hi = SHAPE_BOUNDS
    gap = max(log_gap, 1e-12)

    def f(k):
        return np.log(k) - digamma(k) - gap

    k = min(max(k0, lo), hi)
    for _ in range(25):
        fk = f(k)
        if abs(fk) < 1e-13:
            return float(k)
        fprime = 1.0 / k - polygamma(1, k)  # negative for all k > 0
        step = fk / fprime
        nxt = k - step
        if not (lo < nxt < hi) or not np.isfinite(nxt):
            break
        k = nxt
    else:
        return float(k)
    # bisection: f(lo) > 0 and f is decreasing
    if f(hi) > 0:
        return float(hi)
    a, b = lo, hi
    for _ in range(200):
        mid = 0.5 * (a + b)
        if f(mid) > 0:
            a = mid
        else:
            b = mid
        if b - a <= 1e-12 * max(1.0, a):
            break
    return float(0.5 * (a + b))


def _component_mle(z, logz, w, k0: float) -> GammaComponent:
    wsum = float(np.sum(w))
    if wsum < 1e-12:
        return GammaComponent(k0, 1.0)  # component got no responsibility
    mean_z = float(np.dot(w, z)) / wsum
    mean_logz = float(np.dot(w, logz)) / wsum
    k = _weighted_shape_mle(np.log(mean_z) - mean_logz, k0)
    return GammaComponent(k, mean_z / k)


def ecm_fit(z, init: GammaMixture | None = None, max_iter: int = 200,
            tol: float = 1e-6) -> GammaMixture:
    """Fit the two-component Gamma mixture by ECM.

    Points at or below the ground floor (0.01 m) are excluded; at least 100
    must remain. Each iteration runs the E-step, then conditionally updates
    the weight in closed form, each shape by Newton on the weighted profile
    likelihood, and each scale in closed form. Stops when the total
    log-likelihood improves by less than tol. Components are swapped at the
    end if needed so the lower component has the smaller mean.
    """
    z = np.asarray(z, dtype=np.float64)
    z = z[z > Z_FLOOR]
    if len(z) < 100:
        raise ElevationError(
            f"need at least 100 points above {Z_FLOOR} m to fit, got {len(z)}")
    if float(z.min()) == float(z.max()):
        raise ElevationError("degenerate sample: all elevations identical")
    mix = init or default_init(z)
    logz = np.log(z)

    pi = mix.weight_lower
    comp_l, comp_h = mix.lower, mix.higher
    # ll_history[j] is the log-likelihood after j parameter updates
    ll_history = []
    for it in range(max_iter + 1):
        log_l = np.log(pi) + gamma_log_pdf(z, comp_l.shape, comp_l.scale)
        log_h = np.log1p(-pi) + gamma_log_pdf(z, comp_h.shape, comp_h.scale)
        top = np.maximum(log_l, log_h)
        denom = top + np.log(np.exp(log_l - top) + np.exp(log_h - top))
        ll = float(np.sum(denom))
        ll_history.append(ll)
        if it > 0 and ll - ll_history[-2] < tol:
            break
        if it == max_iter:
            break

        resp_l = np.exp(log_l - denom)
        resp_h = 1.0 - resp_l
        new_pi = float(np.mean(resp_l))
        pi = min(max(new_pi, 1e-9), 1.0 - 1e-9)
        comp_l = _component_mle(z, logz, resp_l, comp_l.shape)
        comp_h = _component_mle(z, logz, resp_h, comp_h.shape)

    # swap needs a genuine gap: equal-component fits keep their labels
    if comp_l.mean > comp_h.mean * (1.0 + 1e-12):
        comp_l, comp_h = comp_h, comp_l
        pi = 1.0 - pi
    return GammaMixture(comp_l, comp_h, pi,
                        n_iterations=len(ll_history) - 1,
                        final_log_likelihood=ll_history[-1],
                        log_likelihoods=tuple(ll_history))


MIXTURE_KEYS = ("pi", "k_lower", "theta_lower", "k_higher", "theta_higher")


def save_mixture(mixture: GammaMixture, path) -> None:
    """Persist the five mixture parameters as a key=value text file."""
    values = {
        "pi": mixture.weight_lower,
        "k_lower": mixture.lower.shape,
        "theta_lower": mixture.lower.scale,
        "k_higher": mixture.higher.shape,
        "theta_higher": mixture.higher.scale,
    }
    with open(path, "w") as fh:
        for key in MIXTURE_KEYS:
            fh.write(f"{key}={values[key]!r}\n")


def load_mixture(path) -> GammaMixture:
    values = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            values[key.strip()] = float(val)
    missing = [k for k in MIXTURE_KEYS if k not in values]
    if missing:
        raise ElevationError(f"{path}: missing mixture keys {missing}")
    return GammaMixture(
        GammaComponent(values["k_lower"], values["theta_lower"]),
        GammaComponent(values["k_higher"], values["theta_higher"]),
        values["pi"],
    )
