"""Fixed set-abstraction point classifier ("StrataNet") with a hand-written
reverse-mode backward pass.

The pipeline per cylinder is: random subsample to S points, two
set-abstraction stages (farthest point sampling, ball-query grouping,
shared affine+ReLU stacks, neighborhood max-pool), two feature-propagation
stages (inverse-distance 3-NN interpolation with skip connections), a
6-class softmax head, and nearest-neighbor upsampling of the predicted
probability rows back to all M cylinder points.

Subsampled points are put in canonical (lexicographic) order before the
network runs, so results depend only on the subsample as a multiset and
permutation equivariance holds exactly. Subgradient conventions: max-pool
and projection maxima route to the first argmax index, ReLU'(0) = 0, and
nearest-neighbor upsampling routes each point's gradient to its source
subsampled point.
"""

from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import Cylinder, N_FEATURES, StrataError
from .losses import (
    LossSpec,
    TrainSample,
    loss_2d_grad,
    loss_3d_grad,
    loss_elevation_grad,
)

SA1_POINTS = 1024
SA1_RADIUS = 0.75
SA1_K = 16
SA1_CH = 32
SA2_POINTS = 256
SA2_RADIUS = 2.0
SA2_K = 16
SA2_CH = 64
FP2_CH = (64, 32)
FP1_CH = (32, 32)
N_OUT = 6
INTERP_K = 3
MIN_SUBSAMPLE = 8

PARAM_LAYOUT = (
    ("sa1.w1", (N_FEATURES + 3, SA1_CH)), ("sa1.b1", (SA1_CH,)),
    ("sa1.w2", (SA1_CH, SA1_CH)), ("sa1.b2", (SA1_CH,)),
    ("sa2.w1", (SA1_CH + 3, SA2_CH)), ("sa2.b1", (SA2_CH,)),
    ("sa2.w2", (SA2_CH, SA2_CH)), ("sa2.b2", (SA2_CH,)),
    ("fp2.w1", (SA2_CH + SA1_CH, FP2_CH[0])), ("fp2.b1", (FP2_CH[0],)),
    ("fp2.w2", (FP2_CH[0], FP2_CH[1])), ("fp2.b2", (FP2_CH[1],)),
    ("fp1.w1", (FP2_CH[1] + N_FEATURES, FP1_CH[0])), ("fp1.b1", (FP1_CH[0],)),
    ("fp1.w2", (FP1_CH[0], FP1_CH[1])), ("fp1.b2", (FP1_CH[1],)),
    ("head.w", (FP1_CH[1], N_OUT)), ("head.b", (N_OUT,)),
)


class NetworkError(StrataError):
    pass


def param_count() -> int:
    return sum(int(np.prod(shape)) for _, shape in PARAM_LAYOUT)


def block_slices():
    """(name, slice into the flat parameter vector) in layout order."""
    offset = 0
    for name, shape in PARAM_LAYOUT:
        size = int(np.prod(shape))
        yield name, slice(offset, offset + size)
        offset += size


@dataclass
class NetParams:
    """All weights as one flat float64 vector plus a named layout."""

    vector: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.shape != (param_count(),):
            raise NetworkError(
                f"parameter vector must have {param_count()} entries, "
                f"got {self.vector.shape}")
        self._views = {}
        offset = 0
        for name, shape in PARAM_LAYOUT:
            size = int(np.prod(shape))
            self._views[name] = self.vector[offset:offset + size].reshape(shape)
            offset += size

    def get(self, name: str) -> np.ndarray:
        return self._views[name]


def init_params(seed: int = 0) -> NetParams:
    """He-style fan-in initialization of all weights; biases start at zero."""
    rng = np.random.default_rng(seed)
    chunks = []
    for name, shape in PARAM_LAYOUT:
        if name.split(".")[-1].startswith("b"):
            chunks.append(np.zeros(int(np.prod(shape)), dtype=np.float64))
        else:
            std = np.sqrt(2.0 / shape[0])
            chunks.append(rng.normal(0.0, std, size=shape).ravel())
    return NetParams(np.concatenate(chunks), seed=seed)


_MAGIC = b"SFNETPRM"
_VERSION = 1


def save_params(params: NetParams, path) -> None:
    """Checkpoint format: magic, version, seed, the named block table, then
    the flat little-endian float64 payload."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQ I", _VERSION, params.seed & (2**64 - 1),
                             len(PARAM_LAYOUT)))
        for name, shape in PARAM_LAYOUT:
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", len(shape)))
            fh.write(struct.pack(f"<{len(shape)}I", *shape))
        fh.write(struct.pack("<Q", params.vector.size))
        fh.write(params.vector.astype("<f8").tobytes())


def load_params(path) -> NetParams:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != _MAGIC:
        raise NetworkError(f"{path}: not a parameter checkpoint (bad magic)")
    version, seed, n_blocks = struct.unpack_from("<IQ I", data, 8)
    if version != _VERSION:
        raise NetworkError(f"{path}: unsupported checkpoint version {version}")
    offset = 8 + struct.calcsize("<IQ I")
    layout = []
    for _ in range(n_blocks):
        (name_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        name = data[offset:offset + name_len].decode()
        offset += name_len
        (ndim,) = struct.unpack_from("<B", data, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", data, offset)
        offset += 4 * ndim
        layout.append((name, tuple(int(d) for d in shape)))
    if tuple(layout) != tuple(PARAM_LAYOUT):
        raise NetworkError(f"{path}: checkpoint layout does not match this network")
    (total,) = struct.unpack_from("<Q", data, offset)
    offset += 8
    if total != param_count() or len(data) - offset != 8 * total:
        raise NetworkError(f"{path}: truncated or corrupt payload")
    vector = np.frombuffer(data, dtype="<f8", count=total, offset=offset).copy()
    return NetParams(vector, seed=int(seed))


def subsample(cylinder: Cylinder, s_points: int, seed) -> np.ndarray:
    """Exactly s_points indices into the cylinder: drawn uniformly without
    replacement when possible, otherwise all points plus resampled extras."""
    if cylinder.is_empty:
        raise NetworkError("cannot subsample an empty cylinder")
    rng = np.random.default_rng(seed)
    m = cylinder.n_points
    if m >= s_points:
        return rng.choice(m, size=s_points, replace=False)
    extra = rng.choice(m, size=s_points - m, replace=True)
    return np.concatenate([np.arange(m), extra])


def _canonical_order(feats: np.ndarray) -> np.ndarray:
    # lexicographic over all feature columns, first column most significant
    keys = tuple(feats[:, i] for i in range(feats.shape[1] - 1, -1, -1))
    return np.lexsort(keys)


def _fps_numpy(xyz: np.ndarray, n: int) -> np.ndarray:
    sel = np.empty(n, dtype=np.int64)
    sel[0] = 0
    d = np.sum((xyz - xyz[0]) ** 2, axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(d))
        sel[i] = nxt
        nd = np.sum((xyz - xyz[nxt]) ** 2, axis=1)
        np.minimum(d, nd, out=d)
    return sel


try:
    from numba import njit

    @njit(cache=True)
    def _fps_jit(xyz, n):  # pragma: no cover - thin compiled twin of _fps_numpy
        m = xyz.shape[0]
        sel = np.empty(n, dtype=np.int64)
        sel[0] = 0
        d = np.empty(m)
        for j in range(m):
            dx = xyz[j, 0] - xyz[0, 0]
            dy = xyz[j, 1] - xyz[0, 1]
            dz = xyz[j, 2] - xyz[0, 2]
            d[j] = dx * dx + dy * dy + dz * dz
        for i in range(1, n):
            nxt = 0
            best = d[0]
            for j in range(1, m):
                if d[j] > best:
                    best = d[j]
                    nxt = j
            sel[i] = nxt
            for j in range(m):
                dx = xyz[j, 0] - xyz[nxt, 0]
                dy = xyz[j, 1] - xyz[nxt, 1]
                dz = xyz[j, 2] - xyz[nxt, 2]
                nd = dx * dx + dy * dy + dz * dz
                if nd < d[j]:
                    d[j] = nd
        return sel

    _fps_impl = _fps_jit
except ImportError:  # pragma: no cover
    _fps_impl = _fps_numpy


def _fps(xyz: np.ndarray, n: int) -> np.ndarray:
    """Farthest point sampling starting from index 0; deterministic, ties to
    the lowest index."""
    m = len(xyz)
    if n >= m:
        return np.arange(m)
    return _fps_impl(np.ascontiguousarray(xyz), n)


def _ball_query(tree: cKDTree, n_points: int, centers: np.ndarray,
                radius: float, k: int) -> np.ndarray:
    """Up to k nearest neighbors within radius of each center, padded by
    repeating the nearest neighbor (each center is itself a tree point, so
    at least one neighbor always exists)."""
    _, idx = tree.query(centers, k=k, distance_upper_bound=radius)
    missing = idx >= n_points
    return np.where(missing, idx[:, :1], idx)


def _interp(tree: cKDTree, n_src: int, dst_xyz: np.ndarray):
    """Inverse-square-distance weights of the 3 nearest source points."""
    k = min(INTERP_K, n_src)
    dist, idx = tree.query(dst_xyz, k=k)
    if k == 1:
        dist = dist[:, None]
        idx = idx[:, None]
    w = 1.0 / (dist * dist + 1e-10)
    w /= w.sum(axis=1, keepdims=True)
    return idx, w


def _stack_fwd(x, w1, b1, w2, b2):
    # flatten any leading batch dims so each matmul is one large GEMM
    shape = x.shape
    x2 = x.reshape(-1, shape[-1])
    pre1 = x2 @ w1 + b1
    h1 = np.maximum(pre1, 0.0)
    pre2 = h1 @ w2 + b2
    h2 = np.maximum(pre2, 0.0)
    out = h2.reshape(shape[:-1] + (w2.shape[1],))
    return out, (x2, pre1 > 0, h1, pre2 > 0, shape)


def _stack_bwd(dh2, cache, w1, w2):
    x2, m1, h1, m2, shape = cache
    g2 = dh2.reshape(-1, dh2.shape[-1]) * m2
    dw2 = h1.T @ g2
    db2 = g2.sum(axis=0)
    g1 = (g2 @ w2.T) * m1
    dw1 = x2.T @ g1
    db1 = g1.sum(axis=0)
    dx = (g1 @ w1.T).reshape(shape)
    return dx, (dw1, db1, dw2, db2)


def _pool_bwd(shape, am, df):
    d = np.zeros(shape)
    n, _, c = shape
    d[np.arange(n)[:, None], am, np.arange(c)[None, :]] = df
    return d


@dataclass
class _Tape:
    """Forward intermediates retained for the backward pass."""

    feats: np.ndarray
    nbr1: np.ndarray
    cache_sa1: tuple
    h_sa1: np.ndarray
    am1: np.ndarray
    nbr2: np.ndarray
    cache_sa2: tuple
    h_sa2: np.ndarray
    am2: np.ndarray
    idx_fp2: np.ndarray
    w_fp2: np.ndarray
    cache_fp2: tuple
    idx_fp1: np.ndarray
    w_fp1: np.ndarray
    cache_fp1: tuple
    g_fp1: np.ndarray
    probs: np.ndarray


def _forward_pass(params: NetParams, feats: np.ndarray) -> _Tape:
    xyz = feats[:, :3]
    s = len(feats)

    c1 = _fps(xyz, min(SA1_POINTS, s))
    xyz1 = xyz[c1]
    tree0 = cKDTree(xyz)
    nbr1 = _ball_query(tree0, s, xyz1, SA1_RADIUS, SA1_K)
    nf1 = np.concatenate([feats[nbr1], xyz[nbr1] - xyz1[:, None, :]], axis=2)
    h_sa1, cache_sa1 = _stack_fwd(nf1, params.get("sa1.w1"), params.get("sa1.b1"),
                                  params.get("sa1.w2"), params.get("sa1.b2"))
    f1 = h_sa1.max(axis=1)
    am1 = h_sa1.argmax(axis=1)

    c2 = _fps(xyz1, min(SA2_POINTS, len(c1)))
    xyz2 = xyz1[c2]
    tree1 = cKDTree(xyz1)
    nbr2 = _ball_query(tree1, len(c1), xyz2, SA2_RADIUS, SA2_K)
    nf2 = np.concatenate([f1[nbr2], xyz1[nbr2] - xyz2[:, None, :]], axis=2)
    h_sa2, cache_sa2 = _stack_fwd(nf2, params.get("sa2.w1"), params.get("sa2.b1"),
                                  params.get("sa2.w2"), params.get("sa2.b2"))
    f2 = h_sa2.max(axis=1)
    am2 = h_sa2.argmax(axis=1)

    tree2 = cKDTree(xyz2)
    idx_fp2, w_fp2 = _interp(tree2, len(c2), xyz1)
    interp2 = np.einsum("nk,nkc->nc", w_fp2, f2[idx_fp2])
    g_fp2, cache_fp2 = _stack_fwd(
        np.concatenate([interp2, f1], axis=1),
        params.get("fp2.w1"), params.get("fp2.b1"),
        params.get("fp2.w2"), params.get("fp2.b2"))

    idx_fp1, w_fp1 = _interp(tree1, len(c1), xyz)
    interp1 = np.einsum("nk,nkc->nc", w_fp1, g_fp2[idx_fp1])
    g_fp1, cache_fp1 = _stack_fwd(
        np.concatenate([interp1, feats], axis=1),
        params.get("fp1.w1"), params.get("fp1.b1"),
        params.get("fp1.w2"), params.get("fp1.b2"))

    logits = g_fp1 @ params.get("head.w") + params.get("head.b")
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    probs = e / e.sum(axis=1, keepdims=True)

    return _Tape(feats, nbr1, cache_sa1, h_sa1, am1, nbr2, cache_sa2, h_sa2,
                 am2, idx_fp2, w_fp2, cache_fp2, idx_fp1, w_fp1, cache_fp1,
                 g_fp1, probs)


def _backward_pass(params: NetParams, tape: _Tape,
                   dprobs: np.ndarray) -> np.ndarray:
    grads = {}
    p = tape.probs
    dlogits = p * (dprobs - np.sum(dprobs * p, axis=1, keepdims=True))
    grads["head.w"] = tape.g_fp1.T @ dlogits
    grads["head.b"] = dlogits.sum(axis=0)
    dg1 = dlogits @ params.get("head.w").T

    dg1in, (grads["fp1.w1"], grads["fp1.b1"],
            grads["fp1.w2"], grads["fp1.b2"]) = _stack_bwd(
        dg1, tape.cache_fp1, params.get("fp1.w1"), params.get("fp1.w2"))
    dinterp1 = dg1in[:, :FP2_CH[1]]

    n1 = len(tape.cache_fp2[0])
    dg2 = np.zeros((n1, FP2_CH[1]))
    np.add.at(dg2, tape.idx_fp1, tape.w_fp1[:, :, None] * dinterp1[:, None, :])

    dg2in, (grads["fp2.w1"], grads["fp2.b1"],
            grads["fp2.w2"], grads["fp2.b2"]) = _stack_bwd(
        dg2, tape.cache_fp2, params.get("fp2.w1"), params.get("fp2.w2"))
    dinterp2 = dg2in[:, :SA2_CH]
    df1 = dg2in[:, SA2_CH:].copy()

    n2 = len(tape.h_sa2)
    df2 = np.zeros((n2, SA2_CH))
    np.add.at(df2, tape.idx_fp2, tape.w_fp2[:, :, None] * dinterp2[:, None, :])

    dh2 = _pool_bwd(tape.h_sa2.shape, tape.am2, df2)
    dnf2, (grads["sa2.w1"], grads["sa2.b1"],
           grads["sa2.w2"], grads["sa2.b2"]) = _stack_bwd(
        dh2, tape.cache_sa2, params.get("sa2.w1"), params.get("sa2.w2"))
    np.add.at(df1, tape.nbr2, dnf2[:, :, :SA1_CH])

    dh1 = _pool_bwd(tape.h_sa1.shape, tape.am1, df1)
    _, (grads["sa1.w1"], grads["sa1.b1"],
        grads["sa1.w2"], grads["sa1.b2"]) = _stack_bwd(
        dh1, tape.cache_sa1, params.get("sa1.w1"), params.get("sa1.w2"))

    flat = np.empty(param_count())
    for name, sl in block_slices():
        flat[sl] = grads[name].ravel()
    return flat


def _prepare_subsample(cylinder: Cylinder, s_points: int, seed):
    if cylinder.is_empty:
        raise NetworkError("cannot run the classifier on an empty cylinder")
    if s_points < MIN_SUBSAMPLE:
        raise NetworkError(
            f"subsample size must be at least {MIN_SUBSAMPLE}, got {s_points}")
    sub = subsample(cylinder, s_points, seed)
    feats_s = cylinder.features[sub]
    feats_s = feats_s[_canonical_order(feats_s)]
    return feats_s


def _upsample_indices(feats_s: np.ndarray, cylinder: Cylinder) -> np.ndarray:
    tree = cKDTree(feats_s[:, :3])
    _, nn = tree.query(cylinder.xyz, k=1)
    return nn


def forward(params: NetParams, cylinder: Cylinder, s_points: int,
            seed) -> np.ndarray:
    """Class probabilities for every cylinder point (M x 6 rows summing to 1)."""
    feats_s = _prepare_subsample(cylinder, s_points, seed)
    tape = _forward_pass(params, feats_s)
    nn = _upsample_indices(feats_s, cylinder)
    return tape.probs[nn]


def _sample_value_and_grad(params: NetParams, sample: TrainSample,
                           loss_spec: LossSpec, s_points: int,
                           with_grad: bool = True):
    cyl = sample.cylinder
    w = loss_spec.weights
    feats_s = _prepare_subsample(cyl, s_points, sample.subsample_seed)
    tape = _forward_pass(params, feats_s)
    nn = _upsample_indices(feats_s, cyl)
    probs_m = tape.probs[nn]

    l3, g3 = loss_3d_grad(probs_m, sample.labels, loss_spec)
    l2, g2 = loss_2d_grad(probs_m, cyl, sample.truth.geometry, sample.truth,
                          seg=sample.proj_seg)
    le, ge = loss_elevation_grad(probs_m, sample.density_lower,
                                 sample.density_higher)
    for name, val in (("loss_3d", l3), ("loss_2d", l2),
                      ("loss_elevation", le)):
        if not np.isfinite(val):
            raise NetworkError(
                f"{name} is not finite on cylinder at {cyl.center}")
    parts = {"loss_3d": l3, "loss_2d": l2, "loss_elevation": le}
    if not with_grad:
        return parts, None

    d_m = g3 + w.lambda_2d * g2 + w.mu_elevation * ge
    d_s = np.zeros_like(tape.probs)
    np.add.at(d_s, nn, d_m)
    return parts, _backward_pass(params, tape, d_s)


def batch_loss(params: NetParams, batch: list[TrainSample],
               loss_spec: LossSpec, s_points: int) -> float:
    """The combined loss of value_and_grad without the backward pass."""
    if not batch:
        raise NetworkError("empty batch")
    w = loss_spec.weights
    total = 0.0
    for sample in batch:
        parts, _ = _sample_value_and_grad(params, sample, loss_spec, s_points,
                                          with_grad=False)
        total += (parts["loss_3d"] + w.lambda_2d * parts["loss_2d"]
                  + w.mu_elevation * parts["loss_elevation"])
    return total / len(batch)


def value_and_grad(params: NetParams, batch: list[TrainSample],
                   loss_spec: LossSpec, s_points: int, n_workers: int = 1):
    """Mean combined loss over the batch and its exact gradient with respect
    to every parameter; also returns the mean of each loss component.

    Batch elements may be evaluated by parallel threads (n_workers > 1 helps
    when BLAS is pinned to one thread per worker), but contributions are
    always accumulated in batch order, so results are bitwise identical
    regardless of worker count.
    """
    if not batch:
        raise NetworkError("empty batch")
    if n_workers == 0:
        n_workers = min(len(batch), os.cpu_count() or 1)
    if n_workers > 1 and len(batch) > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(
                lambda s: _sample_value_and_grad(params, s, loss_spec, s_points),
                batch))
    else:
        results = [_sample_value_and_grad(params, s, loss_spec, s_points)
                   for s in batch]

    grad = np.zeros(param_count())
    parts = {"loss_3d": 0.0, "loss_2d": 0.0, "loss_elevation": 0.0}
    for sample_parts, sample_grad in results:
        grad += sample_grad
        for name in parts:
            parts[name] += sample_parts[name]
    n = len(batch)
    grad /= n
    for name in parts:
        parts[name] /= n
    w = loss_spec.weights
    loss = (parts["loss_3d"] + w.lambda_2d * parts["loss_2d"]
            + w.mu_elevation * parts["loss_elevation"])
    return loss, grad, parts
