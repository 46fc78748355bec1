"""Per-point grasp regressor: geometric features -> tanh MLP -> (6D rotation, offset, logits).

Trained with plain momentum gradient descent on the losses in
:mod:`graspsynth.losses` (summed by default, optionally averaged); every
gradient is hand-derived.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geometry import PointCloud, RigidTransform, SpatialIndex
from .gripper import GraspFrame
from .losses import LossWeights, sixd_to_rotation, total_loss

FEATURE_DIM = 16
GLOBAL_DIM = 8
SIXD_ANCHOR = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
_LIFT = np.random.default_rng(20240611).normal(size=(3, GLOBAL_DIM))
_PARAM_MAGIC = b"GSRP"


class TrainingDiverged(RuntimeError):
    pass


def extract_features(cloud: PointCloud, table_height: float, k: int = 16) -> np.ndarray:
    """``(n, 16)``: normal, height above table, sqrt covariance eigenvalues
    (ascending), distance to centroid, and a max-pooled global descriptor."""
    pts = cloud.points
    if len(pts) < 4:
        raise ValueError("need at least 4 points for covariance features")
    if cloud.normals is None:
        raise ValueError("cloud needs smoothed normals")
    _, nn = SpatialIndex(pts).knn(pts, min(k, len(pts)))
    nb = pts[nn] - pts[nn].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb) / nn.shape[1]
    eig = np.sqrt(np.clip(np.linalg.eigvalsh(cov), 0.0, None))
    centroid = pts.mean(axis=0)
    rel = pts - centroid
    glob = (rel @ _LIFT).max(axis=0)
    return np.column_stack([cloud.normals, pts[:, 2] - table_height, eig,
                            np.linalg.norm(rel, axis=1), np.tile(glob, (len(pts), 1))])


@dataclass
class RegressorParams:
    weights: list
    biases: list
    feature_mean: np.ndarray = field(default_factory=lambda: np.zeros(FEATURE_DIM))
    feature_scale: np.ndarray = field(default_factory=lambda: np.ones(FEATURE_DIM))

    @property
    def levels(self) -> int:
        return self.weights[-1].shape[1] - 9

    def arrays(self) -> list[np.ndarray]:
        out = [self.feature_mean, self.feature_scale]
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "RegressorParams":
        return RegressorParams([W.copy() for W in self.weights], [b.copy() for b in self.biases],
                               self.feature_mean.copy(), self.feature_scale.copy())

    @classmethod
    def init(cls, levels: int = 4, hidden=(64, 64), seed: int = 0, zero: bool = False) -> "RegressorParams":
        rng = np.random.default_rng(seed)
        dims = [FEATURE_DIM, *hidden, 9 + levels]
        Ws, bs = [], []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            scale = np.sqrt(1.0 / a) * (0.1 if i == len(dims) - 2 else 1.0)
            Ws.append(np.zeros((a, b)) if zero else rng.normal(0.0, scale, size=(a, b)))
            bs.append(np.zeros(b))
        return cls(Ws, bs)


def save_params(params: RegressorParams, path) -> None:
    """Little-endian float32 blob: magic, array count, then (ndim, dims..., data) per array."""
    arrays = params.arrays()
    with open(path, "wb") as fh:
        fh.write(_PARAM_MAGIC + struct.pack("<I", len(arrays)))
        for a in arrays:
            fh.write(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(np.asarray(a, dtype="<f4").tobytes())


def load_params(path) -> RegressorParams:
    data = Path(path).read_bytes()
    if data[:4] != _PARAM_MAGIC:
        raise ValueError(f"{path}: not a parameter file")
    (count,), off, arrays = struct.unpack_from("<I", data, 4), 8, []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", data, off)
        shape = struct.unpack_from(f"<{ndim}I", data, off + 4)
        off += 4 + 4 * ndim
        size = int(np.prod(shape))
        if off + 4 * size > len(data):
            raise ValueError(f"{path}: truncated parameter data")
        arrays.append(np.frombuffer(data, "<f4", size, off).reshape(shape).astype(float))
        off += 4 * size
    mean, scale, rest = arrays[0], arrays[1], arrays[2:]
    return RegressorParams(rest[0::2], rest[1::2], mean, scale)


def _forward(params: RegressorParams, features: np.ndarray):
    h = (np.asarray(features, dtype=float) - params.feature_mean) / params.feature_scale
    acts = [h]
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = acts[-1] @ W + b
        acts.append(np.tanh(z) if i < len(params.weights) - 1 else z)
    return acts


def forward(params: RegressorParams, features: np.ndarray):
    """Raw per-point outputs ``(sixd, offsets, logits)``.

    The rotation fed to the losses is ``sixd + SIXD_ANCHOR``; offsets are
    relative to each point's own position.
    """
    out = _forward(params, features)[-1]
    return out[:, :6], out[:, 6:9], out[:, 9:]


def _backward(params: RegressorParams, acts, grad_out):
    gW, gb = [], []
    g = grad_out
    for i in range(len(params.weights) - 1, -1, -1):
        gW.append(acts[i].T @ g)
        gb.append(g.sum(axis=0))
        if i:
            g = (g @ params.weights[i].T) * (1.0 - acts[i] ** 2)
    return gW[::-1], gb[::-1]


def batch_loss(params: RegressorParams, features, points, gt_poses, levels,
               weights: LossWeights = LossWeights(), class_weights=None, reduction: str = "sum"):
    """Loss and parameter gradients for one batch. ``gt_poses`` carry absolute translations."""
    acts = _forward(params, features)
    out = acts[-1]
    targets = np.array(gt_poses, dtype=float)
    targets[:, 9:] -= points
    loss, g = total_loss(out[:, :6] + SIXD_ANCHOR, out[:, 6:9], out[:, 9:], targets, levels,
                         weights, class_weights, reduction)
    gW, gb = _backward(params, acts, np.concatenate([g["sixd"], g["offsets"], g["logits"]], axis=1))
    return loss, gW, gb


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 100
    decay_every: int = 20
    decay_factor: float = 0.5
    momentum: float = 0.9
    batch_size: Optional[int] = None
    seed: int = 0
    reduction: str = "sum"
    hidden: tuple = (64, 64)
    divergence_limit: float = 1e6

    def __post_init__(self):
        if self.learning_rate < 0 or self.epochs < 1:
            raise ValueError("learning rate must be >= 0 and epochs >= 1")

    def rate(self, epoch: int) -> float:
        return self.learning_rate * self.decay_factor ** (epoch // self.decay_every)


@dataclass
class TrainResult:
    params: RegressorParams
    curve: list          # (step, lr, loss)


def record_features(record) -> np.ndarray:
    cloud = PointCloud(record.points.astype(float), record.normals.astype(float))
    return extract_features(cloud, record.table_height)


def feature_statistics(features: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    allf = np.vstack(features)
    mean = allf.mean(axis=0)
    scale = allf.std(axis=0)
    scale[scale < 1e-8] = 1.0
    return mean, scale


def train(dataset: Sequence, config: TrainConfig = TrainConfig(), class_weights=None,
          weights: LossWeights = LossWeights(), levels: int = 4,
          params: Optional[RegressorParams] = None) -> TrainResult:
    """Momentum gradient descent over the records; one step per minibatch.

    Deterministic for a fixed ``config.seed``. Raises :class:`TrainingDiverged`
    when a batch loss exceeds ``config.divergence_limit`` or is not finite.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("dataset is empty")
    feats = [record_features(r) for r in dataset]
    pts = [r.points.astype(float) for r in dataset]
    poses = [r.poses.astype(float) for r in dataset]
    if params is None:
        params = RegressorParams.init(levels, config.hidden, config.seed)
        params.feature_mean, params.feature_scale = feature_statistics(feats)
    else:
        params = params.copy()
    rng = np.random.default_rng(config.seed)
    vW = [np.zeros_like(W) for W in params.weights]
    vb = [np.zeros_like(b) for b in params.biases]
    curve, step = [], 0
    for epoch in range(config.epochs):
        lr = config.rate(epoch)
        for r in rng.permutation(len(dataset)):
            n = len(dataset[r])
            bs = config.batch_size or n
            perm = rng.permutation(n) if bs < n else np.arange(n)
            for s in range(0, n, bs):
                idx = perm[s:s + bs]
                loss, gW, gb = batch_loss(params, feats[r][idx], pts[r][idx], poses[r][idx],
                                          dataset[r].levels[idx], weights, class_weights,
                                          config.reduction)
                if not np.isfinite(loss) or loss > config.divergence_limit:
                    raise TrainingDiverged(f"loss {loss:.4g} at step {step} (lr {lr:g}); "
                                           "try reduction = mean or a smaller learning_rate")
                curve.append((step, lr, loss))
                if lr > 0:
                    for k in range(len(vW)):
                        vW[k] = config.momentum * vW[k] - lr * gW[k]
                        vb[k] = config.momentum * vb[k] - lr * gb[k]
                        params.weights[k] = params.weights[k] + vW[k]
                        params.biases[k] = params.biases[k] + vb[k]
                step += 1
    return TrainResult(params, curve)


def write_curve(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "loss"])
        for step, lr, loss in curve:
            w.writerow([step, repr(lr), repr(loss)])


@dataclass(frozen=True)
class Proposal:
    frame: GraspFrame
    score: float
    index: int


def decode(params: RegressorParams, features: np.ndarray, points: np.ndarray):
    """Rotations, absolute grasp origins and softmax level probabilities."""
    sixd, off, logits = forward(params, features)
    R = sixd_to_rotation(sixd + SIXD_ANCHOR)
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return R, points + off, p


def predict_scene(params: RegressorParams, cloud: PointCloud, table_height: float = 0.0) -> list[Proposal]:
    """One proposal per point; score is the expected level rescaled to [0, 1]."""
    feats = extract_features(cloud, table_height)
    R, t, p = decode(params, feats, cloud.points)
    L = p.shape[1]
    s = p @ np.arange(L) / (L - 1)
    return [Proposal(GraspFrame(RigidTransform(R[i], t[i])), float(s[i]), i) for i in range(len(cloud))]
