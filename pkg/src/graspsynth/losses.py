"""Rotation representation and the training losses, with analytic gradients.

A 6D rotation ``a = [a1, a2]`` maps to ``R = [b1, b2, b3]`` by Gram-Schmidt:
``b1 = N(a1)``, ``b2 = N(a2 - <a2, b1> b1)``, ``b3 = b1 x b2``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FLIP_X = np.diag([1.0, -1.0, -1.0])


class DegenerateRepresentation(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_rot: float = 5.0
    lambda_t: float = 20.0
    lambda_s: float = 1.0

    def __post_init__(self):
        for v in (self.lambda_rot, self.lambda_t, self.lambda_s):
            if not (np.isfinite(v) and v >= 0):
                raise ValueError("loss weights must be finite and non-negative")


def _check(a: np.ndarray):
    a1, a2 = a[..., :3], a[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1)
    n2 = np.linalg.norm(a2, axis=-1)
    cross = np.linalg.norm(np.cross(a1, a2), axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        sin = cross / (n1 * n2)
    if np.any(n1 < 1e-9) or np.any(n2 < 1e-9) or np.any(~(sin >= np.sin(1e-6))):
        raise DegenerateRepresentation("degenerate representation")


def sixd_to_rotation(a) -> np.ndarray:
    """Map ``(..., 6)`` vectors to ``(..., 3, 3)`` rotations (columns b1, b2, b3)."""
    a = np.asarray(a, dtype=float)
    _check(a)
    R, _ = _gram_schmidt(a)
    return R


def _gram_schmidt(a):
    a1, a2 = a[..., :3], a[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    b1 = a1 / n1
    s = np.sum(a2 * b1, axis=-1, keepdims=True)
    u = a2 - s * b1
    nu = np.linalg.norm(u, axis=-1, keepdims=True)
    b2 = u / nu
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1), (a2, n1, b1, s, nu, b2)


def sixd_to_rotation_vjp(a, dR) -> np.ndarray:
    """Gradient w.r.t. ``a`` given the gradient ``dR`` w.r.t. the rotation."""
    a = np.asarray(a, dtype=float)
    _, (a2, n1, b1, s, nu, b2) = _gram_schmidt(a)
    g1, g2, g3 = dR[..., :, 0], dR[..., :, 1], dR[..., :, 2]
    gb1 = g1 + np.cross(b2, g3)
    gb2 = g2 + np.cross(g3, b1)
    gu = (gb2 - np.sum(gb2 * b2, axis=-1, keepdims=True) * b2) / nu
    gub1 = np.sum(gu * b1, axis=-1, keepdims=True)
    ga2 = gu - gub1 * b1
    gb1 = gb1 - gub1 * a2 - s * gu
    ga1 = (gb1 - np.sum(gb1 * b1, axis=-1, keepdims=True) * b1) / n1
    return np.concatenate([ga1, ga2], axis=-1)


def rotation_to_sixd(R) -> np.ndarray:
    """First two columns of ``R``, concatenated."""
    R = np.asarray(R, dtype=float)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def rotation_loss(a_pred, R_gt) -> float:
    """Squared Frobenius distance to the nearer of ``R_gt`` and ``R_gt diag(1,-1,-1)``."""
    R = sixd_to_rotation(a_pred)
    R_gt = np.asarray(R_gt, dtype=float)
    d0 = np.sum((R - R_gt) ** 2)
    d1 = np.sum((R - R_gt @ FLIP_X) ** 2)
    return float(min(d0, d1))


def rotation_loss_batch(a, R_gt):
    """Per-row rotation loss and its gradient w.r.t. ``a``."""
    R = sixd_to_rotation(a)
    alt = R_gt @ FLIP_X
    d0 = np.sum((R - R_gt) ** 2, axis=(-2, -1))
    d1 = np.sum((R - alt) ** 2, axis=(-2, -1))
    target = np.where((d1 < d0)[..., None, None], alt, R_gt)
    grad = sixd_to_rotation_vjp(a, 2.0 * (R - target))
    return np.minimum(d0, d1), grad


def translation_loss(t_pred, t_gt) -> float:
    d = np.asarray(t_pred, dtype=float) - np.asarray(t_gt, dtype=float)
    return float(np.dot(d, d))


def _log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def score_class_loss(logits, level: int, weights) -> float:
    """Class-weighted cross-entropy ``w[level] * (logsumexp(logits) - logits[level])``."""
    logits = np.asarray(logits, dtype=float)
    if not 0 <= level < len(logits):
        raise ValueError("level out of range")
    return float(np.asarray(weights, dtype=float)[level] * -_log_softmax(logits)[level])


def inverse_frequency_weights(counts) -> np.ndarray:
    """Inverse level frequency renormalized to mean 1 (empty levels count as one)."""
    c = np.maximum(np.asarray(counts, dtype=float), 1.0)
    w = 1.0 / c
    return w / w.mean()


def total_loss(sixd, offsets, logits, gt_poses, levels, weights: LossWeights = LossWeights(),
               class_weights=None, reduction: str = "sum"):
    """Pose terms summed over viable points plus score term summed over all points.

    ``gt_poses`` is ``(n, 12)`` (rotation row-major, then translation target as
    an offset, see the regressor); rows with ``levels == 0`` are ignored for pose.
    Returns ``(loss, grads)`` with grads keyed ``sixd``, ``offsets``, ``logits``.
    ``reduction="mean"`` divides by the point count.
    """
    sixd = np.asarray(sixd, dtype=float)
    offsets = np.asarray(offsets, dtype=float)
    logits = np.asarray(logits, dtype=float)
    levels = np.asarray(levels, dtype=np.int64)
    n, L = logits.shape
    cw = np.ones(L) if class_weights is None else np.asarray(class_weights, dtype=float)
    viable = levels > 0
    g_a = np.zeros_like(sixd)
    g_t = np.zeros_like(offsets)
    loss = 0.0
    if viable.any():
        R_gt = gt_poses[viable, :9].reshape(-1, 3, 3)
        lr, ga = rotation_loss_batch(sixd[viable], R_gt)
        d = offsets[viable] - gt_poses[viable, 9:]
        loss += weights.lambda_rot * lr.sum() + weights.lambda_t * np.sum(d * d)
        g_a[viable] = weights.lambda_rot * ga
        g_t[viable] = weights.lambda_t * 2.0 * d
    ls = _log_softmax(logits)
    w = cw[levels]
    loss += weights.lambda_s * np.sum(-w * ls[np.arange(n), levels])
    p = np.exp(ls)
    p[np.arange(n), levels] -= 1.0
    g_l = weights.lambda_s * w[:, None] * p
    if reduction == "mean":
        loss, g_a, g_t, g_l = loss / n, g_a / n, g_t / n, g_l / n
    elif reduction != "sum":
        raise ValueError("reduction must be 'sum' or 'mean'")
    return float(loss), {"sixd": g_a, "offsets": g_t, "logits": g_l}


def symmetric_geodesic(R1, R2) -> np.ndarray:
    """Rotation angle between ``R1`` and the nearer of ``R2`` / ``R2 diag(1,-1,-1)``."""
    def ang(A, B):
        c = (np.einsum("...ij,...ij->...", A, B) - 1.0) / 2.0
        return np.arccos(np.clip(c, -1.0, 1.0))
    R1, R2 = np.asarray(R1, float), np.asarray(R2, float)
    return np.minimum(ang(R1, R2), ang(R1, R2 @ FLIP_X))


def finite_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Max entrywise ``|a - n| / max(|a|, |n|, floor)``."""
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))
