"""Greedy non-maximum suppression over grasp proposals and score-weighted sampling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .losses import symmetric_geodesic


class NoExecutableGrasp(RuntimeError):
    pass


@dataclass(frozen=True)
class SelectionConfig:
    target_count: int = 10
    epsilon: float = 0.03
    tau: float = 1.0
    rot_weight: float = 0.02

    def __post_init__(self):
        if self.target_count < 1 or self.epsilon < 0 or self.tau <= 0 or self.rot_weight < 0:
            raise ValueError("invalid selection config")


def _score(p) -> float:
    return float(p.score if hasattr(p, "score") else p.scores.robust)


def grasp_distance(h1, h2, rot_weight: float = 0.02) -> float:
    """Translation distance plus ``rot_weight`` times the flip-symmetric geodesic angle."""
    R1, R2 = h1.pose.rotation, h2.pose.rotation
    return float(np.linalg.norm(h1.pose.translation - h2.pose.translation)
                 + rot_weight * symmetric_geodesic(R1, R2))


@dataclass
class ExecutableSet:
    grasps: list
    probabilities: np.ndarray

    def __len__(self) -> int:
        return len(self.grasps)


def sampling_probabilities(scores: Sequence[float], tau: float = 1.0) -> np.ndarray:
    g = np.asarray(scores, dtype=float) ** tau
    total = g.sum()
    if total <= 0:
        return np.full(len(g), 1.0 / len(g))
    return g / total


def nms_select(proposals: Sequence, config: SelectionConfig = SelectionConfig(),
               collision: Optional[Callable] = None) -> ExecutableSet:
    """Scan proposals by descending score (ties by input order); keep a proposal
    when it is collision-free and farther than ``epsilon`` from all kept ones."""
    scores = np.array([_score(p) for p in proposals], dtype=float)
    if not np.all(np.isfinite(scores)):
        raise ValueError("proposal scores must be finite")
    order = np.argsort(-scores, kind="stable")
    kept = []
    for i in order:
        if len(kept) >= config.target_count:
            break
        p = proposals[i]
        if collision is not None and collision(p.frame):
            continue
        if all(grasp_distance(p.frame, k.frame, config.rot_weight) > config.epsilon for k in kept):
            kept.append(p)
    if not kept:
        raise NoExecutableGrasp("no executable grasp")
    return ExecutableSet(kept, sampling_probabilities([_score(k) for k in kept], config.tau))


class GraspSampler:
    """Draws from an executable set, never returning the same grasp twice.

    Models the retry loop around motion planning: each call to :meth:`draw`
    renormalizes over the grasps not yet returned.
    """

    def __init__(self, exe: ExecutableSet, seed: int):
        if not len(exe):
            raise ValueError("executable set is empty")
        self.exe = exe
        self.rng = np.random.default_rng(seed)
        self.remaining = np.ones(len(exe), dtype=bool)

    def draw_index(self) -> int:
        if not self.remaining.any():
            raise NoExecutableGrasp("executable set exhausted")
        p = np.where(self.remaining, self.exe.probabilities, 0.0)
        p = p / p.sum() if p.sum() > 0 else self.remaining / self.remaining.sum()
        k = int(self.rng.choice(len(p), p=p))
        self.remaining[k] = False
        return k

    def draw(self):
        return self.exe.grasps[self.draw_index()]


def weighted_sample(exe: ExecutableSet, seed: int):
    """Single draw according to the set's probabilities."""
    return GraspSampler(exe, seed).draw()


def sample_indices(exe: ExecutableSet, count: int, seed: int) -> np.ndarray:
    """``count`` independent draws (with replacement), for frequency checks."""
    return np.random.default_rng(seed).choice(len(exe), size=count, p=exe.probabilities)
