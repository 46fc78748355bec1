"""Proposal metrics against the complete scene, and recall by approach angle."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .annotation import AnnotatedScene
from .geometry import PointCloud
from .gripper import GraspEvaluator, GripperGeometry

DENSITY_BANDS = {"simple": (1, 5), "semi-dense": (6, 10), "dense": (11, 15)}


@dataclass(frozen=True)
class AngleBins:
    """Equal-width bins over (0, 90] degrees between approach and straight down."""

    count: int = 6
    max_deg: float = 90.0

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(0.0, self.max_deg, self.count + 1)

    @property
    def cutoffs(self) -> np.ndarray:
        return self.edges[1:]


def approach_angle(frame) -> float:
    """Degrees between the approach axis and world -z (0 = pointing down)."""
    c = -float(frame.approach[2])
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def density_band(n_objects: int) -> str:
    for name, (lo, hi) in DENSITY_BANDS.items():
        if lo <= n_objects <= hi:
            return name
    return "other"


@dataclass
class ProposalMetrics:
    mean_antipodal: float
    collision_free_fraction: float
    count: int
    antipodal: list = field(default_factory=list)
    collision_free: list = field(default_factory=list)


def evaluate_proposals(proposals: Sequence, scene_cloud: PointCloud,
                       gripper: GripperGeometry) -> ProposalMetrics:
    """Antipodal score and collision status of each proposal against the complete cloud."""
    if not len(proposals):
        raise ValueError("need at least one proposal")
    ev = GraspEvaluator(scene_cloud, scene_cloud, gripper, [np.zeros(6)])
    terms = [ev.pose_terms(p.frame.pose) for p in proposals]
    sa = [t.antipodal for t in terms]
    free = [t.collision_free for t in terms]
    return ProposalMetrics(float(np.mean(sa)), float(np.mean(free)), len(terms), sa, free)


def object_angles(scene: AnnotatedScene, threshold: float) -> list[np.ndarray]:
    """Per object: approach angles of its qualifying grasps."""
    n = len(scene.manifest.get("objects", []))
    acc: list[list[float]] = [[] for _ in range(n)]
    for g in scene.grasps:
        if g.object_id < 0 or g.object_id >= n:
            continue
        if not g.scores.collision_free or g.scores.robust < threshold:
            continue
        acc[g.object_id].append(approach_angle(g.frame))
    return [np.array(a) for a in acc]


def recall_by_angle(scenes: Sequence[AnnotatedScene], bins: AngleBins = AngleBins(),
                    threshold: float = 0.5) -> dict:
    """Fraction of objects graspable within each angle bin and cumulative cutoff.

    An object counts when one of its grasps is collision-free with robust score
    at least ``threshold``. Results are given per density band and overall
    (object-count weighted).
    """
    edges = bins.edges
    lo = np.concatenate([[-np.inf], edges[1:-1]])
    per_band: dict[str, list[np.ndarray]] = {}
    for s in scenes:
        hits = np.array([[bool(np.any((a > x) & (a <= y))) for x, y in zip(lo, edges[1:])]
                         for a in object_angles(s, threshold)], dtype=bool).reshape(-1, bins.count)
        per_band.setdefault(density_band(len(hits)), []).append(hits)

    def table(hits: np.ndarray) -> dict:
        n = len(hits)
        cum = np.logical_or.accumulate(hits, axis=1) if n else hits
        return {"objects": n,
                "cumulative": [float(v) for v in (cum.mean(axis=0) if n else np.zeros(bins.count))],
                "per_bin": [float(v) for v in (hits.mean(axis=0) if n else np.zeros(bins.count))]}

    out = {"cutoffs_deg": edges[1:].tolist(), "threshold": threshold, "bands": {}}
    every = []
    for band, lists in sorted(per_band.items()):
        h = np.concatenate(lists)
        every.append(h)
        out["bands"][band] = table(h)
    out["overall"] = table(np.concatenate(every) if every else np.zeros((0, bins.count), bool))
    return out
