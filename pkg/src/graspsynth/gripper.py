"""Parallel-jaw contact model: antipodal pairs, closing region, collisions, robust score.

Gripper coordinates: origin midway between the fingertips, ``x`` along the
closing line, ``z`` the approach direction (wrist toward object), ``y = z x x``.
The fingers occupy ``z in [-finger_length, 0]``; the palm sits behind them.
"""
from __future__ import annotations

import configparser
import math
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np

from .geometry import PointCloud, RigidTransform, SpatialIndex, se3_exp

_EPS = 1e-9


@dataclass(frozen=True)
class GripperGeometry:
    max_opening: float = 0.08
    finger_length: float = 0.06
    finger_thickness: float = 0.015
    palm_depth: float = 0.02
    pad_deformation: float = 0.003
    smoothing_radius: float = 0.023
    finger_width: float = 0.01

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"gripper {f.name} must be positive, got {v}")
        if self.pad_deformation >= self.max_opening:
            raise ValueError("pad_deformation must be smaller than max_opening")

    @property
    def body_radius(self) -> float:
        """Radius of a ball about the frame origin enclosing the whole gripper."""
        hx = self.max_opening / 2 + self.finger_width
        hz = self.finger_length + self.palm_depth
        return math.sqrt(hx * hx + (self.finger_thickness / 2) ** 2 + hz * hz)

    @classmethod
    def from_config(cls, path_or_parser, section: str = "gripper") -> "GripperGeometry":
        if isinstance(path_or_parser, configparser.ConfigParser):
            cp = path_or_parser
        else:
            cp = configparser.ConfigParser()
            if not cp.read(path_or_parser):
                raise FileNotFoundError(path_or_parser)
        if not cp.has_section(section):
            return cls()
        known = {f.name for f in fields(cls)}
        unknown = set(cp[section]) - known
        if unknown:
            raise ValueError(f"unknown gripper keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in cp[section].items()})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class GraspFrame:
    pose: RigidTransform

    @property
    def origin(self) -> np.ndarray:
        return self.pose.translation

    @property
    def closing_axis(self) -> np.ndarray:
        return self.pose.rotation[:, 0]

    @property
    def approach(self) -> np.ndarray:
        return self.pose.rotation[:, 2]


@dataclass(frozen=True)
class ContactPair:
    i: int
    j: int
    antipodal: float


@dataclass(frozen=True)
class GraspScores:
    antipodal: float
    occupancy: float
    collision_free: bool
    robust: float

    def is_valid(self, tol: float = 1e-12) -> bool:
        return (0.0 <= self.antipodal <= 1.0 and 0.0 <= self.occupancy <= 6.0
                and self.robust >= 0.0
                and self.robust <= self.antipodal * self.occupancy + tol
                and (self.collision_free or self.robust == 0.0))


@dataclass(frozen=True)
class GraspCandidate:
    frame: GraspFrame
    scores: GraspScores
    object_id: int = -1

    @property
    def score(self) -> float:
        return self.scores.robust

    def to_record(self) -> dict:
        s = self.scores
        return {"pose": self.frame.pose.to_row12(), "s_a": s.antipodal, "s_o": s.occupancy,
                "s_c": int(s.collision_free), "s_h": s.robust, "object": self.object_id}

    @classmethod
    def from_record(cls, r: dict) -> "GraspCandidate":
        return cls(GraspFrame(RigidTransform.from_row12(r["pose"])),
                   GraspScores(float(r["s_a"]), float(r["s_o"]), bool(r["s_c"]), float(r["s_h"])),
                   int(r.get("object", -1)))


# --------------------------------------------------------------------------
# Antipodal score and contact pairs
# --------------------------------------------------------------------------

def antipodal_scores(p_i, n_i, p_j, n_j) -> np.ndarray:
    """Vectorized :func:`antipodal_score` over leading axes."""
    p_i, n_i, p_j, n_j = (np.asarray(a, dtype=float) for a in (p_i, n_i, p_j, n_j))
    d = p_i - p_j
    dist = np.linalg.norm(d, axis=-1)
    if np.any(dist <= 0):
        raise ValueError("contact points coincide")
    u = d / dist[..., None]
    c1 = np.einsum("...j,...j->...", n_i, u)
    c2 = -np.einsum("...j,...j->...", n_j, u)
    return np.where((c1 < 0) | (c2 < 0), 0.0, c1 * c2)


def antipodal_score(p_i, n_i, p_j, n_j) -> float:
    """``cos(a1) cos(a2)`` for outward normals; zero when either cosine is negative.

    ``a1`` is measured between ``n_i`` and the direction away from ``p_j``, and
    symmetrically for ``a2``.
    """
    return float(antipodal_scores(p_i, n_i, p_j, n_j))


def _finger_line_blocked(points, index, p, outward, gap, radius) -> bool:
    """Whether cloud points sit where a finger must travel to reach ``p``."""
    if gap <= radius:
        return False
    mid = p + outward * (gap / 2)
    cand = index.query_radius(mid, gap / 2 + radius)
    if not len(cand):
        return False
    rel = points[cand] - p
    along = rel @ outward
    radial = np.linalg.norm(rel - along[:, None] * outward, axis=1)
    return bool(np.any((along > radius) & (along <= gap) & (radial <= radius)))


def _pair_clear(points, index, gripper, i, j) -> bool:
    d = points[j] - points[i]
    dist = np.linalg.norm(d)
    u = d / dist
    gap = (gripper.max_opening - dist) / 2
    r = gripper.pad_deformation
    return not (_finger_line_blocked(points, index, points[i], -u, gap, r)
                or _finger_line_blocked(points, index, points[j], u, gap, r))


def find_contact_pairs(cloud: PointCloud, gripper: GripperGeometry, threshold: float = 0.7,
                       clearance: bool = True, same_label: bool = True) -> list[ContactPair]:
    """Every pair (i < j) within the opening whose antipodal score reaches ``threshold``.

    With ``clearance`` the outward continuation of the closing line must be free
    of cloud points for the finger's travel; with ``same_label`` both contacts
    must lie on the same labelled object (table points, label -1, are skipped).
    """
    if cloud.normals is None:
        raise ValueError("cloud needs smoothed normals")
    index = SpatialIndex(cloud.points)
    pairs = index.pairs_within(gripper.max_opening)
    if not len(pairs):
        return []
    pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
    i, j = pairs[:, 0], pairs[:, 1]
    if cloud.labels is not None and same_label:
        keep = (cloud.labels[i] == cloud.labels[j]) & (cloud.labels[i] >= 0)
        i, j = i[keep], j[keep]
    p, n = cloud.points, cloud.normals
    nz = np.linalg.norm(p[i] - p[j], axis=1) > 0
    i, j = i[nz], j[nz]
    s = antipodal_scores(p[i], n[i], p[j], n[j]) if len(i) else np.zeros(0)
    keep = s >= threshold
    out = []
    for a, b, sc in zip(i[keep], j[keep], s[keep]):
        if clearance and not _pair_clear(p, index, gripper, a, b):
            continue
        out.append(ContactPair(int(a), int(b), float(sc)))
    return out


def sample_contact_pairs(cloud: PointCloud, gripper: GripperGeometry, anchors: Sequence[int],
                         threshold: float = 0.7, per_anchor: int = 1, clearance: bool = True,
                         index: Optional[SpatialIndex] = None) -> list[ContactPair]:
    """Contact pairs restricted to the given anchor points.

    For each anchor the ``per_anchor`` best-scoring partners on the same object
    are kept. Used by the data pipeline in place of the exhaustive scan.
    """
    p, n, lab = cloud.points, cloud.normals, cloud.labels
    index = index or SpatialIndex(p)
    out, seen = [], set()
    for a in anchors:
        nb = index.query_radius(p[a], gripper.max_opening)
        nb = nb[nb != a]
        if lab is not None:
            nb = nb[lab[nb] == lab[a]]
        nb = nb[np.linalg.norm(p[nb] - p[a], axis=1) > 0]
        if not len(nb):
            continue
        s = antipodal_scores(p[a], n[a], p[nb], n[nb])
        order = np.argsort(-s, kind="stable")
        taken = 0
        for k in order:
            if s[k] < threshold or taken >= per_anchor:
                break
            i, j = (int(a), int(nb[k])) if a < nb[k] else (int(nb[k]), int(a))
            if (i, j) in seen:
                continue
            if clearance and not _pair_clear(p, index, gripper, i, j):
                continue
            seen.add((i, j))
            out.append(ContactPair(i, j, float(s[k])))
            taken += 1
    return out


def frames_from_pair(pair: ContactPair, cloud: PointCloud, gripper: GripperGeometry,
                     approach_count: int = 8) -> list[GraspFrame]:
    """Frames about the contact midpoint with approaches spread around the closing axis.

    The k = 0 approach is the one closest to pointing straight down, so the
    enumeration always includes the most vertical option.
    """
    if approach_count < 1:
        raise ValueError("approach_count must be >= 1")
    pi, pj = cloud.points[pair.i], cloud.points[pair.j]
    x = (pj - pi) / np.linalg.norm(pj - pi)
    down = np.array([0.0, 0.0, -1.0])
    base = down - np.dot(down, x) * x
    if np.linalg.norm(base) < 1e-6:
        base = np.array([0.0, 1.0, 0.0]) - x[1] * x
    base /= np.linalg.norm(base)
    side = np.cross(x, base)
    origin = 0.5 * (pi + pj)
    frames = []
    for k in range(approach_count):
        th = 2.0 * np.pi * k / approach_count
        z = np.cos(th) * base + np.sin(th) * side
        z /= np.linalg.norm(z)
        y = np.cross(z, x)
        frames.append(GraspFrame(RigidTransform(np.column_stack([x, y, z]), origin)))
    return frames


# --------------------------------------------------------------------------
# Volumes in gripper coordinates
# --------------------------------------------------------------------------

def _closing_mask(local: np.ndarray, g: GripperGeometry) -> np.ndarray:
    return ((np.abs(local[:, 0]) <= g.max_opening / 2 + _EPS)
            & (np.abs(local[:, 1]) <= g.finger_thickness / 2 + _EPS)
            & (local[:, 2] >= -g.finger_length - _EPS) & (local[:, 2] <= _EPS))


def _body_mask(local: np.ndarray, g: GripperGeometry) -> np.ndarray:
    ax = np.abs(local[:, 0])
    in_y = np.abs(local[:, 1]) <= g.finger_thickness / 2
    outer = g.max_opening / 2 + g.finger_width
    fingers = ((ax > g.max_opening / 2 + _EPS) & (ax <= outer) & in_y
               & (local[:, 2] >= -g.finger_length) & (local[:, 2] <= 0.0))
    palm = ((ax <= outer) & in_y & (local[:, 2] < -g.finger_length - _EPS)
            & (local[:, 2] >= -g.finger_length - g.palm_depth))
    return fingers | palm


def closing_region_points(cloud: PointCloud, frame: GraspFrame, gripper: GripperGeometry) -> list[int]:
    if len(cloud) == 0:
        return []
    local = frame.pose.apply_inverse(cloud.points)
    return np.flatnonzero(_closing_mask(local, gripper)).tolist()


def occupancy_score(count: int) -> float:
    """``min(ln count, 6)``; 0 for an empty or single-point region."""
    if count < 0:
        raise ValueError("count must be non-negative")
    if count <= 1:
        return 0.0
    return min(math.log(count), 6.0)


def collision_check(scene_cloud: PointCloud, frame: GraspFrame, gripper: GripperGeometry) -> bool:
    """True iff a scene point lies inside either finger or the palm."""
    if len(scene_cloud) == 0:
        return False
    local = frame.pose.apply_inverse(scene_cloud.points)
    return bool(_body_mask(local, gripper).any())


def realized_contacts(local: np.ndarray, gripper: GripperGeometry) -> Optional[tuple[int, int]]:
    """Indices (into ``local``) of the points each pad touches first when closing.

    Among closing-region points within ``pad_deformation`` of the extreme ``x``
    on each side, the one nearest the fingertip line is taken.
    """
    inside = np.flatnonzero(_closing_mask(local, gripper))
    if len(inside) < 2:
        return None
    x = local[inside, 0]
    off = local[inside, 1] ** 2 + local[inside, 2] ** 2
    lm = x <= x.min() + gripper.pad_deformation
    rm = x >= x.max() - gripper.pad_deformation
    a = int(inside[lm][np.argmin(off[lm])])
    b = int(inside[rm][np.argmin(off[rm])])
    if a == b or local[b, 0] - local[a, 0] <= 0:
        return None
    return a, b


# --------------------------------------------------------------------------
# Robust score
# --------------------------------------------------------------------------

def default_perturbations(translation: float = 0.004, rotation: float = 0.1) -> list[np.ndarray]:
    """Zero twist plus +-translation along and +-rotation about each gripper axis."""
    out = [np.zeros(6)]
    for axis in range(3):
        for sign in (1.0, -1.0):
            xi = np.zeros(6)
            xi[3 + axis] = sign * translation
            out.append(xi)
    for axis in range(3):
        for sign in (1.0, -1.0):
            xi = np.zeros(6)
            xi[axis] = sign * rotation
            out.append(xi)
    return out


def perturbed_pose(frame: GraspFrame, xi) -> RigidTransform:
    """Body-frame perturbation ``h * exp(xi)`` (``h`` maps gripper to world)."""
    return frame.pose @ se3_exp(xi)


@dataclass
class PoseTerms:
    antipodal: float
    occupancy: float
    collision_free: bool

    @property
    def product(self) -> float:
        return self.antipodal * self.occupancy * float(self.collision_free)


class GraspEvaluator:
    """Scores grasp poses against a contact cloud and a complete scene cloud.

    The contact cloud (voxel-filtered, smoothed normals) supplies antipodal and
    occupancy terms; the scene cloud supplies collisions. Both are indexed once.
    """

    def __init__(self, cloud: PointCloud, scene_cloud: PointCloud, gripper: GripperGeometry,
                 perturbations: Optional[Sequence] = None, reevaluate_antipodal: bool = True):
        if cloud.normals is None:
            raise ValueError("contact cloud needs normals")
        self.cloud = cloud
        self.scene = scene_cloud
        self.gripper = gripper
        self.perturbations = [np.asarray(x, dtype=float) for x in
                              (default_perturbations() if perturbations is None else perturbations)]
        if not self.perturbations or not any(np.all(x == 0) for x in self.perturbations):
            raise ValueError("perturbation set must include the zero twist")
        self.reevaluate_antipodal = reevaluate_antipodal
        self._cidx = SpatialIndex(cloud.points)
        self._sidx = SpatialIndex(scene_cloud.points)

    def _near(self, index: SpatialIndex, center, slack: float) -> np.ndarray:
        if len(index) == 0:
            return np.zeros(0, dtype=np.int64)
        return index.query_radius(center, self.gripper.body_radius + slack)

    def pose_terms(self, pose: RigidTransform, c_near=None, s_near=None) -> PoseTerms:
        g = self.gripper
        if c_near is None:
            c_near = self._near(self._cidx, pose.translation, 0.0)
        if s_near is None:
            s_near = self._near(self._sidx, pose.translation, 0.0)
        local = pose.apply_inverse(self.cloud.points[c_near])
        count = int(_closing_mask(local, g).sum()) if len(local) else 0
        occ = occupancy_score(count)
        sa = 0.0
        rc = realized_contacts(local, g) if len(local) else None
        if rc is not None:
            a, b = c_near[rc[0]], c_near[rc[1]]
            p, n = self.cloud.points, self.cloud.normals
            if np.linalg.norm(p[a] - p[b]) > 0:
                sa = antipodal_score(p[a], n[a], p[b], n[b])
        free = True
        if len(s_near):
            free = not bool(_body_mask(pose.apply_inverse(self.scene.points[s_near]), g).any())
        return PoseTerms(sa, occ, free)

    def score(self, frame: GraspFrame) -> GraspScores:
        slack = max(float(np.linalg.norm(x[3:])) for x in self.perturbations) * 1.01 + 1e-6
        c_near = self._near(self._cidx, frame.origin, slack)
        s_near = self._near(self._sidx, frame.origin, slack)
        nominal = self.pose_terms(frame.pose, c_near, s_near)
        best = math.inf
        for xi in self.perturbations:
            t = nominal if not np.any(xi) else self.pose_terms(perturbed_pose(frame, xi), c_near, s_near)
            sa = t.antipodal if self.reevaluate_antipodal else nominal.antipodal
            best = min(best, sa * t.occupancy * float(t.collision_free))
        return GraspScores(nominal.antipodal, nominal.occupancy, nominal.collision_free, max(best, 0.0))


def robust_score(frame: GraspFrame, view_cloud: PointCloud, scene_cloud: PointCloud,
                 gripper: GripperGeometry, perturbations: Sequence) -> GraspScores:
    """Minimum of ``s_a * s_o * s_c`` over the perturbed poses."""
    return GraspEvaluator(view_cloud, scene_cloud, gripper, perturbations).score(frame)
