"""Per-point grasp labels, score quantization, balanced sampling, dataset files."""
from __future__ import annotations

import bisect
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geometry import PointCloud, SpatialIndex
from .gripper import GraspCandidate, GripperGeometry, _closing_mask

MAGIC = b"GSDS"
VERSION = 1


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreQuantizer:
    """Half-open score bins; level 0 means no viable grasp."""

    boundaries: tuple = (0.5, 2.0, 4.0)

    def __post_init__(self):
        b = tuple(float(x) for x in self.boundaries)
        if any(b2 <= b1 for b1, b2 in zip(b, b[1:])):
            raise ValueError("quantizer boundaries must be strictly ascending")
        object.__setattr__(self, "boundaries", b)

    @property
    def levels(self) -> int:
        return len(self.boundaries) + 1

    def __call__(self, s: float) -> int:
        return quantize(self, s)


def quantize(q: ScoreQuantizer, s: float) -> int:
    if s < 0:
        raise ValueError("score must be non-negative")
    return bisect.bisect_right(q.boundaries, s)


@dataclass(frozen=True)
class PointAnnotation:
    grasp: Optional[GraspCandidate]
    score_level: int


@dataclass
class AnnotatedScene:
    """A view cloud with, per point, the index of its best covering grasp (-1: none)."""

    view_cloud: PointCloud
    grasps: list
    grasp_index: np.ndarray
    levels: np.ndarray
    manifest: dict = field(default_factory=dict)
    table_height: float = 0.0

    @property
    def annotations(self) -> list[PointAnnotation]:
        return [PointAnnotation(self.grasps[g] if g >= 0 else None, int(l))
                for g, l in zip(self.grasp_index, self.levels)]

    @property
    def viable(self) -> np.ndarray:
        return self.grasp_index >= 0


def annotate_scene(view_cloud: PointCloud, grasps: Sequence[GraspCandidate], gripper: GripperGeometry,
                   quantizer: ScoreQuantizer = ScoreQuantizer(), table_height: float = 0.0,
                   manifest: Optional[dict] = None) -> AnnotatedScene:
    """Give each point the highest-``s_h`` viable grasp whose closing region covers it.

    Grasps quantized to level 0 are not assigned. Ties keep the lower grasp index.
    """
    n = len(view_cloud)
    best = np.full(n, -np.inf)
    gidx = np.full(n, -1, dtype=np.int64)
    index = SpatialIndex(view_cloud.points)
    for k, g in enumerate(grasps):
        s = g.scores.robust
        if quantize(quantizer, s) == 0 or n == 0:
            continue
        near = index.query_radius(g.frame.origin, gripper.body_radius)
        if not len(near):
            continue
        inside = near[_closing_mask(g.frame.pose.apply_inverse(view_cloud.points[near]), gripper)]
        upd = inside[s > best[inside]]
        best[upd] = s
        gidx[upd] = k
    levels = np.array([quantize(quantizer, grasps[g].scores.robust) if g >= 0 else 0 for g in gidx],
                      dtype=np.int64)
    return AnnotatedScene(view_cloud, list(grasps), gidx, levels, dict(manifest or {}), table_height)


@dataclass
class DatasetRecord:
    """``n`` sampled points with their annotation; float payloads held as float32."""

    points: np.ndarray
    normals: np.ndarray
    levels: np.ndarray
    poses: np.ndarray          # (n, 12) row-major rotation + translation; zeros if none
    scores: np.ndarray         # (n, 4) s_a, s_o, s_c, s_h
    seed: int
    fallback: bool = False
    table_height: float = 0.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype="<f4").reshape(-1, 3)
        n = len(self.points)
        self.normals = np.asarray(self.normals, dtype="<f4").reshape(n, 3)
        self.levels = np.asarray(self.levels, dtype="<i4").reshape(n)
        self.poses = np.asarray(self.poses, dtype="<f4").reshape(n, 12)
        self.scores = np.asarray(self.scores, dtype="<f4").reshape(n, 4)
        self.table_height = float(np.float32(self.table_height))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def viable(self) -> np.ndarray:
        return self.levels > 0

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetRecord):
            return NotImplemented
        return (self.seed == other.seed and self.fallback == other.fallback
                and self.table_height == other.table_height
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("points", "normals", "levels", "poses", "scores")))

    def to_bytes(self) -> bytes:
        head = struct.pack("<QBfI", self.seed, int(self.fallback), self.table_height, len(self))
        return head + b"".join(a.tobytes() for a in
                               (self.points, self.normals, self.levels, self.poses, self.scores))

    @classmethod
    def from_bytes(cls, buf: bytes) -> "DatasetRecord":
        hs = struct.calcsize("<QBfI")
        if len(buf) < hs:
            raise DatasetFormatError("truncated record header")
        seed, fb, th, n = struct.unpack_from("<QBfI", buf)
        sizes = [(n, 3, "<f4"), (n, 3, "<f4"), (n, None, "<i4"), (n, 12, "<f4"), (n, 4, "<f4")]
        need = hs + n * 4 * (3 + 3 + 1 + 12 + 4)
        if len(buf) != need:
            raise DatasetFormatError(f"record payload has {len(buf)} bytes, expected {need}")
        off, arrs = hs, []
        for rows, cols, dt in sizes:
            cnt = rows * (cols or 1)
            a = np.frombuffer(buf, dtype=dt, count=cnt, offset=off)
            arrs.append(a.reshape(rows, cols) if cols else a)
            off += cnt * 4
        return cls(*[a.copy() for a in arrs], seed=seed, fallback=bool(fb), table_height=th)


def sample_training_points(scene: AnnotatedScene, n: int, seed: int) -> DatasetRecord:
    """Draw ``n // 8`` points with viable grasps and the rest from the other points.

    Pools smaller than their quota are sampled with replacement. Scenes with no
    viable point fall back to uniform sampling and set ``fallback``.
    """
    if n < 8:
        raise ValueError("n must be at least 8")
    rng = np.random.default_rng(seed)
    viable = np.flatnonzero(scene.viable)
    other = np.flatnonzero(~scene.viable)
    total = len(scene.view_cloud)
    if total == 0:
        raise ValueError("scene has no points")

    def draw(pool, k):
        return rng.choice(pool, size=k, replace=len(pool) < k)

    fallback = len(viable) == 0
    if fallback:
        idx = draw(np.arange(total), n)
    else:
        nv = n // 8
        rest = other if len(other) else viable
        idx = np.concatenate([draw(viable, nv), draw(rest, n - nv)])
        idx = idx[rng.permutation(n)]
    cloud = scene.view_cloud
    normals = cloud.normals if cloud.normals is not None else np.zeros_like(cloud.points)
    poses = np.zeros((n, 12))
    scores = np.zeros((n, 4))
    for r, i in enumerate(idx):
        g = scene.grasp_index[i]
        if g >= 0:
            c = scene.grasps[g]
            poses[r] = c.frame.pose.to_row12()
            s = c.scores
            scores[r] = (s.antipodal, s.occupancy, float(s.collision_free), s.robust)
    return DatasetRecord(cloud.points[idx], normals[idx], scene.levels[idx], poses, scores,
                         seed=int(seed), fallback=fallback, table_height=scene.table_height)


def write_dataset(records: Sequence[DatasetRecord], path, levels: int = 4,
                  sidecar: Optional[dict] = None) -> None:
    """Header (magic, version, record count, N, L) then length-prefixed records."""
    records = list(records)
    n = len(records[0]) if records else 0
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HIIH", VERSION, len(records), n, levels))
    for r in records:
        payload = r.to_bytes()
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)
    Path(path).write_bytes(buf.getvalue())
    if sidecar is not None:
        Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def read_dataset(path) -> list[DatasetRecord]:
    data = Path(path).read_bytes()
    hs = len(MAGIC) + struct.calcsize("<HIIH")
    if len(data) < hs:
        raise DatasetFormatError("truncated header")
    if data[:4] != MAGIC:
        raise DatasetFormatError("bad magic")
    version, count, _, _ = struct.unpack_from("<HIIH", data, 4)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    off, out = hs, []
    for k in range(count):
        if off + 8 > len(data):
            raise DatasetFormatError(f"truncated before record {k}")
        (size,) = struct.unpack_from("<Q", data, off)
        off += 8
        if off + size > len(data):
            raise DatasetFormatError(f"record {k} truncated")
        out.append(DatasetRecord.from_bytes(data[off:off + size]))
        off += size
    if off != len(data):
        raise DatasetFormatError("trailing bytes after last record")
    return out


def level_frequencies(records: Sequence[DatasetRecord], levels: int) -> np.ndarray:
    counts = np.zeros(levels)
    for r in records:
        counts += np.bincount(r.levels, minlength=levels)[:levels]
    return counts
