"""Rigid-body math and point-cloud / mesh primitives.

Arrays follow numpy conventions: points are ``(N, 3)`` float64, rotations are
``(3, 3)``, twists are ``(6,)`` ordered ``(omega, v)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

SMALL_ANGLE = 1e-8


def skew(w: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]],
                     [w[2], 0.0, -w[0]],
                     [-w[1], w[0], 0.0]])


def normalize(v: np.ndarray, axis: int = -1) -> np.ndarray:
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    return v / n


def is_rotation(R: np.ndarray, tol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return (np.abs(R.T @ R - np.eye(3)).max() <= tol
            and abs(np.linalg.det(R) - 1.0) <= tol)


def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1.0, 0], [-s, 0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


def rotation_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Smallest rotation taking unit vector ``a`` onto unit vector ``b``."""
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    v = np.cross(a, b)
    c = float(np.dot(a, b))
    if c < -1.0 + 1e-12:
        # antiparallel: half turn about any axis orthogonal to a
        axis = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(axis) < 1e-6:
            axis = np.cross(a, [0.0, 1.0, 0.0])
        axis /= np.linalg.norm(axis)
        return 2.0 * np.outer(axis, axis) - np.eye(3)
    K = skew(v)
    return np.eye(3) + K + K @ K / (1.0 + c)


@dataclass(frozen=True)
class RigidTransform:
    """Pose mapping local coordinates into the parent frame: ``x -> R x + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "RigidTransform":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3].copy(), T[:3, 3].copy())

    @classmethod
    def from_row12(cls, values: Sequence[float]) -> "RigidTransform":
        """Inverse of :meth:`to_row12` (rotation row-major, then translation)."""
        v = np.asarray(values, dtype=float)
        if v.shape != (12,):
            raise ValueError(f"expected 12 pose values, got {v.shape}")
        return cls(v[:9].reshape(3, 3), v[9:])

    def to_row12(self) -> list[float]:
        return [float(x) for x in np.concatenate([self.rotation.ravel(), self.translation])]

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def apply_inverse(self, points: np.ndarray) -> np.ndarray:
        """Map parent-frame points into local coordinates."""
        return (np.asarray(points, dtype=float) - self.translation) @ self.rotation

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=float) @ self.rotation.T


def so3_exp(omega: np.ndarray) -> np.ndarray:
    return se3_exp(np.concatenate([np.asarray(omega, dtype=float), np.zeros(3)])).rotation


def se3_exp(xi: Sequence[float]) -> RigidTransform:
    """Closed-form exponential of a twist ``(omega, v)``.

    Below ``SMALL_ANGLE`` the Rodrigues coefficients are replaced by their
    Taylor series.
    """
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (6,) or not np.all(np.isfinite(xi)):
        raise ValueError("twist must be 6 finite values")
    w, v = xi[:3], xi[3:]
    theta = float(np.linalg.norm(w))
    W = skew(w)
    W2 = W @ W
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta ** 2
        c = (theta - np.sin(theta)) / theta ** 3
    R = np.eye(3) + a * W + b * W2
    V = np.eye(3) + b * W + c * W2
    return RigidTransform(R, V @ v)


def geodesic_angle(R1: np.ndarray, R2: np.ndarray) -> float:
    c = (np.trace(R1.T @ R2) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


# --------------------------------------------------------------------------
# Point clouds
# --------------------------------------------------------------------------

@dataclass
class PointCloud:
    """Points with optional unit normals and integer labels (``-1`` = table)."""

    points: np.ndarray
    normals: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if np.isnan(self.points).any():
            raise ValueError("point cloud contains NaN coordinates")
        n = len(self.points)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if len(self.normals) != n:
                raise ValueError("normals must align 1:1 with points")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(self.labels) != n:
                raise ValueError("labels must align 1:1 with points")

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, idx) -> "PointCloud":
        return PointCloud(self.points[idx],
                          None if self.normals is None else self.normals[idx],
                          None if self.labels is None else self.labels[idx])

    def transformed(self, T: RigidTransform) -> "PointCloud":
        return PointCloud(T.apply(self.points),
                          None if self.normals is None else T.rotate(self.normals),
                          None if self.labels is None else self.labels.copy())

    def with_normals(self, normals: np.ndarray) -> "PointCloud":
        return PointCloud(self.points, normals, self.labels)

    @staticmethod
    def concatenate(clouds: Sequence["PointCloud"]) -> "PointCloud":
        clouds = list(clouds)
        if not clouds:
            return PointCloud(np.zeros((0, 3)))
        pts = np.concatenate([c.points for c in clouds])
        normals = labels = None
        if all(c.normals is not None for c in clouds):
            normals = np.concatenate([c.normals for c in clouds])
        if all(c.labels is not None for c in clouds):
            labels = np.concatenate([c.labels for c in clouds])
        return PointCloud(pts, normals, labels)


class SpatialIndex:
    """Immutable radius/kNN index over a fixed point set."""

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=float).reshape(-1, 3)
        self._tree = cKDTree(self.points) if len(self.points) else None

    def __len__(self) -> int:
        return len(self.points)

    def query_radius(self, query: np.ndarray, radius: float) -> np.ndarray:
        if radius <= 0:
            raise ValueError("radius must be positive")
        if self._tree is None:
            return np.zeros(0, dtype=np.int64)
        idx = self._tree.query_ball_point(np.asarray(query, dtype=float), radius)
        return np.array(sorted(idx), dtype=np.int64)

    def query_radius_many(self, queries: np.ndarray, radius: float) -> list[list[int]]:
        if self._tree is None:
            return [[] for _ in range(len(queries))]
        return self._tree.query_ball_point(np.asarray(queries, dtype=float), radius)

    def knn(self, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        k = min(k, len(self.points))
        d, i = self._tree.query(np.asarray(queries, dtype=float), k=k)
        return np.atleast_2d(d), np.atleast_2d(i)

    def pairs_within(self, radius: float) -> np.ndarray:
        if self._tree is None:
            return np.zeros((0, 2), dtype=np.int64)
        return self._tree.query_pairs(radius, output_type="ndarray")


def nearest_neighbors(index: SpatialIndex, query: np.ndarray, radius: float) -> list[int]:
    return index.query_radius(query, radius).tolist()


def voxel_downsample(cloud: PointCloud, leaf: float) -> PointCloud:
    """Replace the members of each occupied voxel by their centroid.

    Output order follows the lexicographic order of voxel keys. Normals are
    averaged and renormalized; the label of the first member is kept.
    """
    if leaf <= 0:
        raise ValueError("leaf size must be positive")
    if len(cloud) == 0:
        return PointCloud(np.zeros((0, 3)),
                          None if cloud.normals is None else np.zeros((0, 3)),
                          None if cloud.labels is None else np.zeros(0, dtype=np.int64))
    keys = np.floor(cloud.points / leaf).astype(np.int64)
    _, first, inverse, counts = np.unique(keys, axis=0, return_index=True,
                                          return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    m = len(counts)
    sums = np.zeros((m, 3))
    np.add.at(sums, inverse, cloud.points)
    pts = sums / counts[:, None]
    normals = None
    if cloud.normals is not None:
        nsum = np.zeros((m, 3))
        np.add.at(nsum, inverse, cloud.normals)
        norm = np.linalg.norm(nsum, axis=1)
        fallback = cloud.normals[first]
        ok = norm > 1e-12
        normals = np.where(ok[:, None], nsum / np.where(ok, norm, 1.0)[:, None], fallback)
    labels = None if cloud.labels is None else cloud.labels[first]
    return PointCloud(pts, normals, labels)


def _smallest_eigvecs(cov: np.ndarray) -> np.ndarray:
    _, vecs = np.linalg.eigh(cov)
    return vecs[..., :, 0]


def estimate_normals(cloud: PointCloud, k: int = 10, viewpoint=None,
                     reference: Optional[np.ndarray] = None) -> np.ndarray:
    """Raw normals from a covariance plane fit over the ``k`` nearest points.

    Orientation: toward ``viewpoint`` (default origin) unless per-point
    ``reference`` directions are given, in which case signs agree with them.
    """
    pts = cloud.points
    if len(pts) < 3:
        raise ValueError("need at least 3 points for normal estimation")
    index = SpatialIndex(pts)
    _, nn = index.knn(pts, k)
    nb = pts[nn]                                  # (N, k, 3)
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    normals = _smallest_eigvecs(cov)
    if reference is not None:
        flip = np.einsum("ij,ij->i", normals, reference) < 0
    else:
        vp = np.zeros(3) if viewpoint is None else np.asarray(viewpoint, dtype=float)
        flip = np.einsum("ij,ij->i", normals, vp - pts) < 0
    normals[flip] *= -1.0
    return normals


class InsufficientSupport(ValueError):
    pass


def _slab_fit(pts: np.ndarray, center: np.ndarray, raw: np.ndarray, nbr: np.ndarray,
              slab: float) -> np.ndarray:
    rel = pts[nbr] - center
    keep = np.abs(rel @ (raw / np.linalg.norm(raw))) <= slab
    if keep.sum() < 3:
        raise InsufficientSupport("insufficient support")
    q = pts[nbr[keep]]
    q = q - q.mean(axis=0)
    n = _smallest_eigvecs(q.T @ q)
    return n if np.dot(n, raw) >= 0 else -n


def smoothed_normal(cloud: PointCloud, index: int, radius: float, slab: float,
                    spatial_index: Optional[SpatialIndex] = None) -> np.ndarray:
    """Plane-fit normal over ball neighbors within ``slab`` of the raw tangent plane."""
    if cloud.normals is None:
        raise ValueError("cloud needs raw normals")
    if radius <= 0 or slab <= 0:
        raise ValueError("radius and slab must be positive")
    si = spatial_index or SpatialIndex(cloud.points)
    nbr = si.query_radius(cloud.points[index], radius)
    return _slab_fit(cloud.points, cloud.points[index], cloud.normals[index], nbr, slab)


def smooth_normals(cloud: PointCloud, radius: float, slab: float,
                   chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`smoothed_normal` over every point.

    Returns ``(normals, supported)``; unsupported points keep their raw normal.
    """
    if cloud.normals is None:
        raise ValueError("cloud needs raw normals")
    pts, raw = cloud.points, cloud.normals / np.linalg.norm(cloud.normals, axis=1, keepdims=True)
    n = len(pts)
    out = raw.copy()
    supported = np.zeros(n, dtype=bool)
    if n == 0:
        return out, supported
    si = SpatialIndex(pts)
    for s in range(0, n, chunk):
        ids = np.arange(s, min(n, s + chunk))
        lists = si.query_radius_many(pts[ids], radius)
        width = max(len(l) for l in lists)
        nbr = np.zeros((len(ids), width), dtype=np.int64)
        mask = np.zeros((len(ids), width), dtype=bool)
        for r, l in enumerate(lists):
            nbr[r, :len(l)] = l
            mask[r, :len(l)] = True
        rel = pts[nbr] - pts[ids][:, None, :]
        d = np.abs(np.einsum("nkj,nj->nk", rel, raw[ids]))
        mask &= d <= slab
        cnt = mask.sum(axis=1)
        w = mask.astype(float)
        mean = np.einsum("nk,nkj->nj", w, pts[nbr]) / np.maximum(cnt, 1)[:, None]
        c = (pts[nbr] - mean[:, None, :]) * w[:, :, None]
        cov = np.einsum("nki,nkj->nij", c, c)
        ok = cnt >= 3
        nv = _smallest_eigvecs(cov)
        flip = np.einsum("ij,ij->i", nv, raw[ids]) < 0
        nv[flip] *= -1.0
        out[ids[ok]] = nv[ok]
        supported[ids] = ok
    return out, supported


def farthest_point_sampling(cloud, k: int, seed: int = 0, start: Optional[int] = None) -> list[int]:
    """Greedy max-min subset. First index is drawn from ``seed`` unless ``start`` is given."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    n = len(pts)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must be in [1, {n}]")
    first = int(np.random.default_rng(seed).integers(n)) if start is None else int(start)
    chosen = [first]
    dmin = np.linalg.norm(pts - pts[first], axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(dmin))
        chosen.append(nxt)
        dmin = np.minimum(dmin, np.linalg.norm(pts - pts[nxt], axis=1))
    return chosen


# --------------------------------------------------------------------------
# Meshes and ray casting
# --------------------------------------------------------------------------

@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        if len(self.triangles) and (self.areas() <= 1e-12).any():
            raise ValueError("degenerate triangle (area <= 1e-12 m^2)")

    def corners(self) -> np.ndarray:
        return self.vertices[self.triangles]          # (T, 3, 3)

    def areas(self) -> np.ndarray:
        c = self.corners()
        return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)

    def face_normals(self) -> np.ndarray:
        c = self.corners()
        return normalize(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]))

    def transformed(self, T: RigidTransform) -> "TriangleMesh":
        return TriangleMesh(T.apply(self.vertices), self.triangles.copy())

    def volume_centroid(self) -> np.ndarray:
        c = self.corners()
        vol = np.einsum("ij,ij->i", c[:, 0], np.cross(c[:, 1], c[:, 2])) / 6.0
        if abs(vol.sum()) < 1e-15:
            return self.vertices.mean(axis=0)
        return (vol[:, None] * c.sum(axis=1) / 4.0).sum(axis=0) / vol.sum()


def moller_trumbore(origins: np.ndarray, dirs: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Ray/triangle distances, shape ``(R, T)``; ``inf`` where missed."""
    v0, e1, e2 = tris[:, 0], tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]
    p = np.cross(dirs[:, None, :], e2[None, :, :])
    det = np.einsum("tj,rtj->rt", e1, p)
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tv = origins[:, None, :] - v0[None, :, :]
    u = np.einsum("rtj,rtj->rt", tv, p) * inv
    q = np.cross(tv, e1[None, :, :])
    v = np.einsum("rj,rtj->rt", dirs, q) * inv
    t = np.einsum("tj,rtj->rt", e2, q) * inv
    hit = ok & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > 1e-12)
    return np.where(hit, t, np.inf)


class TriangleBVH:
    """Median-split bounding-volume hierarchy over world-space triangles."""

    def __init__(self, tris: np.ndarray, leaf_size: int = 8):
        self.tris = np.asarray(tris, dtype=float).reshape(-1, 3, 3)
        n = len(self.tris)
        self.order = np.arange(n)
        self.lo, self.hi, self.left, self.right, self.start, self.count = [], [], [], [], [], []
        if n:
            cent = self.tris.mean(axis=1)
            self._build(cent, 0, n, leaf_size)
        self.lo, self.hi = np.array(self.lo).reshape(-1, 3), np.array(self.hi).reshape(-1, 3)
        self.ordered = self.tris[self.order]

    def _build(self, cent, s, e, leaf_size) -> int:
        node = len(self.lo)
        box = self.tris[self.order[s:e]].reshape(-1, 3)
        self.lo.append(box.min(axis=0))
        self.hi.append(box.max(axis=0))
        self.left.append(-1)
        self.right.append(-1)
        self.start.append(s)
        self.count.append(e - s)
        if e - s <= leaf_size:
            return node
        c = cent[self.order[s:e]]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        srt = np.argsort(c[:, axis], kind="stable")
        self.order[s:e] = self.order[s:e][srt]
        mid = (s + e) // 2
        self.count[node] = 0
        self.left[node] = self._build(cent, s, mid, leaf_size)
        self.right[node] = self._build(cent, mid, e, leaf_size)
        return node

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Nearest hit distance and triangle id for each ray (``inf``/``-1`` on miss)."""
        origins = np.asarray(origins, dtype=float).reshape(-1, 3)
        dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
        m = len(origins)
        best = np.full(m, np.inf)
        tri = np.full(m, -1, dtype=np.int64)
        if not len(self.tris) or not m:
            return best, tri
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
        stack = [(0, np.arange(m))]
        while stack:
            node, rays = stack.pop()
            o, iv = origins[rays], inv[rays]
            with np.errstate(invalid="ignore"):
                t1 = (self.lo[node] - o) * iv
                t2 = (self.hi[node] - o) * iv
            t1 = np.nan_to_num(t1, nan=-np.inf)
            t2 = np.nan_to_num(t2, nan=np.inf)
            tmin = np.minimum(t1, t2).max(axis=1)
            tmax = np.maximum(t1, t2).min(axis=1)
            live = (tmax >= np.maximum(tmin, 0.0)) & (tmin <= best[rays])
            rays = rays[live]
            if not len(rays):
                continue
            if self.count[node]:
                s = self.start[node]
                t = moller_trumbore(origins[rays], dirs[rays], self.ordered[s:s + self.count[node]])
                j = np.argmin(t, axis=1)
                tj = t[np.arange(len(rays)), j]
                better = tj < best[rays]
                best[rays[better]] = tj[better]
                tri[rays[better]] = self.order[s + j[better]]
            else:
                stack.append((self.right[node], rays))
                stack.append((self.left[node], rays))
        return best, tri


@dataclass
class RayHits:
    distance: np.ndarray
    points: np.ndarray
    normals: np.ndarray
    mesh_id: np.ndarray

    @property
    def hit(self) -> np.ndarray:
        return np.isfinite(self.distance)


class RayScene:
    """Several posed meshes flattened into one triangle BVH."""

    def __init__(self, meshes: Sequence[tuple[TriangleMesh, RigidTransform]],
                 ids: Optional[Sequence[int]] = None):
        tris, owner = [], []
        for k, (mesh, pose) in enumerate(meshes):
            tris.append(mesh.transformed(pose).corners())
            owner.append(np.full(len(mesh.triangles), k if ids is None else ids[k]))
        self.tris = np.concatenate(tris) if tris else np.zeros((0, 3, 3))
        self.owner = np.concatenate(owner).astype(np.int64) if owner else np.zeros(0, np.int64)
        self.bvh = TriangleBVH(self.tris)
        if len(self.tris):
            self.normals = normalize(np.cross(self.tris[:, 1] - self.tris[:, 0],
                                              self.tris[:, 2] - self.tris[:, 0]))
        else:
            self.normals = np.zeros((0, 3))

    def cast(self, origins: np.ndarray, dirs: np.ndarray) -> RayHits:
        origins = np.asarray(origins, dtype=float).reshape(-1, 3)
        dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
        t, tri = self.bvh.intersect(origins, dirs)
        hit = tri >= 0
        pts = np.full_like(origins, np.nan)
        nrm = np.full_like(origins, np.nan)
        pts[hit] = origins[hit] + t[hit, None] * dirs[hit]
        n = self.normals[tri[hit]]
        flip = np.einsum("ij,ij->i", n, dirs[hit]) > 0
        n[flip] *= -1.0
        nrm[hit] = n
        mid = np.full(len(t), -1, dtype=np.int64)
        mid[hit] = self.owner[tri[hit]]
        return RayHits(t, pts, nrm, mid)


def ray_cast(meshes, origin, direction):
    """Nearest hit of a single ray: ``(distance, point, normal)`` or ``None``."""
    direction = np.asarray(direction, dtype=float)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise ValueError("direction must be a unit vector")
    h = RayScene(meshes).cast(np.asarray(origin, dtype=float)[None], direction[None])
    if not h.hit[0]:
        return None
    return float(h.distance[0]), h.points[0], h.normals[0]
