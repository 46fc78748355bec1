"""Tabletop clutter: object models, drop-to-contact settling, depth rendering, noise.

Settling is a quasi-static stand-in for a physics engine: each object takes a
precomputed resting orientation and a random yaw, then is lowered along -z
until it first touches the table or an already-placed object.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import ConvexHull

from .geometry import (PointCloud, RayScene, RigidTransform, TriangleMesh, normalize,
                       rot_z, rotation_between)

PENETRATION_TOL = 1e-3


class PlacementError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Primitive meshes
# --------------------------------------------------------------------------

def _orient_outward(vertices: np.ndarray, tris: np.ndarray) -> TriangleMesh:
    mesh = TriangleMesh(vertices, tris)
    c = mesh.corners()
    center = vertices.mean(axis=0)
    n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
    inward = np.einsum("ij,ij->i", n, c.mean(axis=1) - center) < 0
    t = mesh.triangles.copy()
    t[inward] = t[inward][:, [0, 2, 1]]
    return TriangleMesh(vertices, t)


def box_mesh(dx: float, dy: float, dz: float) -> TriangleMesh:
    s = np.array([dx, dy, dz]) / 2
    v = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], float) * s
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = [t for a, b, c, d in quads for t in ((a, b, c), (a, c, d))]
    return _orient_outward(v, np.array(tris))


def cylinder_mesh(radius: float, height: float, segments: int = 24) -> TriangleMesh:
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    bottom = np.column_stack([ring, np.full(segments, -height / 2)])
    top = np.column_stack([ring, np.full(segments, height / 2)])
    v = np.vstack([bottom, top, [[0, 0, -height / 2]], [[0, 0, height / 2]]])
    cb, ct = 2 * segments, 2 * segments + 1
    tris = []
    for k in range(segments):
        k2 = (k + 1) % segments
        tris += [(k, k2, segments + k2), (k, segments + k2, segments + k),
                 (cb, k2, k), (ct, segments + k, segments + k2)]
    return _orient_outward(v, np.array(tris))


def icosphere_mesh(radius: float, subdivisions: int = 2) -> TriangleMesh:
    t = (1 + 5 ** 0.5) / 2
    v = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
         [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.array(p, float) / np.linalg.norm(p) for p in v]
    for _ in range(subdivisions):
        cache, nf = {}, []
        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        f = nf
    return _orient_outward(np.array(verts) * radius, np.array(f))


# --------------------------------------------------------------------------
# Object models
# --------------------------------------------------------------------------

def _sample_surface(mesh: TriangleMesh, count: int, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    areas = mesh.areas()
    tri = rng.choice(len(areas), size=count, p=areas / areas.sum())
    return (*_points_in_triangles(mesh.corners()[tri], rng), tri)


def _points_in_triangles(c: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray]:
    r1, r2 = rng.random(len(c)), rng.random(len(c))
    s = np.sqrt(r1)
    pts = ((1 - s)[:, None] * c[:, 0] + (s * (1 - r2))[:, None] * c[:, 1]
           + (s * r2)[:, None] * c[:, 2])
    n = normalize(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]))
    return pts, n


def stable_orientations(mesh: TriangleMesh, tol: float = 1e-6) -> list[np.ndarray]:
    """Rotations putting each convex-hull face on the ground whose support polygon
    contains the projected center of mass."""
    hull = ConvexHull(mesh.vertices)
    com = mesh.volume_centroid()
    groups: list[tuple[np.ndarray, float, set]] = []
    for eq, simplex in zip(hull.equations, hull.simplices):
        n, d = eq[:3], eq[3]
        for gn, gd, members in groups:
            if np.linalg.norm(gn - n) < tol and abs(gd - d) < tol:
                members.update(simplex.tolist())
                break
        else:
            groups.append((n, d, set(simplex.tolist())))
    out = []
    for n, d, members in groups:
        pts = mesh.vertices[sorted(members)]
        proj = com - (np.dot(n, com) + d) * n
        u = normalize(np.cross(n, [1.0, 0, 0]) if abs(n[0]) < 0.9 else np.cross(n, [0, 1.0, 0]))
        w = np.cross(n, u)
        p2 = np.column_stack([pts @ u, pts @ w])
        q = np.array([proj @ u, proj @ w])
        if len(p2) < 3:
            continue
        poly = ConvexHull(p2)
        if np.all(poly.equations[:, :2] @ q + poly.equations[:, 2] < -1e-9):
            out.append(rotation_between(n, np.array([0.0, 0.0, -1.0])))
    return out


@dataclass
class ObjectModel:
    id: str
    mesh: TriangleMesh
    stable_orientations: list = field(default_factory=list)

    def __post_init__(self):
        if not self.stable_orientations:
            self.stable_orientations = stable_orientations(self.mesh)
        if not self.stable_orientations:
            raise ValueError(f"object {self.id!r} has no stable resting orientation")
        hull = ConvexHull(self.mesh.vertices)
        self.hull_planes = hull.equations.copy()        # n.x + d <= 0 inside
        rng = np.random.default_rng(zlib.crc32(self.id.encode()))
        pts, _, _ = _sample_surface(self.mesh, 400, rng)
        self.probe_points = np.vstack([self.mesh.vertices, pts])
        self.radius = float(np.linalg.norm(self.mesh.vertices, axis=1).max())


def default_library() -> list[ObjectModel]:
    """Household-object stand-ins sized after common benchmark items."""
    shapes = [
        ("cracker_box", box_mesh(0.16, 0.06, 0.21)),
        ("sugar_box", box_mesh(0.09, 0.04, 0.175)),
        ("soup_can", cylinder_mesh(0.033, 0.101)),
        ("mustard_bottle", box_mesh(0.095, 0.058, 0.19)),
        ("tuna_can", cylinder_mesh(0.043, 0.033)),
        ("pudding_box", box_mesh(0.11, 0.09, 0.035)),
        ("gelatin_box", box_mesh(0.085, 0.073, 0.028)),
        ("meat_can", box_mesh(0.10, 0.05, 0.083)),
        ("apple", icosphere_mesh(0.036, 2)),
        ("foam_brick", box_mesh(0.05, 0.075, 0.05)),
        ("tennis_ball", icosphere_mesh(0.033, 2)),
        ("chips_can", cylinder_mesh(0.038, 0.25)),
    ]
    return [ObjectModel(name, mesh) for name, mesh in shapes]


def load_library(directory) -> list[ObjectModel]:
    from .io import read_obj
    return [ObjectModel(p.stem, read_obj(p)) for p in sorted(Path(directory).glob("*.obj"))]


# --------------------------------------------------------------------------
# Scenes
# --------------------------------------------------------------------------

@dataclass
class PlacedObject:
    model: ObjectModel
    pose: RigidTransform

    def world_vertices(self) -> np.ndarray:
        return self.pose.apply(self.model.mesh.vertices)

    def world_planes(self) -> np.ndarray:
        n = self.model.hull_planes[:, :3] @ self.pose.rotation.T
        d = self.model.hull_planes[:, 3] - n @ self.pose.translation
        return np.column_stack([n, d])


@dataclass
class Scene:
    objects: list = field(default_factory=list)        # list[PlacedObject]
    table_height: float = 0.0
    table_size: float = 0.6

    def object_ids(self) -> list[str]:
        return [o.model.id for o in self.objects]

    def ray_scene(self, include_table: bool = True) -> RayScene:
        meshes = [(o.model.mesh, o.pose) for o in self.objects]
        ids = list(range(len(self.objects)))
        if include_table:
            meshes.append((table_mesh(self.table_size, self.table_height), RigidTransform()))
            ids.append(-1)
        return RayScene(meshes, ids)

    def to_dict(self) -> dict:
        return {"table_height": self.table_height, "table_size": self.table_size,
                "objects": [{"id": o.model.id, "pose": o.pose.to_row12()} for o in self.objects]}

    @classmethod
    def from_dict(cls, d: dict, library: Sequence[ObjectModel]) -> "Scene":
        lookup = {m.id: m for m in library}
        missing = [o["id"] for o in d["objects"] if o["id"] not in lookup]
        if missing:
            raise KeyError(f"unknown object ids: {missing}")
        objs = [PlacedObject(lookup[o["id"]], RigidTransform.from_row12(o["pose"])) for o in d["objects"]]
        return cls(objs, float(d["table_height"]), float(d.get("table_size", 0.6)))


def table_mesh(size: float, height: float) -> TriangleMesh:
    h = size / 2
    v = np.array([[-h, -h, height], [h, -h, height], [h, h, height], [-h, h, height]])
    return TriangleMesh(v, np.array([[0, 1, 2], [0, 2, 3]]))


def penetration_depth(points: np.ndarray, planes: np.ndarray) -> np.ndarray:
    """Depth of each point inside a convex hull (<= 0 means outside)."""
    return -(points @ planes[:, :3].T + planes[:, 3]).max(axis=1)


def interpenetration(a: PlacedObject, b: PlacedObject) -> float:
    if np.linalg.norm(a.pose.translation - b.pose.translation) > a.model.radius + b.model.radius:
        return 0.0
    da = penetration_depth(a.pose.apply(a.model.probe_points), b.world_planes()).max()
    db = penetration_depth(b.pose.apply(b.model.probe_points), a.world_planes()).max()
    return float(max(da, db, 0.0))


def scene_violations(scene: Scene) -> list[str]:
    """Human-readable list of broken scene invariants (empty when valid)."""
    out = []
    for k, o in enumerate(scene.objects):
        low = o.world_vertices()[:, 2].min()
        if not (scene.table_height - 1e-3 <= low <= scene.table_height + 0.5):
            out.append(f"object {k} ({o.model.id}) lowest vertex at {low:.4f}")
        for m in range(k):
            d = interpenetration(o, scene.objects[m])
            if d > PENETRATION_TOL:
                out.append(f"objects {m} and {k} interpenetrate by {d * 1e3:.2f} mm")
    return out


def drop_object(scene: Scene, model: ObjectModel, rotation: np.ndarray, xy) -> PlacedObject:
    """Lower ``model`` (already oriented) at ``xy`` until first contact."""
    verts = model.mesh.vertices @ rotation.T
    probes = model.probe_points @ rotation.T
    top = scene.table_height
    for o in scene.objects:
        top = max(top, o.world_vertices()[:, 2].max())
    z0 = top + 0.05 - verts[:, 2].min()
    start = RigidTransform(rotation, [xy[0], xy[1], z0])
    drop = z0 + verts[:, 2].min() - scene.table_height
    if scene.objects:
        placed = RayScene([(o.model.mesh, o.pose) for o in scene.objects])
        p = probes + start.translation
        down = np.tile([0.0, 0.0, -1.0], (len(p), 1))
        drop = min(drop, float(placed.cast(p, down).distance.min()))
        mine = RayScene([(model.mesh, start)])
        q = np.vstack([o.pose.apply(o.model.probe_points) for o in scene.objects])
        up = np.tile([0.0, 0.0, 1.0], (len(q), 1))
        drop = min(drop, float(mine.cast(q, up).distance.min()))
    return PlacedObject(model, RigidTransform(rotation, start.translation - [0.0, 0.0, drop]))


def settle_scene(models: Sequence[ObjectModel], count: int, seed: int, table_height: float = 0.0,
                 workspace: float = 0.6, max_attempts: int = 100,
                 placements: Optional[Sequence[tuple]] = None) -> Scene:
    """Drop ``count`` randomly chosen objects onto the table one at a time.

    ``placements`` overrides the random choices with explicit
    ``(model_index, orientation_index, yaw, x, y)`` tuples.
    """
    if placements is None and not 1 <= count <= 15:
        raise ValueError("object count must be in [1, 15]")
    rng = np.random.default_rng(seed)
    scene = Scene([], table_height, workspace)
    if placements is not None:
        for mi, oi, yaw, x, y in placements:
            m = models[mi]
            scene.objects.append(drop_object(scene, m, rot_z(yaw) @ m.stable_orientations[oi], (x, y)))
        return scene
    half = workspace / 2
    order = rng.integers(len(models), size=count)
    for mi in order:
        m = models[int(mi)]
        for _ in range(max_attempts):
            oi = int(rng.integers(len(m.stable_orientations)))
            R = rot_z(rng.uniform(0, 2 * np.pi)) @ m.stable_orientations[oi]
            reach = np.abs((m.mesh.vertices @ R.T)[:, :2]).max(axis=0)
            lim = np.maximum(half - reach, 0.0)
            xy = rng.uniform(-lim, lim)
            cand = drop_object(scene, m, R, xy)
            low = cand.world_vertices()[:, 2].min()
            if low > table_height + 0.5:
                continue
            if all(interpenetration(cand, o) <= PENETRATION_TOL for o in scene.objects):
                scene.objects.append(cand)
                break
        else:
            raise PlacementError(f"could not place object {m.id!r} after {max_attempts} attempts")
    return scene


# --------------------------------------------------------------------------
# Depth camera and noise
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DepthCamera:
    """Pinhole camera; ``pose`` maps camera coordinates (x right, y down, z forward) to world."""

    pose: RigidTransform
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if min(self.fx, self.fy) <= 0 or self.width < 1 or self.height < 1:
            raise ValueError("camera intrinsics must be positive")

    @property
    def origin(self) -> np.ndarray:
        return self.pose.translation

    def pixel_rays(self) -> np.ndarray:
        u, v = np.meshgrid(np.arange(self.width) + 0.5, np.arange(self.height) + 0.5)
        d = np.stack([(u.ravel() - self.cx) / self.fx, (v.ravel() - self.cy) / self.fy,
                      np.ones(u.size)], axis=1)
        return normalize(self.pose.rotate(d))

    def to_dict(self) -> dict:
        return {"pose": self.pose.to_row12(), "fx": self.fx, "fy": self.fy, "cx": self.cx,
                "cy": self.cy, "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "DepthCamera":
        return cls(RigidTransform.from_row12(d["pose"]), float(d["fx"]), float(d["fy"]),
                   float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]))


def default_camera(width: int = 320, height: int = 240, vfov_deg: float = 60.0,
                   center=(0.0, 0.0, 0.0), back: float = 0.6, up: float = 0.8,
                   pitch_deg: float = 45.0) -> DepthCamera:
    """Camera behind (-y) and above the workspace centre, pitched down."""
    fy = (height / 2) / np.tan(np.radians(vfov_deg) / 2)
    p = np.radians(pitch_deg)
    z = np.array([0.0, np.cos(p), -np.sin(p)])
    x = np.array([1.0, 0.0, 0.0])
    y = np.cross(z, x)
    pos = np.asarray(center, float) + [0.0, -back, up]
    return DepthCamera(RigidTransform(np.column_stack([x, y, z]), pos), fy, fy,
                       width / 2, height / 2, width, height)


@dataclass(frozen=True)
class NoiseModel:
    sigma: float = 0.003

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


def render_view_cloud(scene: Scene, camera: DepthCamera) -> PointCloud:
    """One ray per pixel; hits become world points labelled by object index (-1 table)."""
    dirs = camera.pixel_rays()
    origins = np.tile(camera.origin, (len(dirs), 1))
    hits = scene.ray_scene().cast(origins, dirs)
    keep = hits.hit
    return PointCloud(hits.points[keep], None, hits.mesh_id[keep])


def apply_depth_noise(cloud: PointCloud, camera_origin, noise: NoiseModel, seed: int) -> PointCloud:
    """Scale each point's distance to the camera by ``1 + N(0, sigma^2)``."""
    if noise.sigma == 0:
        return PointCloud(cloud.points.copy(),
                          None if cloud.normals is None else cloud.normals.copy(),
                          None if cloud.labels is None else cloud.labels.copy())
    o = np.asarray(camera_origin, dtype=float)
    eps = np.random.default_rng(seed).normal(0.0, noise.sigma, size=len(cloud))
    pts = o + (1.0 + eps)[:, None] * (cloud.points - o)
    return PointCloud(pts, cloud.normals, cloud.labels)


def assemble_scene_cloud(scene: Scene, samples_per_m2: float, seed: int,
                         include_table: bool = True) -> PointCloud:
    """Area-weighted uniform surface samples of every object plus the table patch.

    Table samples covered by an object's footprint are dropped.
    """
    if samples_per_m2 <= 0:
        raise ValueError("samples_per_m2 must be positive")
    rng = np.random.default_rng(seed)
    pts, nrm, lab = [], [], []
    for k, o in enumerate(scene.objects):
        world = o.model.mesh.transformed(o.pose)
        areas = world.areas()
        n = int(round(samples_per_m2 * areas.sum()))
        counts = rng.multinomial(n, areas / areas.sum())
        tri = np.repeat(np.arange(len(areas)), counts)
        p, nn = _points_in_triangles(world.corners()[tri], rng)
        pts.append(p)
        nrm.append(nn)
        lab.append(np.full(len(p), k))
    if include_table:
        h = scene.table_size / 2
        n = int(round(samples_per_m2 * scene.table_size ** 2))
        p = np.column_stack([rng.uniform(-h, h, n), rng.uniform(-h, h, n),
                             np.full(n, scene.table_height)])
        # probe just above the table: a resting object's bottom face lies on it exactly
        lifted = p + [0.0, 0.0, 1e-4]
        covered = np.zeros(n, dtype=bool)
        for o in scene.objects:
            covered |= penetration_depth(lifted, o.world_planes()) > 1e-9
        p = p[~covered]
        pts.append(p)
        nrm.append(np.tile([0.0, 0.0, 1.0], (len(p), 1)))
        lab.append(np.full(len(p), -1))
    if not pts:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
    return PointCloud(np.vstack(pts), np.vstack(nrm), np.concatenate(lab))
