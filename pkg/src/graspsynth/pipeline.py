"""Scene -> scored grasps -> annotated view cloud, as plain functions over a config."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .annotation import AnnotatedScene, ScoreQuantizer, annotate_scene
from .config import PipelineConfig, derive_seed
from .geometry import PointCloud, SpatialIndex, estimate_normals, farthest_point_sampling, \
    smooth_normals, voxel_downsample
from .gripper import (GraspCandidate, GraspEvaluator, default_perturbations, frames_from_pair,
                      sample_contact_pairs)
from .scene import (DepthCamera, NoiseModel, ObjectModel, Scene, apply_depth_noise,
                    assemble_scene_cloud, default_camera, default_library, load_library,
                    render_view_cloud, settle_scene)


def library_for(cfg: PipelineConfig) -> list[ObjectModel]:
    return load_library(cfg.scene.object_dir) if cfg.scene.object_dir else default_library()


def camera_for(cfg: PipelineConfig) -> DepthCamera:
    c = cfg.camera
    return default_camera(c.width, c.height, c.vfov, (0.0, 0.0, cfg.scene.table_height),
                          c.back, c.up, c.pitch)


def make_scene(cfg: PipelineConfig, n_objects: int, seed: int,
               library: Optional[Sequence[ObjectModel]] = None) -> Scene:
    return settle_scene(library or library_for(cfg), n_objects, seed,
                        cfg.scene.table_height, cfg.scene.workspace)


def prepare_cloud(cloud: PointCloud, cfg: PipelineConfig, viewpoint=None) -> PointCloud:
    """Voxel filter, raw plane-fit normals, then slab-filtered smoothing."""
    vox = voxel_downsample(cloud, cfg.scene.voxel_leaf)
    if len(vox) < 3:
        return vox.with_normals(np.tile([0.0, 0.0, 1.0], (len(vox), 1)))
    ref = vox.normals if viewpoint is None else None
    raw = estimate_normals(vox, cfg.contact.normal_neighbors, viewpoint=viewpoint, reference=ref)
    smooth, _ = smooth_normals(vox.with_normals(raw), cfg.gripper.smoothing_radius, cfg.contact.slab)
    return vox.with_normals(smooth)


def contact_cloud(scene: Scene, cfg: PipelineConfig, seed: int) -> tuple[PointCloud, PointCloud]:
    """Complete scene cloud and its voxel-filtered, normal-smoothed version."""
    complete = assemble_scene_cloud(scene, cfg.scene.samples_per_m2, seed)
    return complete, prepare_cloud(complete, cfg)


def generate_grasps(cloud: PointCloud, cfg: PipelineConfig, seed: int) -> list[GraspCandidate]:
    """Sample contact pairs on each object, enumerate frames, score them robustly."""
    cc = cfg.contact
    index = SpatialIndex(cloud.points)
    anchors = []
    for obj in np.unique(cloud.labels[cloud.labels >= 0]):
        members = np.flatnonzero(cloud.labels == obj)
        k = min(cc.anchors_per_object, len(members))
        picked = farthest_point_sampling(cloud.points[members], k, derive_seed(seed, int(obj)))
        anchors.extend(members[picked].tolist())
    pairs = sample_contact_pairs(cloud, cfg.gripper, anchors, cc.threshold,
                                 cc.partners_per_anchor, index=index)
    ev = GraspEvaluator(cloud, cloud, cfg.gripper,
                        default_perturbations(cc.perturb_translation, cc.perturb_rotation),
                        cc.reevaluate_antipodal)
    out = []
    for pair in pairs:
        obj = int(cloud.labels[pair.i])
        for frame in frames_from_pair(pair, cloud, cfg.gripper, cc.approach_count):
            out.append(GraspCandidate(frame, ev.score(frame), obj))
    return out


def view_cloud(scene: Scene, camera: DepthCamera, cfg: PipelineConfig, seed: int) -> PointCloud:
    """Rendered, noise-corrupted view cloud (before preprocessing)."""
    clean = render_view_cloud(scene, camera)
    return apply_depth_noise(clean, camera.origin, NoiseModel(cfg.camera.sigma), seed)


@dataclass
class SceneProduct:
    scene: Scene
    complete: PointCloud
    contact: PointCloud
    grasps: list
    view_input: PointCloud
    annotated: AnnotatedScene


def run_scene(cfg: PipelineConfig, n_objects: int, seed: int,
              library: Optional[Sequence[ObjectModel]] = None) -> SceneProduct:
    """Full data generation for one scene, every random draw derived from ``seed``."""
    scene = make_scene(cfg, n_objects, derive_seed(seed, 0), library)
    complete, contact = contact_cloud(scene, cfg, derive_seed(seed, 1))
    grasps = generate_grasps(contact, cfg, derive_seed(seed, 2))
    camera = camera_for(cfg)
    raw_view = view_cloud(scene, camera, cfg, derive_seed(seed, 3))
    view = prepare_cloud(raw_view, cfg, viewpoint=camera.origin)
    ann = annotate_scene(view, grasps, cfg.gripper, ScoreQuantizer(cfg.annotation.boundaries),
                         scene.table_height, {"objects": scene.object_ids()})
    return SceneProduct(scene, complete, contact, grasps, view, ann)


def grasp_scene(cfg: PipelineConfig, n_objects: int, seed: int,
                library: Optional[Sequence[ObjectModel]] = None) -> AnnotatedScene:
    """Scene with scored ground-truth grasps only (no view), enough for recall analysis."""
    scene = make_scene(cfg, n_objects, derive_seed(seed, 0), library)
    _, contact = contact_cloud(scene, cfg, derive_seed(seed, 1))
    grasps = generate_grasps(contact, cfg, derive_seed(seed, 2))
    return AnnotatedScene(PointCloud(np.zeros((0, 3))), grasps, np.zeros(0, dtype=np.int64),
                          np.zeros(0, dtype=np.int64), {"objects": scene.object_ids()},
                          scene.table_height)
