import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graspsynth.annotation import AnnotatedScene
from graspsynth.geometry import PointCloud, RigidTransform, rot_x
from graspsynth.gripper import GraspCandidate, GraspFrame, GraspScores, GripperGeometry
from graspsynth.evaluation import (
    AngleBins, approach_angle, density_band, evaluate_proposals, recall_by_angle,
)
from graspsynth.regressor import Proposal

from helpers import SMALL, small_scene

DOWN = np.diag([1.0, -1.0, -1.0])      # approach (third column) along world -z


def tilted(deg):
    return GraspFrame(RigidTransform(DOWN @ rot_x(np.radians(deg)), np.zeros(3)))


def candidate(deg, s_h, obj, free=True):
    return GraspCandidate(tilted(deg), GraspScores(1.0, 6.0, free, s_h if free else 0.0), obj)


def scene_of(n_objects, grasps):
    cloud = PointCloud(np.zeros((1, 3)), np.array([[0.0, 0, 1]]))
    return AnnotatedScene(cloud, grasps, np.array([-1]), np.array([0]),
                          {"objects": [f"o{k}" for k in range(n_objects)]})


def recall_oracle(scenes, cutoffs, threshold):
    """Cumulative: object counts at cutoff c if any qualifying grasp has angle <= c."""
    per_object = []
    for s in scenes:
        n = len(s.manifest["objects"])
        for o in range(n):
            ang = [approach_angle(g.frame) for g in s.grasps
                   if g.object_id == o and g.scores.collision_free and g.scores.robust >= threshold]
            per_object.append([any(a <= c for a in ang) for c in cutoffs])
    return np.mean(np.array(per_object, dtype=float), axis=0)


def test_approach_angle_and_bins():
    assert approach_angle(tilted(0)) == pytest.approx(0.0, abs=1e-6)
    assert approach_angle(tilted(37)) == pytest.approx(37.0)
    assert approach_angle(GraspFrame(RigidTransform.identity())) == pytest.approx(180.0)
    np.testing.assert_allclose(AngleBins().cutoffs, [15, 30, 45, 60, 75, 90])


def test_density_bands():
    assert [density_band(n) for n in (1, 5, 6, 10, 11, 15, 16, 0)] == [
        "simple", "simple", "semi-dense", "semi-dense", "dense", "dense", "other", "other"]


def test_recall_hand_example():
    s = scene_of(3, [candidate(10, 3.0, 0), candidate(50, 3.0, 1), candidate(5, 0.2, 2),
                     candidate(80, 3.0, 2, free=False)])
    r = recall_by_angle([s], threshold=0.5)
    assert r["overall"]["per_bin"] == pytest.approx([1 / 3, 0, 0, 1 / 3, 0, 0])
    assert r["overall"]["cumulative"] == pytest.approx([1 / 3, 1 / 3, 1 / 3, 2 / 3, 2 / 3, 2 / 3])
    assert r["bands"]["simple"]["objects"] == 3


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_recall_matches_oracle_and_is_monotone(seed):
    rng = np.random.default_rng(seed)
    scenes = []
    for _ in range(int(rng.integers(1, 5))):
        n = int(rng.integers(1, 16))
        gs = [candidate(float(rng.uniform(0, 90)), float(rng.choice([0.0, 0.3, 0.5, 2.0])),
                        int(rng.integers(0, n)), bool(rng.random() < 0.8))
              for _ in range(int(rng.integers(0, 30)))]
        scenes.append(scene_of(n, gs))
    r = recall_by_angle(scenes, threshold=0.5)
    cum = np.array(r["overall"]["cumulative"])
    np.testing.assert_allclose(cum, recall_oracle(scenes, AngleBins().cutoffs, 0.5), atol=1e-12)
    assert np.all(np.diff(cum) >= 0)
    any_viable = recall_oracle(scenes, [180.0], 0.5)[0]
    assert cum[-1] == pytest.approx(any_viable, abs=1e-12)
    assert sum(b["objects"] for b in r["bands"].values()) == r["overall"]["objects"]


def test_recall_empty():
    r = recall_by_angle([])
    assert r["overall"]["objects"] == 0 and r["overall"]["cumulative"] == [0.0] * 6


# -- proposal metrics ---------------------------------------------------------------

def test_all_colliding_proposals():
    g = np.arange(-0.1, 0.1001, 0.004)
    pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    cloud = PointCloud(pts, np.tile([0.0, 0, 1], (len(pts), 1)))
    props = [Proposal(tilted(a), 1.0, i) for i, a in enumerate((0, 20, 45))]
    m = evaluate_proposals(props, cloud, GripperGeometry())
    assert m.collision_free_fraction == 0.0 and m.count == 3
    with pytest.raises(ValueError):
        evaluate_proposals([], cloud, GripperGeometry())


def test_ground_truth_grasps_are_self_consistent():
    prod = small_scene()
    gt = prod.grasps[:: max(1, len(prod.grasps) // 60)]
    m = evaluate_proposals(gt, prod.contact, SMALL.gripper)
    free = np.array([g.scores.collision_free for g in gt])
    assert free.sum() >= 10
    # the zero twist is among the perturbations, so a collision-free grasp is free at its nominal pose
    assert np.all(np.array(m.collision_free)[free])
    for g, sa in zip(gt, m.antipodal):
        if g.scores.collision_free:
            assert abs(sa - g.scores.antipodal) <= 1e-9
