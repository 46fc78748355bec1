import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graspsynth.annotation import (
    AnnotatedScene, DatasetFormatError, DatasetRecord, ScoreQuantizer, annotate_scene,
    level_frequencies, quantize, read_dataset, sample_training_points, write_dataset,
)
from graspsynth.geometry import PointCloud, RigidTransform, se3_exp
from graspsynth.gripper import GraspCandidate, GraspFrame, GraspScores, GripperGeometry

G = GripperGeometry()
Q = ScoreQuantizer()


def grasp(pose, s_h, s_a=1.0):
    return GraspCandidate(GraspFrame(pose), GraspScores(s_a, 6.0, True, s_h))


def membership_oracle(points, g, gripper):
    R, t = g.frame.pose.rotation, g.frame.pose.translation
    local = (points - t) @ R
    return ((np.abs(local[:, 0]) <= gripper.max_opening / 2)
            & (np.abs(local[:, 1]) <= gripper.finger_thickness / 2)
            & (local[:, 2] >= -gripper.finger_length) & (local[:, 2] <= 0))


def assignment_oracle(points, grasps, gripper, q):
    M = np.array([membership_oracle(points, g, gripper) for g in grasps]).T   # (points, grasps)
    out = np.full(len(points), -1)
    for p in range(len(points)):
        best = -np.inf
        for k, g in enumerate(grasps):
            s = g.scores.robust
            if M[p, k] and quantize(q, s) > 0 and s > best:
                best, out[p] = s, k
    return out


def random_scene(rng, n_points=2000, n_grasps=50, score_pool=None):
    pts = rng.uniform(-0.1, 0.1, size=(n_points, 3))
    cloud = PointCloud(pts, np.tile([0.0, 0, 1], (n_points, 1)))
    grasps = []
    for _ in range(n_grasps):
        pose = se3_exp(np.r_[rng.normal(size=3) * 2, rng.uniform(-0.08, 0.08, 3)])
        s = rng.choice(score_pool) if score_pool is not None else rng.uniform(0, 6)
        grasps.append(grasp(pose, float(s)))
    return cloud, grasps


# -- quantizer -------------------------------------------------------------

def test_quantize_examples():
    assert quantize(Q, 0.0) == 0
    assert quantize(Q, 0.49) == 0
    assert quantize(Q, 0.5) == 1
    assert quantize(Q, 2.0) == 2
    assert quantize(Q, 6.0) == Q.levels - 1 == 3


def test_quantizer_validation():
    with pytest.raises(ValueError):
        ScoreQuantizer((1.0, 1.0))
    with pytest.raises(ValueError):
        quantize(Q, -0.1)


@given(st.floats(0, 10), st.floats(0, 10))
def test_quantize_monotone(a, b):
    lo, hi = sorted((a, b))
    assert quantize(Q, lo) <= quantize(Q, hi)


# -- annotation --------------------------------------------------------------

def test_single_point_single_grasp():
    cloud = PointCloud(np.array([[0.0, 0, -0.01]]), np.array([[0.0, 0, 1]]))
    g = grasp(RigidTransform.identity(), 3.0)
    a = annotate_scene(cloud, [g], G)
    assert a.annotations[0].grasp is g and a.annotations[0].score_level == 2


def test_max_rule_two_regions():
    cloud = PointCloud(np.array([[0.0, 0, -0.01]]), np.array([[0.0, 0, 1]]))
    low = grasp(RigidTransform.identity(), 0.9)
    high = grasp(RigidTransform(np.eye(3), [0.01, 0, 0]), 0.4 + 0.5 + 0.01)
    weak = grasp(RigidTransform(np.eye(3), [-0.01, 0, 0]), 0.4)
    a = annotate_scene(cloud, [low, weak, high], G)
    assert a.grasp_index[0] == 2
    a = annotate_scene(cloud, [weak], G)
    assert a.grasp_index[0] == -1 and a.levels[0] == 0


def test_assignment_matches_matrix_oracle():
    rng = np.random.default_rng(0)
    cloud, grasps = random_scene(rng)
    a = annotate_scene(cloud, grasps, G)
    oracle = assignment_oracle(cloud.points, grasps, G, Q)
    assert np.array_equal(a.grasp_index, oracle)
    assert (a.grasp_index >= 0).sum() > 100


def test_ties_break_to_lower_index_and_permutation_invariance():
    rng = np.random.default_rng(1)
    cloud, grasps = random_scene(rng, 1500, 40, score_pool=[0.2, 1.0, 3.0])
    a = annotate_scene(cloud, grasps, G)
    assert np.array_equal(a.grasp_index, assignment_oracle(cloud.points, grasps, G, Q))
    perm = rng.permutation(len(grasps))
    b = annotate_scene(cloud, [grasps[k] for k in perm], G)
    # same best score per point; with ties the winner is the lowest original-order index
    score_a = np.array([grasps[k].scores.robust if k >= 0 else -1 for k in a.grasp_index])
    score_b = np.array([grasps[perm[k]].scores.robust if k >= 0 else -1 for k in b.grasp_index])
    assert np.array_equal(score_a, score_b)


def test_annotation_invariants():
    rng = np.random.default_rng(2)
    cloud, grasps = random_scene(rng, 800, 30)
    a = annotate_scene(cloud, grasps, G)
    for ann in a.annotations:
        assert (ann.grasp is None) == (ann.score_level == 0)
        if ann.grasp is not None:
            assert ann.grasp.scores.is_valid()
    assert len(a.annotations) == len(cloud)


# -- sampling ---------------------------------------------------------------

def annotated(n_points, n_viable, seed=0):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n_points, 3))
    g = grasp(RigidTransform.identity(), 3.0)
    idx = np.full(n_points, -1)
    idx[:n_viable] = 0
    levels = np.where(idx >= 0, 2, 0)
    return AnnotatedScene(PointCloud(pts, np.tile([0.0, 0, 1], (n_points, 1))), [g], idx, levels)


@pytest.mark.parametrize("n,pool", [(25600, 5000), (800, 10), (800, 3000), (8, 1)])
def test_viable_slots_exact(n, pool):
    rec = sample_training_points(annotated(40000, pool), n, seed=3)
    assert len(rec) == n
    assert rec.viable.sum() == n // 8
    assert not rec.fallback


def test_sampling_default_split():
    rec = sample_training_points(annotated(40000, 5000), 25600, seed=3)
    assert rec.viable.sum() == 3200 and (~rec.viable).sum() == 22400


def test_sampling_with_replacement_from_ten():
    scene = annotated(2000, 10)
    rec = sample_training_points(scene, 800, seed=4)
    viable_pts = {tuple(p) for p in scene.view_cloud.points[:10].astype(np.float32)}
    taken = [tuple(p) for p in rec.points[rec.viable]]
    assert len(taken) == 100 and set(taken) <= viable_pts


def test_sampling_fallback_and_determinism():
    rec = sample_training_points(annotated(500, 0), 80, seed=1)
    assert rec.fallback and rec.viable.sum() == 0
    a = sample_training_points(annotated(3000, 200), 800, seed=9)
    b = sample_training_points(annotated(3000, 200), 800, seed=9)
    assert a.to_bytes() == b.to_bytes()
    with pytest.raises(ValueError):
        sample_training_points(annotated(100, 5), 7, seed=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(8, 3000), st.integers(0, 400), st.integers(0, 2**32 - 1))
def test_viable_slots_property(n, pool, seed):
    rec = sample_training_points(annotated(1000, pool), n, seed)
    assert rec.viable.sum() == (0 if pool == 0 else n // 8)


# -- dataset files ---------------------------------------------------------------

def random_record(rng, n=64):
    return DatasetRecord(rng.normal(size=(n, 3)), rng.normal(size=(n, 3)), rng.integers(0, 4, n),
                         rng.normal(size=(n, 12)), rng.random((n, 4)),
                         seed=int(rng.integers(2**40)), fallback=bool(rng.integers(2)),
                         table_height=float(rng.normal()))


def test_dataset_empty_roundtrip(tmp_path):
    p = tmp_path / "empty.bin"
    write_dataset([], p)
    assert read_dataset(p) == []


def test_dataset_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(5)
    recs = [random_record(rng)]
    p = tmp_path / "one.bin"
    write_dataset(recs, p, sidecar={"scenes": ["a"], "boundaries": [0.5, 2.0, 4.0]})
    back = read_dataset(p)
    assert back == recs
    assert back[0].to_bytes() == recs[0].to_bytes()
    assert (tmp_path / "one.bin.json").exists()


def test_dataset_truncation_detected(tmp_path):
    rng = np.random.default_rng(6)
    p = tmp_path / "many.bin"
    write_dataset([random_record(rng, 32) for _ in range(100)], p)
    data = p.read_bytes()
    p.write_bytes(data[:-1])
    with pytest.raises(DatasetFormatError, match="truncated"):
        read_dataset(p)


def test_dataset_version_and_magic(tmp_path):
    p = tmp_path / "d.bin"
    write_dataset([random_record(np.random.default_rng(7))], p)
    data = bytearray(p.read_bytes())
    data[4] = 99
    p.write_bytes(bytes(data))
    with pytest.raises(DatasetFormatError, match="version"):
        read_dataset(p)
    data[:4] = b"XXXX"
    p.write_bytes(bytes(data))
    with pytest.raises(DatasetFormatError, match="magic"):
        read_dataset(p)


def test_level_frequencies():
    rng = np.random.default_rng(8)
    recs = [random_record(rng) for _ in range(3)]
    f = level_frequencies(recs, 4)
    assert f.sum() == 3 * 64
    assert np.array_equal(f, np.bincount(np.concatenate([r.levels for r in recs]), minlength=4))
