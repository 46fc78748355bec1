import time

import numpy as np
import pytest

from graspsynth.geometry import PointCloud
from graspsynth.losses import finite_difference, relative_error
from graspsynth.regressor import (
    FEATURE_DIM, GLOBAL_DIM, RegressorParams, TrainConfig, TrainingDiverged, batch_loss, decode,
    extract_features, forward, load_params, predict_scene, record_features, save_params, train,
)

from helpers import OVERFIT_TRAIN, mean_rotation_error_deg, overfit_record


def plane_cloud(n=200, seed=0, z=0.0):
    rng = np.random.default_rng(seed)
    pts = np.column_stack([rng.uniform(-0.1, 0.1, (n, 2)), np.full(n, z)])
    return PointCloud(pts, np.tile([0.0, 0, 1], (n, 1)))


def tiny_record(seed=0, n=48):
    """Random small record with realistic magnitudes; a third of points viable."""
    from graspsynth.annotation import DatasetRecord
    from graspsynth.geometry import se3_exp
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-0.05, 0.05, (n, 3))
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    levels = np.where(rng.random(n) < 0.33, rng.integers(1, 4, n), 0)
    poses = np.zeros((n, 12))
    for k in np.flatnonzero(levels):
        h = se3_exp(np.r_[rng.normal(size=3), 0, 0, 0])
        poses[k, :9] = h.rotation.ravel()
        poses[k, 9:] = pts[k] + rng.normal(size=3) * 0.01
    return DatasetRecord(pts, nrm, levels, poses, rng.random((n, 4)), seed=seed)


# -- features -----------------------------------------------------------------

def test_feature_shape_and_plane_eigenvalue():
    f = extract_features(plane_cloud(), table_height=0.0)
    assert f.shape == (200, FEATURE_DIM)
    assert np.abs(f[:, 4]).max() < 1e-9           # smallest covariance eigenvalue on a plane
    assert np.all(f[:, 5] > 0)
    np.testing.assert_array_equal(f[:, :3], np.tile([0.0, 0, 1], (200, 1)))


def test_feature_height_shift():
    a = extract_features(plane_cloud(z=0.0), 0.0)
    b = extract_features(plane_cloud(z=0.1), 0.0)
    np.testing.assert_allclose(b[:, 3] - a[:, 3], 0.1, atol=1e-12)
    np.testing.assert_allclose(b[:, 4:], a[:, 4:], atol=1e-12)


def test_global_descriptor_permutation_invariant():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(120, 3)) * 0.05
    nrm = np.tile([0.0, 0, 1], (120, 1))
    perm = rng.permutation(120)
    a = extract_features(PointCloud(pts, nrm), 0.0)
    b = extract_features(PointCloud(pts[perm], nrm[perm]), 0.0)
    g = slice(FEATURE_DIM - GLOBAL_DIM, FEATURE_DIM)
    # the centroid is a float sum, so only summation order separates the two
    np.testing.assert_allclose(a[0, g], b[0, g], rtol=0, atol=1e-15)
    np.testing.assert_allclose(a[perm], b, atol=1e-12)


def test_features_need_points_and_normals():
    with pytest.raises(ValueError):
        extract_features(PointCloud(np.zeros((3, 3)), np.zeros((3, 3))), 0.0)
    with pytest.raises(ValueError):
        extract_features(PointCloud(np.random.default_rng(0).normal(size=(10, 3))), 0.0)


# -- network ------------------------------------------------------------------

def test_zero_weights_give_identity_at_point():
    params = RegressorParams.init(4, zero=True)
    rng = np.random.default_rng(2)
    f, pts = rng.normal(size=(10, FEATURE_DIM)), rng.normal(size=(10, 3))
    sixd, off, logits = forward(params, f)
    assert not sixd.any() and not off.any() and not logits.any()
    R, t, p = decode(params, f, pts)
    np.testing.assert_array_equal(R, np.tile(np.eye(3), (10, 1, 1)))
    np.testing.assert_array_equal(t, pts)
    np.testing.assert_allclose(p, 0.25)


def test_per_point_independence():
    params = RegressorParams.init(4, seed=3)
    rng = np.random.default_rng(3)
    f = rng.normal(size=(20, FEATURE_DIM))
    full = np.hstack(forward(params, f))
    g = f.copy()
    g[7] += 1.0
    changed = np.hstack(forward(params, g))
    rows = np.flatnonzero(np.any(changed != full, axis=1))
    assert rows.tolist() == [7]
    np.testing.assert_allclose(np.hstack(forward(params, f[5:9])), full[5:9], atol=1e-15)


def test_parameter_gradients_match_finite_differences():
    rec = tiny_record()
    feats = record_features(rec)
    params = RegressorParams.init(4, hidden=(8, 8), seed=4)
    cw = np.array([0.5, 1.0, 1.5, 2.0])
    args = (feats, rec.points, rec.poses, rec.levels)
    _, gW, gb = batch_loss(params, *args, class_weights=cw)
    worst = 0.0
    for k in range(len(params.weights)):
        for grads, arrays in ((gW, params.weights), (gb, params.biases)):
            base = arrays[k]

            def f(x, k=k, arrays=arrays, base=base):
                arrays[k] = x
                try:
                    return batch_loss(params, *args, class_weights=cw)[0]
                finally:
                    arrays[k] = base
            worst = max(worst, relative_error(grads[k], finite_difference(f, base.copy(), 1e-6)))
    assert worst < 1e-4


def test_mean_reduction_gradients_scale():
    rec = tiny_record(1)
    feats = record_features(rec)
    params = RegressorParams.init(4, hidden=(8, 8), seed=5)
    ls, gWs, _ = batch_loss(params, feats, rec.points, rec.poses, rec.levels, reduction="sum")
    lm, gWm, _ = batch_loss(params, feats, rec.points, rec.poses, rec.levels, reduction="mean")
    assert lm == pytest.approx(ls / len(rec), rel=1e-12)
    np.testing.assert_allclose(gWm[0], gWs[0] / len(rec), rtol=1e-10, atol=1e-15)


# -- training -----------------------------------------------------------------

def test_zero_learning_rate_leaves_parameters_unchanged():
    rec = tiny_record(2)
    init = RegressorParams.init(4, hidden=(8, 8), seed=6)
    res = train([rec], TrainConfig(learning_rate=0.0, epochs=3, hidden=(8, 8)), params=init)
    for a, b in zip(res.params.arrays(), init.arrays()):
        assert np.array_equal(a, b)
    assert len(res.curve) == 3 and len({c[2] for c in res.curve}) == 1


def test_training_deterministic_per_seed():
    recs = [tiny_record(s) for s in range(3)]
    cfg = TrainConfig(learning_rate=0.01, epochs=4, batch_size=16, reduction="mean", hidden=(8, 8), seed=7)
    a, b = train(recs, cfg), train(recs, cfg)
    assert a.curve == b.curve
    for x, y in zip(a.params.arrays(), b.params.arrays()):
        assert np.array_equal(x, y)
    c = train(recs, TrainConfig(learning_rate=0.01, epochs=4, batch_size=16, reduction="mean",
                                hidden=(8, 8), seed=8))
    assert c.curve != a.curve


def test_learning_rate_schedule():
    cfg = TrainConfig(learning_rate=0.001, decay_every=20)
    assert [cfg.rate(e) for e in (0, 19, 20, 40)] == [0.001, 0.001, 0.0005, 0.00025]
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1.0)


def test_divergence_detected():
    rec = tiny_record(3)
    with pytest.raises(TrainingDiverged, match="loss"):
        train([rec], TrainConfig(learning_rate=1e4, epochs=50, hidden=(8, 8)))


def test_params_roundtrip(tmp_path):
    params = RegressorParams.init(4, seed=9)
    params.feature_mean = np.arange(FEATURE_DIM, dtype=float)
    save_params(params, tmp_path / "p.bin")
    back = load_params(tmp_path / "p.bin")
    assert back.levels == 4
    for a, b in zip(back.arrays(), params.arrays()):
        assert a.shape == b.shape
        np.testing.assert_array_equal(a, b.astype(np.float32).astype(float))
    save_params(back, tmp_path / "q.bin")
    assert (tmp_path / "p.bin").read_bytes() == (tmp_path / "q.bin").read_bytes()
    data = (tmp_path / "p.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(data[:-4])
    with pytest.raises(ValueError, match="truncated"):
        load_params(tmp_path / "t.bin")


def test_predict_scene_one_proposal_per_point():
    cloud = plane_cloud(64, seed=4)
    props = predict_scene(RegressorParams.init(4, seed=10), cloud)
    assert len(props) == 64 and [p.index for p in props] == list(range(64))
    for p in props:
        R = p.frame.pose.rotation
        assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9 and 0.0 <= p.score <= 1.0


# -- overfit fixture ------------------------------------------------------------

@pytest.mark.parametrize("seed", range(8))
def test_overfit_single_scene(seed):
    rec, cw = overfit_record(seed)
    assert 400 <= len(rec) <= 600 and rec.viable.sum() == len(rec) // 8
    t0 = time.perf_counter()
    res = train([rec], OVERFIT_TRAIN, cw)
    elapsed = time.perf_counter() - t0
    loss = np.array([c[2] for c in res.curve])
    assert len(loss) == 200
    assert loss[-1] <= 0.5 * loss[0]
    assert np.all(loss[50:] <= loss[:-50])
    assert mean_rotation_error_deg(res.params, rec) < 30.0
    assert elapsed < 60.0
    again = train([rec], OVERFIT_TRAIN, cw)
    assert again.curve == res.curve
