"""Fixture builders and brute-force oracles shared by the test modules."""
import math
from functools import lru_cache

import numpy as np

from graspsynth.annotation import level_frequencies, sample_training_points
from graspsynth.config import CameraConfig, PipelineConfig, SceneConfig
from graspsynth.geometry import PointCloud, RigidTransform, se3_exp
from graspsynth.gripper import GraspFrame
from graspsynth.losses import (FLIP_X, LossWeights, finite_difference, inverse_frequency_weights,
                               relative_error, total_loss)
from graspsynth.pipeline import run_scene
from graspsynth.regressor import Proposal, TrainConfig

SMALL = PipelineConfig(scene=SceneConfig(samples_per_m2=30000), camera=CameraConfig(width=160, height=120))
OVERFIT_TRAIN = TrainConfig(learning_rate=0.02, epochs=200, decay_every=50, reduction="mean")


@lru_cache(maxsize=None)
def small_scene(n_objects=3, seed=0):
    return run_scene(SMALL, n_objects, seed)


@lru_cache(maxsize=None)
def overfit_record(seed=0, n_points=512):
    """One sampled record of ~512 points from a three-object scene, plus class weights."""
    rec = sample_training_points(small_scene(3, seed).annotated, n_points, 0)
    return rec, inverse_frequency_weights(level_frequencies([rec], 4))


def mean_rotation_error_deg(params, rec):
    from graspsynth.losses import symmetric_geodesic
    from graspsynth.regressor import decode, record_features
    R, _, _ = decode(params, record_features(rec), rec.points.astype(float))
    v = rec.viable
    return float(np.degrees(symmetric_geodesic(R[v], rec.poses[v, :9].astype(float).reshape(-1, 3, 3))).mean())


TINY_INI = str(__import__("pathlib").Path(__file__).parents[1] / "configs" / "tiny.ini")
STAGES = ("render", "annotate", "train", "select", "eval", "export")


def run_pipeline(out, scenes=2, objects=4, seed=3, config=TINY_INI):
    """Every CLI stage in order; returns the exit codes."""
    from graspsynth.cli import main
    codes = [main(["synth", "--config", config, "--out", str(out), "--scenes", str(scenes),
                   "--objects", str(objects), "--seed", str(seed)])]
    codes += [main([s, "--out", str(out)]) for s in STAGES]
    return codes


def tree_digest(root):
    """Relative path -> sha256 of every file below ``root``."""
    import hashlib
    from pathlib import Path
    root = Path(root)
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


# -- contact-model oracles -----------------------------------------------------

def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def random_frame(rng, spread=0.05):
    xi = np.r_[rng.normal(size=3) * 2.0, rng.normal(size=3) * spread]
    return GraspFrame(se3_exp(xi))


def box_cloud(center, half, step):
    """Grid samples on the six faces of an axis-aligned box with outward normals."""
    pts, nrm = [], []
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        gu = np.arange(-half[u], half[u] + step / 2, step)
        gv = np.arange(-half[v], half[v] + step / 2, step)
        U, V = np.meshgrid(gu, gv)
        for sign in (-1.0, 1.0):
            p = np.zeros((U.size, 3))
            p[:, u], p[:, v], p[:, axis] = U.ravel(), V.ravel(), sign * half[axis]
            n = np.zeros_like(p)
            n[:, axis] = sign
            pts.append(p + center)
            nrm.append(n)
    return PointCloud(np.vstack(pts), np.vstack(nrm))


def down_frame(origin):
    # closing along world x, approach straight down
    R = np.column_stack([[1.0, 0, 0], [0, -1.0, 0], [0, 0, -1.0]])
    return GraspFrame(RigidTransform(R, np.asarray(origin, dtype=float)))


# -- oracles ------------------------------------------------------------------

def antipodal_oracle(pi, ni, pj, nj):
    line = pi - pj
    a1 = math.acos(np.clip(np.dot(ni, line) / np.linalg.norm(line), -1, 1))
    a2 = math.acos(np.clip(np.dot(nj, -line) / np.linalg.norm(line), -1, 1))
    c1, c2 = math.cos(a1), math.cos(a2)
    return 0.0 if c1 < 0 or c2 < 0 else c1 * c2


def in_box(q, lo, hi):
    return all(lo[k] <= q[k] <= hi[k] for k in range(3))


def closing_oracle(points, frame, g):
    R, t = frame.pose.rotation, frame.pose.translation
    lo = (-g.max_opening / 2, -g.finger_thickness / 2, -g.finger_length)
    hi = (g.max_opening / 2, g.finger_thickness / 2, 0.0)
    return [k for k, p in enumerate(points) if in_box(R.T @ (p - t), lo, hi)]


def collision_oracle(points, frame, g):
    R, t = frame.pose.rotation, frame.pose.translation
    w, fw, th, L, P = g.max_opening / 2, g.finger_width, g.finger_thickness / 2, g.finger_length, g.palm_depth
    boxes = [((w, -th, -L), (w + fw, th, 0.0)),
             ((-w - fw, -th, -L), (-w, th, 0.0)),
             ((-w - fw, -th, -L - P), (w + fw, th, -L))]
    for p in points:
        q = R.T @ (p - t)
        if any(in_box(q, lo, hi) for lo, hi in boxes):
            return True
    return False


# -- loss fixtures ----------------------------------------------------------------

def random_rotation(rng):
    return se3_exp(np.r_[rng.normal(size=3) * 2, 0, 0, 0]).rotation


def random_batch(rng, n=12, L=4, viable_frac=0.5):
    sixd = rng.normal(size=(n, 6))
    offsets = rng.normal(size=(n, 3)) * 0.02
    logits = rng.normal(size=(n, L))
    levels = np.where(rng.random(n) < viable_frac, rng.integers(1, L, n), 0)
    poses = np.zeros((n, 12))
    for k in range(n):
        poses[k, :9] = random_rotation(rng).ravel()
        poses[k, 9:] = rng.normal(size=3) * 0.02
    return sixd, offsets, logits, poses, levels


def check_gradients(seed):
    rng = np.random.default_rng(seed)
    sixd, off, logits, poses, levels = random_batch(rng, n=int(rng.integers(2, 10)))
    cw = rng.uniform(0.2, 2.0, 4)
    W = LossWeights(5.0, 20.0, 1.0)
    _, g = total_loss(sixd, off, logits, poses, levels, W, cw)
    worst = 0.0
    for name, x in (("sixd", sixd), ("offsets", off), ("logits", logits)):
        def f(v, name=name):
            args = {"sixd": sixd, "offsets": off, "logits": logits, name: v}
            return total_loss(args["sixd"], args["offsets"], args["logits"], poses, levels, W, cw)[0]
        worst = max(worst, relative_error(g[name], finite_difference(f, x, 1e-5)))
    return worst


# -- selection oracles -----------------------------------------------------------

def random_proposals(rng, n, spread=0.04, scores=None):
    out = []
    for i in range(n):
        h = se3_exp(np.r_[rng.normal(size=3), rng.uniform(-spread, spread, 3)])
        s = float(scores[i]) if scores is not None else float(rng.random())
        out.append(Proposal(GraspFrame(h), s, i))
    return out


def greedy_oracle(proposals, cfg, collision=None):
    """Plain replay: repeatedly take the best remaining proposal, drop its neighbourhood."""
    remaining = list(range(len(proposals)))
    kept = []
    while remaining and len(kept) < cfg.target_count:
        best = remaining[0]
        for i in remaining[1:]:
            if proposals[i].score > proposals[best].score:
                best = i
        remaining.remove(best)
        p = proposals[best]
        if collision is not None and collision(p.frame):
            continue
        ok = True
        for k in kept:
            Ra, Rb = p.frame.pose.rotation, proposals[k].frame.pose.rotation
            ang = min(math.acos(max(-1.0, min(1.0, (np.trace(Ra.T @ Rb) - 1) / 2))),
                      math.acos(max(-1.0, min(1.0, (np.trace(Ra.T @ Rb @ FLIP_X) - 1) / 2))))
            d = math.dist(p.frame.pose.translation, proposals[k].frame.pose.translation)
            if d + cfg.rot_weight * ang <= cfg.epsilon:
                ok = False
                break
        if ok:
            kept.append(best)
    return kept
