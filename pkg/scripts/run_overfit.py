"""Train the toy regressor on one small annotated scene and report loss and rotation error."""
import argparse
import csv

import numpy as np

from graspsynth.annotation import level_frequencies, sample_training_points
from graspsynth.config import CameraConfig, PipelineConfig, SceneConfig
from graspsynth.losses import inverse_frequency_weights, symmetric_geodesic
from graspsynth.pipeline import run_scene
from graspsynth.regressor import TrainConfig, decode, record_features, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0, help="scene seed")
    ap.add_argument("--objects", type=int, default=3)
    ap.add_argument("--points", type=int, default=512)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--lr", type=float, default=0.02)
    ap.add_argument("--decay-every", type=int, default=50)
    ap.add_argument("--curve", default=None, help="optional CSV path for the loss curve")
    args = ap.parse_args()
    cfg = PipelineConfig(scene=SceneConfig(samples_per_m2=30000), camera=CameraConfig(width=160, height=120))
    ann = run_scene(cfg, args.objects, args.seed).annotated
    rec = sample_training_points(ann, args.points, 0)
    cw = inverse_frequency_weights(level_frequencies([rec], 4))
    tc = TrainConfig(learning_rate=args.lr, epochs=args.steps, decay_every=args.decay_every, reduction="mean")
    res = train([rec], tc, cw)
    R, _, _ = decode(res.params, record_features(rec), rec.points.astype(float))
    v = rec.viable
    err = np.degrees(symmetric_geodesic(R[v], rec.poses[v, :9].astype(float).reshape(-1, 3, 3)))
    first, last = res.curve[0][2], res.curve[-1][2]
    print(f"{len(rec)} points ({v.sum()} viable), loss {first:.4f} -> {last:.4f} ({last / first:.2f}x), "
          f"mean rotation error {err.mean():.1f} deg")
    if args.curve:
        with open(args.curve, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "lr", "loss"])
            w.writerows(res.curve)


if __name__ == "__main__":
    main()
