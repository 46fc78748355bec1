"""Recall by approach angle over generated scenes; writes a JSON report.

    python3 scripts/run_recall.py --scenes 50 --min-objects 11 --max-objects 15 --out recall.json
"""
import argparse
import json
import time

from graspsynth.config import PipelineConfig, SceneConfig, derive_seed
from graspsynth.evaluation import recall_by_angle
from graspsynth.pipeline import grasp_scene


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenes", type=int, default=50)
    ap.add_argument("--min-objects", type=int, default=11)
    ap.add_argument("--max-objects", type=int, default=15)
    ap.add_argument("--density", type=float, default=40000.0, help="complete-cloud samples per m^2")
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--out", default="recall.json")
    args = ap.parse_args()
    cfg = PipelineConfig(scene=SceneConfig(samples_per_m2=args.density))
    span = args.max_objects - args.min_objects + 1
    t0 = time.perf_counter()
    scenes = []
    for k in range(args.scenes):
        scenes.append(grasp_scene(cfg, args.min_objects + k % span, derive_seed(args.seed, k)))
        print(f"scene {k + 1}/{args.scenes}: {len(scenes[-1].grasps)} grasps", flush=True)
    report = recall_by_angle(scenes, threshold=cfg.annotation.boundaries[0])
    report["seconds"] = time.perf_counter() - t0
    with open(args.out, "w") as fh:
        json.dump(report, fh, indent=2)
    for cut, v in zip(report["cutoffs_deg"], report["overall"]["cumulative"]):
        print(f"<= {cut:4.0f} deg  recall {v:.3f}")


if __name__ == "__main__":
    main()
