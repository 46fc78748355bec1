"""Command-line driver. Every stage reads and writes one run directory.

    graspsynth synth    --out RUN --scenes 3 --objects 5 --seed 7
    graspsynth render   --out RUN
    graspsynth annotate --out RUN
    graspsynth train    --out RUN
    graspsynth select   --out RUN
    graspsynth eval     --out RUN --top-k 10
    graspsynth export   --out RUN
    graspsynth replay   --from RUN --out RUN2

``RUN/manifest.json`` records the tool version, the config (and its hash) and
the arguments of every stage, so ``replay`` regenerates identical files.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .annotation import (AnnotatedScene, ScoreQuantizer, annotate_scene, level_frequencies,
                         read_dataset, sample_training_points, write_dataset)
from .config import ConfigError, PipelineConfig, derive_seed, load_config
from .evaluation import evaluate_proposals, recall_by_angle
from .geometry import PointCloud, RigidTransform, TriangleMesh
from .gripper import GraspCandidate, GraspFrame, GraspScores, collision_check
from .io import read_jsonl, read_ply, write_jsonl, write_obj, write_ply
from .losses import inverse_frequency_weights
from .pipeline import (camera_for, generate_grasps, library_for, make_scene, prepare_cloud,
                       view_cloud)
from .regressor import load_params, predict_scene, save_params, train, write_curve
from .scene import DepthCamera, Scene, assemble_scene_cloud, table_mesh
from .selection import GraspSampler, nms_select

log = logging.getLogger("graspsynth")


class StageError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Run directory helpers
# --------------------------------------------------------------------------

class Run:
    def __init__(self, root):
        self.root = Path(root)
        self.scenes_dir = self.root / "scenes"

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    def manifest(self) -> dict:
        if not self.manifest_path.exists():
            raise StageError(f"{self.root}: no manifest.json (run 'synth' first)")
        return json.loads(self.manifest_path.read_text())

    def save_manifest(self, m: dict) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path.write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")

    def record_stage(self, name: str, args: dict, cfg: PipelineConfig) -> None:
        m = self.manifest() if self.manifest_path.exists() else {
            "tool": "graspsynth", "version": __version__, "stages": []}
        m["stages"] = [s for s in m["stages"] if s["name"] != name]
        m["stages"].append({"name": name, "args": args, "config": cfg.to_dict(),
                            "config_hash": cfg.digest()})
        m["config"] = cfg.to_dict()
        m["config_hash"] = cfg.digest()
        self.save_manifest(m)

    def config(self, override: str | None) -> PipelineConfig:
        if override is not None:
            return load_config(override)
        return PipelineConfig.from_dict(self.manifest()["config"])

    def scene_files(self) -> list[Path]:
        files = sorted(self.scenes_dir.glob("scene_???.json"))
        if not files:
            raise StageError(f"{self.scenes_dir}: no scene manifests")
        return files

    def path(self, scene_json: Path, suffix: str) -> Path:
        return scene_json.with_name(scene_json.stem + suffix)

    @staticmethod
    def require(path: Path) -> Path:
        if not path.exists():
            raise StageError(f"missing input {path}")
        return path


def _load_scene(run: Run, sj: Path, cfg: PipelineConfig) -> tuple[dict, Scene]:
    d = json.loads(sj.read_text())
    return d, Scene.from_dict(d["scene"], library_for(cfg))


def _load_grasps(path: Path) -> list[GraspCandidate]:
    return [GraspCandidate.from_record(r) for r in read_jsonl(path)]


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------

def stage_synth(run: Run, cfg: PipelineConfig, seed: int, scenes: int, objects: int) -> None:
    if scenes < 1:
        raise StageError("--scenes must be >= 1")
    run.scenes_dir.mkdir(parents=True, exist_ok=True)
    lib = library_for(cfg)
    camera = camera_for(cfg)
    for k in range(scenes):
        s = derive_seed(seed, k)
        seeds = {"scene": derive_seed(s, 0), "cloud": derive_seed(s, 1),
                 "grasps": derive_seed(s, 2), "noise": derive_seed(s, 3), "sample": derive_seed(s, 4)}
        scene = make_scene(cfg, objects, seeds["scene"], lib)
        complete = assemble_scene_cloud(scene, cfg.scene.samples_per_m2, seeds["cloud"])
        sj = run.scenes_dir / f"scene_{k:03d}.json"
        sj.write_text(json.dumps({"scene": scene.to_dict(), "camera": camera.to_dict(),
                                  "sigma": cfg.camera.sigma, "seeds": seeds}, indent=2, sort_keys=True))
        write_ply(run.path(sj, "_complete.ply"), complete)
        log.info("scene %d: %d objects, %d complete points", k, len(scene.objects), len(complete))


def stage_render(run: Run, cfg: PipelineConfig) -> None:
    for sj in run.scene_files():
        d, scene = _load_scene(run, sj, cfg)
        camera = DepthCamera.from_dict(d["camera"])
        cloud = view_cloud(scene, camera, cfg, d["seeds"]["noise"])
        write_ply(run.path(sj, "_view.ply"), cloud)


def stage_annotate(run: Run, cfg: PipelineConfig) -> None:
    q = ScoreQuantizer(cfg.annotation.boundaries)
    records, manifests = [], []
    for sj in run.scene_files():
        d, scene = _load_scene(run, sj, cfg)
        camera = DepthCamera.from_dict(d["camera"])
        contact = prepare_cloud(read_ply(run.require(run.path(sj, "_complete.ply"))), cfg)
        write_ply(run.path(sj, "_contact.ply"), contact)
        grasps = generate_grasps(contact, cfg, d["seeds"]["grasps"])
        write_jsonl(run.path(sj, "_grasps.jsonl"), [g.to_record() for g in grasps])
        view = prepare_cloud(read_ply(run.require(run.path(sj, "_view.ply"))), cfg,
                             viewpoint=camera.origin)
        write_ply(run.path(sj, "_input.ply"), view)
        ann = annotate_scene(view, grasps, cfg.gripper, q, scene.table_height,
                             {"objects": scene.object_ids()})
        np.savez(run.path(sj, "_annotation.npz"), grasp_index=ann.grasp_index, levels=ann.levels)
        records.append(sample_training_points(ann, cfg.annotation.points_per_record, d["seeds"]["sample"]))
        manifests.append(sj.name)
        log.info("%s: %d grasps, %d viable view points", sj.stem, len(grasps), int(ann.viable.sum()))
    write_dataset(records, run.root / "dataset.bin", q.levels,
                  {"scenes": manifests, "boundaries": list(q.boundaries)})


def stage_train(run: Run, cfg: PipelineConfig) -> None:
    records = read_dataset(run.require(run.root / "dataset.bin"))
    L = len(cfg.annotation.boundaries) + 1
    cw = inverse_frequency_weights(level_frequencies(records, L))
    reduction = cfg.train.reduction
    result = train(records, cfg.train, class_weights=cw, levels=L)
    save_params(result.params, run.root / "params.bin")
    write_curve(result.curve, run.root / "loss_curve.csv")
    log.info("trained %d steps (%s), final loss %.4g", len(result.curve), reduction, result.curve[-1][2])


def _marker_segments(frames, gripper):
    g = gripper
    w, L, p = g.max_opening / 2, g.finger_length, g.palm_depth
    local = np.array([[-w, 0, 0], [-w, 0, -L], [w, 0, 0], [w, 0, -L], [0, 0, -L], [0, 0, -L - p]])
    pts, segs = [], []
    for k, f in enumerate(frames):
        base = 6 * k
        pts.append(f.pose.apply(local))
        segs += [(base, base + 1), (base + 2, base + 3), (base + 1, base + 3), (base + 4, base + 5)]
    pts = np.vstack(pts) if pts else np.zeros((0, 3))
    return PointCloud(pts), np.array(segs, dtype=np.int64).reshape(-1, 2)


def stage_select(run: Run, cfg: PipelineConfig, seed: int) -> None:
    params = load_params(run.require(run.root / "params.bin"))
    for k, sj in enumerate(run.scene_files()):
        d, scene = _load_scene(run, sj, cfg)
        cloud = read_ply(run.require(run.path(sj, "_input.ply")))
        proposals = predict_scene(params, cloud, scene.table_height)
        exe = nms_select(proposals, cfg.selection,
                         collision=lambda f: collision_check(cloud, f, cfg.gripper))
        chosen = GraspSampler(exe, derive_seed(seed, k)).draw_index()
        write_jsonl(run.path(sj, "_selected.jsonl"),
                    [{"pose": p.frame.pose.to_row12(), "score": p.score, "point": p.index,
                      "p": float(prob), "chosen": i == chosen}
                     for i, (p, prob) in enumerate(zip(exe.grasps, exe.probabilities))])
        markers, segs = _marker_segments([p.frame for p in exe.grasps], cfg.gripper)
        write_ply(run.path(sj, "_selected_markers.ply"), markers, segs)


def stage_eval(run: Run, cfg: PipelineConfig, top_k: int) -> dict:
    if top_k < 1:
        raise StageError("--top-k must be >= 1")
    rows, annotated = [], []
    for sj in run.scene_files():
        d, scene = _load_scene(run, sj, cfg)
        contact = read_ply(run.require(run.path(sj, "_contact.ply")))
        grasps = _load_grasps(run.require(run.path(sj, "_grasps.jsonl")))
        view = read_ply(run.require(run.path(sj, "_input.ply")))
        a = np.load(run.require(run.path(sj, "_annotation.npz")))
        annotated.append(AnnotatedScene(view, grasps, a["grasp_index"], a["levels"],
                                        {"objects": scene.object_ids()}, scene.table_height))
        sel = read_jsonl(run.require(run.path(sj, "_selected.jsonl")))
        sel = sorted(sel, key=lambda r: -r["score"])[:top_k]
        frames = [GraspCandidate(GraspFrame(RigidTransform.from_row12(r["pose"])),
                                 GraspScores(0.0, 0.0, True, 0.0)) for r in sel]
        m = evaluate_proposals(frames, contact, cfg.gripper)
        rows.append({"scene": sj.stem, "objects": len(scene.objects), "evaluated": m.count,
                     "mean_antipodal": m.mean_antipodal,
                     "collision_free": m.collision_free_fraction})
    recall = recall_by_angle(annotated, threshold=cfg.annotation.boundaries[0])
    report = {
        "top_k": top_k,
        "mean_antipodal": float(np.mean([r["mean_antipodal"] for r in rows])),
        "collision_free_fraction": float(np.mean([r["collision_free"] for r in rows])),
        "scenes": rows,
        "recall": recall,
    }
    (run.root / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    with open(run.root / "metrics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    with open(run.root / "recall.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["band", "cutoff_deg", "cumulative", "per_bin", "objects"])
        tables = {**recall["bands"], "overall": recall["overall"]}
        for band, t in tables.items():
            for c, cum, pb in zip(recall["cutoffs_deg"], t["cumulative"], t["per_bin"]):
                w.writerow([band, c, cum, pb, t["objects"]])
    return report


def stage_export(run: Run, cfg: PipelineConfig) -> None:
    out = run.root / "export"
    out.mkdir(exist_ok=True)
    for sj in run.scene_files():
        _, scene = _load_scene(run, sj, cfg)
        parts = [o.model.mesh.transformed(o.pose) for o in scene.objects]
        parts.append(table_mesh(scene.table_size, scene.table_height))
        verts, tris, off = [], [], 0
        for m in parts:
            verts.append(m.vertices)
            tris.append(m.triangles + off)
            off += len(m.vertices)
        write_obj(out / f"{sj.stem}.obj", TriangleMesh(np.vstack(verts), np.vstack(tris)))
        gpath = run.path(sj, "_grasps.jsonl")
        if gpath.exists():
            grasps = [g for g in _load_grasps(gpath) if g.scores.robust > 0]
            grasps.sort(key=lambda g: -g.scores.robust)
            markers, segs = _marker_segments([g.frame for g in grasps[:50]], cfg.gripper)
            write_ply(out / f"{sj.stem}_grasp_markers.ply", markers, segs)


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="graspsynth", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=False):
        sp.add_argument("--config", default=None, help="INI config file")
        sp.add_argument("--out", required=True, help="run directory")
        if seed:
            sp.add_argument("--seed", type=int, default=0)
        return sp

    s = common(sub.add_parser("synth", help="settle scenes and sample complete clouds"), seed=True)
    s.add_argument("--scenes", type=int, default=1)
    s.add_argument("--objects", type=int, default=5)
    common(sub.add_parser("render", help="render noisy view clouds"))
    common(sub.add_parser("annotate", help="score grasps, annotate views, write dataset"))
    common(sub.add_parser("train", help="fit the per-point regressor"))
    common(sub.add_parser("select", help="predict, suppress and sample grasps"), seed=True)
    e = common(sub.add_parser("eval", help="proposal metrics and recall tables"))
    e.add_argument("--top-k", type=int, default=10)
    common(sub.add_parser("export", help="write scene OBJ and grasp marker PLY files"))
    r = sub.add_parser("replay", help="re-run every recorded stage into a new directory")
    r.add_argument("--from", dest="source", required=True)
    r.add_argument("--out", required=True)
    return p


def run_stage(name: str, out: str, args: dict, cfg: PipelineConfig) -> None:
    run = Run(out)
    if name == "synth":
        run.root.mkdir(parents=True, exist_ok=True)
        stage_synth(run, cfg, args["seed"], args["scenes"], args["objects"])
    elif name == "render":
        stage_render(run, cfg)
    elif name == "annotate":
        stage_annotate(run, cfg)
    elif name == "train":
        stage_train(run, cfg)
    elif name == "select":
        stage_select(run, cfg, args["seed"])
    elif name == "eval":
        stage_eval(run, cfg, args["top_k"])
    elif name == "export":
        stage_export(run, cfg)
    else:
        raise StageError(f"unknown stage {name}")
    run.record_stage(name, args, cfg)


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if ns.command == "replay":
            stages = Run(ns.source).manifest()["stages"]
            for st in stages:
                run_stage(st["name"], ns.out, st["args"], PipelineConfig.from_dict(st["config"]))
            return 0
        args = {k: v for k, v in vars(ns).items() if k not in ("command", "config", "out", "verbose")}
        if ns.command == "synth":
            cfg = load_config(ns.config)
        else:
            cfg = Run(ns.out).config(ns.config)
        run_stage(ns.command, ns.out, args, cfg)
    except (ConfigError, StageError, FileNotFoundError, KeyError, ValueError, RuntimeError) as e:
        print(f"graspsynth {ns.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
