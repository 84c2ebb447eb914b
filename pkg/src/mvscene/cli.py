"""Command line entry point: synth | supervise | train | infer | eval.

Every command reads one JSON config file (unknown keys are rejected),
writes its outputs plus a manifest into the target directory, and skips
work whose manifest already matches unless --force is given. Wall-clock
timings go to a separate timing.json so artifacts stay byte-identical
across reruns.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import fileio, __version__
from .geometry import Camera, CorrespondenceSet, DepthMap
from .inference import cluster_instances, query
from .losses import LossWeights
from .model import (HeadParams, TrainConfig, TrainDivergedError, TrainingScene,
                    load_checkpoint, save_checkpoint, train)
from .pipeline import (InferConfig, LiftingConfig, TeacherConfig, make_scene,
                       make_supervision, make_training_scene, run_eval,
                       run_inference)
from .synth import Articulation, FrameBundle, SceneGT, SynthConfig


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


def _build(cls, data: dict, where: str):
    """Construct a config dataclass, rejecting unknown or missing fields."""
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}")
    known = {"n_scenes", "seed", "synth", "teachers", "lifting", "train",
             "infer", "weights"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{path}: unknown section(s) {sorted(unknown)}")
    cfg = {
        "n_scenes": int(raw.get("n_scenes", 1)),
        "seed": int(raw.get("seed", 0)),
        "synth": _build(SynthConfig, raw.get("synth", {}), "synth"),
        "teachers": _build(TeacherConfig, raw.get("teachers", {}), "teachers"),
        "lifting": _build(LiftingConfig, raw.get("lifting", {}), "lifting"),
        "infer": _build(InferConfig, raw.get("infer", {}), "infer"),
    }
    tr = dict(raw.get("train", {}))
    weights = _build(LossWeights, raw.get("weights", {}), "weights")
    if "weights" in tr:
        raise ConfigError("train.weights moved: use the top-level 'weights' section")
    cfg["train"] = _build(TrainConfig, {**tr, "weights": weights}, "train")
    cfg["raw"] = raw
    return cfg


def _manifest(path: Path, command: str, config_raw: dict, seeds, inputs, outputs):
    return {
        "command": command,
        "config": config_raw,
        "seeds": seeds,
        "versions": {"mvscene": __version__, "numpy": np.__version__},
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
    }


def _write_manifest(directory: Path, name: str, manifest: dict, timings: dict):
    fileio.save_json(directory / f"manifest_{name}.json", manifest)
    Path(directory / f"timing_{name}.json").write_text(
        json.dumps(timings, sort_keys=True) + "\n")


def _fresh(directory: Path, name: str, manifest: dict, force: bool) -> bool:
    """True when the stage's previous run is present and identical."""
    mpath = directory / f"manifest_{name}.json"
    if force or not mpath.exists():
        return False
    try:
        old = fileio.load_json(mpath)
    except json.JSONDecodeError:
        return False
    if old != manifest:
        return False
    return all(Path(p).exists() for p in old.get("outputs", []))


# ---------------------------------------------------------------------------
# scene directory format

def _scene_dir(out: Path, index: int) -> Path:
    return out / f"scene_{index:03d}"


def write_scene(d: Path, scene: SceneGT, cameras, frames: list[FrameBundle]):
    d.mkdir(parents=True, exist_ok=True)
    fileio.save_cameras(d / "cameras.json", cameras)
    fileio.write_ply(d / "scene.ply", scene.points,
                     labels={"class_id": scene.class_id.astype(np.uint32),
                             "instance_id": scene.instance_id.astype(np.uint32)})
    tensors = {
        "points": scene.points,
        "class_id": scene.class_id,
        "instance_id": scene.instance_id,
        "room_bounds": scene.room_bounds,
        "boxes": scene.boxes,
        "artic_kind": np.array([a.kind for a in scene.articulations], dtype=np.int32),
        "artic_axis": np.stack([a.axis for a in scene.articulations]),
        "artic_origin": np.stack([a.origin for a in scene.articulations]),
    }
    for i, fr in enumerate(frames):
        p = f"frame{i:03d}"
        tensors[f"{p}/depth"] = fr.depth.values
        tensors[f"{p}/class"] = fr.class_map
        tensors[f"{p}/instance"] = fr.instance_map
        tensors[f"{p}/exist"] = fr.artic_exist
        tensors[f"{p}/motion"] = fr.artic_vec
        tensors[f"{p}/points"] = fr.point_map.astype(np.float64)
        tensors[f"{p}/normals"] = fr.normal_map.astype(np.float64)
        tensors[f"{p}/owner"] = fr.owner
        tensors[f"{p}/backbone"] = fr.backbone
    fileio.write_tensors(d / "gt.bin", tensors)


def read_scene(d: Path):
    d = Path(d)
    for name in ("cameras.json", "gt.bin"):
        if not (d / name).exists():
            raise DataError(f"missing {d / name}")
    cameras = fileio.load_cameras(d / "cameras.json")
    t = fileio.read_tensors(d / "gt.bin")
    arts = [Articulation(int(k), ax, og) for k, ax, og in
            zip(t["artic_kind"], t["artic_axis"], t["artic_origin"])]
    scene = SceneGT(points=t["points"], class_id=t["class_id"],
                    instance_id=t["instance_id"], articulations=arts,
                    room_bounds=t["room_bounds"], boxes=t["boxes"])
    frames = []
    for i, cam in enumerate(cameras):
        p = f"frame{i:03d}"
        frames.append(FrameBundle(
            camera=cam,
            depth=DepthMap(width=cam.width, height=cam.height, values=t[f"{p}/depth"]),
            class_map=t[f"{p}/class"], instance_map=t[f"{p}/instance"],
            artic_exist=t[f"{p}/exist"], artic_vec=t[f"{p}/motion"],
            point_map=t[f"{p}/points"], normal_map=t[f"{p}/normals"],
            owner=t[f"{p}/owner"], backbone=t[f"{p}/backbone"]))
    return scene, cameras, frames


def write_supervision(d: Path, bank, labels, corr, frames):
    tensors = {
        "bank/class_vectors": bank.class_vectors,
        "bank/background": bank.background,
        "bank/concepts": bank.concept_vectors,
        "labels": labels.maps,
        "corr/queries": corr.queries,
        "corr/indptr": corr.indptr,
        "corr/view": corr.view,
        "corr/pixel_u": corr.pixel_u,
        "corr/pixel_v": corr.pixel_v,
        "corr/confidence": corr.confidence,
    }
    for i, fr in enumerate(frames):
        tensors[f"frame{i:03d}/teacher"] = fr.teacher_features
        tensors[f"frame{i:03d}/segments"] = fr.teacher_segments
    fileio.write_tensors(d / "supervision.bin", tensors)


def read_supervision(d: Path, frames):
    from .lifting import ConsistentLabels
    from .teachers import PrototypeBank
    path = Path(d) / "supervision.bin"
    if not path.exists():
        raise DataError(f"missing {path}")
    t = fileio.read_tensors(path)
    bank = PrototypeBank(class_vectors=t["bank/class_vectors"],
                         background=t["bank/background"],
                         concept_vectors=t["bank/concepts"])
    labels = ConsistentLabels(maps=t["labels"],
                              n_segments=int(t["labels"].max()) + 1)
    corr = CorrespondenceSet(queries=t["corr/queries"], indptr=t["corr/indptr"],
                             view=t["corr/view"], pixel_u=t["corr/pixel_u"],
                             pixel_v=t["corr/pixel_v"],
                             confidence=t["corr/confidence"])
    for i, fr in enumerate(frames):
        fr.teacher_features = t[f"frame{i:03d}/teacher"]
        fr.teacher_segments = t[f"frame{i:03d}/segments"]
    return bank, labels, corr


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed0 = args.seed if args.seed is not None else cfg["seed"]
    timings = {}
    outputs = []
    for i in range(cfg["n_scenes"]):
        d = _scene_dir(out, i)
        outputs += [d / "cameras.json", d / "scene.ply", d / "gt.bin"]
    manifest = _manifest(out, "synth", cfg["raw"], {"base": seed0},
                         [args.config], outputs)
    if _fresh(out, "synth", manifest, args.force):
        print("synth: up to date")
        return 0
    for i in range(cfg["n_scenes"]):
        t0 = time.time()
        scfg = SynthConfig(**{**asdict(cfg["synth"]), "seed": seed0 + i})
        scene, cameras, frames = make_scene(scfg)
        write_scene(_scene_dir(out, i), scene, cameras, frames)
        timings[f"scene_{i:03d}"] = time.time() - t0
        print(f"scene_{i:03d}: {scene.points.shape[0]} points, "
              f"{scene.n_instances} instances")
    _write_manifest(out, "synth", manifest, timings)
    return 0


def cmd_supervise(args) -> int:
    cfg = load_config(args.config)
    scene_dirs = sorted(Path(args.out).glob("scene_*"))
    if not scene_dirs:
        raise DataError(f"no scene directories under {args.out}")
    timings = {}
    outputs = [d / "supervision.bin" for d in scene_dirs]
    manifest = _manifest(Path(args.out), "supervise", cfg["raw"], {},
                         [str(d) for d in scene_dirs], outputs)
    if _fresh(Path(args.out), "supervise", manifest, args.force):
        print("supervise: up to date")
        return 0
    for d in scene_dirs:
        t0 = time.time()
        scene, cameras, frames = read_scene(d)
        meta = fileio.load_json(Path(args.out) / "manifest_synth.json")
        seed = meta["seeds"]["base"] + int(d.name.split("_")[1])
        bank, labels, corr = make_supervision(scene, cameras, frames,
                                              cfg["teachers"], cfg["lifting"],
                                              seed=seed,
                                              n_classes=cfg["synth"].n_classes)
        write_supervision(d, bank, labels, corr, frames)
        timings[d.name] = time.time() - t0
        print(f"{d.name}: {labels.n_segments} consistent instances, "
              f"{corr.n_observations} observations")
    _write_manifest(Path(args.out), "supervise", manifest, timings)
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    scene_dirs = [Path(p) for p in args.scenes]
    for d in scene_dirs:
        if not (d / "supervision.bin").exists():
            raise DataError(f"{d} has no supervision.bin (run supervise first)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tcfg = cfg["train"]
    if args.seed is not None:
        tcfg = TrainConfig(**{**asdict(tcfg), "seed": args.seed,
                              "weights": tcfg.weights})
    outputs = [out / "checkpoint.bin", out / "train_log.jsonl"]
    manifest = _manifest(out, "train", cfg["raw"], {"train": tcfg.seed},
                         [str(d) for d in scene_dirs], outputs)
    if _fresh(out, "train", manifest, args.force):
        print("train: up to date")
        return 0
    scenes = []
    for d in scene_dirs:
        scene, cameras, frames = read_scene(d)
        bank, labels, corr = read_supervision(d, frames)
        scenes.append(make_training_scene(frames, labels, corr))
    t0 = time.time()
    params, log = train(scenes, tcfg, dump_dir=out)
    with open(out / "train_log.jsonl", "w") as f:
        for rec in log:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    save_checkpoint(out / "checkpoint.bin", params)
    _write_manifest(out, "train", manifest, {"train": time.time() - t0})
    print(f"trained {tcfg.steps} steps; final loss "
          f"{log[-1]['total'] if log else float('nan'):.4f}")
    return 0


def cmd_infer(args) -> int:
    cfg = load_config(args.config)
    d = Path(args.scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    icfg = cfg["infer"]
    if args.k is not None:
        icfg = InferConfig(**{**asdict(icfg), "k": args.k})
    outputs = [out / "infer.bin", out / "fused.ply", out / "instances.json",
               out / "articulation.json"]
    outputs += [out / f"query_{q}.ply" for q in (args.query or [])]
    manifest = _manifest(out, "infer", cfg["raw"],
                         {"gt_geometry": bool(args.gt_geometry),
                          "k": icfg.k, "query": list(args.query or [])},
                         [args.checkpoint, str(d)], outputs)
    if _fresh(out, "infer", manifest, args.force):
        print("infer: up to date")
        return 0
    scene, cameras, frames = read_scene(d)
    bank, labels, corr = read_supervision(d, frames)
    params = load_checkpoint(args.checkpoint)
    if params.d_b != frames[0].backbone.shape[-1]:
        raise DataError(f"checkpoint expects backbone dim {params.d_b}, "
                        f"scene provides {frames[0].backbone.shape[-1]}")
    t0 = time.time()
    res = run_inference(params, scene, frames, bank, icfg,
                        gt_geometry=args.gt_geometry)
    cloud = res.cloud
    fileio.write_tensors(out / "infer.bin", {
        "points": cloud.points, "sem": cloud.sem, "inst_embed": cloud.inst,
        "exist": np.stack([cloud.exist_t, cloud.exist_r], axis=1),
        "v_t": cloud.v_t, "v_r": cloud.v_r,
        "source_index": cloud.source_index,
        "instance_ids": res.instances.point_ids,
        "scores": res.instances.scores,
        "class_ids": res.class_ids,
        "kinds": np.array([a.kind for a in res.articulation], dtype=np.int32),
        "gt_geometry": np.array([int(res.gt_geometry)], dtype=np.int32),
        "n_dropped": np.array([cloud.n_dropped], dtype=np.int64),
    })
    fileio.write_ply(out / "fused.ply", cloud.points,
                     labels={"instance": (res.instances.point_ids + 1).astype(np.uint32),
                             "class_id": (res.class_ids + 1).astype(np.uint32)},
                     features={"sem": cloud.sem})
    fileio.save_json(out / "instances.json", {
        "n_instances": res.instances.n_instances,
        "scores": [float(s) for s in res.instances.scores],
        "noise_points": int((res.instances.point_ids < 0).sum()),
    })
    fileio.save_json(out / "articulation.json",
                     [a.to_json() for a in res.articulation])
    for q in args.query or []:
        vec = bank.vector(int(q))
        heat = query(cloud.sem, vec / np.linalg.norm(vec))
        fileio.write_ply(out / f"query_{q}.ply", cloud.points,
                         features={"similarity": heat[:, None].astype(np.float32)})
    _write_manifest(out, "infer", manifest, {"infer": time.time() - t0})
    print(f"fused {cloud.points.shape[0]} points, "
          f"{res.instances.n_instances} instances")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    d = Path(args.scene)
    inf = Path(args.inference)
    out = inf / "eval_report.json"
    if not (inf / "infer.bin").exists():
        raise DataError(f"missing {inf / 'infer.bin'} (run infer first)")
    manifest = _manifest(inf, "eval", cfg["raw"],
                         {"gt_geometry": bool(args.gt_geometry)},
                         [str(d), str(inf)], [out])
    if _fresh(inf, "eval", manifest, args.force):
        print("eval: up to date")
        return 0
    scene, cameras, frames = read_scene(d)
    t = fileio.read_tensors(inf / "infer.bin")
    if bool(t["gt_geometry"][0]) != bool(args.gt_geometry):
        raise DataError("inference was run with a different --gt-geometry mode")
    from .inference import ArticulationEstimate, FusedCloud, InstanceResult
    from .pipeline import InferenceOutput
    cloud = FusedCloud(points=t["points"], sem=t["sem"], inst=t["inst_embed"],
                       exist_t=t["exist"][:, 0], exist_r=t["exist"][:, 1],
                       v_t=t["v_t"], v_r=t["v_r"],
                       source_index=t["source_index"],
                       n_dropped=int(t["n_dropped"][0]))
    res = InferenceOutput(
        cloud=cloud,
        instances=InstanceResult(point_ids=t["instance_ids"], scores=t["scores"]),
        class_ids=t["class_ids"],
        articulation=[ArticulationEstimate(i, int(k), np.zeros(3), 0)
                      for i, k in enumerate(t["kinds"])],
        gt_geometry=bool(t["gt_geometry"][0]))
    t0 = time.time()
    report = run_eval(res, scene, cameras, n_classes=cfg["synth"].n_classes)
    fileio.save_json(out, report.to_json())
    _write_manifest(inf, "eval", manifest, {"eval": time.time() - t0})
    print(f"miou {report.semantic.miou:.3f}  ap25 {report.ap25:.3f}  "
          f"artic-iou {report.articulation.iou:.3f}  "
          f"motion-cos {report.motion_cosine:.3f}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mvscene",
        description="procedural multi-view scene understanding pipeline")
    parser.add_argument("--threads", type=int, default=None,
                        help="numba thread cap (numeric kernels are single-threaded)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", required=True, help=out_help)
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--force", action="store_true",
                       help="re-run even if outputs are up to date")

    p = sub.add_parser("synth", help="generate scene directories")
    common(p, "output directory for scene_* subdirectories")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("supervise", help="teacher features, lifted labels, correspondences")
    common(p, "directory holding scene_* subdirectories")
    p.set_defaults(fn=cmd_supervise)

    p = sub.add_parser("train", help="train the prediction heads")
    common(p, "output directory for checkpoint and log")
    p.add_argument("--scenes", nargs="+", required=True,
                   help="scene directories with supervision")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="fuse, cluster, classify, aggregate")
    common(p, "output directory for inference artifacts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True, help="scene directory")
    p.add_argument("--k", type=int, default=None,
                   help="known instance count (partition clustering)")
    p.add_argument("--gt-geometry", action="store_true",
                   help="fuse onto the ground-truth cloud (oracle geometry)")
    p.add_argument("--query", action="append",
                   help="prototype/concept id; writes a heatmap PLY (repeatable)")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="3D metrics against ground truth")
    p.add_argument("--config", required=True)
    p.add_argument("--scene", required=True, help="scene directory")
    p.add_argument("--inference", required=True, help="inference output directory")
    p.add_argument("--gt-geometry", action="store_true",
                   help="identity transfer (must match the inference mode)")
    p.add_argument("--force", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_eval)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except TrainDivergedError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
