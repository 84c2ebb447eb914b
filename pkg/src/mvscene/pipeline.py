"""End-to-end stage wiring shared by the CLI and the test harness.

Each stage is a pure function over in-memory objects; the CLI adds the
file-system persistence around these.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import lifting, teachers
from .geometry import build_correspondences, unproject_grid
from .inference import (FusedCloud, InstanceResult, aggregate_articulation,
                        assign_classes, cluster_instances, fuse_views)
from .model import HeadParams, TrainingScene, forward
from .evaluation import (EvalReport, articulation_metrics, instance_ap,
                         motion_direction_cosine, semantic_metrics, transfer_to_gt)
from .synth import (KIND_NONE, KIND_TRANSLATION, FrameBundle, SceneGT, SynthConfig,
                    backbone_features, generate_scene, render_frame)


def _mix_seed(*parts: int) -> int:
    """Stable scalar seed from a tuple of ints."""
    return int(np.random.SeedSequence(parts).generate_state(1)[0])


@dataclass
class TeacherConfig:
    d_s: int = 32
    view_noise: float = 0.05
    max_cuts: int = 2
    boundary_noise: int = 2
    n_concepts: int = 2
    prototype_seed: int = 5


@dataclass
class LiftingConfig:
    iou_threshold: float = 0.25
    voxel_size: float = 0.05
    # outlier-filter scale; desk-scale scenes have exact depth, so the filter
    # only needs to catch genuinely stray points, not thin out glancing views
    filter_eps: float = 0.3
    filter_min_pts: int = 10
    depth_tol: float = 0.02


@dataclass
class InferConfig:
    fps_budget: int = 16384
    eps: float = 0.1
    min_pts: int = 10
    k: int | None = None
    depth_tol: float = 0.02
    uniform_confidence: bool = False


def make_scene(config: SynthConfig):
    """Generate, render and featurize one scene."""
    scene, cameras = generate_scene(config)
    frames = []
    for cam in cameras:
        fr = render_frame(scene, cam, splat_radius=config.splat_radius)
        fr.backbone = backbone_features(scene, cam, config, fr)
        frames.append(fr)
    return scene, cameras, frames


def make_supervision(scene: SceneGT, cameras, frames: list[FrameBundle],
                     tcfg: TeacherConfig, lcfg: LiftingConfig, seed: int,
                     n_classes: int):
    """Teacher emulation + mask lifting + correspondences for one scene.

    Fills frames' teacher fields in place; returns (bank, consistent labels,
    correspondence set).
    """
    bank = teachers.make_prototypes(n_classes, tcfg.d_s, tcfg.prototype_seed,
                                    n_concepts=tcfg.n_concepts)
    fparams = teachers.FragmentParams(max_cuts=tcfg.max_cuts,
                                      boundary_noise=tcfg.boundary_noise)
    for i, fr in enumerate(frames):
        segs = teachers.fragment_instance_masks(fr, fparams, seed=_mix_seed(seed, 31, i))
        tf = teachers.teacher_semantic_features(fr, bank, tcfg.view_noise,
                                                seed=_mix_seed(seed, 37, i),
                                                segments=segs)
        fr.teacher_features = tf.semantic_features
        fr.teacher_segments = tf.segment_id_map

    cam_frames = [(fr.camera, fr.depth) for fr in frames]
    lifted = lifting.lift_masks([(fr.camera, fr.depth, fr.teacher_segments)
                                 for fr in frames])
    merged = lifting.merge_segments(lifted, iou_threshold=lcfg.iou_threshold,
                                    voxel_size=lcfg.voxel_size,
                                    dbscan_eps=lcfg.filter_eps,
                                    dbscan_min_pts=lcfg.filter_min_pts,
                                    frames=cam_frames, depth_tol=lcfg.depth_tol)
    labels = lifting.reproject_labels(merged, cam_frames, lifted,
                                      depth_tol=lcfg.depth_tol)
    # consistency queries live on the per-pixel cloud, one query per valid pixel
    parts = []
    for fr in frames:
        world, valid = unproject_grid(fr.camera, fr.depth.values)
        parts.append(world[valid])
    corr = build_correspondences(np.concatenate(parts, axis=0), cam_frames,
                                 confidences=None, depth_tol=lcfg.depth_tol)
    return bank, labels, corr


def make_training_scene(frames: list[FrameBundle], labels, corr) -> TrainingScene:
    return TrainingScene(
        backbone=np.stack([fr.backbone for fr in frames]),
        teacher=np.stack([fr.teacher_features for fr in frames]),
        teacher_valid=np.ones((len(frames), frames[0].depth.height,
                               frames[0].depth.width), dtype=bool),
        labels=labels.maps,
        exist_gt=np.stack([fr.artic_exist for fr in frames]),
        motion_gt=np.stack([fr.artic_vec for fr in frames]),
        corr=corr)


@dataclass
class InferenceOutput:
    cloud: FusedCloud
    instances: InstanceResult
    class_ids: np.ndarray            # per fused point
    articulation: list               # ArticulationEstimate per instance
    gt_geometry: bool
    n_zero_norm: int = 0


def run_inference(params: HeadParams, scene: SceneGT, frames: list[FrameBundle],
                  bank, icfg: InferConfig, gt_geometry: bool = False) -> InferenceOutput:
    """Forward all views, fuse, cluster, classify, aggregate articulation.

    Default mode fuses onto the pixel cloud unprojected from the rendered
    depth maps and compacts it with FPS; gt-geometry mode fuses directly
    onto the ground-truth points with no compaction.
    """
    preds = [forward(params, fr.backbone) for fr in frames]
    if gt_geometry:
        queries = scene.points
        budget = None
    else:
        parts = []
        for fr in frames:
            world, valid = unproject_grid(fr.camera, fr.depth.values)
            parts.append(world[valid])
        queries = np.concatenate(parts, axis=0)
        budget = icfg.fps_budget
    corr = build_correspondences(queries, [(fr.camera, fr.depth) for fr in frames],
                                 confidences=None, depth_tol=icfg.depth_tol)
    cloud = fuse_views(preds, corr, fps_budget=budget,
                       uniform_confidence=icfg.uniform_confidence)
    instances = cluster_instances(cloud.inst, k=icfg.k, eps=icfg.eps,
                                  min_pts=icfg.min_pts)
    class_ids, n_zero = assign_classes(cloud.sem, bank)
    artic = aggregate_articulation(instances, cloud)
    return InferenceOutput(cloud=cloud, instances=instances, class_ids=class_ids,
                           articulation=artic, gt_geometry=gt_geometry,
                           n_zero_norm=n_zero)


def run_eval(out: InferenceOutput, scene: SceneGT, cameras,
             n_classes: int) -> EvalReport:
    """Transfer predictions to the GT cloud and score every protocol."""
    m = scene.points.shape[0]
    kinds = np.array([out.articulation[i].kind for i in range(out.instances.n_instances)],
                     dtype=np.int64) if out.instances.n_instances else np.empty(0, np.int64)
    gt_kinds = np.array([a.kind for a in scene.articulations], dtype=np.int64)

    if out.gt_geometry:
        # fused points are a subset of the GT cloud; identity transfer
        cls = np.full(m, -1, dtype=np.int64)
        inst = np.full(m, -1, dtype=np.int64)
        vt = np.zeros((m, 3))
        vr = np.zeros((m, 3))
        src = out.cloud.source_index
        cls[src] = out.class_ids
        inst[src] = out.instances.point_ids
        vt[src] = out.cloud.v_t
        vr[src] = out.cloud.v_r
        n_dropped = out.cloud.n_dropped
        scale = 1.0
    else:
        tr = transfer_to_gt(out.cloud.points, scene.points, cameras, cameras)
        nn = tr.nn_index
        cls = out.class_ids[nn].astype(np.int64)
        inst = out.instances.point_ids[nn].astype(np.int64)
        vt = out.cloud.v_t[nn]
        vr = out.cloud.v_r[nn]
        n_dropped = out.cloud.n_dropped
        scale = tr.scale

    sem = semantic_metrics(cls, scene.class_id, n_classes)
    ap, ap50, ap25 = instance_ap(inst, out.instances.scores, scene.instance_id)
    art = articulation_metrics(inst, kinds, out.instances.scores,
                               scene.instance_id, gt_kinds)
    gt_vec = scene.motion_vectors()
    gt_art_mask = gt_kinds[scene.instance_id] != KIND_NONE
    pred_vec = np.where((gt_kinds[scene.instance_id] == KIND_TRANSLATION)[:, None], vt, vr)
    mcos = motion_direction_cosine(pred_vec, gt_vec, gt_art_mask)
    return EvalReport(semantic=sem, ap=ap, ap50=ap50, ap25=ap25,
                      articulation=art, motion_cosine=mcos,
                      n_dropped=n_dropped, scale=scale)
