"""3D evaluation protocols: semantic mIoU/mAcc, class-agnostic instance AP,
articulation detection, and the prediction-to-ground-truth transfer chain."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Camera, estimate_alignment_scale, nearest_neighbor_map
from .synth import KIND_NONE

AP_THRESHOLDS = np.arange(0.50, 0.951, 0.05)


@dataclass
class TransferResult:
    nn_index: np.ndarray     # (M_gt,) index into the pred cloud per GT point
    scale: float


@dataclass
class SemanticReport:
    per_class_iou: list      # length C; None for classes absent from GT
    miou: float
    macc: float


@dataclass
class ArticulationReport:
    iou: float
    precision: float
    recall: float
    f1: float
    type_accuracy: float


@dataclass
class EvalReport:
    semantic: SemanticReport
    ap: float
    ap50: float
    ap25: float
    articulation: ArticulationReport
    motion_cosine: float
    n_dropped: int = 0
    scale: float = 1.0

    def to_json(self) -> dict:
        return {
            "miou": self.semantic.miou,
            "macc": self.semantic.macc,
            "per_class_iou": [None if x is None else float(x)
                              for x in self.semantic.per_class_iou],
            "ap": self.ap, "ap50": self.ap50, "ap25": self.ap25,
            "articulation": {
                "iou": self.articulation.iou,
                "precision": self.articulation.precision,
                "recall": self.articulation.recall,
                "f1": self.articulation.f1,
                "type_accuracy": self.articulation.type_accuracy,
            },
            "motion_cosine": self.motion_cosine,
            "transfer": {"dropped": self.n_dropped, "scale": self.scale},
        }


# ---------------------------------------------------------------------------
# geometry transfer

def _centers_in_first_frame(cameras: list[Camera]) -> np.ndarray:
    c0 = cameras[0]
    centers = np.stack([c.center() for c in cameras])
    return (centers - c0.center()) @ c0.rotation.T


def transfer_to_gt(pred_points: np.ndarray, gt_points: np.ndarray,
                   pred_cameras: list[Camera], gt_cameras: list[Camera]) -> TransferResult:
    """Map every GT point to its nearest predicted point after scale alignment.

    The global scale comes from a least-squares fit of camera centers
    (both trajectories expressed relative to their first camera); both
    clouds are then expressed in their first camera's frame before the
    1-nearest-neighbor lookup.
    """
    pred = np.asarray(pred_points, dtype=np.float64).reshape(-1, 3)
    if pred.shape[0] == 0:
        raise ValueError("empty predicted cloud")
    if len(pred_cameras) < 2 or len(gt_cameras) < 2:
        raise ValueError("need at least 2 poses for scale estimation")
    scale = estimate_alignment_scale(_centers_in_first_frame(pred_cameras),
                                     _centers_in_first_frame(gt_cameras))
    p0 = pred_cameras[0]
    g0 = gt_cameras[0]
    pred_local = scale * (pred @ p0.rotation.T + p0.translation)
    gt_local = np.asarray(gt_points, dtype=np.float64) @ g0.rotation.T + g0.translation
    nn = nearest_neighbor_map(pred_local, gt_local)
    return TransferResult(nn_index=nn, scale=float(scale))


# ---------------------------------------------------------------------------
# semantics

def semantic_metrics(pred_class: np.ndarray, gt_class: np.ndarray,
                     n_classes: int) -> SemanticReport:
    """Class-wise IoU over classes present in GT; mAcc is mean recall."""
    pred = np.asarray(pred_class).astype(np.int64)
    gt = np.asarray(gt_class).astype(np.int64)
    per_class = [None] * n_classes
    ious, recalls = [], []
    for c in range(n_classes):
        gt_c = gt == c
        if not gt_c.any():
            continue
        pred_c = pred == c
        tp = int((gt_c & pred_c).sum())
        fp = int((~gt_c & pred_c).sum())
        fn = int((gt_c & ~pred_c).sum())
        iou = tp / (tp + fp + fn) if (tp + fp + fn) else 0.0
        per_class[c] = iou
        ious.append(iou)
        recalls.append(tp / (tp + fn))
    miou = float(np.mean(ious)) if ious else 0.0
    macc = float(np.mean(recalls)) if recalls else 0.0
    return SemanticReport(per_class_iou=per_class, miou=miou, macc=macc)


# ---------------------------------------------------------------------------
# instance AP

def _instance_sets(ids: np.ndarray):
    out = {}
    for k in np.unique(ids):
        if k >= 0:
            out[int(k)] = ids == k
    return out


def _iou_matrix(pred_ids: np.ndarray, gt_ids: np.ndarray):
    """Point-set IoU between every (pred, gt) instance pair, via a joint histogram."""
    n_pred = int(pred_ids.max()) + 1 if (pred_ids >= 0).any() else 0
    n_gt = int(gt_ids.max()) + 1 if (gt_ids >= 0).any() else 0
    if n_pred == 0 or n_gt == 0:
        return np.zeros((n_pred, n_gt)), np.zeros(n_pred, dtype=np.int64), \
            np.zeros(n_gt, dtype=np.int64)
    both = (pred_ids >= 0) & (gt_ids >= 0)
    joint = np.zeros((n_pred, n_gt), dtype=np.int64)
    np.add.at(joint, (pred_ids[both], gt_ids[both]), 1)
    pred_sz = np.bincount(pred_ids[pred_ids >= 0], minlength=n_pred)
    gt_sz = np.bincount(gt_ids[gt_ids >= 0], minlength=n_gt)
    union = pred_sz[:, None] + gt_sz[None, :] - joint
    return joint / np.where(union > 0, union, 1), pred_sz, gt_sz


def _greedy_match(iou: np.ndarray, order: np.ndarray, threshold: float):
    """Score-ordered greedy matching: each prediction takes the unmatched GT
    instance of highest IoU >= threshold (ties to the lowest GT id)."""
    n_gt = iou.shape[1]
    taken = np.zeros(n_gt, dtype=bool)
    tp = np.zeros(order.size, dtype=bool)
    match = np.full(order.size, -1, dtype=np.int64)
    for rank, p in enumerate(order):
        best, best_iou = -1, threshold
        for g in range(n_gt):
            if taken[g]:
                continue
            v = iou[p, g]
            if v > best_iou or (v == best_iou and v >= threshold and best == -1):
                best, best_iou = g, v
        if best >= 0:
            taken[best] = True
            tp[rank] = True
            match[rank] = best
    return tp, match


def _average_precision(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP from a score-ordered TP/FP sequence."""
    if n_gt == 0 or tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    # precision envelope, then sum over recall increments
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, env):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def instance_ap(pred_ids: np.ndarray, scores: np.ndarray, gt_ids: np.ndarray):
    """Class-agnostic AP at 0.25, 0.50 and averaged over 0.50:0.05:0.95.

    Predictions are ranked by descending score (ties to the lower id) and
    matched greedily per threshold; noise points (-1) belong to no instance.
    """
    pred_ids = np.asarray(pred_ids).astype(np.int64)
    gt_ids = np.asarray(gt_ids).astype(np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    iou, _, _ = _iou_matrix(pred_ids, gt_ids)
    n_pred = iou.shape[0]
    n_gt = iou.shape[1]
    if scores.shape[0] != n_pred:
        raise ValueError(f"{scores.shape[0]} scores for {n_pred} predicted instances")
    order = np.lexsort((np.arange(n_pred), -scores))
    ap_at = {}
    for tau in list(AP_THRESHOLDS) + [0.25]:
        tp, _ = _greedy_match(iou, order, float(tau))
        ap_at[round(float(tau), 2)] = _average_precision(tp, n_gt)
    ap = float(np.mean([ap_at[round(float(t), 2)] for t in AP_THRESHOLDS]))
    return ap, ap_at[0.5], ap_at[0.25]


# ---------------------------------------------------------------------------
# articulation

def articulation_metrics(pred_instance_ids: np.ndarray, pred_kinds: np.ndarray,
                         pred_scores: np.ndarray, gt_instance_ids: np.ndarray,
                         gt_kinds: np.ndarray) -> ArticulationReport:
    """Existence IoU plus part detection P/R/F1 and motion-type accuracy.

    Predicted parts are the predicted instances whose kind is not none;
    GT parts likewise. Detection matches parts greedily by point-set IoU
    strictly above 0.5, in descending prediction-score order.
    """
    pred_instance_ids = np.asarray(pred_instance_ids).astype(np.int64)
    gt_instance_ids = np.asarray(gt_instance_ids).astype(np.int64)
    pred_kinds = np.asarray(pred_kinds).astype(np.int64)
    gt_kinds = np.asarray(gt_kinds).astype(np.int64)

    def art_mask(ids, kinds):
        if kinds.size == 0:
            return np.zeros(ids.shape, dtype=bool)
        return (ids >= 0) & (kinds[np.clip(ids, 0, None)] != KIND_NONE)

    pred_art = art_mask(pred_instance_ids, pred_kinds)
    gt_art = art_mask(gt_instance_ids, gt_kinds)
    inter = int((pred_art & gt_art).sum())
    union = int((pred_art | gt_art).sum())
    iou = inter / union if union else 1.0

    cand = [i for i in range(pred_kinds.size) if pred_kinds[i] != KIND_NONE]
    parts = [g for g in range(gt_kinds.size) if gt_kinds[g] != KIND_NONE]
    cand.sort(key=lambda i: (-pred_scores[i], i))
    taken = set()
    tp = 0
    correct_type = 0
    for i in cand:
        mask_i = pred_instance_ids == i
        best, best_iou = -1, 0.5
        for g in parts:
            if g in taken:
                continue
            mask_g = gt_instance_ids == g
            inter_ig = int((mask_i & mask_g).sum())
            if inter_ig == 0:
                continue
            v = inter_ig / int((mask_i | mask_g).sum())
            if v > best_iou:
                best, best_iou = g, v
        if best >= 0:
            taken.add(best)
            tp += 1
            if pred_kinds[i] == gt_kinds[best]:
                correct_type += 1
    precision = tp / len(cand) if cand else (1.0 if not parts else 0.0)
    recall = tp / len(parts) if parts else 1.0
    f1 = 2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
    type_acc = correct_type / tp if tp else (1.0 if not parts and not cand else 0.0)
    return ArticulationReport(iou=float(iou), precision=float(precision),
                              recall=float(recall), f1=float(f1),
                              type_accuracy=float(type_acc))


def motion_direction_cosine(pred_vectors: np.ndarray, gt_vectors: np.ndarray,
                            mask: np.ndarray) -> float:
    """Mean cosine between predicted and GT motion directions on masked points."""
    p = np.asarray(pred_vectors, dtype=np.float64)[mask]
    g = np.asarray(gt_vectors, dtype=np.float64)[mask]
    if p.shape[0] == 0:
        return 0.0
    pn = np.sqrt(np.sum(p * p, axis=1))
    gn = np.sqrt(np.sum(g * g, axis=1))
    ok = (pn > 0) & (gn > 0)
    cos = np.zeros(p.shape[0])
    cos[ok] = np.sum(p * g, axis=1)[ok] / (pn[ok] * gn[ok])
    return float(cos.mean())
