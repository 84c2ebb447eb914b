"""Training objectives with analytic gradients.

Each loss returns (scalar, gradient arrays). The map-level operations are
thin wrappers over flat-batch cores; the training loop reuses the same
cores on sampled pixel batches, so the finite-difference checks on the
map-level functions cover the gradients used in training.

Cosine terms floor feature norms at NORM_FLOOR; the floored branch treats
the norm as a constant (clamp subgradient), and an exactly zero predicted
feature is rejected with the offending pixel named.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import CorrespondenceSet

NORM_FLOOR = 1e-8
FOCAL_EPS = 1e-7


@dataclass
class LossWeights:
    """Scalar weights of the multi-task objective plus loss hyperparameters.

    Defaults follow the 10-to-1 supervision/consistency ratio with an
    existence weight of 10, unit task weights and contrastive margin 1.
    Focal gamma/alpha are the common detection defaults.
    """

    lambda_sem: float = 1.0
    lambda_inst: float = 1.0
    lambda_artic: float = 1.0
    lambda_sem2d: float = 1.0
    lambda_cons: float = 0.1
    lambda_group: float = 1.0
    lambda_exist: float = 10.0
    lambda_cons_exist: float = 1.0
    lambda_motion: float = 1.0
    lambda_cons_motion: float = 0.1
    margin: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25

    def __post_init__(self):
        for name in ("lambda_sem", "lambda_inst", "lambda_artic", "lambda_sem2d",
                     "lambda_cons", "lambda_group", "lambda_exist",
                     "lambda_cons_exist", "lambda_motion", "lambda_cons_motion"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.margin <= 0:
            raise ValueError("margin must be positive")


@dataclass
class PredictedMaps:
    """Single-view head outputs. Confidences live in [1, inf), existence in [0, 1]."""

    f_sem: np.ndarray    # (H, W, d_s)
    c_sem: np.ndarray    # (H, W)
    g_inst: np.ndarray   # (H, W, d_g)
    exist_t: np.ndarray  # (H, W)
    exist_r: np.ndarray  # (H, W)
    v_t: np.ndarray      # (H, W, 3)
    v_r: np.ndarray      # (H, W, 3)
    c_exist: np.ndarray  # (H, W)
    c_motion: np.ndarray  # (H, W)

    def validate(self):
        if np.min(self.c_sem) < 1.0 or np.min(self.c_exist) < 1.0 \
                or np.min(self.c_motion) < 1.0:
            raise ValueError("confidence maps must be >= 1")
        for name in ("exist_t", "exist_r"):
            e = getattr(self, name)
            if e.min() < 0.0 or e.max() > 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


GRAD_FIELDS = ("f_sem", "c_sem", "g_inst", "exist_t", "exist_r",
               "v_t", "v_r", "c_exist", "c_motion")

TERM_NAMES = ("sem2D", "cons_sem", "grouping", "cons_inst",
              "exist", "cons_exist", "motion", "cons_motion", "total")


@dataclass
class LossReport:
    terms: dict[str, float]
    gradients: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def total(self) -> float:
        return self.terms["total"]

    def to_json(self) -> dict:
        return {k: float(v) for k, v in self.terms.items()}


# ---------------------------------------------------------------------------
# flat cores

def _floored_norms(x: np.ndarray):
    """(floored norm, mask of rows above the floor). Rows are the last axis."""
    n = np.sqrt(np.sum(x * x, axis=-1))
    return np.maximum(n, NORM_FLOOR), n > NORM_FLOOR


def cosine_distill_core(pred: np.ndarray, target: np.ndarray):
    """mean(1 - cos(pred_i, target_i)) over rows; targets must be unit norm."""
    n = pred.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(pred)
    norms = np.sqrt(np.sum(pred * pred, axis=-1))
    zero = norms == 0.0
    if np.any(zero):
        raise ValueError(f"zero-norm predicted feature at row {int(np.argmax(zero))}")
    nf = np.maximum(norms, NORM_FLOOR)
    free = norms > NORM_FLOOR
    dot = np.sum(pred * target, axis=-1)
    s = dot / nf
    loss = float(np.mean(1.0 - s))
    # d(1-s)/dpred = -(target/n - free * dot * pred / n^3)
    grad = -(target / nf[:, None]
             - free[:, None] * (dot / nf ** 3)[:, None] * pred) / n
    return loss, grad


def consistency_core(f_obs: np.ndarray, c_obs: np.ndarray, point_idx: np.ndarray,
                     n_points: int, stop_gradient: bool = True):
    """Per-point cosine pull toward the confidence-weighted mean.

    loss = mean over observed points of mean over that point's observations
    of 1 - cos(f_u, mean_p), with mean_p = sum(c f)/sum(c). Under
    stop_gradient the mean is a constant, so confidences get zero gradient;
    with stop_gradient=False the full chain through the mean is returned.
    """
    n_obs = f_obs.shape[0]
    d = f_obs.shape[1]
    grad_f = np.zeros_like(f_obs)
    grad_c = np.zeros_like(c_obs)
    if n_obs == 0:
        return 0.0, grad_f, grad_c
    counts = np.bincount(point_idx, minlength=n_points)
    csum = np.bincount(point_idx, weights=c_obs, minlength=n_points)
    fsum = np.zeros((n_points, d))
    np.add.at(fsum, point_idx, c_obs[:, None] * f_obs)
    observed = counts > 0
    n_valid = int(observed.sum())
    safe_csum = np.where(observed, csum, 1.0)
    fbar = fsum / safe_csum[:, None]

    nf, free_f = _floored_norms(f_obs)
    nb_all, free_b_all = _floored_norms(fbar)
    fb = fbar[point_idx]
    nb = nb_all[point_idx]
    dot = np.sum(f_obs * fb, axis=-1)
    s = dot / (nf * nb)
    # points whose observations all coincide sit at the cosine maximum:
    # their terms are exactly 0 with exactly zero gradient (real arithmetic),
    # so bypass the floating-point mean/norm round-off for them
    mins = np.full((n_points, d), np.inf)
    maxs = np.full((n_points, d), -np.inf)
    np.minimum.at(mins, point_idx, f_obs)
    np.maximum.at(maxs, point_idx, f_obs)
    coincident = np.all(mins == maxs, axis=-1)[point_idx]
    s[coincident] = 1.0
    w = 1.0 / (counts[point_idx] * n_valid)
    loss = float(np.sum(w * (1.0 - s)))

    # gradient through f_u only (the mean is frozen)
    ds_df = fb / (nf * nb)[:, None] - free_f[:, None] * (s / nf ** 2)[:, None] * f_obs
    ds_df[coincident] = 0.0
    grad_f = -w[:, None] * ds_df

    if not stop_gradient:
        free_b = free_b_all[point_idx]
        ds_dbar = f_obs / (nf * nb)[:, None] - free_b[:, None] * (s / nb ** 2)[:, None] * fb
        ds_dbar[coincident] = 0.0
        gbar_obs = -w[:, None] * ds_dbar
        gbar = np.zeros((n_points, d))
        np.add.at(gbar, point_idx, gbar_obs)
        gb = gbar[point_idx]
        grad_f = grad_f + (c_obs / safe_csum[point_idx])[:, None] * gb
        grad_c = np.sum(gb * (f_obs - fb), axis=-1) / safe_csum[point_idx]
    return loss, grad_f, grad_c


def contrastive_core(g_i: np.ndarray, g_j: np.ndarray, same: np.ndarray, margin: float):
    """Pull same-label pairs together, push different-label pairs past margin."""
    b = g_i.shape[0]
    if b == 0:
        return 0.0, np.zeros_like(g_i), np.zeros_like(g_j)
    delta = g_i - g_j
    dist = np.sqrt(np.sum(delta * delta, axis=-1))
    pos_loss = dist
    neg_loss = np.maximum(margin - dist, 0.0)
    loss = float(np.mean(np.where(same, pos_loss, neg_loss)))
    nonzero = dist > 0.0
    unit = np.where(nonzero[:, None], delta / np.where(nonzero, dist, 1.0)[:, None], 0.0)
    # subgradient 0 at coincident points and exactly at the margin kink
    g_pos = unit
    g_neg = np.where((dist < margin)[:, None] & nonzero[:, None], -unit, 0.0)
    g = np.where(same[:, None], g_pos, g_neg) / b
    return loss, g, -g


def focal_core(pred: np.ndarray, gt: np.ndarray, gamma: float, alpha: float):
    """Focal binary loss, mean over all elements; inputs clamped to (0, 1)."""
    p = np.clip(pred, FOCAL_EPS, 1.0 - FOCAL_EPS)
    inside = (pred > FOCAL_EPS) & (pred < 1.0 - FOCAL_EPS)
    y = gt.astype(np.float64)
    m = p.size
    if m == 0:
        return 0.0, np.zeros_like(pred, dtype=np.float64)
    log_p = np.log(p)
    log_q = np.log(1.0 - p)
    loss_el = -alpha * y * (1.0 - p) ** gamma * log_p \
        - (1.0 - alpha) * (1.0 - y) * p ** gamma * log_q
    loss = float(loss_el.mean())
    if gamma == 0.0:
        dpos = -alpha * (1.0 / p)
        dneg = -(1.0 - alpha) * (-1.0 / (1.0 - p))
    else:
        dpos = -alpha * (-gamma * (1.0 - p) ** (gamma - 1.0) * log_p
                         + (1.0 - p) ** gamma / p)
        dneg = -(1.0 - alpha) * (gamma * p ** (gamma - 1.0) * log_q
                                 - p ** gamma / (1.0 - p))
    grad = np.where(y > 0.5, dpos, dneg) * inside / m
    return loss, grad


def squared_error_core(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray):
    """mean over masked rows of ||pred - gt||^2 (sum over the last axis)."""
    grad = np.zeros_like(pred, dtype=np.float64)
    n = int(mask.sum())
    if n == 0:
        return 0.0, grad
    delta = (pred - gt) * mask[..., None]
    loss = float(np.sum(delta * delta) / n)
    grad = 2.0 * delta / n
    return loss, grad


# ---------------------------------------------------------------------------
# map-level operations

def semantic_distill_loss(f_sem: np.ndarray, teacher: np.ndarray,
                          valid: Optional[np.ndarray] = None):
    """Cosine distillation toward unit-norm teacher features.

    Accepts (..., d) maps with an optional boolean mask over the leading
    axes; returns (loss, gradient wrt f_sem) with the gradient zero outside
    the mask.
    """
    f = np.asarray(f_sem, dtype=np.float64)
    t = np.asarray(teacher, dtype=np.float64)
    if f.shape != t.shape:
        raise ValueError(f"shape mismatch {f.shape} vs {t.shape}")
    if valid is None:
        valid = np.ones(f.shape[:-1], dtype=bool)
    tn = np.sqrt(np.sum(t * t, axis=-1))[valid]
    if tn.size and np.max(np.abs(tn - 1.0)) > 1e-6:
        raise ValueError("teacher features must be unit norm")
    flat_f = f[valid]
    norms = np.sqrt(np.sum(flat_f * flat_f, axis=-1))
    if np.any(norms == 0.0):
        pixel = tuple(np.argwhere(valid)[int(np.argmax(norms == 0.0))])
        raise ValueError(f"zero-norm predicted feature at pixel {pixel}")
    loss, g = cosine_distill_core(flat_f, t[valid])
    grad = np.zeros_like(f)
    grad[valid] = g
    return loss, grad


def confidence_weighted_mean(features: np.ndarray, confidences: np.ndarray) -> np.ndarray:
    """sum(c * f) / sum(c) over observations of one point."""
    f = np.asarray(features, dtype=np.float64)
    c = np.asarray(confidences, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] == 0:
        raise ValueError("need a non-empty (n, d) observation list")
    if np.any(c < 1.0):
        raise ValueError("confidences must be >= 1")
    if f.shape[0] == 1:
        return f[0].copy()
    return (c[:, None] * f).sum(axis=0) / c.sum()


def _gather_obs(maps: np.ndarray, corr: CorrespondenceSet):
    v, pu, pv = corr.view, corr.pixel_u, corr.pixel_v
    n_views, h, w = maps.shape[0], maps.shape[1], maps.shape[2]
    if corr.n_observations:
        if pu.min() < 0 or pu.max() >= w or pv.min() < 0 or pv.max() >= h \
                or v.min() < 0 or v.max() >= n_views:
            raise ValueError("correspondence references an out-of-bounds pixel or view")
    return maps[v, pv, pu]


def consistency_loss(features: np.ndarray, confidences: np.ndarray,
                     corr: CorrespondenceSet, stop_gradient: bool = True):
    """Multi-view consistency over stacked (V, H, W, d) feature maps.

    Returns (loss, grad wrt features, grad wrt confidences). Points with no
    observations are excluded from the mean; the weighted mean is treated
    as a constant unless stop_gradient=False.
    """
    f = np.asarray(features, dtype=np.float64)
    c = np.asarray(confidences, dtype=np.float64)
    f_obs = _gather_obs(f, corr)
    c_obs = c[corr.view, corr.pixel_v, corr.pixel_u]
    point_idx = np.repeat(np.arange(corr.n_points), corr.counts())
    loss, gf, gc = consistency_core(f_obs, c_obs, point_idx, corr.n_points,
                                    stop_gradient=stop_gradient)
    grad_f = np.zeros_like(f)
    np.add.at(grad_f, (corr.view, corr.pixel_v, corr.pixel_u), gf)
    grad_c = np.zeros_like(c)
    if not stop_gradient:
        np.add.at(grad_c, (corr.view, corr.pixel_v, corr.pixel_u), gc)
    return loss, grad_f, grad_c


def instance_contrastive_loss(g_inst: np.ndarray, labels: np.ndarray,
                              pairs: np.ndarray, margin: float):
    """Pairwise margin loss over sampled pixel pairs.

    ``pairs`` is (B, 2, 3) of (view, row, col); every referenced pixel must
    carry a label >= 0.
    """
    g = np.asarray(g_inst, dtype=np.float64)
    pairs = np.asarray(pairs, dtype=np.int64)
    if pairs.size == 0:
        return 0.0, np.zeros_like(g)
    vi, yi, xi = pairs[:, 0, 0], pairs[:, 0, 1], pairs[:, 0, 2]
    vj, yj, xj = pairs[:, 1, 0], pairs[:, 1, 1], pairs[:, 1, 2]
    li = labels[vi, yi, xi]
    lj = labels[vj, yj, xj]
    if np.any(li < 0) or np.any(lj < 0):
        bad = int(np.argmax((li < 0) | (lj < 0)))
        raise ValueError(f"pair {bad} touches an unlabeled pixel")
    loss, gi, gj = contrastive_core(g[vi, yi, xi], g[vj, yj, xj], li == lj, margin)
    grad = np.zeros_like(g)
    np.add.at(grad, (vi, yi, xi), gi)
    np.add.at(grad, (vj, yj, xj), gj)
    return loss, grad


def focal_existence_loss(pred: np.ndarray, gt: np.ndarray,
                         gamma: float = 2.0, alpha: float = 0.25):
    """Focal loss averaged over every element of the existence map(s)."""
    return focal_core(np.asarray(pred, dtype=np.float64),
                      np.asarray(gt), gamma, alpha)


def motion_l2_loss(v_pred: np.ndarray, v_gt: np.ndarray, mask: np.ndarray):
    """Squared-error motion regression over articulated pixels only."""
    return squared_error_core(np.asarray(v_pred, dtype=np.float64),
                              np.asarray(v_gt, dtype=np.float64),
                              np.asarray(mask, dtype=bool))


# ---------------------------------------------------------------------------
# the combined objective

@dataclass
class Supervision:
    """Per-scene training targets, stacked over views."""

    teacher: np.ndarray          # (V, H, W, d_s) unit rows
    teacher_valid: np.ndarray    # (V, H, W) bool
    labels: np.ndarray           # (V, H, W) int32 consistent instance ids
    pairs: np.ndarray            # (B, 2, 3) sampled (view, row, col) pixel pairs
    exist_gt: np.ndarray         # (V, 2, H, W) binary (translation, rotation)
    motion_gt: np.ndarray        # (V, H, W, 3)


def total_loss(maps: list[PredictedMaps], supervision: Supervision,
               corr: CorrespondenceSet, weights: LossWeights,
               stop_gradient: bool = True) -> LossReport:
    """Weighted multi-task objective over all views of one scene.

    Consistency applies to four feature stacks: semantic features, instance
    embeddings, the (translation, rotation) existence pair, and the stacked
    6-channel motion map. Existence/motion supervision treats the two motion
    types as one pooled pixel-type population.
    """
    for m in maps:
        m.validate()
    f_sem = np.stack([m.f_sem for m in maps])
    c_sem = np.stack([m.c_sem for m in maps])
    g_inst = np.stack([m.g_inst for m in maps])
    exist = np.stack([np.stack([m.exist_t, m.exist_r]) for m in maps])  # (V,2,H,W)
    v_stack = np.stack([np.stack([m.v_t, m.v_r]) for m in maps])        # (V,2,H,W,3)
    exist_vec = np.moveaxis(exist, 1, -1)                               # (V,H,W,2)
    motion_vec = np.concatenate([v_stack[:, 0], v_stack[:, 1]], axis=-1)  # (V,H,W,6)
    c_exist = np.stack([m.c_exist for m in maps])
    c_motion = np.stack([m.c_motion for m in maps])

    terms: dict[str, float] = {}
    grads = {name: None for name in GRAD_FIELDS}

    def run(term, fn, *args, **kw):
        try:
            return fn(*args, **kw)
        except ValueError as e:
            raise ValueError(f"[{term}] {e}") from e

    terms["sem2D"], g_sem2d = run("sem2D", semantic_distill_loss,
                                  f_sem, supervision.teacher, supervision.teacher_valid)
    terms["cons_sem"], g_cons_sem, gc_sem = run(
        "cons_sem", consistency_loss, f_sem, c_sem, corr, stop_gradient)
    terms["grouping"], g_group = run("grouping", instance_contrastive_loss,
                                     g_inst, supervision.labels,
                                     supervision.pairs, weights.margin)
    terms["cons_inst"], g_cons_inst, gc_inst = run(
        "cons_inst", consistency_loss, g_inst, c_sem, corr, stop_gradient)
    terms["exist"], g_exist = run("exist", focal_existence_loss, exist,
                                  supervision.exist_gt,
                                  weights.focal_gamma, weights.focal_alpha)
    terms["cons_exist"], g_cons_ev, gc_exist = run(
        "cons_exist", consistency_loss, exist_vec, c_exist, corr, stop_gradient)
    mask2 = supervision.exist_gt > 0
    gt2 = np.stack([supervision.motion_gt, supervision.motion_gt], axis=1)
    terms["motion"], g_motion = run("motion", motion_l2_loss, v_stack, gt2, mask2)
    terms["cons_motion"], g_cons_mv, gc_motion = run(
        "cons_motion", consistency_loss, motion_vec, c_motion, corr, stop_gradient)

    w = weights
    terms["total"] = (
        w.lambda_sem * (w.lambda_sem2d * terms["sem2D"] + w.lambda_cons * terms["cons_sem"])
        + w.lambda_inst * (w.lambda_group * terms["grouping"] + w.lambda_cons * terms["cons_inst"])
        + w.lambda_artic * (w.lambda_exist * terms["exist"]
                            + w.lambda_cons_exist * terms["cons_exist"]
                            + w.lambda_motion * terms["motion"]
                            + w.lambda_cons_motion * terms["cons_motion"]))

    a_sem = w.lambda_sem
    a_inst = w.lambda_inst
    a_art = w.lambda_artic
    grads["f_sem"] = a_sem * (w.lambda_sem2d * g_sem2d + w.lambda_cons * g_cons_sem)
    grads["g_inst"] = a_inst * (w.lambda_group * g_group + w.lambda_cons * g_cons_inst)
    ge = a_art * (w.lambda_exist * g_exist
                  + w.lambda_cons_exist * np.moveaxis(g_cons_ev, -1, 1))
    grads["exist_t"] = ge[:, 0]
    grads["exist_r"] = ge[:, 1]
    gm = a_art * (w.lambda_motion * g_motion)
    gmc = a_art * w.lambda_cons_motion * g_cons_mv
    grads["v_t"] = gm[:, 0] + gmc[..., :3]
    grads["v_r"] = gm[:, 1] + gmc[..., 3:]
    grads["c_sem"] = a_sem * w.lambda_cons * gc_sem + a_inst * w.lambda_cons * gc_inst
    grads["c_exist"] = a_art * w.lambda_cons_exist * gc_exist
    grads["c_motion"] = a_art * w.lambda_cons_motion * gc_motion
    return LossReport(terms=terms, gradients=grads)
