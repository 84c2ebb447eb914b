"""Trainable per-pixel heads and the multi-task training loop.

Three 2-layer tanh MLPs run pixelwise over the procedural backbone
features: a semantic head (d_s feature channels + 1 confidence), an
instance embedding head (d_g), and an articulation head (9 channels:
translation vector, rotation vector, two existence logits, one
confidence). Existence logits pass through a logistic; confidence
channels через 1 + softplus so they live in [1, inf).

Training runs momentum SGD on a per-step sampled estimate of the total
objective: a view batch for the dense losses, a query-point batch for the
consistency terms and a 1:1 positive/negative pixel-pair batch for the
contrastive term. All sampling is driven by one seeded generator in a
fixed order, so runs are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CorrespondenceSet
from .losses import (LossWeights, PredictedMaps, consistency_core, contrastive_core,
                     cosine_distill_core, focal_core, squared_error_core)


class TrainDivergedError(RuntimeError):
    def __init__(self, step, dump_path):
        super().__init__(f"non-finite loss at step {step}; inputs dumped to {dump_path}")
        self.step = step
        self.dump_path = dump_path


@dataclass
class HeadParams:
    tensors: dict[str, np.ndarray]
    d_b: int
    d_s: int
    d_g: int
    hidden: int

    def copy(self) -> "HeadParams":
        return HeadParams(tensors={k: v.copy() for k, v in self.tensors.items()},
                          d_b=self.d_b, d_s=self.d_s, d_g=self.d_g, hidden=self.hidden)


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 3e-4
    decay: float = 0.999
    min_lr: float = 0.0
    momentum: float = 0.9
    # L2 regularization; biases per-instance shortcuts toward features shared
    # across scenes, which is what held-out generalization needs
    weight_decay: float = 0.0
    views_per_step: int = 6
    pixels_per_view: int = 512
    points_per_step: int = 256
    pairs_per_step: int = 1024
    # fraction of each view's pixel batch drawn from articulated pixels;
    # counteracts their rarity (well under 1% of pixels) at fixed step budgets
    artic_pixel_fraction: float = 0.0
    hidden: int = 128
    d_g: int = 32
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    stop_gradient: bool = True

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must be in (0, 1]")


@dataclass
class TrainingScene:
    """Everything one scene contributes to training, stacked over views."""

    backbone: np.ndarray        # (V, H, W, d_b) float32
    teacher: np.ndarray         # (V, H, W, d_s) float64, unit rows
    teacher_valid: np.ndarray   # (V, H, W) bool
    labels: np.ndarray          # (V, H, W) int32 consistent instance ids
    exist_gt: np.ndarray        # (V, 2, H, W) uint8
    motion_gt: np.ndarray       # (V, H, W, 3) float64
    corr: CorrespondenceSet

    def __post_init__(self):
        v, h, w = self.labels.shape
        ids = np.unique(self.labels)
        self._entries = {}
        for lid in ids:
            if lid < 0:
                continue
            vv, yy, xx = np.nonzero(self.labels == lid)
            self._entries[int(lid)] = np.stack([vv, yy, xx], axis=1).astype(np.int64)
        self._ids = np.array(sorted(self._entries), dtype=np.int64)
        self._ids_multi = np.array([i for i in self._ids
                                    if self._entries[i].shape[0] >= 2], dtype=np.int64)
        art = (self.exist_gt[:, 0] > 0) | (self.exist_gt[:, 1] > 0)
        self._artic_pixels = [np.nonzero(art[i].reshape(-1))[0] for i in range(v)]

    @property
    def n_views(self) -> int:
        return self.backbone.shape[0]


def init_head_params(d_b: int, d_s: int, d_g: int, hidden: int, seed: int) -> HeadParams:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 401)))
    t = {}
    for head, dout in (("sem", d_s + 1), ("inst", d_g), ("artic", 9)):
        t[f"{head}.w1"] = rng.normal(0.0, 1.0 / np.sqrt(d_b), size=(d_b, hidden))
        t[f"{head}.b1"] = np.zeros(hidden)
        t[f"{head}.w2"] = rng.normal(0.0, 0.3 / np.sqrt(hidden), size=(hidden, dout))
        t[f"{head}.b2"] = np.zeros(dout)
    return HeadParams(tensors=t, d_b=d_b, d_s=d_s, d_g=d_g, hidden=hidden)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x):
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def _head_forward(params: HeadParams, head: str, x: np.ndarray):
    t = params.tensors
    a1 = x @ t[f"{head}.w1"] + t[f"{head}.b1"]
    h = np.tanh(a1)
    y = h @ t[f"{head}.w2"] + t[f"{head}.b2"]
    return y, h


def _head_backward(params: HeadParams, head: str, x, h, dy, out):
    t = params.tensors
    out[f"{head}.w2"] = h.T @ dy
    out[f"{head}.b2"] = dy.sum(axis=0)
    dh = dy @ t[f"{head}.w2"].T
    da1 = dh * (1.0 - h * h)
    out[f"{head}.w1"] = x.T @ da1
    out[f"{head}.b1"] = da1.sum(axis=0)


@dataclass
class _FlatOutputs:
    f_sem: np.ndarray
    c_sem: np.ndarray
    g_inst: np.ndarray
    exist_t: np.ndarray
    exist_r: np.ndarray
    v_t: np.ndarray
    v_r: np.ndarray
    conf_artic: np.ndarray   # serves as both c_exist and c_motion
    # caches for backward
    x: np.ndarray = None
    h_sem: np.ndarray = None
    h_inst: np.ndarray = None
    h_artic: np.ndarray = None
    raw_c_sem: np.ndarray = None
    raw_exist: np.ndarray = None
    raw_conf: np.ndarray = None


def _forward_flat(params: HeadParams, x: np.ndarray) -> _FlatOutputs:
    y_sem, h_sem = _head_forward(params, "sem", x)
    y_inst, h_inst = _head_forward(params, "inst", x)
    y_art, h_art = _head_forward(params, "artic", x)
    d_s = params.d_s
    return _FlatOutputs(
        f_sem=y_sem[:, :d_s],
        c_sem=1.0 + _softplus(y_sem[:, d_s]),
        g_inst=y_inst,
        exist_t=_sigmoid(y_art[:, 6]),
        exist_r=_sigmoid(y_art[:, 7]),
        v_t=y_art[:, 0:3],
        v_r=y_art[:, 3:6],
        conf_artic=1.0 + _softplus(y_art[:, 8]),
        x=x, h_sem=h_sem, h_inst=h_inst, h_artic=h_art,
        raw_c_sem=y_sem[:, d_s], raw_exist=y_art[:, 6:8], raw_conf=y_art[:, 8])


def _backward_flat(params: HeadParams, out: _FlatOutputs, d: dict) -> dict:
    """Chain per-channel gradients through the output transforms and MLPs."""
    n = out.x.shape[0]
    dy_sem = np.zeros((n, params.d_s + 1))
    dy_sem[:, :params.d_s] = d.get("f_sem", 0.0)
    if "c_sem" in d:
        dy_sem[:, params.d_s] = d["c_sem"] * _sigmoid(out.raw_c_sem)
    dy_inst = d.get("g_inst", np.zeros((n, params.d_g)))
    dy_art = np.zeros((n, 9))
    if "v_t" in d:
        dy_art[:, 0:3] = d["v_t"]
    if "v_r" in d:
        dy_art[:, 3:6] = d["v_r"]
    if "exist_t" in d:
        dy_art[:, 6] = d["exist_t"] * out.exist_t * (1.0 - out.exist_t)
    if "exist_r" in d:
        dy_art[:, 7] = d["exist_r"] * out.exist_r * (1.0 - out.exist_r)
    dc = d.get("c_exist", 0.0) + d.get("c_motion", 0.0)
    if np.any(dc != 0.0):
        dy_art[:, 8] = dc * _sigmoid(out.raw_conf)
    grads = {}
    _head_backward(params, "sem", out.x, out.h_sem, dy_sem, grads)
    _head_backward(params, "inst", out.x, out.h_inst, dy_inst, grads)
    _head_backward(params, "artic", out.x, out.h_artic, dy_art, grads)
    return grads


def forward(params: HeadParams, backbone: np.ndarray) -> PredictedMaps:
    """Run all heads over one view; returns a PredictedMaps."""
    h, w = backbone.shape[:2]
    x = backbone.reshape(-1, params.d_b).astype(np.float64)
    o = _forward_flat(params, x)
    conf = o.conf_artic.reshape(h, w)
    return PredictedMaps(
        f_sem=o.f_sem.reshape(h, w, params.d_s),
        c_sem=o.c_sem.reshape(h, w),
        g_inst=o.g_inst.reshape(h, w, params.d_g),
        exist_t=o.exist_t.reshape(h, w),
        exist_r=o.exist_r.reshape(h, w),
        v_t=o.v_t.reshape(h, w, 3),
        v_r=o.v_r.reshape(h, w, 3),
        c_exist=conf,
        c_motion=conf.copy())


def backward(params: HeadParams, backbone: np.ndarray, grads: dict) -> dict:
    """Parameter gradients for map-level upstream gradients (one view)."""
    h, w = backbone.shape[:2]
    x = backbone.reshape(-1, params.d_b).astype(np.float64)
    o = _forward_flat(params, x)
    flat = {}
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        flat[name] = g.reshape(h * w, -1) if g.ndim == 3 else g.reshape(h * w)
    return _backward_flat(params, o, flat)


# ---------------------------------------------------------------------------
# training

def _sample_pairs(scene: TrainingScene, rng, n_pairs: int) -> np.ndarray:
    """1:1 positive/negative pixel pairs from the consistent-id index.

    Positives prefer two views of the same instance; negatives pick two
    different instances.
    """
    ids = scene._ids
    multi = scene._ids_multi
    if ids.size < 2 or multi.size == 0 or n_pairs <= 0:
        return np.empty((0, 2, 3), dtype=np.int64)
    half = n_pairs // 2
    out = np.empty((2 * half, 2, 3), dtype=np.int64)
    for k in range(half):
        lid = multi[rng.integers(multi.size)]
        e = scene._entries[int(lid)]
        i = int(rng.integers(e.shape[0]))
        other = np.nonzero(e[:, 0] != e[i, 0])[0]
        if other.size:
            j = int(other[rng.integers(other.size)])
        else:
            j = int(rng.integers(e.shape[0] - 1))
            if j >= i:
                j += 1
        out[k, 0] = e[i]
        out[k, 1] = e[j]
    for k in range(half):
        ai = int(rng.integers(ids.size))
        bi = int(rng.integers(ids.size - 1))
        if bi >= ai:
            bi += 1
        ea = scene._entries[int(ids[ai])]
        eb = scene._entries[int(ids[bi])]
        out[half + k, 0] = ea[rng.integers(ea.shape[0])]
        out[half + k, 1] = eb[rng.integers(eb.shape[0])]
    return out


class _Gather:
    """Per-step pixel gather across views with position lookup."""

    def __init__(self, needed_per_view: list[np.ndarray]):
        self.pixels = [np.unique(p) if p.size else np.empty(0, dtype=np.int64)
                       for p in needed_per_view]
        self.offsets = np.zeros(len(self.pixels) + 1, dtype=np.int64)
        for v, p in enumerate(self.pixels):
            self.offsets[v + 1] = self.offsets[v] + p.size

    def pos(self, view: np.ndarray, flat_pixel: np.ndarray) -> np.ndarray:
        out = np.empty(view.shape[0], dtype=np.int64)
        for v in np.unique(view):
            m = view == v
            out[m] = self.offsets[v] + np.searchsorted(self.pixels[v], flat_pixel[m])
        return out

    def gather(self, maps: np.ndarray) -> np.ndarray:
        """maps is (V, H, W, ...) or (V, H, W); rows follow the gather order."""
        v_total = len(self.pixels)
        flat = maps.reshape(v_total, maps.shape[1] * maps.shape[2], -1)
        parts = [flat[v][self.pixels[v]] for v in range(v_total)]
        cat = np.concatenate(parts, axis=0)
        return cat[:, 0] if maps.ndim == 3 else cat


def _train_step(params, velocity, scene: TrainingScene, cfg: TrainConfig,
                rng, lr_t: float):
    v_total, h, w = scene.labels.shape
    hw = h * w
    views = np.sort(rng.choice(v_total, size=min(cfg.views_per_step, v_total),
                               replace=False))
    n_art = int(round(cfg.artic_pixel_fraction * cfg.pixels_per_view))
    dense = {}
    for v in views:
        pix = rng.integers(0, hw, size=cfg.pixels_per_view)
        pool = scene._artic_pixels[int(v)]
        if n_art and pool.size:
            pix[:n_art] = pool[rng.integers(0, pool.size, size=n_art)]
        dense[int(v)] = pix
    pts = rng.integers(0, scene.corr.n_points, size=cfg.points_per_step)
    pairs = _sample_pairs(scene, rng, cfg.pairs_per_step)

    # observations of the sampled query points
    corr = scene.corr
    spans = [np.arange(corr.indptr[p], corr.indptr[p + 1]) for p in pts]
    obs_sel = np.concatenate(spans) if spans else np.empty(0, dtype=np.int64)
    obs_view = corr.view[obs_sel].astype(np.int64)
    obs_flat = corr.pixel_v[obs_sel].astype(np.int64) * w + corr.pixel_u[obs_sel]
    obs_point = np.repeat(np.arange(len(pts)),
                          [s.size for s in spans]) if spans else np.empty(0, dtype=np.int64)

    pair_view = pairs[:, :, 0].ravel()
    pair_flat = pairs[:, :, 1].ravel() * w + pairs[:, :, 2].ravel()

    needed = []
    for v in range(v_total):
        chunks = [obs_flat[obs_view == v], pair_flat[pair_view == v]]
        if v in dense:
            chunks.append(dense[v])
        needed.append(np.concatenate(chunks))
    gather = _Gather(needed)

    x = gather.gather(scene.backbone.astype(np.float64))
    out = _forward_flat(params, x)
    wts = cfg.weights
    terms = {}
    dch = {k: np.zeros_like(getattr(out, k)) for k in
           ("f_sem", "c_sem", "g_inst", "exist_t", "exist_r", "v_t", "v_r")}
    d_conf = np.zeros_like(out.conf_artic)

    # dense rows
    dense_view = np.concatenate([np.full(cfg.pixels_per_view, v, dtype=np.int64)
                                 for v in views])
    dense_flat = np.concatenate([dense[int(v)] for v in views])
    dpos = gather.pos(dense_view, dense_flat)

    teacher = scene.teacher.reshape(v_total, hw, -1)[dense_view, dense_flat]
    t_valid = scene.teacher_valid.reshape(v_total, hw)[dense_view, dense_flat]
    rows = dpos[t_valid]
    terms["sem2D"], g = cosine_distill_core(out.f_sem[rows], teacher[t_valid])
    np.add.at(dch["f_sem"], rows, wts.lambda_sem * wts.lambda_sem2d * g)

    eg = scene.exist_gt.reshape(v_total, 2, hw)[dense_view, :, dense_flat]  # (n,2)
    pred_e = np.stack([out.exist_t[dpos], out.exist_r[dpos]], axis=1)
    terms["exist"], g = focal_core(pred_e, eg, wts.focal_gamma, wts.focal_alpha)
    np.add.at(dch["exist_t"], dpos, wts.lambda_artic * wts.lambda_exist * g[:, 0])
    np.add.at(dch["exist_r"], dpos, wts.lambda_artic * wts.lambda_exist * g[:, 1])

    mg = scene.motion_gt.reshape(v_total, hw, 3)[dense_view, dense_flat]
    pred_v = np.stack([out.v_t[dpos], out.v_r[dpos]], axis=1)          # (n,2,3)
    gt_v = np.stack([mg, mg], axis=1)
    terms["motion"], g = squared_error_core(pred_v, gt_v, eg > 0)
    np.add.at(dch["v_t"], dpos, wts.lambda_artic * wts.lambda_motion * g[:, 0])
    np.add.at(dch["v_r"], dpos, wts.lambda_artic * wts.lambda_motion * g[:, 1])

    # consistency rows
    opos = gather.pos(obs_view, obs_flat)
    c_sem_obs = out.c_sem[opos]
    c_art_obs = out.conf_artic[opos]

    def cons(feats, conf_obs, lam, into, conf_into=None):
        loss, gf, gc = consistency_core(feats, conf_obs, obs_point, len(pts),
                                        stop_gradient=cfg.stop_gradient)
        for arr, sl in into:
            np.add.at(arr, opos, lam * gf[:, sl] if sl is not None else lam * gf[:, 0])
        if conf_into is not None and not cfg.stop_gradient:
            np.add.at(conf_into, opos, lam * gc)
        return loss

    terms["cons_sem"] = cons(out.f_sem[opos], c_sem_obs,
                             wts.lambda_sem * wts.lambda_cons,
                             [(dch["f_sem"], slice(None))], dch["c_sem"])
    terms["cons_inst"] = cons(out.g_inst[opos], c_sem_obs,
                              wts.lambda_inst * wts.lambda_cons,
                              [(dch["g_inst"], slice(None))], dch["c_sem"])
    ev = np.stack([out.exist_t[opos], out.exist_r[opos]], axis=1)
    loss, gf, gc = consistency_core(ev, c_art_obs, obs_point, len(pts),
                                    stop_gradient=cfg.stop_gradient)
    terms["cons_exist"] = loss
    lam = wts.lambda_artic * wts.lambda_cons_exist
    np.add.at(dch["exist_t"], opos, lam * gf[:, 0])
    np.add.at(dch["exist_r"], opos, lam * gf[:, 1])
    if not cfg.stop_gradient:
        np.add.at(d_conf, opos, lam * gc)
    mv = np.concatenate([out.v_t[opos], out.v_r[opos]], axis=1)
    loss, gf, gc = consistency_core(mv, c_art_obs, obs_point, len(pts),
                                    stop_gradient=cfg.stop_gradient)
    terms["cons_motion"] = loss
    lam = wts.lambda_artic * wts.lambda_cons_motion
    np.add.at(dch["v_t"], opos, lam * gf[:, :3])
    np.add.at(dch["v_r"], opos, lam * gf[:, 3:])
    if not cfg.stop_gradient:
        np.add.at(d_conf, opos, lam * gc)

    # contrastive rows
    if pairs.shape[0]:
        ppos = gather.pos(pair_view, pair_flat).reshape(-1, 2)
        li = scene.labels.reshape(v_total, hw)[pairs[:, 0, 0], pairs[:, 0, 1] * w + pairs[:, 0, 2]]
        lj = scene.labels.reshape(v_total, hw)[pairs[:, 1, 0], pairs[:, 1, 1] * w + pairs[:, 1, 2]]
        loss, gi, gj = contrastive_core(out.g_inst[ppos[:, 0]], out.g_inst[ppos[:, 1]],
                                        li == lj, wts.margin)
        terms["grouping"] = loss
        lam = wts.lambda_inst * wts.lambda_group
        np.add.at(dch["g_inst"], ppos[:, 0], lam * gi)
        np.add.at(dch["g_inst"], ppos[:, 1], lam * gj)
    else:
        terms["grouping"] = 0.0

    terms["total"] = (
        wts.lambda_sem * (wts.lambda_sem2d * terms["sem2D"] + wts.lambda_cons * terms["cons_sem"])
        + wts.lambda_inst * (wts.lambda_group * terms["grouping"] + wts.lambda_cons * terms["cons_inst"])
        + wts.lambda_artic * (wts.lambda_exist * terms["exist"]
                              + wts.lambda_cons_exist * terms["cons_exist"]
                              + wts.lambda_motion * terms["motion"]
                              + wts.lambda_cons_motion * terms["cons_motion"]))

    grads = _backward_flat(params, out, {
        "f_sem": dch["f_sem"], "c_sem": dch["c_sem"], "g_inst": dch["g_inst"],
        "exist_t": dch["exist_t"], "exist_r": dch["exist_r"],
        "v_t": dch["v_t"], "v_r": dch["v_r"], "c_exist": d_conf})
    for name, g in grads.items():
        if cfg.weight_decay:
            g = g + cfg.weight_decay * params.tensors[name]
        velocity[name] = cfg.momentum * velocity[name] + g
        params.tensors[name] -= lr_t * velocity[name]
    return terms


def train(scenes: list[TrainingScene], config: TrainConfig,
          params: HeadParams | None = None, dump_dir=None):
    """Momentum SGD over the sampled multi-task objective.

    Returns (final params, per-step term logs). Aborts with
    TrainDivergedError on a non-finite loss, dumping the step's inputs.
    """
    if not scenes:
        raise ValueError("no training scenes")
    d_s = scenes[0].teacher.shape[-1]
    d_b = scenes[0].backbone.shape[-1]
    if params is None:
        params = init_head_params(d_b, d_s, config.d_g, config.hidden, config.seed)
    else:
        params = params.copy()
    velocity = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 419)))
    log = []
    for step in range(config.steps):
        scene = scenes[step % len(scenes)]
        lr_t = max(config.min_lr, config.lr * config.decay ** step)
        terms = _train_step(params, velocity, scene, config, rng, lr_t)
        if not np.isfinite(terms["total"]):
            path = _dump_step(dump_dir, step, scene, params)
            raise TrainDivergedError(step, path)
        terms["step"] = step
        terms["lr"] = lr_t
        log.append(terms)
    return params, log


def _dump_step(dump_dir, step, scene, params):
    import tempfile
    from pathlib import Path
    from . import fileio
    base = Path(dump_dir) if dump_dir else Path(tempfile.gettempdir())
    base.mkdir(parents=True, exist_ok=True)
    path = base / f"diverged_step{step:06d}.bin"
    tensors = {f"param/{k}": v for k, v in params.tensors.items()}
    tensors["backbone"] = scene.backbone
    tensors["labels"] = scene.labels
    fileio.write_tensors(path, tensors)
    return path


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, params: HeadParams) -> None:
    from . import fileio
    meta = np.array([params.d_b, params.d_s, params.d_g, params.hidden], dtype=np.int64)
    tensors = {"meta/dims": meta}
    for k, v in params.tensors.items():
        tensors[f"param/{k}"] = v
    fileio.write_tensors(path, tensors)


def load_checkpoint(path) -> HeadParams:
    from . import fileio
    t = fileio.read_tensors(path)
    d_b, d_s, d_g, hidden = (int(x) for x in t.pop("meta/dims"))
    tensors = {k.split("/", 1)[1]: v for k, v in t.items()}
    return HeadParams(tensors=tensors, d_b=d_b, d_s=d_s, d_g=d_g, hidden=hidden)
