"""From per-view head outputs to discrete scene understanding.

Per-point features are fused across views by confidence-weighted
averaging, optionally compacted with farthest-point sampling (rejected
points average into their nearest kept point), then clustered into
instances, labeled by prototype cosine similarity, queried by arbitrary
unit vectors, and summarized into per-instance articulation estimates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CorrespondenceSet, farthest_point_sample, nearest_neighbor_map
from .lifting import dbscan
from .losses import PredictedMaps
from .synth import KIND_NONE, KIND_ROTATION, KIND_TRANSLATION
from .teachers import PrototypeBank


@dataclass
class FusedCloud:
    points: np.ndarray       # (N, 3)
    sem: np.ndarray          # (N, d_s)
    inst: np.ndarray         # (N, d_g)
    exist_t: np.ndarray      # (N,)
    exist_r: np.ndarray      # (N,)
    v_t: np.ndarray          # (N, 3)
    v_r: np.ndarray          # (N, 3)
    source_index: np.ndarray  # (N,) index into the original query cloud
    n_dropped: int           # query points observed in no view


@dataclass
class InstanceResult:
    point_ids: np.ndarray    # (N,) int32, -1 noise
    scores: np.ndarray       # (K,) in (0, 1], cluster size / labeled count

    @property
    def n_instances(self) -> int:
        return self.scores.shape[0]


@dataclass
class ArticulationEstimate:
    instance: int
    kind: int                # KIND_* constant
    direction: np.ndarray    # (3,) mean motion vector of kept points
    support: int             # points above the existence threshold

    def to_json(self) -> dict:
        names = {KIND_NONE: "none", KIND_TRANSLATION: "translation",
                 KIND_ROTATION: "rotation"}
        return {"instance": int(self.instance), "type": names[self.kind],
                "direction": [float(x) for x in self.direction],
                "support": int(self.support)}


def _fuse_kind(values: np.ndarray, conf_obs: np.ndarray, point_idx: np.ndarray,
               n_points: int) -> np.ndarray:
    d = values.shape[1]
    num = np.zeros((n_points, d))
    np.add.at(num, point_idx, conf_obs[:, None] * values)
    den = np.bincount(point_idx, weights=conf_obs, minlength=n_points)
    return num / np.where(den > 0, den, 1.0)[:, None]


def fuse_views(preds: list[PredictedMaps], corr: CorrespondenceSet,
               fps_budget: int | None = None, uniform_confidence: bool = False) -> FusedCloud:
    """Confidence-weighted per-point fusion, then optional FPS compaction.

    Semantic and instance features fuse under the semantic confidence;
    existence and motion channels under the articulation confidence. With
    ``uniform_confidence`` every observation weighs the same (the
    mean-pooling ablation). When a budget below the cloud size is given,
    the cloud is farthest-point compacted and every rejected point's
    features average into its nearest kept point.
    """
    f_sem = np.stack([p.f_sem for p in preds]).astype(np.float64)
    g_inst = np.stack([p.g_inst for p in preds]).astype(np.float64)
    c_sem = np.stack([p.c_sem for p in preds]).astype(np.float64)
    c_art = np.stack([p.c_exist for p in preds]).astype(np.float64)
    ex = np.stack([np.stack([p.exist_t, p.exist_r], axis=-1) for p in preds])
    vv = np.stack([np.concatenate([p.v_t, p.v_r], axis=-1) for p in preds])

    vw, pu, pv = corr.view, corr.pixel_u, corr.pixel_v
    pidx = np.repeat(np.arange(corr.n_points), corr.counts())
    cs = np.ones(vw.shape[0]) if uniform_confidence else c_sem[vw, pv, pu]
    ca = np.ones(vw.shape[0]) if uniform_confidence else c_art[vw, pv, pu]

    n = corr.n_points
    sem = _fuse_kind(f_sem[vw, pv, pu], cs, pidx, n)
    inst = _fuse_kind(g_inst[vw, pv, pu], cs, pidx, n)
    exist = _fuse_kind(ex[vw, pv, pu], ca, pidx, n)
    vel = _fuse_kind(vv[vw, pv, pu], ca, pidx, n)

    observed = corr.counts() > 0
    keep = np.nonzero(observed)[0]
    cloud = FusedCloud(points=corr.queries[keep], sem=sem[keep], inst=inst[keep],
                       exist_t=exist[keep, 0], exist_r=exist[keep, 1],
                       v_t=vel[keep, :3], v_r=vel[keep, 3:],
                       source_index=keep,
                       n_dropped=int(corr.n_points - keep.size))
    if fps_budget is None or fps_budget >= cloud.points.shape[0]:
        return cloud

    reps = farthest_point_sample(cloud.points, fps_budget, start=0)
    group = nearest_neighbor_map(cloud.points[reps], cloud.points)
    counts = np.bincount(group, minlength=fps_budget).astype(np.float64)

    def pool(a):
        acc = np.zeros((fps_budget, a.shape[1]))
        np.add.at(acc, group, a)
        return acc / counts[:, None]

    exist2 = pool(np.stack([cloud.exist_t, cloud.exist_r], axis=1))
    return FusedCloud(points=cloud.points[reps], sem=pool(cloud.sem),
                      inst=pool(cloud.inst),
                      exist_t=exist2[:, 0], exist_r=exist2[:, 1],
                      v_t=pool(cloud.v_t), v_r=pool(cloud.v_r),
                      source_index=cloud.source_index[reps],
                      n_dropped=cloud.n_dropped)


def cluster_instances(embeddings: np.ndarray, k: int | None = None,
                      eps: float = 0.1, min_pts: int = 10,
                      seed: int = 0) -> InstanceResult:
    """Group embedding vectors into instances.

    Density mode (k=None) runs DBSCAN in embedding space; partition mode
    runs greedy D^2 seeding plus Lloyd iterations to convergence
    (tol 1e-6, max 100 iterations), deterministic in the seed. Scores are
    normalized cluster sizes.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    if e.shape[0] == 0:
        raise ValueError("empty embedding cloud")
    if k is None:
        labels = dbscan(e, eps, min_pts).astype(np.int32)
    else:
        if k > e.shape[0]:
            raise ValueError(f"k={k} exceeds point count {e.shape[0]}")
        labels = _kmeans(e, k, seed).astype(np.int32)
    n_labeled = int((labels >= 0).sum())
    n_inst = int(labels.max()) + 1 if n_labeled else 0
    sizes = np.bincount(labels[labels >= 0], minlength=n_inst).astype(np.float64)
    scores = sizes / max(n_labeled, 1)
    return InstanceResult(point_ids=labels, scores=scores)


def _kmeans(x: np.ndarray, k: int, seed: int, tol: float = 1e-6,
            max_iter: int = 100) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 523)))
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = x[int(rng.integers(n))]
        else:
            r = rng.random() * total
            centers[j] = x[int(np.searchsorted(np.cumsum(d2), r))]
        d2 = np.minimum(d2, np.sum((x - centers[j]) ** 2, axis=1))

    prev_obj = np.inf
    assign = None
    for _ in range(max_iter):
        d2all = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2) \
            if n * k <= 4e6 else _chunked_d2(x, centers)
        assign = np.argmin(d2all, axis=1)
        obj = float(d2all[np.arange(n), assign].sum())
        if obj > prev_obj + 1e-9:
            raise AssertionError("kmeans objective increased")
        new_centers = centers.copy()
        for j in range(k):
            m = assign == j
            if m.any():
                new_centers[j] = x[m].mean(axis=0)
            else:
                # reseed an emptied cluster with the worst-assigned point
                far = int(np.argmax(d2all[np.arange(n), assign]))
                new_centers[j] = x[far]
        shift = np.sqrt(np.sum((new_centers - centers) ** 2, axis=1)).max()
        centers = new_centers
        if shift < tol and obj <= prev_obj:
            prev_obj = obj
            break
        prev_obj = obj
    return assign


def _chunked_d2(x, centers):
    out = np.empty((x.shape[0], centers.shape[0]))
    step = max(1, int(4e6) // centers.shape[0])
    for lo in range(0, x.shape[0], step):
        out[lo:lo + step] = np.sum((x[lo:lo + step, None, :] - centers[None, :, :]) ** 2, axis=2)
    return out


def assign_classes(features: np.ndarray, bank: PrototypeBank):
    """Cosine-argmax class per point; zero-norm features become background (-1).

    Returns (class ids, zero-norm count). Ties break to the lower class id.
    """
    f = np.asarray(features, dtype=np.float64)
    norms = np.sqrt(np.sum(f * f, axis=-1))
    ok = norms > 0
    sims = (f / np.where(ok, norms, 1.0)[:, None]) @ bank.class_vectors.T
    ids = np.argmax(sims, axis=1).astype(np.int32)
    ids[~ok] = -1
    return ids, int((~ok).sum())


def query(features: np.ndarray, query_vector: np.ndarray) -> np.ndarray:
    """Per-point cosine similarity heatmap for a unit query vector."""
    q = np.asarray(query_vector, dtype=np.float64)
    if abs(np.linalg.norm(q) - 1.0) > 1e-6:
        raise ValueError("query vector must be unit norm")
    f = np.asarray(features, dtype=np.float64)
    norms = np.sqrt(np.sum(f * f, axis=-1))
    return (f @ q) / np.where(norms > 0, norms, 1.0)


def aggregate_articulation(instances: InstanceResult, cloud: FusedCloud,
                           threshold: float = 0.5) -> list[ArticulationEstimate]:
    """One motion estimate per instance from its confident points.

    Points with max existence below the threshold are discarded; the
    surviving points vote for a motion type by mean existence (translation
    wins ties) and the winning type's vectors are averaged.
    """
    out = []
    for iid in range(instances.n_instances):
        sel = instances.point_ids == iid
        et = cloud.exist_t[sel]
        er = cloud.exist_r[sel]
        kept = np.maximum(et, er) >= threshold
        if not kept.any():
            out.append(ArticulationEstimate(iid, KIND_NONE, np.zeros(3), 0))
            continue
        mt = float(et[kept].mean())
        mr = float(er[kept].mean())
        if mt >= mr:
            kind, vecs = KIND_TRANSLATION, cloud.v_t[sel][kept]
        else:
            kind, vecs = KIND_ROTATION, cloud.v_r[sel][kept]
        out.append(ArticulationEstimate(iid, kind, vecs.mean(axis=0), int(kept.sum())))
    return out
