"""Supervision lifting: 2D segments -> 3D groups -> consistent per-view ids.

View-local 2D segments are unprojected with ground-truth depth, merged
across views by greedy voxel-IoU, filtered for spatial outliers with
DBSCAN, and reprojected so every view shares one instance id space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .geometry import Camera, DepthMap, unproject_grid


@dataclass
class LiftedCloud:
    points: np.ndarray    # (P, 3)
    view: np.ndarray      # (P,) int32
    segment: np.ndarray   # (P,) int32 view-local 2D segment id
    pixel_u: np.ndarray   # (P,) int32
    pixel_v: np.ndarray   # (P,) int32
    n_skipped: int        # labeled pixels dropped for invalid depth


@dataclass
class Segment3D:
    indices: np.ndarray             # unique indices into the lifted cloud
    sources: list[tuple[int, int]]  # (view, 2D segment id) provenance

    def __post_init__(self):
        if self.indices.size == 0:
            raise ValueError("Segment3D must be non-empty")


@dataclass
class ConsistentLabels:
    maps: np.ndarray     # (V, H, W) int32, -1 unassigned
    n_segments: int


def lift_masks(frames: list[tuple[Camera, DepthMap, np.ndarray]]) -> LiftedCloud:
    """One 3D point per labeled valid-depth pixel, tags preserved."""
    pts, views, segs, pus, pvs = [], [], [], [], []
    skipped = 0
    for i, (camera, depth, seg) in enumerate(frames):
        seg = np.asarray(seg)
        labeled = seg >= 0
        ok = labeled & (depth.values > 0.0)
        skipped += int((labeled & ~ok).sum())
        world, _ = unproject_grid(camera, depth.values)
        vv, uu = np.nonzero(ok)
        pts.append(world[vv, uu])
        views.append(np.full(vv.size, i, dtype=np.int32))
        segs.append(seg[vv, uu].astype(np.int32))
        pus.append(uu.astype(np.int32))
        pvs.append(vv.astype(np.int32))
    return LiftedCloud(points=np.concatenate(pts) if pts else np.empty((0, 3)),
                       view=np.concatenate(views),
                       segment=np.concatenate(segs),
                       pixel_u=np.concatenate(pus),
                       pixel_v=np.concatenate(pvs),
                       n_skipped=skipped)


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Density clustering; labels in discovery order, -1 for noise.

    Neighborhoods are closed balls (<= eps) including the point itself.
    Deterministic under fixed point order: seeds are scanned in index order
    and expansion proceeds through index-sorted neighbor lists, so border
    points join the first cluster that reaches them.
    """
    if eps <= 0.0:
        raise ValueError(f"eps must be positive, got {eps}")
    if min_pts < 1:
        raise ValueError(f"min_pts must be >= 1, got {min_pts}")
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError("points must be (N, D)")
    n = pts.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.int64)
    if pts.shape[1] == 3:
        indptr, indices = kernels.radius_neighbors(pts, eps)
    else:
        indptr, indices = _radius_neighbors_blas(pts, eps)
    return kernels.dbscan_expand(indptr, indices, min_pts, n)


def _radius_neighbors_blas(points, eps):
    """Brute-force CSR neighbors for high-dimensional inputs, via blocked GEMM."""
    n = points.shape[0]
    sq = np.einsum("ij,ij->i", points, points)
    eps2 = eps * eps
    rows = []
    block = max(1, int(4e7) // max(1, n))
    for lo in range(0, n, block):
        hi = min(n, lo + block)
        d2 = sq[lo:hi, None] + sq[None, :] - 2.0 * (points[lo:hi] @ points.T)
        np.maximum(d2, 0.0, out=d2)
        for r in range(hi - lo):
            rows.append(np.nonzero(d2[r] <= eps2)[0].astype(np.int64))
    indptr = np.zeros(n + 1, dtype=np.int64)
    for i, r in enumerate(rows):
        indptr[i + 1] = indptr[i] + r.shape[0]
    return indptr, np.concatenate(rows) if rows else np.empty(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# voxel-IoU merging

def _voxel_keys(points, voxel_size):
    cells = np.floor(points / voxel_size).astype(np.int64)
    # pack into one int64; coordinates are room-scale so 21 bits per axis is ample
    key = ((cells[:, 0] + (1 << 20)) << 42) \
        + ((cells[:, 1] + (1 << 20)) << 21) \
        + (cells[:, 2] + (1 << 20))
    return np.unique(key)


def _voxel_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.intersect1d(a, b, assume_unique=True).size
    if inter == 0:
        return 0.0
    return inter / (a.size + b.size - inter)


def merge_segments(lifted: LiftedCloud, iou_threshold: float = 0.25,
                   voxel_size: float = 0.05, dbscan_eps: float = 0.1,
                   dbscan_min_pts: int = 10,
                   frames: list[tuple[Camera, DepthMap]] | None = None,
                   depth_tol: float = 0.02,
                   max_absorb_rounds: int = 4) -> list[Segment3D]:
    """Greedy cross-view merging of lifted 2D segments by voxel IoU.

    While any allowed pair reaches the IoU threshold, the highest-IoU pair
    merges (ties to the lowest segment indices). Pairs of segments that are
    both single-sourced from the same view are never candidates.

    When ``frames`` is given, a projective absorption stage follows: a
    group's points are projected into every other view with the depth
    visibility test, each hit votes for the group owning that pixel, and a
    group whose cross-view votes favor one other group over itself is
    absorbed into it. This rescues fragments whose voxel overlap is too
    coarse to register (small glancing-view segments inside larger groups).

    Every resulting group is then DBSCAN-filtered: points labeled noise are
    dropped, and groups left empty disappear.
    """
    keys = {}
    order = np.lexsort((lifted.segment, lifted.view))
    for idx in order:
        k = (int(lifted.view[idx]), int(lifted.segment[idx]))
        keys.setdefault(k, []).append(int(idx))
    segs = [np.array(v, dtype=np.int64) for v in keys.values()]
    sources = [[k] for k in keys.keys()]
    voxels = [_voxel_keys(lifted.points[s], voxel_size) for s in segs]
    views = [{k[0]} for k in keys.keys()]
    alive = [True] * len(segs)

    def allowed(i, j):
        return not (len(views[i]) == 1 and views[i] == views[j])

    # pairwise IoU cache over alive segments
    n0 = len(segs)
    iou = {}
    for i in range(n0):
        for j in range(i + 1, n0):
            if allowed(i, j):
                v = _voxel_iou(voxels[i], voxels[j])
                if v >= iou_threshold:
                    iou[(i, j)] = v

    while iou:
        (bi, bj) = min(iou, key=lambda p: (-iou[p], p))
        segs[bi] = np.concatenate([segs[bi], segs[bj]])
        voxels[bi] = np.union1d(voxels[bi], voxels[bj])
        sources[bi] = sources[bi] + sources[bj]
        views[bi] = views[bi] | views[bj]
        alive[bj] = False
        iou = {p: v for p, v in iou.items() if bj not in p and bi not in p}
        for k in range(len(segs)):
            if k == bi or not alive[k]:
                continue
            if not allowed(*sorted((bi, k))):
                continue
            v = _voxel_iou(voxels[bi], voxels[k])
            if v >= iou_threshold:
                iou[tuple(sorted((bi, k)))] = v

    if frames is not None:
        segs, sources, alive, hits = _absorb_by_projection(
            lifted, keys, segs, sources, alive, frames, depth_tol, max_absorb_rounds)
        segs, sources, alive = _attach_residuals(
            lifted, segs, sources, alive, hits, frames, dbscan_min_pts,
            3.0 * voxel_size)

    out = []
    for i in range(len(segs)):
        if not alive[i]:
            continue
        pts = lifted.points[segs[i]]
        labels = dbscan(pts, dbscan_eps, dbscan_min_pts)
        kept = segs[i][labels >= 0]
        if kept.size == 0:
            continue
        out.append(Segment3D(indices=np.sort(kept), sources=sorted(sources[i])))
    return out


def _absorb_by_projection(lifted, keys, segs, sources, alive, frames,
                          depth_tol, max_rounds, vote_ratio=0.25, min_votes=3):
    """Merge groups whose cross-view pixels substantially belong to another.

    A group's points are projected into every view other than their source
    view; each visible hit votes for the group owning that pixel. The group
    is absorbed by its top-voted peer when those votes reach ``vote_ratio``
    of its own-group votes. The measured separation is wide: split halves
    of one instance vote for each other at ratios above ~0.4, while pixels
    straddling the contact line of two touching instances contribute below
    ~0.03.
    """
    orig_index = {k: i for i, k in enumerate(keys)}
    # per view, which original segment owns each pixel
    n_views = len(frames)
    h = frames[0][1].height
    w = frames[0][1].width
    pix_owner = np.full((n_views, h, w), -1, dtype=np.int64)
    for k, rows in keys.items():
        oid = orig_index[k]
        rows = np.asarray(rows)
        pix_owner[lifted.view[rows], lifted.pixel_v[rows], lifted.pixel_u[rows]] = oid

    votes = {}
    for _ in range(max_rounds):
        group_of_orig = np.full(len(segs), -1, dtype=np.int64)
        for g in range(len(segs)):
            if not alive[g]:
                continue
            for src in sources[g]:
                group_of_orig[orig_index[src]] = g
        merged_any = False
        votes = {}
        for g in range(len(segs)):
            if not alive[g]:
                continue
            pts = lifted.points[segs[g]]
            own_view = lifted.view[segs[g]]
            tally = np.zeros(len(segs), dtype=np.int64)
            for vi, (camera, depth) in enumerate(frames):
                sel = own_view != vi
                if not sel.any():
                    continue
                hit, pu, pv, _ = kernels.visible_observations(
                    pts[sel], camera.rotation, camera.translation,
                    camera.fx, camera.fy, camera.cx, camera.cy,
                    camera.width, camera.height, depth.values, depth_tol)
                if hit.size == 0:
                    continue
                owners = pix_owner[vi, pv, pu]
                owners = owners[owners >= 0]
                groups = group_of_orig[owners]
                tally += np.bincount(groups[groups >= 0], minlength=len(segs))
            votes[g] = tally
        for g in sorted(votes):
            if not alive[g]:
                continue
            tally = votes[g]
            self_votes = int(tally[g])
            tally = tally.copy()
            tally[g] = -1
            best = int(np.argmax(tally))
            if tally[best] >= max(min_votes, vote_ratio * max(self_votes, 1)) \
                    and alive[best]:
                segs[best] = np.concatenate([segs[best], segs[g]])
                sources[best] = sources[best] + sources[g]
                alive[g] = False
                merged_any = True
        if not merged_any:
            break
    return segs, sources, alive, votes


def _depth_normals(camera, depth) -> np.ndarray:
    """Per-pixel unit surface normals from the unprojected depth map.

    Normals are estimated twice, from forward and from backward
    differences; pixels where the two disagree (surface creases, occlusion
    edges) or that touch invalid depth come back as zero vectors. On a
    locally planar surface both estimates coincide at any incidence angle.
    """
    world, valid = unproject_grid(camera, depth.values)
    h, w = depth.values.shape

    def estimate(sign):
        du = np.zeros_like(world)
        dv = np.zeros_like(world)
        okd = np.zeros((h, w), dtype=bool)
        if sign > 0:
            du[:, :-1] = world[:, 1:] - world[:, :-1]
            dv[:-1, :] = world[1:, :] - world[:-1, :]
            okd[:-1, :-1] = valid[:-1, :-1] & valid[:-1, 1:] & valid[1:, :-1]
        else:
            du[:, 1:] = world[:, 1:] - world[:, :-1]
            dv[1:, :] = world[1:, :] - world[:-1, :]
            okd[1:, 1:] = valid[1:, 1:] & valid[1:, :-1] & valid[:-1, 1:]
        n = np.cross(du, dv)
        norm = np.sqrt(np.sum(n * n, axis=-1))
        okd &= norm > 0
        out = np.zeros_like(world)
        out[okd] = n[okd] / norm[okd][:, None]
        return out, okd

    n_f, ok_f = estimate(+1)
    n_b, ok_b = estimate(-1)
    ok = ok_f & ok_b & (np.sum(n_f * n_b, axis=-1) >= 0.999)
    out = np.zeros_like(world)
    out[ok] = n_f[ok]
    return out


def _attach_residuals(lifted, segs, sources, alive, votes, frames,
                      min_pts, max_dist):
    """Attach leftover splinters to the group owning their nearest surface.

    A group is a splinter when it is too small to survive the outlier
    filter, or when it is projectively blind: its points hit almost no
    pixels in other views (occlusion-shadow patches, glancing slivers).
    Such groups carry no merge evidence, but their points still sit on the
    owning instance's surface, so geometry decides: candidate points must
    be near the splinter, lie in the splinter's fitted plane, and carry a
    depth-map normal parallel to that plane's normal. The last condition
    separates a wall patch from the floor strip along their junction.
    """
    def is_splinter(g):
        size = segs[g].size
        if size < 3 * min_pts:
            return True
        tally = votes.get(g)
        if tally is None:
            return False
        total = int(tally.sum())
        foreign = total - int(tally[g])
        if total < max(3, 0.2 * size):
            return True
        return foreign == 0 and size < 5 * min_pts

    splinters = [g for g in range(len(segs)) if alive[g] and is_splinter(g)]
    if not splinters or all(g in splinters for g in range(len(segs)) if alive[g]):
        return segs, sources, alive
    normals = np.concatenate(
        [_depth_normals(camera, depth)[lifted.pixel_v[lifted.view == vi],
                                       lifted.pixel_u[lifted.view == vi]]
         if (lifted.view == vi).any() else np.empty((0, 3))
         for vi, (camera, depth) in enumerate(frames)])
    # the concatenation above follows lifted's own (view-major) row order
    for g in splinters:
        candidates = [i for i in range(len(segs)) if alive[i] and i != g]
        target = _pick_attach_target(lifted.points[segs[g]], candidates,
                                     [lifted.points[segs[i]] for i in candidates],
                                     [normals[segs[i]] for i in candidates],
                                     max_dist)
        if target < 0:
            continue
        segs[target] = np.concatenate([segs[target], segs[g]])
        sources[target] = sources[target] + sources[g]
        alive[g] = False
    return segs, sources, alive


def _pick_attach_target(pts, candidates, cand_pts, cand_normals, max_dist,
                        surface_tol=0.012):
    """Vote for the group whose surface a splinter lies on.

    For every splinter point and candidate group, take the candidate's
    nearest valid-normal point and measure the distance from the splinter
    point to that point's tangent plane. A point on the candidate's surface
    scores ~0 even when sample spacing or an occlusion shadow keeps the
    nearest point far; a point merely touching along a junction line scores
    its offset from the other surface. Each splinter point votes for its
    best on-surface candidate; no eligible candidate anywhere means the
    splinter is a genuinely separate instance and stays on its own.
    """
    reach = max(max_dist, 0.35)  # occlusion shadows span tens of centimeters
    n = pts.shape[0]
    n_cand = len(candidates)

    if n >= 5:
        centroid = pts.mean(axis=0)
        _, svals, vt = np.linalg.svd(pts - centroid, full_matrices=False)
        normal = vt[-1]
        # a trustworthy plane needs genuine 2D extent; thin strips fall
        # through to the tangent-distance rule below
        if svals[1] > 0.03 and np.abs((pts - centroid) @ normal).max() <= surface_tol:
            best, best_votes = -1, 0
            for j in range(n_cand):
                cn = cand_normals[j]
                ok = (np.sum(cn * cn, axis=1) > 0.5) \
                    & (np.abs(cn @ normal) >= 0.8) \
                    & (np.abs((cand_pts[j] - centroid) @ normal) <= surface_tol)
                if not ok.any():
                    continue
                d2 = _min_dist2(cand_pts[j][ok], pts)
                v = int((d2 <= reach * reach).sum())
                if v > best_votes:
                    best, best_votes = candidates[j], v
            if best >= 0:
                return best
            return _contact_target(pts, candidates, cand_pts, 0.02)

    # tiny or non-planar splinter: per-point distance to each candidate's
    # local tangent plane decides (exact for points on the candidate surface)
    surf = np.full((n, n_cand), np.inf)
    dist = np.full((n, n_cand), np.inf)
    for j in range(n_cand):
        cp = cand_pts[j]
        cn = cand_normals[j]
        ok = np.sum(cn * cn, axis=1) > 0.5
        if not ok.any():
            continue
        cp = cp[ok]
        cn = cn[ok]
        nn = kernels.nearest_neighbors(cp, pts)
        q = cp[nn]
        d = np.sqrt(np.sum((q - pts) ** 2, axis=1))
        s = np.abs(np.sum((pts - q) * cn[nn], axis=1))
        keep = d <= reach
        surf[keep, j] = s[keep]
        dist[keep, j] = d[keep]
    eligible = surf <= surface_tol
    if not eligible.any():
        return _contact_target(pts, candidates, cand_pts, 0.02)
    votes = np.zeros(n_cand, dtype=np.int64)
    for i in range(n):
        row = np.nonzero(eligible[i])[0]
        if row.size == 0:
            continue
        # best surface fit first, proximity as the tie-breaker
        order = sorted(row, key=lambda j: (surf[i, j], dist[i, j], candidates[j]))
        votes[order[0]] += 1
    if votes.sum() == 0:
        return -1
    return candidates[int(np.argmax(votes))]


def _min_dist2(cand, pts):
    """Per-candidate-point squared distance to the nearest splinter point."""
    out = np.full(cand.shape[0], np.inf)
    step = max(1, int(2e7) // max(1, pts.shape[0]))
    for lo in range(0, cand.shape[0], step):
        delta = cand[lo:lo + step, None, :] - pts[None, :, :]
        out[lo:lo + step] = np.min(np.einsum("ijk,ijk->ij", delta, delta), axis=1)
    return out


def _contact_target(pts, candidates, cand_pts, radius):
    """Fallback: the candidate with the most points in direct contact range."""
    best, best_votes = -1, 0
    for j in range(len(candidates)):
        d2 = _min_dist2(cand_pts[j], pts)
        v = int((d2 <= radius * radius).sum())
        if v > best_votes:
            best, best_votes = candidates[j], v
    return best


def reproject_labels(merged: list[Segment3D], frames: list[tuple[Camera, DepthMap]],
                     lifted: LiftedCloud, depth_tol: float = 0.02) -> ConsistentLabels:
    """Paint merged segment ids into every view.

    A pixel takes the id of the merged segment owning the lifted point that
    best matches the view's depth there (smallest |z - D|, ties to smaller
    depth, then lower segment id, then lower point index). Pixels reached
    by no visible point stay -1.
    """
    if not merged:
        raise ValueError("no merged segments to reproject")
    all_idx = np.concatenate([s.indices for s in merged])
    seg_of = np.concatenate([np.full(s.indices.size, sid, dtype=np.int64)
                             for sid, s in enumerate(merged)])
    pts = lifted.points[all_idx]
    n_views = len(frames)
    h = frames[0][1].height
    w = frames[0][1].width
    maps = np.full((n_views, h, w), -1, dtype=np.int32)
    for vi, (camera, depth) in enumerate(frames):
        hit, pu, pv, z = kernels.visible_observations(
            pts, camera.rotation, camera.translation,
            camera.fx, camera.fy, camera.cx, camera.cy,
            camera.width, camera.height, depth.values, depth_tol)
        if hit.size == 0:
            continue
        score = np.abs(z - depth.values[pv, pu])
        flat = pv * w + pu
        order = np.lexsort((all_idx[hit], seg_of[hit], z, score, flat))
        flat_o = flat[order]
        first = np.ones(flat_o.size, dtype=bool)
        first[1:] = flat_o[1:] != flat_o[:-1]
        sel = order[first]
        maps[vi].ravel()[flat[sel]] = seg_of[hit[sel]].astype(np.int32)
    return ConsistentLabels(maps=maps, n_segments=len(merged))
