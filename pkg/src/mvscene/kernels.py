"""Hot numeric kernels.

Every kernel exists twice: a numba ``@njit`` build and a pure-numpy
fallback with identical semantics (same comparison order, same tie
rules, so integer outputs match exactly between the two paths).  The
active path is chosen once at import time from the ``MVSCENE_NUMBA``
environment variable; set ``MVSCENE_NUMBA=0`` to force the numpy path.

``benchmarks/bench_kernels.py`` times the two paths side by side.
"""

from __future__ import annotations

import os

import numpy as np

_FLAG = os.environ.get("MVSCENE_NUMBA", "1").strip().lower()
NUMBA_ENABLED = _FLAG not in ("0", "false", "off", "no")

if NUMBA_ENABLED:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - numba is a hard dep, but stay usable
        NUMBA_ENABLED = False

if not NUMBA_ENABLED:
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(f):
            return f

        return wrap


# ---------------------------------------------------------------------------
# farthest point sampling

@njit(cache=True)
def _fps_jit(points, k, start):
    n = points.shape[0]
    out = np.empty(k, dtype=np.int64)
    out[0] = start
    dist = np.empty(n, dtype=np.float64)
    px, py, pz = points[start, 0], points[start, 1], points[start, 2]
    for i in range(n):
        dx = points[i, 0] - px
        dy = points[i, 1] - py
        dz = points[i, 2] - pz
        dist[i] = dx * dx + dy * dy + dz * dz
    for j in range(1, k):
        best = 0
        bestd = dist[0]
        for i in range(1, n):
            if dist[i] > bestd:
                bestd = dist[i]
                best = i
        out[j] = best
        px, py, pz = points[best, 0], points[best, 1], points[best, 2]
        for i in range(n):
            dx = points[i, 0] - px
            dy = points[i, 1] - py
            dz = points[i, 2] - pz
            d = dx * dx + dy * dy + dz * dz
            if d < dist[i]:
                dist[i] = d
    return out


def _fps_np(points, k, start):
    n = points.shape[0]
    out = np.empty(k, dtype=np.int64)
    out[0] = start
    d = points - points[start]
    dist = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
    for j in range(1, k):
        best = int(np.argmax(dist))  # argmax takes the first max: lowest index
        out[j] = best
        d = points - points[best]
        dist = np.minimum(dist, d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2])
    return out


def fps(points: np.ndarray, k: int, start: int = 0) -> np.ndarray:
    """Greedy max-min-distance subset of ``k`` row indices, first = ``start``."""
    pts = np.ascontiguousarray(points, dtype=np.float64)
    if NUMBA_ENABLED:
        return _fps_jit(pts, k, start)
    return _fps_np(pts, k, start)


# ---------------------------------------------------------------------------
# 1-nearest-neighbor map

@njit(cache=True)
def _nn_jit(src, dst):
    m = dst.shape[0]
    n = src.shape[0]
    out = np.empty(m, dtype=np.int64)
    for j in range(m):
        qx, qy, qz = dst[j, 0], dst[j, 1], dst[j, 2]
        best = 0
        dx = src[0, 0] - qx
        dy = src[0, 1] - qy
        dz = src[0, 2] - qz
        bestd = dx * dx + dy * dy + dz * dz
        for i in range(1, n):
            dx = src[i, 0] - qx
            dy = src[i, 1] - qy
            dz = src[i, 2] - qz
            d = dx * dx + dy * dy + dz * dz
            if d < bestd:  # strict: ties keep the lowest index
                bestd = d
                best = i
        out[j] = best
    return out


def _nn_np(src, dst):
    out = np.empty(dst.shape[0], dtype=np.int64)
    step = max(1, int(2e7) // max(1, src.shape[0]))
    for lo in range(0, dst.shape[0], step):
        chunk = dst[lo:lo + step]
        d = chunk[:, None, :] - src[None, :, :]
        d2 = d[..., 0] ** 2 + d[..., 1] ** 2 + d[..., 2] ** 2
        out[lo:lo + step] = np.argmin(d2, axis=1)
    return out


def nearest_neighbors(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Index of the nearest ``src`` row for every ``dst`` row (ties: lowest index)."""
    s = np.ascontiguousarray(src, dtype=np.float64)
    d = np.ascontiguousarray(dst, dtype=np.float64)
    if NUMBA_ENABLED:
        return _nn_jit(s, d)
    return _nn_np(s, d)


# ---------------------------------------------------------------------------
# z-buffer splatting

@njit(cache=True)
def _splat_jit(us, vs, zs, height, width, radius):
    depth = np.full((height, width), np.inf, dtype=np.float64)
    owner = np.full((height, width), -1, dtype=np.int64)
    n = us.shape[0]
    for i in range(n):
        z = zs[i]
        if z <= 0.0:
            continue
        pu = int(np.floor(us[i] + 0.5))
        pv = int(np.floor(vs[i] + 0.5))
        for dv in range(-radius, radius + 1):
            v = pv + dv
            if v < 0 or v >= height:
                continue
            for du in range(-radius, radius + 1):
                u = pu + du
                if u < 0 or u >= width:
                    continue
                if z < depth[v, u]:  # strict: ties keep the lowest point index
                    depth[v, u] = z
                    owner[v, u] = i
    return depth, owner


def _splat_np(us, vs, zs, height, width, radius):
    keep = zs > 0.0
    idx = np.nonzero(keep)[0]
    pu = np.floor(us[idx] + 0.5).astype(np.int64)
    pv = np.floor(vs[idx] + 0.5).astype(np.int64)
    z = zs[idx]
    # expand each point over its splat footprint
    offs = np.arange(-radius, radius + 1)
    du, dv = np.meshgrid(offs, offs, indexing="xy")
    du = du.ravel()
    dv = dv.ravel()
    u = (pu[:, None] + du[None, :]).ravel()
    v = (pv[:, None] + dv[None, :]).ravel()
    zz = np.repeat(z, du.shape[0])
    ii = np.repeat(idx, du.shape[0])
    ok = (u >= 0) & (u < width) & (v >= 0) & (v < height)
    u, v, zz, ii = u[ok], v[ok], zz[ok], ii[ok]
    flat = v * width + u
    # min depth per pixel, ties resolved toward the lowest point index
    order = np.lexsort((ii, zz, flat))
    flat, zz, ii = flat[order], zz[order], ii[order]
    first = np.ones(flat.shape[0], dtype=bool)
    first[1:] = flat[1:] != flat[:-1]
    depth = np.full(height * width, np.inf, dtype=np.float64)
    owner = np.full(height * width, -1, dtype=np.int64)
    depth[flat[first]] = zz[first]
    owner[flat[first]] = ii[first]
    return depth.reshape(height, width), owner.reshape(height, width)


def splat_zbuffer(us, vs, zs, height: int, width: int, radius: int = 1):
    """Rasterize points to a depth buffer; returns (depth, owning point index).

    Each point claims the (2*radius+1)^2 pixel block around its rounded
    projection; the smallest depth wins, ties go to the lowest point index.
    Pixels nobody claims hold depth=inf, owner=-1.
    """
    u = np.ascontiguousarray(us, dtype=np.float64)
    v = np.ascontiguousarray(vs, dtype=np.float64)
    z = np.ascontiguousarray(zs, dtype=np.float64)
    if NUMBA_ENABLED:
        return _splat_jit(u, v, z, height, width, radius)
    return _splat_np(u, v, z, height, width, radius)


# ---------------------------------------------------------------------------
# ray casting against axis-aligned (possibly flat) boxes

@njit(cache=True)
def _raycast_jit(origin, axes, fx, fy, cx, cy, height, width, boxes):
    depth = np.zeros((height, width), dtype=np.float64)
    inst = np.full((height, width), -1, dtype=np.int32)
    face = np.full((height, width), -1, dtype=np.int32)
    k = boxes.shape[0]
    for v in range(height):
        for u in range(width):
            dx = (u - cx) / fx
            dy = (v - cy) / fy
            # world direction with unit camera-frame z, so t equals depth
            wx = axes[0, 0] * dx + axes[1, 0] * dy + axes[2, 0]
            wy = axes[0, 1] * dx + axes[1, 1] * dy + axes[2, 1]
            wz = axes[0, 2] * dx + axes[1, 2] * dy + axes[2, 2]
            best = np.inf
            hit = -1
            hit_face = -1
            for b in range(k):
                tmin = 1e-9
                tmax = np.inf
                ok = True
                ent_axis = -1
                ent_dir = 0.0
                for a in range(3):
                    if a == 0:
                        o, d = origin[0], wx
                    elif a == 1:
                        o, d = origin[1], wy
                    else:
                        o, d = origin[2], wz
                    lo = boxes[b, 0, a]
                    hi = boxes[b, 1, a]
                    if abs(d) < 1e-15:
                        if o < lo or o > hi:
                            ok = False
                            break
                    else:
                        t1 = (lo - o) / d
                        t2 = (hi - o) / d
                        if t1 > t2:
                            t1, t2 = t2, t1
                        if t1 > tmin:
                            tmin = t1
                            ent_axis = a
                            ent_dir = d
                        if t2 < tmax:
                            tmax = t2
                        if tmax < tmin:
                            ok = False
                            break
                if ok and tmin < best:
                    best = tmin
                    hit = b
                    if ent_axis < 0:
                        # degenerate: ray starts inside the slab ranges
                        hit_face = -1
                    else:
                        # face normal points against the ray direction
                        hit_face = ent_axis * 2 + (1 if ent_dir < 0 else 0)
            if hit >= 0:
                depth[v, u] = best
                inst[v, u] = hit
                face[v, u] = hit_face
    return depth, inst, face


def _raycast_np(origin, axes, fx, fy, cx, cy, height, width, boxes):
    us, vs = np.meshgrid(np.arange(width, dtype=np.float64),
                         np.arange(height, dtype=np.float64), indexing="xy")
    d_cam = np.stack([(us - cx) / fx, (vs - cy) / fy, np.ones_like(us)], axis=-1)
    d_world = d_cam @ axes  # rows of axes are camera axes in world coords
    best = np.full((height, width), np.inf)
    hit = np.full((height, width), -1, dtype=np.int32)
    face = np.full((height, width), -1, dtype=np.int32)
    for b in range(boxes.shape[0]):
        tmin = np.full((height, width), 1e-9)
        tmax = np.full((height, width), np.inf)
        ok = np.ones((height, width), dtype=bool)
        ent_axis = np.full((height, width), -1, dtype=np.int32)
        ent_neg = np.zeros((height, width), dtype=bool)
        for a in range(3):
            d = d_world[..., a]
            o = origin[a]
            lo, hi = boxes[b, 0, a], boxes[b, 1, a]
            parallel = np.abs(d) < 1e-15
            ok &= ~(parallel & ((o < lo) | (o > hi)))
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (lo - o) / d
                t2 = (hi - o) / d
            t_lo = np.minimum(t1, t2)
            t_hi = np.maximum(t1, t2)
            enters = ~parallel & (t_lo > tmin)
            ent_axis = np.where(enters, a, ent_axis)
            ent_neg = np.where(enters, d < 0, ent_neg)
            tmin = np.where(parallel, tmin, np.maximum(tmin, t_lo))
            tmax = np.where(parallel, tmax, np.minimum(tmax, t_hi))
        ok &= tmax >= tmin
        better = ok & (tmin < best)
        best[better] = tmin[better]
        hit[better] = b
        fcode = np.where(ent_axis >= 0, ent_axis * 2 + ent_neg.astype(np.int32), -1)
        face[better] = fcode[better]
    depth = np.where(hit >= 0, best, 0.0)
    return depth, hit, face


FACE_NORMALS = np.array([
    [-1.0, 0.0, 0.0], [1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0], [0.0, 1.0, 0.0],
    [0.0, 0.0, -1.0], [0.0, 0.0, 1.0],
])


def raycast_boxes(origin, axes, fx, fy, cx, cy, height, width, boxes):
    """Per-pixel nearest intersection with axis-aligned boxes.

    ``axes`` holds the camera axes as rows in world coordinates (the
    world-to-camera rotation matrix). Returns (depth, box index, face code);
    depth is the camera-frame z of the hit, 0 where no box is hit; ties go
    to the lower box index. The face code encodes the entered face such
    that FACE_NORMALS[code] is the viewer-facing surface normal; -1 marks
    a degenerate hit from inside the slab ranges.
    """
    o = np.ascontiguousarray(origin, dtype=np.float64)
    ax = np.ascontiguousarray(axes, dtype=np.float64)
    bx = np.ascontiguousarray(boxes, dtype=np.float64)
    if NUMBA_ENABLED:
        return _raycast_jit(o, ax, fx, fy, cx, cy, height, width, bx)
    return _raycast_np(o, ax, fx, fy, cx, cy, height, width, bx)


# ---------------------------------------------------------------------------
# visibility / correspondence scan

@njit(cache=True)
def _vis_jit(queries, rot, trans, fx, fy, cx, cy, width, height, depth, depth_tol):
    m = queries.shape[0]
    hit_idx = np.empty(m, dtype=np.int64)
    hit_u = np.empty(m, dtype=np.int64)
    hit_v = np.empty(m, dtype=np.int64)
    hit_z = np.empty(m, dtype=np.float64)
    n = 0
    for j in range(m):
        x = rot[0, 0] * queries[j, 0] + rot[0, 1] * queries[j, 1] + rot[0, 2] * queries[j, 2] + trans[0]
        y = rot[1, 0] * queries[j, 0] + rot[1, 1] * queries[j, 1] + rot[1, 2] * queries[j, 2] + trans[1]
        z = rot[2, 0] * queries[j, 0] + rot[2, 1] * queries[j, 1] + rot[2, 2] * queries[j, 2] + trans[2]
        if z <= 0.0:
            continue
        u = fx * x / z + cx
        v = fy * y / z + cy
        pu = int(np.floor(u + 0.5))
        pv = int(np.floor(v + 0.5))
        if pu < 0 or pu >= width or pv < 0 or pv >= height:
            continue
        d = depth[pv, pu]
        if d <= 0.0:
            continue
        if abs(z - d) <= depth_tol * d:
            hit_idx[n] = j
            hit_u[n] = pu
            hit_v[n] = pv
            hit_z[n] = z
            n += 1
    return hit_idx[:n].copy(), hit_u[:n].copy(), hit_v[:n].copy(), hit_z[:n].copy()


def _vis_np(queries, rot, trans, fx, fy, cx, cy, width, height, depth, depth_tol):
    cam = queries @ rot.T + trans
    z = cam[:, 2]
    ok = z > 0.0
    safe_z = np.where(ok, z, 1.0)
    u = fx * cam[:, 0] / safe_z + cx
    v = fy * cam[:, 1] / safe_z + cy
    pu = np.floor(u + 0.5).astype(np.int64)
    pv = np.floor(v + 0.5).astype(np.int64)
    ok &= (pu >= 0) & (pu < width) & (pv >= 0) & (pv < height)
    d = depth[np.where(ok, pv, 0), np.where(ok, pu, 0)]
    ok &= d > 0.0
    ok &= np.abs(z - d) <= depth_tol * np.where(d > 0.0, d, 1.0)
    idx = np.nonzero(ok)[0]
    return idx, pu[idx], pv[idx], z[idx]


def visible_observations(queries, rot, trans, fx, fy, cx, cy, width, height, depth, depth_tol):
    """Project queries into one view; keep those whose depth matches the map.

    Returns (query index, pixel u, pixel v, camera depth) arrays for every
    query that projects in-bounds with |z - D(u,v)| <= depth_tol * D(u,v).
    """
    q = np.ascontiguousarray(queries, dtype=np.float64)
    r = np.ascontiguousarray(rot, dtype=np.float64)
    t = np.ascontiguousarray(trans, dtype=np.float64)
    dm = np.ascontiguousarray(depth, dtype=np.float64)
    if NUMBA_ENABLED:
        return _vis_jit(q, r, t, fx, fy, cx, cy, width, height, dm, depth_tol)
    return _vis_np(q, r, t, fx, fy, cx, cy, width, height, dm, depth_tol)


# ---------------------------------------------------------------------------
# radius neighbors (3D grid) and DBSCAN expansion

@njit(cache=True)
def _grid_neighbors_jit(points, eps):
    n = points.shape[0]
    inv = 1.0 / eps
    cell = np.empty((n, 3), dtype=np.int64)
    for i in range(n):
        cell[i, 0] = int(np.floor(points[i, 0] * inv))
        cell[i, 1] = int(np.floor(points[i, 1] * inv))
        cell[i, 2] = int(np.floor(points[i, 2] * inv))
    cmin = np.empty(3, dtype=np.int64)
    cmax = np.empty(3, dtype=np.int64)
    for a in range(3):
        lo = cell[0, a]
        hi = cell[0, a]
        for i in range(1, n):
            if cell[i, a] < lo:
                lo = cell[i, a]
            if cell[i, a] > hi:
                hi = cell[i, a]
        cmin[a] = lo
        cmax[a] = hi
    nx = cmax[0] - cmin[0] + 1
    ny = cmax[1] - cmin[1] + 1
    key = np.empty(n, dtype=np.int64)
    for i in range(n):
        key[i] = (cell[i, 0] - cmin[0]) + nx * ((cell[i, 1] - cmin[1]) + ny * (cell[i, 2] - cmin[2]))
    order = np.argsort(key, kind="mergesort")
    skey = key[order]
    # unique cells as CSR over the sorted point order
    ncell = 1
    for i in range(1, n):
        if skey[i] != skey[i - 1]:
            ncell += 1
    ukey = np.empty(ncell, dtype=np.int64)
    cstart = np.empty(ncell + 1, dtype=np.int64)
    c = 0
    ukey[0] = skey[0]
    cstart[0] = 0
    for i in range(1, n):
        if skey[i] != skey[i - 1]:
            c += 1
            ukey[c] = skey[i]
            cstart[c] = i
    cstart[ncell] = n
    eps2 = eps * eps
    counts = np.zeros(n, dtype=np.int64)
    # pass 1: count neighbors
    for i in range(n):
        cx0 = cell[i, 0] - cmin[0]
        cy0 = cell[i, 1] - cmin[1]
        cz0 = cell[i, 2] - cmin[2]
        cnt = 0
        for dz in range(-1, 2):
            for dy in range(-1, 2):
                for dx in range(-1, 2):
                    kx = cx0 + dx
                    ky = cy0 + dy
                    kz = cz0 + dz
                    if kx < 0 or kx >= nx or ky < 0 or ky >= ny:
                        continue
                    k = kx + nx * (ky + ny * kz)
                    lo = np.searchsorted(ukey, k)
                    if lo >= ncell or ukey[lo] != k:
                        continue
                    for s in range(cstart[lo], cstart[lo + 1]):
                        j = order[s]
                        ddx = points[i, 0] - points[j, 0]
                        ddy = points[i, 1] - points[j, 1]
                        ddz = points[i, 2] - points[j, 2]
                        if ddx * ddx + ddy * ddy + ddz * ddz <= eps2:
                            cnt += 1
        counts[i] = cnt
    indptr = np.zeros(n + 1, dtype=np.int64)
    for i in range(n):
        indptr[i + 1] = indptr[i] + counts[i]
    indices = np.empty(indptr[n], dtype=np.int64)
    # pass 2: fill, then sort each row ascending
    for i in range(n):
        w = indptr[i]
        cx0 = cell[i, 0] - cmin[0]
        cy0 = cell[i, 1] - cmin[1]
        cz0 = cell[i, 2] - cmin[2]
        for dz in range(-1, 2):
            for dy in range(-1, 2):
                for dx in range(-1, 2):
                    kx = cx0 + dx
                    ky = cy0 + dy
                    kz = cz0 + dz
                    if kx < 0 or kx >= nx or ky < 0 or ky >= ny:
                        continue
                    k = kx + nx * (ky + ny * kz)
                    lo = np.searchsorted(ukey, k)
                    if lo >= ncell or ukey[lo] != k:
                        continue
                    for s in range(cstart[lo], cstart[lo + 1]):
                        j = order[s]
                        ddx = points[i, 0] - points[j, 0]
                        ddy = points[i, 1] - points[j, 1]
                        ddz = points[i, 2] - points[j, 2]
                        if ddx * ddx + ddy * ddy + ddz * ddz <= eps2:
                            indices[w] = j
                            w += 1
        sub = indices[indptr[i]:indptr[i + 1]]
        sub.sort()
    return indptr, indices


def _radius_neighbors_np(points, eps):
    n = points.shape[0]
    eps2 = eps * eps
    rows = []
    step = max(1, int(2e7) // max(1, n))
    for lo in range(0, n, step):
        chunk = points[lo:lo + step]
        d = chunk[:, None, :] - points[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", d, d)
        for r in range(chunk.shape[0]):
            rows.append(np.nonzero(d2[r] <= eps2)[0].astype(np.int64))
    indptr = np.zeros(n + 1, dtype=np.int64)
    for i, r in enumerate(rows):
        indptr[i + 1] = indptr[i] + r.shape[0]
    indices = np.concatenate(rows) if rows else np.empty(0, dtype=np.int64)
    return indptr, indices


def radius_neighbors(points: np.ndarray, eps: float):
    """CSR closed-ball neighbor lists (self included, rows sorted ascending).

    3D inputs go through a uniform-grid search; other dimensionalities fall
    back to chunked brute force.
    """
    pts = np.ascontiguousarray(points, dtype=np.float64)
    if pts.shape[1] == 3 and NUMBA_ENABLED and pts.shape[0] > 0:
        return _grid_neighbors_jit(pts, float(eps))
    return _radius_neighbors_np(pts, float(eps))


@njit(cache=True)
def _dbscan_expand_jit(indptr, indices, min_pts, n):
    labels = np.full(n, -2, dtype=np.int64)  # -2 unvisited, -1 noise
    queue = np.empty(n, dtype=np.int64)
    queued = np.zeros(n, dtype=np.uint8)  # dedup keeps the queue within n slots
    cluster = 0
    for i in range(n):
        if labels[i] != -2:
            continue
        if indptr[i + 1] - indptr[i] < min_pts:
            labels[i] = -1
            continue
        labels[i] = cluster
        head = 0
        tail = 0
        for s in range(indptr[i], indptr[i + 1]):
            j = indices[s]
            if j != i and queued[j] == 0:
                queue[tail] = j
                queued[j] = 1
                tail += 1
        while head < tail:
            j = queue[head]
            head += 1
            if labels[j] == -1:
                labels[j] = cluster  # border point, claimed by first cluster
            if labels[j] != -2:
                continue
            labels[j] = cluster
            if indptr[j + 1] - indptr[j] >= min_pts:
                for s in range(indptr[j], indptr[j + 1]):
                    q = indices[s]
                    if (labels[q] == -2 or labels[q] == -1) and queued[q] == 0:
                        queue[tail] = q
                        queued[q] = 1
                        tail += 1
        cluster += 1
    return labels


def _dbscan_expand_py(indptr, indices, min_pts, n):
    labels = np.full(n, -2, dtype=np.int64)
    queued = np.zeros(n, dtype=bool)
    cluster = 0
    for i in range(n):
        if labels[i] != -2:
            continue
        if indptr[i + 1] - indptr[i] < min_pts:
            labels[i] = -1
            continue
        labels[i] = cluster
        queue = []
        for j in indices[indptr[i]:indptr[i + 1]]:
            if j != i and not queued[j]:
                queue.append(int(j))
                queued[j] = True
        head = 0
        while head < len(queue):
            j = queue[head]
            head += 1
            if labels[j] == -1:
                labels[j] = cluster
            if labels[j] != -2:
                continue
            labels[j] = cluster
            if indptr[j + 1] - indptr[j] >= min_pts:
                for q in indices[indptr[j]:indptr[j + 1]]:
                    if (labels[q] == -2 or labels[q] == -1) and not queued[q]:
                        queue.append(int(q))
                        queued[q] = True
        cluster += 1
    labels[labels == -2] = -1
    return labels


def dbscan_expand(indptr, indices, min_pts: int, n: int) -> np.ndarray:
    """Density expansion over precomputed neighbor lists.

    Points are scanned in index order; cluster ids count up from 0 in
    discovery order; border points join the first cluster that reaches them.
    """
    ip = np.ascontiguousarray(indptr, dtype=np.int64)
    ix = np.ascontiguousarray(indices, dtype=np.int64)
    if NUMBA_ENABLED:
        return _dbscan_expand_jit(ip, ix, min_pts, n)
    return _dbscan_expand_py(ip, ix, min_pts, n)


def warmup() -> None:
    """Trigger JIT compilation of every kernel (no-op on the numpy path)."""
    pts = np.random.default_rng(0).random((8, 3))
    fps(pts, 2, 0)
    nearest_neighbors(pts, pts[:2])
    splat_zbuffer(np.array([1.0]), np.array([1.0]), np.array([2.0]), 4, 4, 1)
    visible_observations(pts, np.eye(3), np.zeros(3), 1.0, 1.0, 0.0, 0.0, 4, 4,
                         np.ones((4, 4)), 0.02)
    raycast_boxes(np.array([0.5, 0.5, 2.0]), np.eye(3), 2.0, 2.0, 1.5, 1.5,
                  4, 4, np.array([[[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]]))
    ip, ix = radius_neighbors(pts, 0.5)
    dbscan_expand(ip, ix, 2, pts.shape[0])
