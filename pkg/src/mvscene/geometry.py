"""Pinhole camera math, cross-view correspondences, point cloud utilities.

Conventions used everywhere in this package:

* world-to-camera rigid transform: ``x_cam = R @ x_world + t``
* pixel coordinates are (u, v) = (column, row); arrays index as [v, u]
* a continuous pixel is inside the image iff its nearest integer pixel
  is a valid index, i.e. -0.5 <= u < width - 0.5 (same for v)
* depth is the camera-frame z coordinate; non-positive depth is invalid
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels

ROTATION_TOL = 1e-9


@dataclass
class Camera:
    """Pinhole intrinsics plus a world-to-camera rigid pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside "
                             f"{self.width}x{self.height} image")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > ROTATION_TOL:
            raise ValueError(f"rotation is not orthonormal (max residual {err:.3e})")
        det = np.linalg.det(self.rotation)
        if abs(det - 1.0) > ROTATION_TOL:
            raise ValueError(f"rotation determinant {det} != +1")

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_json(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "R": [float(x) for x in self.rotation.ravel()],
            "t": [float(x) for x in self.translation],
            "w": self.width, "h": self.height,
        }

    @classmethod
    def from_json(cls, rec: dict) -> "Camera":
        return cls(fx=rec["fx"], fy=rec["fy"], cx=rec["cx"], cy=rec["cy"],
                   rotation=np.array(rec["R"], dtype=np.float64).reshape(3, 3),
                   translation=np.array(rec["t"], dtype=np.float64),
                   width=rec["w"], height=rec["h"])


@dataclass
class DepthMap:
    """Per-pixel metric depth; values <= 0 mark invalid pixels."""

    width: int
    height: int
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.height, self.width):
            raise ValueError(f"depth shape {self.values.shape} != "
                             f"({self.height}, {self.width})")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("depth map contains non-finite values")

    def valid_mask(self) -> np.ndarray:
        return self.values > 0.0


@dataclass
class PointMap:
    """Per-pixel 3D coordinates in the shared reference frame."""

    width: int
    height: int
    values: np.ndarray
    valid: np.ndarray

    @classmethod
    def from_depth(cls, camera: Camera, depth: DepthMap) -> "PointMap":
        values, valid = unproject_grid(camera, depth.values)
        return cls(width=camera.width, height=camera.height, values=values, valid=valid)


@dataclass
class CorrespondenceSet:
    """Per-query-point multi-view observations, stored CSR style.

    Observations of query point ``p`` live at ``indptr[p]:indptr[p+1]``
    in the flat arrays, sorted by view index. Points observed nowhere have
    an empty range.
    """

    queries: np.ndarray            # (M, 3)
    indptr: np.ndarray             # (M+1,) int64
    view: np.ndarray               # (n_obs,) int32
    pixel_u: np.ndarray            # (n_obs,) int32
    pixel_v: np.ndarray            # (n_obs,) int32
    confidence: np.ndarray         # (n_obs,) float64

    @property
    def n_points(self) -> int:
        return self.queries.shape[0]

    @property
    def n_observations(self) -> int:
        return self.view.shape[0]

    def counts(self) -> np.ndarray:
        return np.diff(self.indptr)

    def observed_mask(self) -> np.ndarray:
        return self.counts() > 0

    def observations(self, p: int):
        """(views, pixels_u, pixels_v, confidences) for one query point."""
        sl = slice(self.indptr[p], self.indptr[p + 1])
        return self.view[sl], self.pixel_u[sl], self.pixel_v[sl], self.confidence[sl]


# ---------------------------------------------------------------------------
# projection

def project(camera: Camera, point: np.ndarray) -> Optional[tuple[np.ndarray, float]]:
    """Project a world point; returns (pixel, depth) or None.

    None when the point is behind the camera (z <= 0) or lands outside the
    image (nearest integer pixel out of bounds).
    """
    p = np.asarray(point, dtype=np.float64)
    cam = camera.rotation @ p + camera.translation
    z = cam[2]
    if z <= 0.0:
        return None
    u = camera.fx * cam[0] / z + camera.cx
    v = camera.fy * cam[1] / z + camera.cy
    if not (-0.5 <= u < camera.width - 0.5 and -0.5 <= v < camera.height - 0.5):
        return None
    return np.array([u, v]), float(z)


def project_points(camera: Camera, points: np.ndarray):
    """Vectorized projection: (uv (N,2), depth (N,), valid (N,))."""
    pts = np.asarray(points, dtype=np.float64)
    cam = pts @ camera.rotation.T + camera.translation
    z = cam[:, 2]
    front = z > 0.0
    safe = np.where(front, z, 1.0)
    u = camera.fx * cam[:, 0] / safe + camera.cx
    v = camera.fy * cam[:, 1] / safe + camera.cy
    valid = front & (u >= -0.5) & (u < camera.width - 0.5) \
        & (v >= -0.5) & (v < camera.height - 0.5)
    return np.stack([u, v], axis=1), z, valid


def unproject(camera: Camera, pixel: np.ndarray, depth: float) -> np.ndarray:
    """World point for a pixel at the given camera depth. Requires depth > 0."""
    if depth <= 0.0:
        raise ValueError(f"depth must be positive, got {depth}")
    u, v = float(pixel[0]), float(pixel[1])
    cam = np.array([(u - camera.cx) / camera.fx * depth,
                    (v - camera.cy) / camera.fy * depth,
                    depth])
    return camera.rotation.T @ (cam - camera.translation)


def unproject_grid(camera: Camera, depth_values: np.ndarray):
    """Unproject a full depth map: ((H,W,3) world points, (H,W) valid mask)."""
    h, w = depth_values.shape
    valid = depth_values > 0.0
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64), indexing="xy")
    d = np.where(valid, depth_values, 1.0)
    cam = np.stack([(us - camera.cx) / camera.fx * d,
                    (vs - camera.cy) / camera.fy * d,
                    d], axis=-1)
    world = (cam - camera.translation) @ camera.rotation
    world[~valid] = 0.0
    return world, valid


# ---------------------------------------------------------------------------
# correspondences

def build_correspondences(queries: np.ndarray,
                          frames: Sequence[tuple[Camera, DepthMap]],
                          confidences: Optional[Sequence[np.ndarray]] = None,
                          depth_tol: float = 0.02) -> CorrespondenceSet:
    """Find, per query point, every view that sees it.

    A view sees a point when projection succeeds and the projected depth
    matches the depth map at the nearest pixel within a relative tolerance:
    |z - D(u,v)| <= depth_tol * D(u,v). Observation confidence is read from
    the supplied per-view map at the same nearest pixel (1.0 when no maps
    are given).
    """
    if len(frames) == 0:
        raise ValueError("build_correspondences requires at least one frame")
    if depth_tol <= 0.0:
        raise ValueError(f"depth_tol must be positive, got {depth_tol}")
    q = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
    m = q.shape[0]

    pt_parts, view_parts, u_parts, v_parts, c_parts = [], [], [], [], []
    for i, (camera, depth) in enumerate(frames):
        idx, pu, pv, _z = kernels.visible_observations(
            q, camera.rotation, camera.translation,
            camera.fx, camera.fy, camera.cx, camera.cy,
            camera.width, camera.height, depth.values, depth_tol)
        pt_parts.append(idx)
        view_parts.append(np.full(idx.shape[0], i, dtype=np.int32))
        u_parts.append(pu.astype(np.int32))
        v_parts.append(pv.astype(np.int32))
        if confidences is not None:
            c_parts.append(np.asarray(confidences[i], dtype=np.float64)[pv, pu])
        else:
            c_parts.append(np.ones(idx.shape[0]))

    pt = np.concatenate(pt_parts)
    vw = np.concatenate(view_parts)
    uu = np.concatenate(u_parts)
    vv = np.concatenate(v_parts)
    cc = np.concatenate(c_parts)
    order = np.lexsort((vw, pt))
    pt, vw, uu, vv, cc = pt[order], vw[order], uu[order], vv[order], cc[order]
    indptr = np.zeros(m + 1, dtype=np.int64)
    np.add.at(indptr, pt + 1, 1)
    indptr = np.cumsum(indptr)
    return CorrespondenceSet(queries=q, indptr=indptr, view=vw,
                             pixel_u=uu, pixel_v=vv, confidence=cc)


# ---------------------------------------------------------------------------
# point cloud utilities

def farthest_point_sample(points: np.ndarray, k: int, start: int = 0) -> np.ndarray:
    """Greedy farthest-point subset: k distinct indices, first = start.

    Each added index maximizes the minimum distance to the already chosen
    set; distance ties break toward the lowest index.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range [1, {n}]")
    if not 0 <= start < n:
        raise ValueError(f"start={start} out of range [0, {n})")
    return kernels.fps(pts, int(k), int(start))


def nearest_neighbor_map(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """For each dst point, the index of its nearest src point (ties: lowest)."""
    s = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    if s.shape[0] == 0:
        raise ValueError("src point set is empty")
    d = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    return kernels.nearest_neighbors(s, d)


def estimate_alignment_scale(pred_centers: np.ndarray, gt_centers: np.ndarray) -> float:
    """Least-squares scalar s minimizing sum ||s*pred_i - gt_i||^2.

    Closed form s = <pred, gt> / <pred, pred>; degenerate all-zero pred
    returns 1. Inputs are expected relative to the first camera.
    """
    p = np.asarray(pred_centers, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(gt_centers, dtype=np.float64).reshape(-1, 3)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    if p.shape[0] < 2:
        raise ValueError("need at least 2 centers for scale estimation")
    denom = float(np.sum(p * p))
    if denom == 0.0:
        return 1.0
    return float(np.sum(p * g) / denom)


def look_at_rotation(eye: np.ndarray, target: np.ndarray,
                     up: np.ndarray = (0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera rotation with +z toward target, +y roughly down."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upv)
    nr = np.linalg.norm(right)
    if nr < 1e-12:
        upv = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, upv)
        nr = np.linalg.norm(right)
    right = right / nr
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=0)
