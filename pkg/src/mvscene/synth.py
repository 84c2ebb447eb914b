"""Procedural indoor scenes: rooms, cuboid objects, articulated parts.

A scene is a labeled surface point cloud (floor, four walls, free-standing
cuboids, plus drawer fronts that slide and door slabs that swing), a ring
of inward-looking cameras, and per-view renders carrying depth, label maps,
articulation ground truth and procedural backbone features.

Everything is bit-deterministic in (config, seed): all randomness flows
from numpy SeedSequence children in a fixed order.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .geometry import Camera, DepthMap, look_at_rotation

KIND_NONE = 0
KIND_TRANSLATION = 1
KIND_ROTATION = 2

CLASS_FLOOR = 0
CLASS_WALL = 1


class SceneGenerationError(RuntimeError):
    pass


@dataclass
class Articulation:
    kind: int                     # KIND_* constant
    axis: np.ndarray              # unit 3-vector (zeros for KIND_NONE)
    origin: np.ndarray            # point on the rotation axis

    def __post_init__(self):
        self.axis = np.asarray(self.axis, dtype=np.float64).reshape(3)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if self.kind != KIND_NONE and abs(np.linalg.norm(self.axis) - 1.0) > 1e-9:
            raise ValueError("articulation axis must be unit length")


@dataclass
class SceneGT:
    points: np.ndarray            # (M, 3) float64
    class_id: np.ndarray          # (M,) int32
    instance_id: np.ndarray       # (M,) int32
    articulations: list[Articulation]   # one record per instance
    room_bounds: np.ndarray       # (2, 3) min/max corners
    boxes: np.ndarray = None      # (K, 2, 3) per-instance cuboid (may be flat)

    @property
    def n_instances(self) -> int:
        return len(self.articulations)

    def motion_vectors(self) -> np.ndarray:
        """Ground-truth motion displacement per point (zeros on static parts)."""
        out = np.zeros_like(self.points)
        for iid, art in enumerate(self.articulations):
            mask = self.instance_id == iid
            if art.kind == KIND_TRANSLATION:
                out[mask] = art.axis
            elif art.kind == KIND_ROTATION:
                out[mask] = linearize_rotation_many(self.points[mask], art.axis, art.origin)
        return out


@dataclass
class FrameBundle:
    camera: Camera
    depth: DepthMap
    class_map: np.ndarray         # (H, W) int32, -1 background
    instance_map: np.ndarray      # (H, W) int32, -1 background
    artic_exist: np.ndarray       # (2, H, W) uint8: [translation, rotation]
    artic_vec: np.ndarray         # (H, W, 3) float64, zero where not articulated
    point_map: np.ndarray         # (H, W, 3) world-frame surface point per pixel
    normal_map: np.ndarray        # (H, W, 3) viewer-facing surface normal
    owner: np.ndarray             # (H, W) int64 index into SceneGT.points, -1 empty
    backbone: Optional[np.ndarray] = None          # (H, W, d_b) float32
    teacher_features: Optional[np.ndarray] = None  # (H, W, d_s) float32
    teacher_segments: Optional[np.ndarray] = None  # (H, W) int32


@dataclass
class SynthConfig:
    """Desk-scale scene parameters.

    The defaults keep the per-pixel surface footprint (~2-3 cm at 64x64)
    well below the 0.1 m clustering scale used downstream; resolution,
    room size and sampling spacing should move together.
    """

    seed: int = 0
    n_classes: int = 8
    room_extent: tuple[float, float] = (1.1, 1.4)
    room_height: tuple[float, float] = (0.72, 0.88)
    n_objects: tuple[int, int] = (4, 6)
    object_side: tuple[float, float] = (0.16, 0.32)
    object_height: tuple[float, float] = (0.2, 0.45)
    wall_margin: float = 0.12
    object_separation: float = 0.08
    articulated_fraction: float = 1.0
    n_cameras: int = 12
    width: int = 64
    height: int = 64
    fov_deg: float = 90.0
    surface_spacing: float = 0.015
    splat_radius: int = 1
    backbone_dim: int = 64
    backbone_noise: float = 0.02
    backbone_seed: int = 7
    min_visible_pixels: int = 4
    max_retries: int = 25

    def __post_init__(self):
        if self.n_cameras < 2:
            raise ValueError("need at least 2 cameras")
        for name in ("room_extent", "room_height", "n_objects", "object_side", "object_height"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"degenerate range for {name}: ({lo}, {hi})")
        if self.backbone_dim < 52:
            raise ValueError("backbone_dim must be >= 52 (block layout)")
        if self.n_classes < 5:
            raise ValueError("need floor, wall, an object class and the two "
                             "articulated panel classes")


# ---------------------------------------------------------------------------
# articulation linearization

def linearize_rotation(point, axis, origin) -> np.ndarray:
    """Displacement of a point under a 90 degree rotation about an axis line."""
    axis = np.asarray(axis, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(axis) - 1.0) > 1e-6:
        raise ValueError(f"axis must be unit length, |axis|={np.linalg.norm(axis)}")
    p = np.asarray(point, dtype=np.float64).reshape(3)
    o = np.asarray(origin, dtype=np.float64).reshape(3)
    v = p - o
    rotated = np.cross(axis, v) + axis * np.dot(axis, v)
    return rotated - v


def linearize_rotation_many(points, axis, origin) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(axis) - 1.0) > 1e-6:
        raise ValueError("axis must be unit length")
    v = np.asarray(points, dtype=np.float64).reshape(-1, 3) - origin
    rotated = np.cross(np.broadcast_to(axis, v.shape), v) + np.outer(v @ axis, axis)
    return rotated - v


# ---------------------------------------------------------------------------
# cuboid surface sampling

def _face_grid(lo, hi, spacing):
    """Cell-centered 1D sample offsets covering [lo, hi]."""
    length = hi - lo
    n = max(1, int(round(length / spacing)))
    return lo + (np.arange(n) + 0.5) / n * length


def _sample_box_faces(bounds, spacing, faces=("x-", "x+", "y-", "y+", "z+", "z-")):
    """Points on selected faces of an axis-aligned box ((2,3) bounds)."""
    (x0, y0, z0), (x1, y1, z1) = bounds
    pts = []
    for face in faces:
        axis = "xyz".index(face[0])
        if axis == 0:
            a, b = np.meshgrid(_face_grid(y0, y1, spacing), _face_grid(z0, z1, spacing))
            x = np.full(a.size, x1 if face[1] == "+" else x0)
            pts.append(np.stack([x, a.ravel(), b.ravel()], axis=1))
        elif axis == 1:
            a, b = np.meshgrid(_face_grid(x0, x1, spacing), _face_grid(z0, z1, spacing))
            y = np.full(a.size, y1 if face[1] == "+" else y0)
            pts.append(np.stack([a.ravel(), y, b.ravel()], axis=1))
        else:
            a, b = np.meshgrid(_face_grid(x0, x1, spacing), _face_grid(y0, y1, spacing))
            z = np.full(a.size, z1 if face[1] == "+" else z0)
            pts.append(np.stack([a.ravel(), b.ravel(), z], axis=1))
    return np.concatenate(pts, axis=0)


_FACE_NORMALS = {"x-": (-1, 0, 0), "x+": (1, 0, 0), "y-": (0, -1, 0), "y+": (0, 1, 0)}


def _make_part(rng, parent_bounds, kind):
    """Articulated panel floating proud of a random side face of the parent.

    Parts are flat axis-aligned rectangles so every surface point shares one
    outward normal. Drawers slide along that normal. Doors rotate about the
    vertical edge at the start of the panel's in-plane horizontal direction
    h = z x n (a fixed hinge convention), which makes the linearized motion
    direction -(n + h)/sqrt(2) for every panel point, a pure function of
    local geometry.
    """
    face = ("x-", "x+", "y-", "y+")[rng.integers(0, 4)]
    normal = np.array(_FACE_NORMALS[face], dtype=np.float64)
    (x0, y0, z0), (x1, y1, z1) = parent_bounds
    # clear of the parent by more than the ~2 cm depth tolerance of the
    # visibility tests, so part and parent never alias in depth
    gap = rng.uniform(0.04, 0.055)
    axis_idx = 0 if face[0] == "x" else 1
    lat_idx = 1 - axis_idx
    lat_lo, lat_hi = (y0, y1) if axis_idx == 0 else (x0, x1)
    lat_len = lat_hi - lat_lo
    fpos = x1 if face == "x+" else x0 if face == "x-" else (y1 if face == "y+" else y0)
    plane = fpos + gap if face[1] == "+" else fpos - gap

    lo = np.empty(3)
    hi = np.empty(3)
    lo[axis_idx] = hi[axis_idx] = plane
    if kind == KIND_TRANSLATION:
        frac = rng.uniform(0.5, 0.75)
        lat_c = 0.5 * (lat_lo + lat_hi)
        half = 0.5 * frac * lat_len
        z_c = z0 + rng.uniform(0.35, 0.6) * (z1 - z0)
        zhalf = 0.5 * rng.uniform(0.3, 0.5) * (z1 - z0)
        lo[lat_idx], hi[lat_idx] = lat_c - half, lat_c + half
        lo[2], hi[2] = z_c - zhalf, z_c + zhalf
        art = Articulation(KIND_TRANSLATION, normal, 0.5 * (lo + hi))
    else:
        frac = rng.uniform(0.6, 0.85)
        lat_c = 0.5 * (lat_lo + lat_hi)
        half = 0.5 * frac * lat_len
        lo[lat_idx], hi[lat_idx] = lat_c - half, lat_c + half
        lo[2], hi[2] = z0 + 0.08 * (z1 - z0), z0 + rng.uniform(0.8, 0.95) * (z1 - z0)
        h_dir = np.cross([0.0, 0.0, 1.0], normal)
        hinge = np.zeros(3)
        hinge[axis_idx] = plane
        hinge[lat_idx] = lo[lat_idx] if h_dir[lat_idx] > 0 else hi[lat_idx]
        art = Articulation(KIND_ROTATION, np.array([0.0, 0.0, 1.0]), hinge)
    outward = face
    return (lo, hi), art, (outward,)


def _layout_scene(config: SynthConfig, rng):
    """Place room, objects and parts; returns per-instance geometry specs."""
    ex = rng.uniform(*config.room_extent)
    ey = rng.uniform(*config.room_extent)
    h = rng.uniform(*config.room_height)
    room = np.array([[0.0, 0.0, 0.0], [ex, ey, h]])

    n_obj = int(rng.integers(config.n_objects[0], config.n_objects[1] + 1))
    margin = config.wall_margin
    sep = config.object_separation
    boxes = []
    for _ in range(n_obj):
        placed = False
        for _try in range(80):
            sx = rng.uniform(*config.object_side)
            sy = rng.uniform(*config.object_side)
            sz = rng.uniform(*config.object_height)
            px = rng.uniform(margin, max(margin + 1e-6, ex - margin - sx))
            py = rng.uniform(margin, max(margin + 1e-6, ey - margin - sy))
            lo = np.array([px, py, 0.0])
            hi = np.array([px + sx, py + sy, sz])
            ok = True
            for (olo, ohi) in boxes:
                if np.all(hi + sep > olo) and np.all(lo - sep < ohi):
                    ok = False
                    break
            if ok:
                boxes.append((lo, hi))
                placed = True
                break
        if not placed:
            return None
    # the last two class ids are reserved for the articulated panel types
    classes = rng.integers(2, config.n_classes - 2, size=n_obj).astype(np.int32)

    n_art = int(round(config.articulated_fraction * n_obj))
    art_owners = rng.choice(n_obj, size=n_art, replace=False) if n_art else np.empty(0, int)
    parts = []
    for rank, owner in enumerate(sorted(int(o) for o in art_owners)):
        kind = KIND_TRANSLATION if rank % 2 == 0 else KIND_ROTATION
        bounds, art, faces = _make_part(rng, boxes[owner], kind)
        lo, hi = bounds
        if np.any(lo[:2] < 0.02) or np.any(hi[:2] > [ex - 0.02, ey - 0.02]):
            continue  # part would poke outside the room; skip it
        parts.append((owner, bounds, art, faces))
    return room, boxes, classes, parts


def _sample_scene_points(config: SynthConfig, room, boxes, classes, parts):
    """Turn the layout into labeled surface points (one instance per entity)."""
    (x0, y0, z0), (x1, y1, z1) = room
    s = config.surface_spacing
    clouds, cls_ids, inst_ids = [], [], []
    articulations = []
    inst_boxes = []

    def add(points, class_id, box, art=None):
        clouds.append(points)
        cls_ids.append(np.full(points.shape[0], class_id, dtype=np.int32))
        inst_ids.append(np.full(points.shape[0], len(articulations), dtype=np.int32))
        articulations.append(art or Articulation(KIND_NONE, np.zeros(3), np.zeros(3)))
        inst_boxes.append(box)

    # instances never touch: a small clearance keeps every pixel's surface
    # strictly nearer to its own instance than to any neighbor, so junction
    # pixels are unambiguous at lifting time
    c = 0.004

    # floor, minus object footprints (the raycast box still spans the room;
    # occlusion hides the uncovered strip under each object)
    fx, fy = np.meshgrid(_face_grid(x0, x1, s), _face_grid(y0, y1, s))
    floor = np.stack([fx.ravel(), fy.ravel(), np.zeros(fx.size)], axis=1)
    keep = np.ones(floor.shape[0], dtype=bool)
    for lo, hi in boxes:
        inside = np.all((floor[:, :2] > lo[:2] - 0.01) & (floor[:, :2] < hi[:2] + 0.01), axis=1)
        keep &= ~inside
    add(floor[keep], CLASS_FLOOR, [[x0, y0, 0.0], [x1, y1, 0.0]])

    # four walls (inner faces, zero-thickness boxes, inset at floor and corners)
    wall_boxes = {
        "x-": [[x0, y0 + c, z0 + c], [x0, y1 - c, z1]],
        "x+": [[x1, y0 + c, z0 + c], [x1, y1 - c, z1]],
        "y-": [[x0 + c, y0, z0 + c], [x1 - c, y0, z1]],
        "y+": [[x0 + c, y1, z0 + c], [x1 - c, y1, z1]],
    }
    for face in ("x-", "x+", "y-", "y+"):
        box = np.asarray(wall_boxes[face], dtype=np.float64)
        pts = _sample_box_faces(box, s, faces=(face,))
        add(pts, CLASS_WALL, box)

    for (lo, hi), cid in zip(boxes, classes):
        box = np.array([[lo[0], lo[1], c], [hi[0], hi[1], hi[2]]])
        pts = _sample_box_faces(box, s, faces=("x-", "x+", "y-", "y+", "z+"))
        add(pts, int(cid), box)

    for owner, (lo, hi), art, faces in parts:
        pts = _sample_box_faces(np.array([lo, hi]), s, faces=faces)
        part_class = config.n_classes - 2 if art.kind == KIND_TRANSLATION \
            else config.n_classes - 1
        add(pts, part_class, [lo, hi], art=art)

    return SceneGT(points=np.concatenate(clouds, axis=0),
                   class_id=np.concatenate(cls_ids),
                   instance_id=np.concatenate(inst_ids),
                   articulations=articulations,
                   room_bounds=np.asarray(room, dtype=np.float64),
                   boxes=np.asarray(inst_boxes, dtype=np.float64))


def _ring_cameras(config: SynthConfig, room, rng):
    (x0, y0, z0), (x1, y1, z1) = room
    cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    radius = 0.32 * min(x1 - x0, y1 - y0)
    cam_h = z1 * rng.uniform(0.72, 0.82)
    target = np.array([cx, cy, 0.15 * z1])
    fx = (config.width / 2.0) / np.tan(np.radians(config.fov_deg) / 2.0)
    fy = fx
    cams = []
    phase = rng.uniform(0.0, 2.0 * np.pi)
    for i in range(config.n_cameras):
        ang = phase + 2.0 * np.pi * i / config.n_cameras
        eye = np.array([cx + radius * np.cos(ang), cy + radius * np.sin(ang), cam_h])
        rot = look_at_rotation(eye, target)
        cams.append(Camera(fx=fx, fy=fy, cx=config.width / 2.0 - 0.5,
                           cy=config.height / 2.0 - 0.5, rotation=rot,
                           translation=-rot @ eye, width=config.width,
                           height=config.height))
    return cams


def generate_scene(config: SynthConfig):
    """Build a labeled scene and its camera ring; deterministic in the seed.

    Retries layout with fresh derived seeds until every instance is visible
    (>= min_visible_pixels) in at least two rendered views; raises
    SceneGenerationError naming the seed if the retry budget runs out.
    """
    for attempt in range(config.max_retries):
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, attempt)))
        layout = _layout_scene(config, rng)
        if layout is None:
            continue
        room, boxes, classes, parts = layout
        scene = _sample_scene_points(config, room, boxes, classes, parts)
        cameras = _ring_cameras(config, room, rng)
        eyes = np.stack([c.center() for c in cameras])
        bad = False
        for lo, hi in boxes:
            if np.any(np.all((eyes > lo - 0.03) & (eyes < hi + 0.03), axis=1)):
                bad = True
                break
        if bad:
            continue
        seen = np.zeros((scene.n_instances,), dtype=np.int64)
        for cam in cameras:
            frame = render_frame(scene, cam, splat_radius=config.splat_radius)
            ids, counts = np.unique(frame.instance_map, return_counts=True)
            for iid, cnt in zip(ids, counts):
                if iid >= 0 and cnt >= config.min_visible_pixels:
                    seen[iid] += 1
        if np.all(seen >= 2):
            return scene, cameras
    raise SceneGenerationError(
        f"could not generate a valid scene for seed {config.seed} "
        f"after {config.max_retries} attempts")


# ---------------------------------------------------------------------------
# rendering

def render_frame(scene: SceneGT, camera: Camera, splat_radius: int = 1) -> FrameBundle:
    """Render one view: exact surface depth, labels, articulation targets.

    The per-pixel depth and labels come from casting the pixel-center ray
    against every instance cuboid (nearest surface wins); the owner map
    additionally records which sampled surface point claims each pixel,
    via z-buffer splatting restricted to the pixel's instance.
    """
    h, w = camera.height, camera.width
    depth, instance_map, face_map = kernels.raycast_boxes(
        camera.center(), camera.rotation, camera.fx, camera.fy,
        camera.cx, camera.cy, h, w, scene.boxes)
    vis = instance_map >= 0
    # exact hit point per pixel
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64), indexing="xy")
    d_cam = np.stack([(us - camera.cx) / camera.fx,
                      (vs - camera.cy) / camera.fy,
                      np.ones_like(us)], axis=-1)
    point_map = camera.center() + depth[..., None] * (d_cam @ camera.rotation)
    point_map[~vis] = 0.0
    normal_map = np.zeros((h, w, 3))
    has_face = vis & (face_map >= 0)
    normal_map[has_face] = kernels.FACE_NORMALS[face_map[has_face]]

    class_map = np.full((h, w), -1, dtype=np.int32)
    class_arr = np.array([scene.class_id[scene.instance_id == i][0]
                          if (scene.instance_id == i).any() else -1
                          for i in range(scene.n_instances)], dtype=np.int32)
    class_map[vis] = class_arr[instance_map[vis]]

    # owner points: splat, then keep claims agreeing with the raycast label
    cam_pts = scene.points @ camera.rotation.T + camera.translation
    z = cam_pts[:, 2]
    front = z > 1e-9
    safe = np.where(front, z, 1.0)
    u = camera.fx * cam_pts[:, 0] / safe + camera.cx
    v = camera.fy * cam_pts[:, 1] / safe + camera.cy
    margin = splat_radius + 2.0
    near = front & (u > -margin) & (u < w + margin) & (v > -margin) & (v < h + margin)
    idx = np.nonzero(near)[0]
    if idx.size:
        _, local_owner = kernels.splat_zbuffer(u[idx], v[idx], z[idx], h, w, splat_radius)
        owner = np.where(local_owner >= 0, idx[np.clip(local_owner, 0, None)], -1)
        owner_ok = (owner >= 0) & vis
        owner_ok &= np.where(owner >= 0, scene.instance_id[np.clip(owner, 0, None)], -2) \
            == instance_map
        owner = np.where(owner_ok, owner, -1)
    else:
        owner = np.full((h, w), -1, dtype=np.int64)

    kinds = np.array([a.kind for a in scene.articulations], dtype=np.int32)
    exist_t = np.zeros((h, w), dtype=np.uint8)
    exist_r = np.zeros((h, w), dtype=np.uint8)
    k_at = kinds[instance_map[vis]]
    exist_t[vis] = (k_at == KIND_TRANSLATION).astype(np.uint8)
    exist_r[vis] = (k_at == KIND_ROTATION).astype(np.uint8)
    artic_vec = np.zeros((h, w, 3), dtype=np.float64)
    for iid, art in enumerate(scene.articulations):
        if art.kind == KIND_NONE:
            continue
        sel = instance_map == iid
        if not sel.any():
            continue
        if art.kind == KIND_TRANSLATION:
            artic_vec[sel] = art.axis
        else:
            artic_vec[sel] = linearize_rotation_many(point_map[sel], art.axis, art.origin)

    return FrameBundle(camera=camera,
                       depth=DepthMap(width=w, height=h, values=depth),
                       class_map=class_map, instance_map=instance_map.astype(np.int32),
                       artic_exist=np.stack([exist_t, exist_r]),
                       artic_vec=artic_vec, point_map=point_map,
                       normal_map=normal_map, owner=owner)


# ---------------------------------------------------------------------------
# procedural backbone features

def _view_seed(camera: Camera) -> int:
    raw = camera.rotation.tobytes() + camera.translation.tobytes()
    return zlib.crc32(raw) & 0xFFFFFFFF


def backbone_features(scene: SceneGT, camera: Camera, config: SynthConfig,
                      frame: Optional[FrameBundle] = None) -> np.ndarray:
    """Frozen-backbone stand-in: deterministic per-pixel descriptors.

    Layout (concatenated blocks, total d_b): projected class one-hot (16),
    per-instance hash embedding (16), Fourier encoding of the 3D point (16),
    the local surface normal (4, zero-padded), and a per-view noise block
    (the only view-dependent term).
    """
    if frame is None:
        frame = render_frame(scene, camera, splat_radius=config.splat_radius)
    h, w = camera.height, camera.width
    d_b = config.backbone_dim
    n_cls_dim, n_inst_dim, n_pos_dim, n_nrm_dim = 16, 16, 16, 4
    n_noise = d_b - n_cls_dim - n_inst_dim - n_pos_dim - n_nrm_dim

    cls_rng = np.random.default_rng(np.random.SeedSequence((config.backbone_seed, 1)))
    w_cls = cls_rng.normal(0.0, 1.0 / np.sqrt(n_cls_dim),
                           size=(config.n_classes, n_cls_dim))
    inst_emb = np.zeros((scene.n_instances, n_inst_dim))
    for iid in range(scene.n_instances):
        r = np.random.default_rng(np.random.SeedSequence((config.backbone_seed, config.seed, 2, iid)))
        v = r.normal(size=n_inst_dim)
        inst_emb[iid] = v / np.linalg.norm(v)

    out = np.zeros((h, w, d_b), dtype=np.float64)
    vis = frame.instance_map >= 0
    out[vis, 0:n_cls_dim] = w_cls[frame.class_map[vis]]
    out[vis, n_cls_dim:n_cls_dim + n_inst_dim] = inst_emb[frame.instance_map[vis]]

    span = scene.room_bounds[1] - scene.room_bounds[0]
    rel = (frame.point_map[vis] - scene.room_bounds[0]) / np.where(span > 0, span, 1.0)
    # 8 (axis, frequency) channels, sin and cos of each -> 16 dims; the
    # frequency-1 pair alone already encodes position uniquely over the room
    ax = np.array([0, 0, 0, 1, 1, 1, 2, 2])
    fr = np.array([1.0, 2.0, 4.0, 1.0, 2.0, 4.0, 1.0, 2.0])
    ang = 2.0 * np.pi * rel[:, ax] * fr[None, :]
    pos = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    base = n_cls_dim + n_inst_dim
    out[vis, base:base + n_pos_dim] = pos / np.sqrt(n_pos_dim)
    out[vis, base + n_pos_dim:base + n_pos_dim + 3] = frame.normal_map[vis]

    if config.backbone_noise > 0 and n_noise > 0:
        nrng = np.random.default_rng(
            np.random.SeedSequence((config.backbone_seed, config.seed, 3, _view_seed(camera))))
        out[:, :, d_b - n_noise:] = nrng.normal(0.0, config.backbone_noise, size=(h, w, n_noise))
    return out.astype(np.float32)
