"""On-disk formats: binary tensor container, PLY point clouds, camera JSON.

The tensor container is a single file holding named nd-arrays:
8-byte magic ``MVTENS01``, a little-endian uint64 header size, a UTF-8
JSON header listing (name, dtype, shape, offset) per tensor, then the raw
little-endian C-order payloads back to back. Writes are deterministic:
tensors are emitted in the order given.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .geometry import Camera

_MAGIC = b"MVTENS01"

_DTYPES = {"<f4", "<f8", "<i4", "<i8", "<u1", "<u4", "|u1", "|b1"}


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    entries = []
    payloads = []
    offset = 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr)
        if a.dtype.str not in _DTYPES:
            # normalize platform dtypes (e.g. '=f8') to explicit little-endian
            a = a.astype(a.dtype.newbyteorder("<"))
            if a.dtype.str not in _DTYPES:
                raise ValueError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        raw = a.tobytes(order="C")
        entries.append({"name": name, "dtype": a.dtype.str,
                        "shape": list(a.shape), "offset": offset})
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries}, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in payloads:
            f.write(raw)


def read_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a tensor container (bad magic {magic!r})")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()
    out = {}
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"])
        shape = tuple(e["shape"])
        n = int(np.prod(shape)) * dt.itemsize if shape else dt.itemsize
        raw = payload[e["offset"]:e["offset"] + n]
        out[e["name"]] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
    return out


# ---------------------------------------------------------------------------
# PLY

def write_ply(path, points: np.ndarray,
              labels: dict[str, np.ndarray] | None = None,
              features: dict[str, np.ndarray] | None = None) -> None:
    """Binary little-endian PLY: xyz float32, uint32 label columns,
    float32 feature blocks (a (N,K) block becomes properties name_0..name_K-1)."""
    pts = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    n = pts.shape[0]
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    columns = [pts[:, 0], pts[:, 1], pts[:, 2]]
    props = ["property float x", "property float y", "property float z"]
    for name, lab in (labels or {}).items():
        arr = np.asarray(lab).reshape(n).astype("<u4")
        fields.append((name, "<u4"))
        columns.append(arr)
        props.append(f"property uint {name}")
    for name, feat in (features or {}).items():
        f2 = np.asarray(feat, dtype=np.float32).reshape(n, -1)
        for k in range(f2.shape[1]):
            fields.append((f"{name}_{k}", "<f4"))
            columns.append(f2[:, k])
            props.append(f"property float {name}_{k}")
    rec = np.empty(n, dtype=fields)
    for (fname, _), col in zip(fields, columns):
        rec[fname] = col
    header = "\n".join([
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {n}",
        *props,
        "end_header",
    ]) + "\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(rec.tobytes())


_PLY_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8",
              "uint": "<u4", "uint32": "<u4", "int": "<i4", "int32": "<i4",
              "uchar": "|u1", "uint8": "|u1"}


def read_ply(path):
    """Read a vertex-only binary little-endian PLY written by this package.

    Returns (points (N,3) float32, labels dict, features dict); consecutive
    ``name_0..name_K-1`` float columns are reassembled into one (N,K) block.
    """
    with open(path, "rb") as f:
        line = f.readline().strip()
        if line != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        n = None
        fields = []
        while True:
            line = f.readline()
            if not line:
                raise ValueError(f"{path}: truncated header")
            parts = line.decode("ascii").strip().split()
            if parts[0] == "end_header":
                break
            if parts[0] == "format" and parts[1] != "binary_little_endian":
                raise ValueError(f"{path}: unsupported format {parts[1]}")
            if parts[0] == "element":
                if parts[1] != "vertex":
                    raise ValueError(f"{path}: unsupported element {parts[1]}")
                n = int(parts[2])
            if parts[0] == "property":
                if parts[1] == "list":
                    raise ValueError(f"{path}: list properties unsupported")
                fields.append((parts[2], _PLY_TYPES[parts[1]]))
        rec = np.frombuffer(f.read(), dtype=fields, count=n)
    points = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float32)
    labels = {}
    feature_cols: dict[str, list] = {}
    for name, dt in fields:
        if name in ("x", "y", "z"):
            continue
        if dt == "<u4":
            labels[name] = rec[name].copy()
        else:
            base, _, idx = name.rpartition("_")
            if base and idx.isdigit():
                feature_cols.setdefault(base, []).append((int(idx), rec[name]))
            else:
                feature_cols.setdefault(name, []).append((0, rec[name]))
    features = {}
    for base, cols in feature_cols.items():
        cols.sort(key=lambda c: c[0])
        features[base] = np.stack([c[1] for c in cols], axis=1).astype(np.float32)
    return points, labels, features


# ---------------------------------------------------------------------------
# cameras and small JSON records

def save_cameras(path, cameras: list[Camera]) -> None:
    recs = [c.to_json() for c in cameras]
    Path(path).write_text(json.dumps(recs, indent=1) + "\n")


def load_cameras(path) -> list[Camera]:
    recs = json.loads(Path(path).read_text())
    return [Camera.from_json(r) for r in recs]


def save_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def load_json(path):
    return json.loads(Path(path).read_text())
