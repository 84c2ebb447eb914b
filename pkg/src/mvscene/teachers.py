"""Emulated 2D foundation-model supervision.

Stands in for the vision-language and mask teachers: a bank of unit
prototype vectors plays the text/feature encoder, per-segment features get
controlled per-view noise (the view-inconsistency the consistency loss
exists to fix), and ground-truth instance masks are fragmented into
view-local 2D segments with noisy boundaries to mimic over-segmentation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .synth import FrameBundle


class PrototypeError(RuntimeError):
    pass


@dataclass
class PrototypeBank:
    class_vectors: np.ndarray     # (C, d_s), unit rows
    background: np.ndarray        # (d_s,), unit
    concept_vectors: np.ndarray   # (n_concepts, d_s), unit rows

    @property
    def n_classes(self) -> int:
        return self.class_vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.class_vectors.shape[1]

    def vector(self, idx: int) -> np.ndarray:
        """Query vector by id: class ids first, then concept ids."""
        if idx < self.n_classes:
            return self.class_vectors[idx]
        return self.concept_vectors[idx - self.n_classes]


@dataclass
class TeacherFrame:
    semantic_features: np.ndarray  # (H, W, d_s), unit rows, constant per segment
    segment_id_map: np.ndarray     # (H, W) int32, -1 background


@dataclass
class FragmentParams:
    max_cuts: int = 2          # each instance splits into 1..max_cuts+1 fragments
    boundary_noise: int = 2    # rounds of random boundary reassignment (pixels)


def make_prototypes(n_classes: int, dim: int, seed: int,
                    n_concepts: int = 0, max_cosine: float = 0.8,
                    max_attempts: int = 200) -> PrototypeBank:
    """Rejection-sample unit vectors with pairwise cosine below max_cosine.

    The background vector and any concept vectors go through the same
    rejection against everything already accepted. Deterministic in seed.
    """
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if dim < 8:
        raise ValueError("prototype dimension must be >= 8")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 101)))
    accepted: list[np.ndarray] = []
    total = n_classes + 1 + n_concepts
    for k in range(total):
        for _ in range(max_attempts):
            v = rng.normal(size=dim)
            v /= np.linalg.norm(v)
            if all(float(np.dot(v, a)) < max_cosine for a in accepted):
                accepted.append(v)
                break
        else:
            raise PrototypeError(
                f"could not place prototype {k + 1}/{total} below cosine "
                f"{max_cosine} in {dim} dims after {max_attempts} draws")
    arr = np.stack(accepted)
    return PrototypeBank(class_vectors=arr[:n_classes],
                         background=arr[n_classes],
                         concept_vectors=arr[n_classes + 1:])


def teacher_semantic_features(frame: FrameBundle, bank: PrototypeBank,
                              view_noise: float, seed: int,
                              segments: np.ndarray | None = None) -> TeacherFrame:
    """Per-segment noisy class prototypes, the distillation target.

    Each 2D segment gets normalize(prototype[class] + eps) where eps is a
    random direction of length ``view_noise`` drawn per (segment, seed); pass
    a per-view seed to reproduce the teacher's view inconsistency. Background
    pixels carry the fixed background prototype. When ``segments`` is None
    the ground-truth instance map is used unfragmented.
    """
    if segments is None:
        segments = frame.instance_map
    segments = np.asarray(segments)
    h, w = segments.shape
    feats = np.empty((h, w, bank.dim), dtype=np.float64)
    feats[:] = bank.background
    rng = np.random.default_rng(np.random.SeedSequence((seed, 211)))
    for sid in np.unique(segments):
        if sid < 0:
            continue
        mask = segments == sid
        classes = frame.class_map[mask]
        classes = classes[classes >= 0]
        noise = rng.normal(size=bank.dim)
        if classes.size == 0:
            continue
        cid = int(np.bincount(classes).argmax())
        proto = bank.class_vectors[cid].copy()
        if view_noise > 0:
            proto = proto + view_noise * noise / np.linalg.norm(noise)
        proto /= np.linalg.norm(proto)
        feats[mask] = proto
    return TeacherFrame(semantic_features=feats,
                        segment_id_map=segments.astype(np.int32))


def fragment_instance_masks(frame: FrameBundle, params: FragmentParams,
                            seed: int) -> np.ndarray:
    """Split every instance's pixels into 1-3 view-local fragments.

    Straight random cuts over-segment, then a few rounds of random boundary
    growth between sibling fragments blur the cut lines. Fragments never
    cross instance boundaries and ids carry no cross-view identity.
    """
    inst = frame.instance_map
    h, w = inst.shape
    out = np.full((h, w), -1, dtype=np.int32)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 307)))
    next_id = 0
    for iid in np.unique(inst):
        if iid < 0:
            continue
        ys, xs = np.nonzero(inst == iid)
        local = np.zeros(ys.size, dtype=np.int32)
        n_cuts = int(rng.integers(0, params.max_cuts + 1))
        for _ in range(n_cuts):
            # cut the currently largest fragment with a random straight line
            frag_sizes = np.bincount(local)
            target = int(frag_sizes.argmax())
            sel = local == target
            if sel.sum() < 2:
                continue
            pick = int(rng.integers(0, sel.sum()))
            cy = ys[sel][pick]
            cx = xs[sel][pick]
            theta = rng.uniform(0.0, np.pi)
            side = (xs - cx) * np.cos(theta) + (ys - cy) * np.sin(theta) > 0.0
            new_label = local.max() + 1
            local[sel & side] = new_label
        for _ in range(params.boundary_noise):
            local = _grow_boundaries(ys, xs, local, h, w, rng)
        # compact to global ids, dropping emptied fragments
        for frag in np.unique(local):
            out[ys[local == frag], xs[local == frag]] = next_id
            next_id += 1
    return out


def _grow_boundaries(ys, xs, local, h, w, rng):
    """One round of random one-pixel growth between sibling fragments."""
    grid = np.full((h, w), -2, dtype=np.int64)
    grid[ys, xs] = local
    new = local.copy()
    for frag in np.unique(local):
        mask = grid == frag
        grown = np.zeros_like(mask)
        grown[1:, :] |= mask[:-1, :]
        grown[:-1, :] |= mask[1:, :]
        grown[:, 1:] |= mask[:, :-1]
        grown[:, :-1] |= mask[:, 1:]
        candidate = grown[ys, xs] & (local != frag)
        flips = candidate & (rng.random(ys.size) < 0.5)
        new[flips] = frag
    return new
