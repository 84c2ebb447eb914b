"""Mask lifting, density clustering, segment merging, label reprojection."""

import numpy as np
import pytest

from mvscene.geometry import Camera, DepthMap, build_correspondences, unproject
from mvscene.lifting import (LiftedCloud, Segment3D, dbscan, lift_masks,
                             merge_segments, reproject_labels)
from mvscene.synth import SynthConfig
from mvscene.teachers import FragmentParams, fragment_instance_masks
from mvscene.pipeline import make_scene


def dbscan_reference(points, eps, min_pts):
    """Independent quadratic re-implementation with identical order rules."""
    n = points.shape[0]
    d2 = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=-1)
    neigh = [np.nonzero(d2[i] <= eps * eps)[0].tolist() for i in range(n)]
    labels = [-2] * n
    cluster = 0
    for i in range(n):
        if labels[i] != -2:
            continue
        if len(neigh[i]) < min_pts:
            labels[i] = -1
            continue
        labels[i] = cluster
        queue = [j for j in neigh[i] if j != i]
        head = 0
        while head < len(queue):
            j = queue[head]
            head += 1
            if labels[j] == -1:
                labels[j] = cluster
            if labels[j] != -2:
                continue
            labels[j] = cluster
            if len(neigh[j]) >= min_pts:
                queue.extend(q for q in neigh[j] if labels[q] in (-2, -1))
        cluster += 1
    return np.array([l if l != -2 else -1 for l in labels])


class TestDBSCAN:
    def test_two_far_clusters(self):
        rng = np.random.default_rng(0)
        pts = np.concatenate([rng.normal(0, 0.02, (20, 3)),
                              rng.normal(1.0, 0.02, (20, 3))])
        labels = dbscan(pts, eps=0.1, min_pts=5)
        assert set(labels) == {0, 1}
        assert (labels[:20] == labels[0]).all()

    def test_isolated_points_are_noise(self):
        pts = np.array([[0.0, 0, 0], [5.0, 0, 0], [10.0, 0, 0]])
        labels = dbscan(pts, eps=0.1, min_pts=2)
        assert (labels == -1).all()

    def test_min_pts_one_labels_everything(self):
        pts = np.array([[0.0, 0, 0], [5.0, 0, 0]])
        labels = dbscan(pts, eps=0.1, min_pts=1)
        assert list(labels) == [0, 1]

    def test_matches_quadratic_reference(self):
        rng = np.random.default_rng(1)
        for case in range(120):
            n = int(rng.integers(5, 61))
            pts = rng.random((n, 3)) * rng.uniform(0.5, 2.0)
            eps = float(rng.uniform(0.05, 0.4))
            min_pts = int(rng.integers(1, 8))
            got = dbscan(pts, eps, min_pts)
            ref = dbscan_reference(pts, eps, min_pts)
            assert np.array_equal(got, ref), f"case {case}"

    def test_rigid_invariance(self):
        rng = np.random.default_rng(2)
        pts = np.concatenate([rng.normal(0, 0.05, (25, 3)),
                              rng.normal([0, 0, 2.0], 0.05, (25, 3))])
        base = dbscan(pts, eps=0.3, min_pts=4)
        theta = 0.7
        rot = np.array([[np.cos(theta), -np.sin(theta), 0],
                        [np.sin(theta), np.cos(theta), 0], [0, 0, 1.0]])
        moved = pts @ rot.T + np.array([5.0, -3.0, 1.0])
        assert np.array_equal(dbscan(moved, eps=0.3, min_pts=4), base)

    def test_high_dimensional_input(self):
        rng = np.random.default_rng(3)
        pts = np.concatenate([rng.normal(0, 0.01, (15, 8)),
                              rng.normal(2.0, 0.01, (15, 8))])
        labels = dbscan(pts, eps=0.5, min_pts=3)
        assert set(labels) == {0, 1}

    def test_rejects_bad_params(self):
        with pytest.raises(ValueError):
            dbscan(np.zeros((3, 3)), eps=0.0, min_pts=1)
        with pytest.raises(ValueError):
            dbscan(np.zeros((3, 3)), eps=1.0, min_pts=0)


def simple_frame(seg_rows):
    """A tiny fronto-parallel frame: camera at origin looking +z, plane z=2."""
    h = len(seg_rows)
    w = len(seg_rows[0])
    cam = Camera(fx=8.0, fy=8.0, cx=(w - 1) / 2, cy=(h - 1) / 2,
                 rotation=np.eye(3), translation=np.zeros(3), width=w, height=h)
    depth = DepthMap(width=w, height=h, values=np.full((h, w), 2.0))
    seg = np.array(seg_rows, dtype=np.int32)
    return cam, depth, seg


class TestLiftMasks:
    def test_counts_and_tags(self):
        cam, depth, seg = simple_frame([[0, 0, -1], [1, 1, 1]])
        lifted = lift_masks([(cam, depth, seg)])
        assert lifted.points.shape[0] == 5
        assert lifted.n_skipped == 0
        assert sorted(set(zip(lifted.view.tolist(), lifted.segment.tolist()))) \
            == [(0, 0), (0, 1)]

    def test_invalid_depth_skipped_and_counted(self):
        cam, depth, seg = simple_frame([[0, 0], [0, 0]])
        depth.values[0, 0] = 0.0
        lifted = lift_masks([(cam, depth, seg)])
        assert lifted.points.shape[0] == 3
        assert lifted.n_skipped == 1

    def test_round_trip_to_source_pixels(self, small_scene):
        _, scene, cameras, frames = small_scene
        fr = frames[0]
        seg = fr.instance_map
        lifted = lift_masks([(fr.camera, fr.depth, seg)])
        from mvscene.geometry import project
        for i in range(0, lifted.points.shape[0], 211):
            res = project(fr.camera, lifted.points[i])
            assert res is not None
            (u, v), _ = res
            assert abs(u - lifted.pixel_u[i]) <= 0.5 + 1e-9
            assert abs(v - lifted.pixel_v[i]) <= 0.5 + 1e-9


def make_lifted(point_sets):
    """LiftedCloud from explicit (view, seg, points) triples."""
    pts, views, segs = [], [], []
    for view, seg, p in point_sets:
        p = np.asarray(p, dtype=np.float64)
        pts.append(p)
        views.append(np.full(p.shape[0], view, dtype=np.int32))
        segs.append(np.full(p.shape[0], seg, dtype=np.int32))
    n = sum(p.shape[0] for p in pts)
    return LiftedCloud(points=np.concatenate(pts), view=np.concatenate(views),
                       segment=np.concatenate(segs),
                       pixel_u=np.zeros(n, dtype=np.int32),
                       pixel_v=np.zeros(n, dtype=np.int32), n_skipped=0)


class TestMergeSegments:
    def test_identical_duplicate_across_views_merges(self):
        rng = np.random.default_rng(4)
        blob = rng.random((30, 3)) * 0.2
        lifted = make_lifted([(0, 0, blob), (1, 0, blob)])
        merged = merge_segments(lifted, dbscan_eps=1.0, dbscan_min_pts=1)
        assert len(merged) == 1
        assert merged[0].sources == [(0, 0), (1, 0)]

    def test_disjoint_segments_stay_apart(self):
        rng = np.random.default_rng(5)
        a = rng.random((25, 3)) * 0.2
        b = a + np.array([5.0, 0.0, 0.0])
        lifted = make_lifted([(0, 0, a), (1, 0, b)])
        merged = merge_segments(lifted, dbscan_eps=1.0, dbscan_min_pts=1)
        assert len(merged) == 2

    def test_same_view_pairs_never_merge_directly(self):
        rng = np.random.default_rng(6)
        blob = rng.random((30, 3)) * 0.2
        lifted = make_lifted([(0, 0, blob), (0, 1, blob + 0.001)])
        merged = merge_segments(lifted, dbscan_eps=1.0, dbscan_min_pts=1)
        assert len(merged) == 2

    def test_matches_greedy_oracle_on_four_segments(self):
        """Brute-force the greedy rule (highest voxel IoU first, ties by
        lowest pair) over four overlapping synthetic segments."""
        rng = np.random.default_rng(7)
        base = rng.random((60, 3))
        sets = [(0, 0, base[:40]), (1, 0, base[20:]),
                (2, 0, base[10:30]), (3, 0, base + 10.0)]
        lifted = make_lifted(sets)
        merged = merge_segments(lifted, iou_threshold=0.25, voxel_size=0.05,
                                dbscan_eps=10.0, dbscan_min_pts=1)

        # oracle: same rule, transparent implementation over voxel sets
        def vox(p):
            return set(map(tuple, np.floor(np.asarray(p) / 0.05).astype(int).tolist()))
        groups = {i: (vox(s[2]), {i}) for i, s in enumerate(sets)}
        views = {i: {s[0]} for i, s in enumerate(sets)}
        while True:
            best = None
            for i in sorted(groups):
                for j in sorted(groups):
                    if j <= i or (len(views[i]) == 1 and views[i] == views[j]):
                        continue
                    vi, vj = groups[i][0], groups[j][0]
                    iou = len(vi & vj) / len(vi | vj)
                    if iou >= 0.25 and (best is None or iou > best[0]):
                        best = (iou, i, j)
            if best is None:
                break
            _, i, j = best
            groups[i] = (groups[i][0] | groups[j][0], groups[i][1] | groups[j][1])
            views[i] |= views[j]
            del groups[j], views[j]
        oracle = sorted(frozenset(g[1]) for g in groups.values())
        got = sorted(frozenset(i for i, s in enumerate(sets)
                               if (s[0], s[1]) in m.sources) for m in merged)
        assert got == oracle

    def test_noise_filter_drops_outliers(self):
        rng = np.random.default_rng(8)
        blob = rng.normal(0, 0.02, (40, 3))
        stray = np.array([[9.0, 9.0, 9.0]])
        lifted = make_lifted([(0, 0, np.concatenate([blob, stray])),
                              (1, 0, blob + 0.001)])
        merged = merge_segments(lifted, dbscan_eps=0.2, dbscan_min_pts=5)
        all_kept = np.concatenate([m.indices for m in merged])
        assert 40 not in all_kept or not np.any(
            np.linalg.norm(lifted.points[all_kept] - stray, axis=1) < 1e-9)


class TestReprojectLabels:
    def test_single_segment_covers_source_pixels(self):
        cam, depth, seg = simple_frame([[0, 0, 0], [0, 0, 0]])
        lifted = lift_masks([(cam, depth, seg)])
        merged = [Segment3D(indices=np.arange(6), sources=[(0, 0)])]
        labels = reproject_labels(merged, [(cam, depth)], lifted)
        assert (labels.maps[0] == 0).all()

    def test_invisible_view_gets_nothing(self):
        cam, depth, seg = simple_frame([[0, 0], [0, 0]])
        lifted = lift_masks([(cam, depth, seg)])
        far_cam = Camera(fx=8.0, fy=8.0, cx=0.5, cy=0.5, rotation=np.eye(3),
                         translation=np.array([0.0, 0.0, -50.0]), width=2, height=2)
        far_depth = DepthMap(width=2, height=2, values=np.full((2, 2), 1.0))
        merged = [Segment3D(indices=np.arange(4), sources=[(0, 0)])]
        labels = reproject_labels(merged, [(cam, depth), (far_cam, far_depth)], lifted)
        assert (labels.maps[1] == -1).all()

    def test_rejects_empty(self):
        cam, depth, seg = simple_frame([[0]])
        lifted = lift_masks([(cam, depth, seg)])
        with pytest.raises(ValueError):
            reproject_labels([], [(cam, depth)], lifted)


class TestEndToEnd:
    def test_noiseless_labels_match_gt(self, small_scene):
        """Fragmentation off, exact depth: consistent ids equal GT instance
        maps through a bijective relabeling on every valid pixel."""
        cfg, scene, cameras, frames = small_scene
        fparams = FragmentParams(max_cuts=0, boundary_noise=0)
        seg_frames = []
        for i, fr in enumerate(frames):
            segs = fragment_instance_masks(fr, fparams, seed=i)
            seg_frames.append((fr.camera, fr.depth, segs))
        lifted = lift_masks(seg_frames)
        cam_frames = [(fr.camera, fr.depth) for fr in frames]
        merged = merge_segments(lifted, frames=cam_frames,
                                dbscan_eps=0.3, dbscan_min_pts=10)
        labels = reproject_labels(merged, cam_frames, lifted)
        gt = np.stack([fr.instance_map for fr in frames])
        pred = labels.maps
        valid = gt >= 0
        mapping = {}
        used = set()
        for g in np.unique(gt[valid]):
            sel = valid & (gt == g)
            ids, counts = np.unique(pred[sel], return_counts=True)
            winner = int(ids[counts.argmax()])
            assert winner >= 0
            assert winner not in used
            used.add(winner)
            mapping[int(g)] = winner
            assert counts.max() == sel.sum()  # every pixel agrees

    def test_fragmented_instance_recovers_single_id(self, small_scene):
        """SAM-style fragments across views still collapse to one id
        covering at least 95% of each instance's pixels."""
        cfg, scene, cameras, frames = small_scene
        use = frames[:4]
        seg_frames = []
        for i, fr in enumerate(use):
            segs = fragment_instance_masks(fr, FragmentParams(), seed=100 + i)
            seg_frames.append((fr.camera, fr.depth, segs))
        lifted = lift_masks(seg_frames)
        cam_frames = [(fr.camera, fr.depth) for fr in use]
        merged = merge_segments(lifted, frames=cam_frames,
                                dbscan_eps=0.3, dbscan_min_pts=10)
        labels = reproject_labels(merged, cam_frames, lifted)
        gt = np.stack([fr.instance_map for fr in use])
        pred = labels.maps
        for g in np.unique(gt[gt >= 0]):
            sel = gt == g
            ids, counts = np.unique(pred[sel], return_counts=True)
            assert counts.max() / sel.sum() >= 0.95
