"""Fusion, clustering, class assignment, querying, articulation aggregation."""

import numpy as np
import pytest

from mvscene.geometry import CorrespondenceSet
from mvscene.inference import (FusedCloud, InstanceResult, aggregate_articulation,
                               assign_classes, cluster_instances, fuse_views, query)
from mvscene.losses import PredictedMaps, confidence_weighted_mean
from mvscene.synth import KIND_NONE, KIND_ROTATION, KIND_TRANSLATION
from mvscene.teachers import make_prototypes


def maps_from(g, h=4, w=5, d_s=6, d_g=4):
    return PredictedMaps(
        f_sem=g.normal(size=(h, w, d_s)),
        c_sem=1.0 + g.random((h, w)),
        g_inst=g.normal(size=(h, w, d_g)),
        exist_t=g.uniform(0, 1, size=(h, w)),
        exist_r=g.uniform(0, 1, size=(h, w)),
        v_t=g.normal(size=(h, w, 3)),
        v_r=g.normal(size=(h, w, 3)),
        c_exist=1.0 + g.random((h, w)),
        c_motion=1.0 + g.random((h, w)))


def corr_of(entries, n_points, queries=None):
    """entries: list per point of (view, u, v) observations."""
    pts, views, us, vs = [], [], [], []
    for p, obs in enumerate(entries):
        for (view, u, v) in obs:
            pts.append(p)
            views.append(view)
            us.append(u)
            vs.append(v)
    indptr = np.zeros(n_points + 1, dtype=np.int64)
    np.add.at(indptr, np.array(pts, dtype=np.int64) + 1, 1)
    q = queries if queries is not None else np.zeros((n_points, 3))
    return CorrespondenceSet(queries=np.asarray(q, dtype=np.float64),
                             indptr=np.cumsum(indptr),
                             view=np.array(views, dtype=np.int32),
                             pixel_u=np.array(us, dtype=np.int32),
                             pixel_v=np.array(vs, dtype=np.int32),
                             confidence=np.ones(len(pts)))


class TestFuseViews:
    def test_single_view_passthrough(self):
        g = np.random.default_rng(0)
        preds = [maps_from(g)]
        corr = corr_of([[(0, 1, 2)], [(0, 3, 0)]], 2)
        cloud = fuse_views(preds, corr)
        np.testing.assert_allclose(cloud.sem[0], preds[0].f_sem[2, 1], atol=1e-12)
        np.testing.assert_allclose(cloud.inst[1], preds[0].g_inst[0, 3], atol=1e-12)

    def test_equal_features_fuse_to_themselves(self):
        g = np.random.default_rng(1)
        preds = [maps_from(g), maps_from(g)]
        f = g.normal(size=6)
        for p in preds:
            p.f_sem[2, 2] = f
        corr = corr_of([[(0, 2, 2), (1, 2, 2)]], 1)
        cloud = fuse_views(preds, corr)
        np.testing.assert_allclose(cloud.sem[0], f, atol=1e-12)

    def test_fusion_matches_weighted_mean_recompute(self):
        """Fused features must be recomputable from the raw maps via the
        confidence-weighted mean, observation by observation."""
        g = np.random.default_rng(2)
        preds = [maps_from(g), maps_from(g), maps_from(g)]
        corr = corr_of([[(0, 1, 1), (1, 0, 3), (2, 4, 2)],
                        [(1, 2, 2), (2, 0, 0)]], 2)
        cloud = fuse_views(preds, corr)
        for p in range(2):
            views, us, vs, _ = corr.observations(p)
            feats = np.stack([preds[w].f_sem[v, u] for w, u, v in zip(views, us, vs)])
            confs = np.array([preds[w].c_sem[v, u] for w, u, v in zip(views, us, vs)])
            np.testing.assert_allclose(cloud.sem[p],
                                       confidence_weighted_mean(feats, confs),
                                       atol=1e-12)

    def test_dropped_points_counted(self):
        g = np.random.default_rng(3)
        preds = [maps_from(g)]
        corr = corr_of([[(0, 0, 0)], []], 2)
        cloud = fuse_views(preds, corr)
        assert cloud.points.shape[0] == 1
        assert cloud.n_dropped == 1

    def test_fps_budget_full_size_is_identity(self):
        g = np.random.default_rng(4)
        preds = [maps_from(g)]
        queries = g.normal(size=(3, 3))
        corr = corr_of([[(0, 0, 0)], [(0, 1, 1)], [(0, 2, 2)]], 3, queries)
        full = fuse_views(preds, corr, fps_budget=3)
        none = fuse_views(preds, corr, fps_budget=None)
        np.testing.assert_array_equal(full.sem, none.sem)
        np.testing.assert_array_equal(full.points, none.points)

    def test_fps_budget_pools_neighborhoods(self):
        g = np.random.default_rng(5)
        preds = [maps_from(g, h=2, w=4)]
        # two spatial clusters of two points each
        queries = np.array([[0.0, 0, 0], [0.01, 0, 0], [5.0, 0, 0], [5.01, 0, 0]])
        corr = corr_of([[(0, 0, 0)], [(0, 1, 0)], [(0, 2, 0)], [(0, 3, 0)]],
                       4, queries)
        cloud = fuse_views(preds, corr, fps_budget=2)
        assert cloud.points.shape[0] == 2
        got = sorted(cloud.sem[:, 0].tolist())
        f = preds[0].f_sem
        expected = sorted([(f[0, 0, 0] + f[0, 1, 0]) / 2, (f[0, 2, 0] + f[0, 3, 0]) / 2])
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_uniform_confidence_mode_is_plain_mean(self):
        g = np.random.default_rng(6)
        preds = [maps_from(g), maps_from(g)]
        corr = corr_of([[(0, 1, 1), (1, 3, 2)]], 1)
        cloud = fuse_views(preds, corr, uniform_confidence=True)
        mean = 0.5 * (preds[0].f_sem[1, 1] + preds[1].f_sem[2, 3])
        np.testing.assert_allclose(cloud.sem[0], mean, atol=1e-12)


class TestClusterInstances:
    def test_density_mode_two_blobs(self):
        g = np.random.default_rng(7)
        emb = np.concatenate([g.normal(0, 0.01, (30, 4)),
                              g.normal(3.0, 0.01, (30, 4))])
        res = cluster_instances(emb, eps=0.5, min_pts=5)
        assert res.n_instances == 2
        assert res.scores.sum() == pytest.approx(1.0)

    def test_partition_k1(self):
        g = np.random.default_rng(8)
        emb = g.normal(size=(20, 3))
        res = cluster_instances(emb, k=1, seed=0)
        assert res.n_instances == 1
        assert (res.point_ids == 0).all()

    def test_partition_recovers_three_blobs(self):
        g = np.random.default_rng(9)
        centers = np.array([[0.0, 0], [10.0, 0], [0.0, 10]])
        emb = np.concatenate([g.normal(c, 0.05, (10, 2)) for c in centers])
        res = cluster_instances(emb, k=3, seed=1)
        for lo in (0, 10, 20):
            assert np.unique(res.point_ids[lo:lo + 10]).size == 1
        assert np.unique(res.point_ids).size == 3

    def test_partition_objective_matches_bruteforce_on_small_case(self):
        """Lloyd's fixed point on 30 points: the objective can't beat the
        exhaustive best assignment for the same centroids."""
        g = np.random.default_rng(10)
        emb = np.concatenate([g.normal(0, 0.1, (15, 2)), g.normal(5, 0.1, (15, 2))])
        res = cluster_instances(emb, k=2, seed=2)
        centers = np.stack([emb[res.point_ids == j].mean(axis=0) for j in range(2)])
        d2 = np.sum((emb[:, None, :] - centers[None]) ** 2, axis=2)
        best = d2.min(axis=1).sum()
        ours = sum(d2[i, res.point_ids[i]] for i in range(30))
        assert ours == pytest.approx(best, rel=1e-12)

    def test_partition_deterministic(self):
        g = np.random.default_rng(11)
        emb = g.normal(size=(40, 3))
        r1 = cluster_instances(emb, k=4, seed=5)
        r2 = cluster_instances(emb, k=4, seed=5)
        assert np.array_equal(r1.point_ids, r2.point_ids)

    def test_rejects_k_too_large(self):
        with pytest.raises(ValueError):
            cluster_instances(np.zeros((3, 2)), k=4)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            cluster_instances(np.zeros((0, 3)))


class TestAssignClasses:
    def test_prototypes_map_to_themselves(self):
        bank = make_prototypes(5, 16, seed=0)
        ids, n_zero = assign_classes(bank.class_vectors, bank)
        assert list(ids) == [0, 1, 2, 3, 4]
        assert n_zero == 0

    def test_scale_invariance(self):
        bank = make_prototypes(4, 16, seed=1)
        g = np.random.default_rng(12)
        feats = g.normal(size=(20, 16))
        base, _ = assign_classes(feats, bank)
        scaled, _ = assign_classes(feats * 37.5, bank)
        assert np.array_equal(base, scaled)

    def test_tie_breaks_to_lower_id(self):
        bank = make_prototypes(2, 16, seed=2)
        mid = bank.class_vectors[0] + bank.class_vectors[1]
        ids, _ = assign_classes(mid[None, :], bank)
        assert ids[0] == 0

    def test_zero_norm_becomes_background(self):
        bank = make_prototypes(3, 16, seed=3)
        ids, n_zero = assign_classes(np.zeros((2, 16)), bank)
        assert list(ids) == [-1, -1]
        assert n_zero == 2


class TestQuery:
    def test_self_query_is_one(self):
        g = np.random.default_rng(13)
        feats = g.normal(size=(10, 8))
        q = feats[4] / np.linalg.norm(feats[4])
        sims = query(feats, q)
        assert sims[4] == pytest.approx(1.0, abs=1e-12)
        assert np.abs(sims).max() <= 1.0 + 1e-12

    def test_orthogonal_query_is_zero(self):
        feats = np.zeros((5, 4))
        feats[:, 0] = 1.0
        sims = query(feats, np.array([0.0, 1.0, 0.0, 0.0]))
        np.testing.assert_allclose(sims, 0.0, atol=1e-12)

    def test_rejects_non_unit_query(self):
        with pytest.raises(ValueError, match="unit"):
            query(np.zeros((2, 3)), np.array([2.0, 0.0, 0.0]))


def make_cloud(exist_t, exist_r, v_t, v_r):
    n = len(exist_t)
    return FusedCloud(points=np.zeros((n, 3)), sem=np.zeros((n, 2)),
                      inst=np.zeros((n, 2)),
                      exist_t=np.asarray(exist_t, dtype=np.float64),
                      exist_r=np.asarray(exist_r, dtype=np.float64),
                      v_t=np.asarray(v_t, dtype=np.float64),
                      v_r=np.asarray(v_r, dtype=np.float64),
                      source_index=np.arange(n), n_dropped=0)


class TestAggregateArticulation:
    def test_all_below_threshold_is_none(self):
        cloud = make_cloud([0.3, 0.4], [0.2, 0.1],
                           np.ones((2, 3)), np.ones((2, 3)))
        inst = InstanceResult(point_ids=np.zeros(2, dtype=np.int32),
                              scores=np.array([1.0]))
        est = aggregate_articulation(inst, cloud)
        assert est[0].kind == KIND_NONE
        assert est[0].support == 0

    def test_translation_dominates(self):
        v = np.tile([0.0, 0.0, 1.0], (3, 1))
        cloud = make_cloud([0.9, 0.9, 0.9], [0.0, 0.0, 0.0], v, np.zeros((3, 3)))
        inst = InstanceResult(point_ids=np.zeros(3, dtype=np.int32),
                              scores=np.array([1.0]))
        est = aggregate_articulation(inst, cloud)
        assert est[0].kind == KIND_TRANSLATION
        np.testing.assert_allclose(est[0].direction, [0, 0, 1.0])
        assert est[0].support == 3

    def test_direction_is_convex_combination(self):
        g = np.random.default_rng(14)
        v_r = g.normal(size=(6, 3))
        cloud = make_cloud(np.zeros(6), np.full(6, 0.8), np.zeros((6, 3)), v_r)
        inst = InstanceResult(point_ids=np.zeros(6, dtype=np.int32),
                              scores=np.array([1.0]))
        est = aggregate_articulation(inst, cloud)
        assert est[0].kind == KIND_ROTATION
        np.testing.assert_allclose(est[0].direction, v_r.mean(axis=0), atol=1e-12)
        lo = v_r.min(axis=0)
        hi = v_r.max(axis=0)
        assert np.all(est[0].direction >= lo - 1e-12)
        assert np.all(est[0].direction <= hi + 1e-12)

    def test_threshold_uses_max_of_channels(self):
        cloud = make_cloud([0.2, 0.2], [0.6, 0.6],
                           np.zeros((2, 3)), np.ones((2, 3)))
        inst = InstanceResult(point_ids=np.zeros(2, dtype=np.int32),
                              scores=np.array([1.0]))
        est = aggregate_articulation(inst, cloud)
        assert est[0].kind == KIND_ROTATION
        assert est[0].support == 2
