import json

import numpy as np
import pytest

from lidar_reloc.database import SubmapRecord
from lidar_reloc.geometry import (Pose, PointCloud, compose, inverse, rotation_angle,
                                  transform_points, yaw_rotation)
from lidar_reloc.registration import (RefinedPose, correspondence_threshold, icp_refine,
                                      initial_pose, relocalize, rigid_fit)

from conftest import random_pose


def _box_cloud(rng, n=3000):
    # three perpendicular rough planes: a fully constrained structure
    pts = rng.uniform(-5, 5, (n, 3))
    k = rng.integers(0, 3, n)
    pts[np.arange(n), k] = rng.normal(0, 0.02, n) + np.array([-3.0, 2.0, -1.0])[k]
    return pts


class TestRigidFit:
    def test_exact_recovery(self, rng):
        for _ in range(20):
            T = random_pose(rng)
            src = rng.normal(size=(50, 3))
            est = rigid_fit(src, transform_points(src, T))
            np.testing.assert_allclose(est.matrix(), T.matrix(), atol=1e-9)

    def test_never_returns_reflection(self, rng):
        src = rng.normal(size=(30, 3))
        dst = src * [1, 1, -1]
        assert np.linalg.det(rigid_fit(src, dst).rotation) == pytest.approx(1.0)

    def test_planar_points(self, rng):
        src = np.c_[rng.normal(size=(40, 2)), np.zeros(40)]
        T = Pose.from_yaw(0.7, [1, 2, 0])
        np.testing.assert_allclose(rigid_fit(src, transform_points(src, T)).matrix(), T.matrix(),
                                   atol=1e-9)


class TestICP:
    def test_recovers_perturbation(self, rng):
        tgt = PointCloud(_box_cloud(rng))
        P = Pose.from_yaw(np.radians(8), [0.3, -0.2, 0.1])
        src = PointCloud(transform_points(tgt.xyz, inverse(P)))
        r = icp_refine(src, tgt, Pose.identity(), 1.0)
        err = compose(inverse(P), r.T)
        assert np.linalg.norm(err.translation) < 1e-3
        assert rotation_angle(err.rotation) < 1e-4
        assert r.fitness == 1.0 and r.inlier_rmse < 1e-3

    def test_identity_at_optimum(self, rng):
        c = PointCloud(_box_cloud(rng, 500))
        r = icp_refine(c, c, Pose.identity(), 0.5)
        np.testing.assert_allclose(r.T.matrix(), np.eye(4), atol=1e-12)
        # one step for the coarse pass, one for the fine pass
        assert r.converged and r.iterations == 2
        assert icp_refine(c, c, Pose.identity(), 0.5, coarse_voxel=None).iterations == 1

    def test_no_overlap(self, rng):
        c = PointCloud(_box_cloud(rng, 200))
        far = Pose.from_translation([100.0, 0, 0])
        r = icp_refine(c, c, far, 0.5)
        assert r.fitness == 0.0 and r.iterations == 0 and not r.converged
        np.testing.assert_array_equal(r.T.matrix(), far.matrix())

    def test_never_worse_than_start(self, rng):
        tgt = PointCloud(_box_cloud(rng, 800))
        src = PointCloud(transform_points(tgt.xyz, Pose.from_yaw(1.2, [2, 1, 0])))
        T0 = Pose.identity()
        r = icp_refine(src, tgt, T0, 0.5)
        d0 = np.asarray(transform_points(src.xyz, T0))
        from scipy.spatial import cKDTree
        dist, _ = cKDTree(tgt.xyz).query(d0, distance_upper_bound=0.5)
        rmse0 = np.sqrt(np.mean(dist[np.isfinite(dist)] ** 2))
        assert r.inlier_rmse <= rmse0 + 1e-12

    def test_argument_checks(self, rng):
        c = PointCloud(_box_cloud(rng, 50))
        with pytest.raises(ValueError):
            icp_refine(c, c, Pose.identity(), 0.5, max_iter=0)
        with pytest.raises(ValueError):
            icp_refine(c, c, Pose.identity(), 0.5, coarse_voxel=0.0)
        with pytest.raises(ValueError):
            icp_refine(PointCloud(np.zeros((0, 3))), c, Pose.identity(), 0.5)


class TestInitialPose:
    def test_yaw_in_candidate_frame(self):
        rec = SubmapRecord(3, Pose.from_yaw(0.5, [10, 0, 0]), np.zeros(64), np.zeros(64))
        est = initial_pose(rec, 0.25, 0.4)
        assert est.T0.yaw == pytest.approx(0.75)
        np.testing.assert_allclose(est.T0.translation, [10, 0, 0])
        assert (est.candidate, est.distance) == (3, 0.4)
        np.testing.assert_allclose(est.T0.matrix(),
                                   rec.origin.matrix() @ yaw_rotation(0.25).matrix())

    def test_seeded_scan_overlaps_submap(self, small_setup):
        from scipy.spatial import cKDTree

        db = small_setup[2]
        rec = db.record(db.records[len(db.records) // 2].index)
        local = rec.submap.cloud
        # the scan seen from origin * yaw(30 deg) is the local cloud rotated by -30 deg
        scan = transform_points(local.xyz, yaw_rotation(-np.radians(30)))
        est = initial_pose(rec, np.radians(30))
        placed = transform_points(scan, est.T0)
        d, _ = cKDTree(transform_points(local.xyz, rec.origin)).query(placed)
        assert d.mean() < 0.2

    def test_threshold_clamped(self, small_setup):
        cfg = small_setup[0]
        assert correspondence_threshold(0.0, cfg) == 0.5
        assert correspondence_threshold(1.0, cfg) == pytest.approx(1.5)
        assert correspondence_threshold(10.0, cfg) == 3.0
        with pytest.raises(ValueError):
            correspondence_threshold(-1.0, cfg)

    def test_refined_pose_validation(self):
        with pytest.raises(ValueError):
            RefinedPose(Pose.identity(), 1.5, 0.0, 1, True)


class TestRelocalize:
    def test_small_world(self, small_setup):
        cfg, backend, db, queries = small_setup
        errors = []
        for s in queries:
            res = relocalize(s.cloud, db, backend, cfg)
            assert len(res.ranked) == cfg.top_k
            assert all(not c.accepted for c in res.candidates[:-1])
            near = [np.linalg.norm(db.record(i).origin.translation - s.pose.translation) <= 3.0
                    for i, _ in res.ranked]
            if not res.success:
                # the gates only reject when retrieval found nothing close
                assert not any(near)
                continue
            assert res.candidates[-1].accepted
            errors.append(np.linalg.norm(res.T.translation - s.pose.translation))
        assert len(errors) >= 0.8 * len(queries)
        assert max(errors) < 0.1

    def test_exact_revisit(self, small_setup):
        cfg, backend, db, _ = small_setup
        rec = db.records[10]
        res = relocalize(rec.submap.cloud, db, backend, cfg)
        assert res.success and res.chosen == rec.index
        np.testing.assert_allclose(res.T.translation, rec.origin.translation, atol=1e-3)

    def test_out_of_map_scan_fails(self, small_setup, rng):
        cfg, backend, db, _ = small_setup
        # a diffuse cloud shares no structure with any corridor
        scan = PointCloud(rng.uniform(-30, 30, (4000, 3)))
        res = relocalize(scan, db, backend, cfg)
        assert not res.success
        assert all(c.refined.fitness < cfg.min_fitness or c.refined.inlier_rmse > cfg.max_rmse
                   for c in res.candidates)

    def test_report_fields(self, small_setup):
        cfg, backend, db, queries = small_setup
        doc = relocalize(queries[0].cloud, db, backend, cfg).to_report()
        assert set(doc) == {"success", "chosen", "ranked", "pose", "candidates", "timings_ms"}
        assert set(doc["timings_ms"]) == {"descriptor", "query", "yaw", "icp", "total"}
        M = np.array(json.loads(json.dumps(doc["pose"]["matrix"])))
        np.testing.assert_allclose(M[:3, :3] @ M[:3, :3].T, np.eye(3), atol=1e-6)
        np.testing.assert_allclose(M[3], [0, 0, 0, 1])
        q = doc["pose"]["quaternion_xyzw"]
        assert q[3] >= 0 and np.linalg.norm(q) == pytest.approx(1.0)

    def test_rejection_reports_best(self, small_setup):
        cfg, backend, db, queries = small_setup
        strict = cfg.replace(min_fitness=1.0, max_rmse=1e-6, top_k=3)
        res = relocalize(queries[0].cloud, db, backend, strict)
        assert not res.success and len(res.candidates) == 3
        best = max(res.candidates, key=lambda c: c.refined.fitness)
        assert res.chosen == best.estimate.candidate
        assert all(c.reason != "accepted" for c in res.candidates)

    def test_record_without_points_rejected(self, small_setup):
        from lidar_reloc.database import DescriptorDatabase

        cfg, backend, db, queries = small_setup
        bare = DescriptorDatabase([SubmapRecord(r.index, r.origin, r.q, r.w) for r in db.records])
        with pytest.raises(ValueError, match="no submap points"):
            relocalize(queries[0].cloud, bare, backend, cfg)
