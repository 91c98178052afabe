import numpy as np
import pytest

from lidar_reloc.geometry import Pose
from lidar_reloc.trigger import JUNCTION, STRAIGHT, TURN
from lidar_reloc.world import (Edge, LidarModel, TunnelGraph, WorldError, WorldSpec, cast_rays,
                               generate_dataset, generate_world, inside_world, label_for_pose,
                               sample_poses, simulate_scan)


def _box_world(width=4.0, height=3.0):
    # one straight corridor of length 20 along +x
    return TunnelGraph(np.array([[0.0, 0, 0], [20.0, 0, 0]]), (Edge(0, 1, width, height, "straight"),))


class TestGeneration:
    @pytest.mark.parametrize("segments", [{"straight": 4, "turn": 2, "junction": 2},
                                      {"junction": 3}, {"turn": 1}])
    def test_counts(self, segments):
        w = generate_world(7, segments)
        assert len(w.junctions) == segments.get("junction", 0)
        assert all(w.degree[j] == 3 for j in w.junctions)
        assert sum(e.kind == "turn" for e in w.edges) >= segments.get("turn", 0)

    def test_deterministic(self):
        a = generate_world(11, {"straight": 2, "junction": 1}, roughness=0.1)
        b = generate_world(11, {"straight": 2, "junction": 1}, roughness=0.1)
        np.testing.assert_array_equal(a.nodes, b.nodes)
        assert a.edges == b.edges
        np.testing.assert_array_equal(a.waves, b.waves)

    def test_seeds_differ(self):
        a = generate_world(1, {"straight": 3})
        b = generate_world(2, {"straight": 3})
        assert not np.array_equal(a.nodes, b.nodes)

    @pytest.mark.parametrize("segments", [{}, {"straight": 0}, {"bridge": 1}, {"turn": -1}])
    def test_bad_segment_request(self, segments):
        with pytest.raises(WorldError):
            generate_world(0, segments)

    def test_bad_width_range(self):
        with pytest.raises(WorldError):
            generate_world(0, {"straight": 1}, width_range=(1.0, 3.0))

    def test_graph_validation(self):
        with pytest.raises(WorldError, match="width"):
            _box_world(width=20.0)
        with pytest.raises(WorldError, match="connected"):
            TunnelGraph(np.zeros((4, 3)) + np.arange(4)[:, None],
                        (Edge(0, 1, 4, 3, "straight"), Edge(2, 3, 4, 3, "straight")))
        with pytest.raises(WorldError):
            TunnelGraph(np.zeros((2, 3)), (), roughness=0.1)

    def test_world_options_keys(self):
        assert WorldSpec.from_dict({"roughness": 0.0}).roughness == 0.0
        with pytest.raises(WorldError, match="unknown"):
            WorldSpec.from_dict({"size": 3})


class TestRaycast:
    def test_axis_rays_hit_walls(self):
        w = _box_world()
        origin = [5.0, 0.5, 0.0]
        dirs = np.array([[0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1], [1, 0, 0], [-1, 0, 0.0]])
        r = cast_rays(w, origin, dirs, 100.0)
        np.testing.assert_allclose(r, [1.5, 2.5, 1.5, 1.5, 15.0, 5.0], atol=1e-12)

    def test_oblique_ray(self, rng):
        w = _box_world()
        dirs = rng.normal(size=(200, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        o = np.array([10.0, 0.0, 0.0])
        r = cast_rays(w, o, dirs, 100.0)
        # analytic slab exit distance for an axis-aligned box
        half = np.array([10.0, 2.0, 1.5])
        with np.errstate(divide="ignore"):
            t = np.where(dirs != 0, (np.sign(dirs) * half - (o - [10, 0, 0])) / dirs, np.inf)
        np.testing.assert_allclose(r, t.min(axis=1), atol=1e-9)

    def test_branch_ray_longer_than_cross_rays(self):
        # T junction: main corridor along x, branch along +y from x = 10
        w = TunnelGraph(np.array([[0.0, 0, 0], [20.0, 0, 0], [10.0, 0, 0], [10.0, 15.0, 0]]),
                        (Edge(0, 2, 4.0, 3.0, "straight"), Edge(2, 1, 4.0, 3.0, "straight"),
                         Edge(2, 3, 4.0, 3.0, "straight")))
        along, across = cast_rays(w, [10.0, 0, 0], np.array([[0, 1.0, 0], [0, -1.0, 0]]), 100.0)
        side = cast_rays(w, [4.0, 0, 0], np.array([[0, 1.0, 0], [0, -1.0, 0]]), 100.0)
        np.testing.assert_allclose(side, [2.0, 2.0], atol=1e-12)
        assert along > max(across, side.max()) and across == pytest.approx(2.0)

    def test_ranges_physical(self, small_world, rng):
        lidar = LidarModel(max_range=12.0)
        for pose in sample_poses(small_world, 25.0):
            p = simulate_scan(small_world, pose, lidar, rng).xyz
            r = np.linalg.norm(p, axis=1)
            assert np.all(r <= lidar.max_range + 1e-9) and np.all(r > 0)

    def test_centered_ray_noise_band(self, rng):
        lidar = LidarModel(channels=1, fov_up_deg=1.0, fov_down_deg=-1.0, azimuth_steps=4,
                           noise_sigma=0.01)
        # azimuths 0, 90, 180, 270 deg with the sensor looking along the corridor
        for _ in range(20):
            scan = simulate_scan(_box_world(), Pose.from_translation([10.0, 0, 0]), lidar, rng)
            side = np.abs(scan.xyz[:, 1]) > 1.0
            r = np.linalg.norm(scan.xyz[side], axis=1)
            assert len(r) == 2 and np.all(np.abs(r - 2.0) <= 3 * 0.01)

    def test_outside_pose_rejected(self):
        with pytest.raises(WorldError, match="outside"):
            cast_rays(_box_world(), [5.0, 10.0, 0.0], np.array([[1.0, 0, 0]]), 100.0)

    def test_inside_world(self):
        w = _box_world()
        assert inside_world(w, [1.0, 0, 0])
        assert not inside_world(w, [1.0, 3.0, 0])

    def test_scan_in_sensor_frame(self, rng):
        w = _box_world()
        lidar = LidarModel(channels=4, azimuth_steps=90)
        scan = simulate_scan(w, Pose.from_yaw(np.pi / 2, [10.0, 0, 0]), lidar, rng)
        # the sensor faces +y, so the two side walls lie along sensor x
        side = np.abs(scan.xyz[:, 1]) < 0.1
        np.testing.assert_allclose(np.sort(np.unique(np.round(scan.xyz[side, 0], 6))), [-2.0, 2.0])

    def test_noise_and_dropout(self, rng):
        w = _box_world()
        pose = Pose.from_translation([10.0, 0, 0])
        clean = simulate_scan(w, pose, LidarModel(), rng)
        noisy = simulate_scan(w, pose, LidarModel(noise_sigma=0.02, dropout=0.3), rng)
        assert 0.6 * len(clean) < len(noisy) < 0.8 * len(clean)

    def test_lidar_validation(self):
        with pytest.raises(ValueError):
            LidarModel(dropout=1.0)
        with pytest.raises(ValueError):
            LidarModel(noise_sigma=-0.1)

    def test_directions_center_bins(self):
        d = LidarModel(channels=2, azimuth_steps=4, fov_up_deg=10, fov_down_deg=-10).directions()
        el = np.degrees(np.arcsin(d[:, 2]))
        np.testing.assert_allclose(el, [5, 5, 5, 5, -5, -5, -5, -5])


class TestLabelsAndSampling:
    def test_labels(self, small_world):
        j = small_world.nodes[small_world.junctions[0]]
        assert label_for_pose(small_world, j + [1.0, 0, 0]) == JUNCTION
        turns = [e for e in small_world.edges if e.kind == "turn"]
        a, b = small_world.nodes[turns[len(turns) // 2].u], small_world.nodes[turns[len(turns) // 2].v]
        mid = (a + b) / 2
        if np.min(np.linalg.norm(small_world.nodes[small_world.junctions] - mid, axis=1)) > 5:
            assert label_for_pose(small_world, mid) == TURN
        assert label_for_pose(_box_world(), [10.0, 0, 0]) == STRAIGHT

    def test_pose_spacing_and_heading(self):
        poses = sample_poses(_box_world(), 2.0)
        xs = [p.translation[0] for p in poses]
        np.testing.assert_allclose(xs, np.arange(1.0, 20.0, 2.0))
        assert all(p.yaw == pytest.approx(0.0) for p in poses)

    def test_straight_corridor_dataset(self):
        w = TunnelGraph(np.array([[0.0, 0, 0], [100.0, 0, 0]]), (Edge(0, 1, 4.0, 3.0, "straight"),))
        ds = generate_dataset(w, 1.0, LidarModel(channels=2, azimuth_steps=16), 0)
        assert 95 <= len(ds) <= 100
        assert all(s.label == STRAIGHT for s in ds)

    def test_jitter_needs_rng(self):
        with pytest.raises(ValueError):
            sample_poses(_box_world(), 1.0, heading_jitter=0.1)

    def test_dataset_deterministic(self, small_world):
        lid = LidarModel(channels=4, azimuth_steps=60, noise_sigma=0.01)
        a = generate_dataset(small_world, 10.0, lid, 3, heading_jitter=0.2)
        b = generate_dataset(small_world, 10.0, lid, 3, heading_jitter=0.2)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.cloud.xyz, y.cloud.xyz)
            np.testing.assert_array_equal(x.pose.matrix(), y.pose.matrix())
            assert x.label == y.label
