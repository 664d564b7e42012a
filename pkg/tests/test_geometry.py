"""Array geometry: configuration invariants, pose construction, frames."""
from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from pactkit import geometry
from pactkit.geometry import (
    SystemConfig,
    TransducerPose,
    VoxelGrid,
    build_array,
    config_hash,
    desk_config,
    global_to_local,
    local_to_global,
    pose_arrays,
)


class TestSystemConfig:
    def test_full_scale_defaults(self):
        """The default system is the 85 mm bowl: 96 elements spanning polar
        90.25-170.25 degrees, 320 views, 2267 samples at 20 MHz."""
        cfg = SystemConfig()
        assert cfg.aperture_radius == 85.0
        assert cfg.polar_start == 90.25
        assert cfg.polar_end == 170.25
        assert cfg.n_elements == 96
        assert cfg.n_views == 320
        assert cfg.n_samples == 2267
        assert cfg.dt == 0.05
        assert cfg.sos == 1.5
        assert cfg.elem_a == 1.2
        assert cfg.elem_b == 6.0

    def test_n_transducers_and_times(self):
        cfg = SystemConfig(n_elements=4, n_views=8, n_samples=16)
        assert cfg.n_transducers == 32
        np.testing.assert_allclose(cfg.times, 0.05 * np.arange(16))

    @pytest.mark.parametrize(
        "field, value",
        [
            ("aperture_radius", 0.0),
            ("aperture_radius", -1.0),
            ("polar_start", 0.0),
            ("polar_start", -5.0),
            ("polar_end", 200.0),
            ("n_elements", 0),
            ("n_views", 0),
            ("n_samples", 0),
            ("dt", 0.0),
            ("sos", -1.5),
            ("elem_a", 0.0),
            ("elem_b", -6.0),
        ],
    )
    def test_rejects_bad_fields(self, field, value):
        with pytest.raises(ValueError):
            dataclasses.replace(SystemConfig(), **{field: value})

    def test_rejects_inverted_polar_span(self):
        with pytest.raises(ValueError):
            SystemConfig(polar_start=120.0, polar_end=100.0)


class TestVoxelGrid:
    def test_defaults(self):
        grid = VoxelGrid()
        assert grid.dims == (480, 480, 240)
        assert grid.spacing == 0.25
        assert grid.origin == (-60.0, -60.0, -60.0)
        assert grid.n_voxels == 480 * 480 * 240

    def test_axis_coords(self):
        grid = VoxelGrid(origin=(1.0, 2.0, 3.0), spacing=0.5, dims=(2, 3, 4))
        np.testing.assert_allclose(grid.axis_coords(0), [1.0, 1.5])
        np.testing.assert_allclose(grid.axis_coords(2), [3.0, 3.5, 4.0, 4.5])

    def test_points_c_order(self):
        """points() walks the grid C-style: last axis fastest."""
        grid = VoxelGrid(origin=(0.0, 0.0, 0.0), spacing=1.0, dims=(2, 2, 2))
        pts = grid.points()
        assert pts.shape == (8, 3)
        np.testing.assert_allclose(pts[0], [0.0, 0.0, 0.0])
        np.testing.assert_allclose(pts[1], [0.0, 0.0, 1.0])
        np.testing.assert_allclose(pts[2], [0.0, 1.0, 0.0])
        np.testing.assert_allclose(pts[-1], [1.0, 1.0, 1.0])

    def test_rejects_bad_grid(self):
        with pytest.raises(ValueError):
            VoxelGrid(spacing=0.0)
        with pytest.raises(ValueError):
            VoxelGrid(dims=(0, 4, 4))


class TestBuildArray:
    def test_length_and_order(self, tiny_config, tiny_array):
        """View-major ordering: pose v*N_r + q is element q of view v."""
        assert len(tiny_array) == tiny_config.n_transducers
        centers, _, _, _ = pose_arrays(tiny_config)
        for v in range(tiny_config.n_views):
            for q in range(tiny_config.n_elements):
                np.testing.assert_allclose(
                    tiny_array[v * tiny_config.n_elements + q].center,
                    centers[q, v],
                    atol=1e-12,
                )

    def test_polar_endpoints_full_config(self):
        """Element 0 sits at polar 90.25 degrees, element 95 at 170.25."""
        cfg = SystemConfig()
        poses = build_array(cfg)
        for idx, expected in ((0, 90.25), (95, 170.25)):
            center = poses[idx].center
            polar = np.degrees(np.arccos(center[2] / cfg.aperture_radius))
            np.testing.assert_allclose(polar, expected, atol=1e-9)

    def test_adjacent_view_azimuth_full_config(self):
        """320 equally spaced views are 1.125 degrees apart."""
        cfg = SystemConfig()
        poses = build_array(cfg)
        c0 = poses[0].center
        c1 = poses[cfg.n_elements].center
        az0 = np.degrees(np.arctan2(c0[1], c0[0]))
        az1 = np.degrees(np.arctan2(c1[1], c1[0]))
        np.testing.assert_allclose((az1 - az0) % 360.0, 1.125, atol=1e-9)

    def test_two_element_single_view_endpoints(self):
        """N_r = 2, N_v = 1 yields exactly the two polar endpoint poses."""
        cfg = SystemConfig(n_elements=2, n_views=1, n_samples=8)
        poses = build_array(cfg)
        assert len(poses) == 2
        for pose, polar_deg in zip(poses, (90.25, 170.25)):
            theta = np.radians(polar_deg)
            expected = cfg.aperture_radius * np.array(
                [np.sin(theta), 0.0, np.cos(theta)]
            )
            np.testing.assert_allclose(pose.center, expected, atol=1e-9)

    def test_centers_on_sphere(self, tiny_config, tiny_array):
        """|center| equals the aperture radius to 1e-9 mm."""
        radii = [np.linalg.norm(p.center) for p in tiny_array]
        np.testing.assert_allclose(radii, tiny_config.aperture_radius, atol=1e-9)

    def test_frames_orthonormal_right_handed(self, tiny_array):
        """Each pose frame is orthonormal and right-handed to 1e-12."""
        for pose in tiny_array:
            frame = np.stack([pose.axis_x, pose.axis_y, pose.axis_z])
            np.testing.assert_allclose(frame @ frame.T, np.eye(3), atol=1e-12)
            np.testing.assert_allclose(
                np.cross(pose.axis_x, pose.axis_y), pose.axis_z, atol=1e-12
            )

    def test_normals_point_inward(self, tiny_config, tiny_array):
        """axis_z aims at the bowl center: center + R*axis_z = origin."""
        for pose in tiny_array:
            np.testing.assert_allclose(
                pose.center + tiny_config.aperture_radius * pose.axis_z,
                np.zeros(3),
                atol=1e-9,
            )

    def test_deterministic(self, tiny_config):
        a = build_array(tiny_config)
        b = build_array(tiny_config)
        for pa, pb in zip(a, b):
            np.testing.assert_array_equal(pa.center, pb.center)
            np.testing.assert_array_equal(pa.axis_x, pb.axis_x)

    def test_pose_arrays_shapes(self, tiny_config):
        centers, ax, ay, az = pose_arrays(tiny_config)
        shape = (tiny_config.n_elements, tiny_config.n_views, 3)
        assert centers.shape == ax.shape == ay.shape == az.shape == shape


class TestLocalFrame:
    def test_center_maps_to_origin(self, tiny_array):
        pose = tiny_array[4]
        np.testing.assert_allclose(
            global_to_local(pose, pose.center), np.zeros(3), atol=1e-12
        )

    def test_normal_axis_maps_to_z(self, tiny_array):
        pose = tiny_array[4]
        local = global_to_local(pose, pose.center + 7.5 * pose.axis_z)
        np.testing.assert_allclose(local, [0.0, 0.0, 7.5], atol=1e-10)

    def test_matches_rotation_matrix_oracle(self, tiny_array):
        """global_to_local agrees with an explicit rotation-matrix transform
        built independently from the frame vectors."""
        rng = np.random.default_rng(7)
        for pose in tiny_array[:6]:
            rotation = np.stack([pose.axis_x, pose.axis_y, pose.axis_z])
            for _ in range(5):
                point = rng.uniform(-50.0, 50.0, 3)
                expected = rotation @ (point - pose.center)
                np.testing.assert_allclose(
                    global_to_local(pose, point), expected, atol=1e-10
                )

    def test_preserves_distance(self, tiny_array):
        """|local| = |r - center| to 1e-10 (rigid transform)."""
        rng = np.random.default_rng(11)
        for pose in tiny_array[:4]:
            point = rng.uniform(-40.0, 40.0, 3)
            local = global_to_local(pose, point)
            np.testing.assert_allclose(
                np.linalg.norm(local),
                np.linalg.norm(point - pose.center),
                atol=1e-10,
            )

    def test_round_trip(self, tiny_array):
        rng = np.random.default_rng(13)
        for pose in tiny_array[:4]:
            point = rng.uniform(-40.0, 40.0, 3)
            back = local_to_global(pose, global_to_local(pose, point))
            np.testing.assert_allclose(back, point, atol=1e-10)


class TestPresets:
    def test_full_preset(self):
        cfg = desk_config("full")
        assert (cfg.n_elements, cfg.n_views, cfg.n_samples) == (96, 320, 2267)

    def test_desk_preset(self):
        """The reduced system keeps the bowl and timing but shrinks the array;
        the time axis still covers the farthest source-element distance."""
        cfg = desk_config()
        assert (cfg.n_elements, cfg.n_views) == (24, 64)
        assert cfg.n_samples == 2048
        reach = cfg.n_samples * cfg.dt * cfg.sos
        assert reach >= cfg.aperture_radius + 60.0 + 1.2

    def test_presets_share_timing(self):
        full = desk_config("full")
        desk = desk_config("desk")
        assert full.dt == desk.dt
        assert full.sos == desk.sos
        assert full.aperture_radius == desk.aperture_radius

    def test_unknown_preset_rejected(self):
        with pytest.raises(ValueError):
            desk_config("pocket")


class TestConfigHash:
    def test_stable_for_equal_configs(self):
        assert config_hash(SystemConfig()) == config_hash(SystemConfig())

    def test_sensitive_to_every_field(self):
        base = SystemConfig()
        seen = {config_hash(base)}
        for field, value in [
            ("aperture_radius", 80.0),
            ("polar_start", 91.0),
            ("polar_end", 169.0),
            ("n_elements", 95),
            ("n_views", 319),
            ("n_samples", 2266),
            ("dt", 0.04),
            ("sos", 1.49),
            ("elem_a", 1.1),
            ("elem_b", 5.9),
        ]:
            digest = config_hash(dataclasses.replace(base, **{field: value}))
            assert digest not in seen, f"hash ignores {field}"
            seen.add(digest)


class TestTransducerPose:
    def test_rejects_non_unit_axes(self):
        with pytest.raises(ValueError):
            TransducerPose(
                center=np.array([1.0, 0.0, 0.0]),
                axis_x=np.array([2.0, 0.0, 0.0]),
                axis_y=np.array([0.0, 1.0, 0.0]),
                axis_z=np.array([0.0, 0.0, 1.0]),
            )
