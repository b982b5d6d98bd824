"""Tests for quaternions, poses, canonicalization and pinhole geometry."""

import numpy as np
import pytest

from src.videodepth.errors import CheckpointError, DegenerateInputError, ShapeError
from src.videodepth.geometry import (
    Intrinsics,
    PointCloud,
    Pose,
    backproject,
    canonicalize,
    hemisphere_sign,
    look_at,
    matrix_to_quat,
    normalize_quat,
    project,
    quat_multiply,
    quat_to_matrix,
    random_quat,
    read_pose_manifest,
    relative_pose,
    scale_factor,
    umeyama_align,
    warp_depth,
    write_pose_manifest,
)


class TestQuaternions:
    """Quaternion helpers."""

    def test_normalize_moves_to_upper_hemisphere(self):
        """Test that w becomes nonnegative and the norm one."""
        q = normalize_quat(np.array([-2.0, 0.0, 0.0, 0.0]))
        np.testing.assert_allclose(q, [1.0, 0.0, 0.0, 0.0])

    @pytest.mark.parametrize(
        "q",
        [[0.0, 0.0, 0.0, 1.0], [0.0, 0.0, 1.0, 0.0], [0.0, 1.0, -1.0, 0.0], [0.0, -0.6, 0.0, 0.8]],
    )
    def test_half_turns_have_one_representative(self, q):
        """Test that q and -q normalize identically when w is zero."""
        q = np.array(q)
        np.testing.assert_array_equal(normalize_quat(q), normalize_quat(-q))

    def test_hemisphere_sign_uses_first_significant_component(self):
        """Test that the sign follows the first component above the tolerance."""
        q = np.array([[1e-9, -0.5, 0.5, 0.0], [0.3, -0.5, 0.0, 0.0]])
        np.testing.assert_array_equal(hemisphere_sign(q), [[-1.0], [1.0]])

    def test_zero_quaternion_is_degenerate(self):
        """Test that a zero quaternion cannot be normalized."""
        with pytest.raises(DegenerateInputError, match="zero quaternion"):
            normalize_quat(np.zeros(4))

    def test_matrix_round_trip(self, rng):
        """Test quat -> matrix -> quat on random rotations."""
        for _ in range(50):
            q = random_quat(rng)
            np.testing.assert_allclose(matrix_to_quat(quat_to_matrix(q)), q, atol=1e-10)

    def test_rotation_matrix_is_orthonormal(self, rng):
        """Test R R^T = I and det R = 1."""
        rot = quat_to_matrix(random_quat(rng))
        np.testing.assert_allclose(rot @ rot.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(rot) == pytest.approx(1.0)

    def test_product_matches_matrix_product(self, rng):
        """Test that the Hamilton product composes rotations."""
        a, b = random_quat(rng), random_quat(rng)
        np.testing.assert_allclose(
            quat_to_matrix(quat_multiply(a, b)), quat_to_matrix(a) @ quat_to_matrix(b), atol=1e-12
        )

    def test_matrix_to_quat_rejects_wrong_shape(self):
        """Test the 3x3 shape check."""
        with pytest.raises(ShapeError):
            matrix_to_quat(np.eye(4))


class TestPose:
    """Rigid transforms."""

    def test_compose_with_inverse_is_identity(self, rng):
        """Test that P^-1 P maps points back to themselves."""
        pose = Pose(random_quat(rng), rng.normal(size=3))
        assert pose.inverse().compose(pose).allclose(Pose.identity(), atol=1e-10)

    def test_matrix_agrees_with_apply(self, rng):
        """Test that the 4x4 matrix and apply() transform points alike."""
        pose = Pose(random_quat(rng), rng.normal(size=3))
        pts = rng.normal(size=(5, 3))
        homog = np.concatenate([pts, np.ones((5, 1))], axis=1) @ pose.matrix().T
        np.testing.assert_allclose(homog[:, :3], pose.apply(pts), atol=1e-12)

    def test_from_matrix(self, rng):
        """Test that from_matrix inverts matrix()."""
        pose = Pose(random_quat(rng), rng.normal(size=3))
        assert Pose.from_matrix(pose.matrix()).allclose(pose, atol=1e-10)

    def test_translation_shape_checked(self):
        """Test that a translation must have three components."""
        with pytest.raises(ShapeError, match="3 components"):
            Pose(np.array([1.0, 0, 0, 0]), np.zeros(2))

    def test_relative_pose_maps_source_camera_into_target(self, rng):
        """Test that relative_pose(src, dst) sends src-camera points to dst-camera points."""
        src = Pose(random_quat(rng), rng.normal(size=3))
        dst = Pose(random_quat(rng), rng.normal(size=3))
        point_src = rng.normal(size=3)
        world = src.apply(point_src)
        expected = dst.inverse().apply(world)
        np.testing.assert_allclose(relative_pose(src, dst).apply(point_src), expected, atol=1e-10)

    def test_look_at_points_z_axis_at_target(self):
        """Test that the camera's +z axis points from eye to target."""
        pose = look_at(np.array([1.0, 0.0, 0.0]), np.array([1.0, 0.0, 5.0]))
        np.testing.assert_allclose(pose.rotation[:, 2], [0.0, 0.0, 1.0], atol=1e-12)
        assert pose.allclose(Pose(np.array([1.0, 0, 0, 0]), np.array([1.0, 0, 0])), atol=1e-10)

    def test_look_at_degenerate(self):
        """Test that coincident eye and target are rejected."""
        with pytest.raises(DegenerateInputError):
            look_at(np.zeros(3), np.zeros(3))


class TestCanonicalize:
    """Frame-0 anchoring and translation-scale normalization."""

    def test_first_frame_is_identity(self, rng, random_poses):
        """Test that the first canonical pose is exactly the identity."""
        out = canonicalize(random_poses(6, rng))
        assert out.poses[0].allclose(Pose.identity(), atol=0)

    def test_mean_translation_norm_is_one(self, random_poses):
        """Test the normalization contract over many random sequences."""
        rng = np.random.default_rng(7)
        for _ in range(1000):
            out = canonicalize(random_poses(int(rng.integers(2, 9)), rng))
            assert not out.static
            assert scale_factor(np.stack([p.t for p in out.poses])) == pytest.approx(1.0, abs=1e-5)

    def test_idempotent(self, rng, random_poses):
        """Test that canonicalizing twice changes nothing."""
        once = canonicalize(random_poses(5, rng))
        twice = canonicalize(once.poses)
        assert twice.scale == pytest.approx(1.0)
        for a, b in zip(once.poses, twice.poses, strict=True):
            assert a.allclose(b, atol=1e-9)

    def test_relative_geometry_preserved(self, rng, random_poses):
        """Test that relative rotations survive and translations scale by 1/Z."""
        poses = random_poses(4, rng)
        out = canonicalize(poses)
        rel = relative_pose(poses[2], poses[1])
        rel_c = relative_pose(out.poses[2], out.poses[1])
        np.testing.assert_allclose(rel_c.q, rel.q, atol=1e-9)
        np.testing.assert_allclose(rel_c.t, rel.t / out.scale, atol=1e-9)

    def test_static_camera(self, rng):
        """Test that a non-translating camera keeps Z = 1 and is flagged static."""
        poses = [Pose(random_quat(rng), np.array([2.0, 1.0, 0.0])) for _ in range(3)]
        out = canonicalize(poses)
        assert out.static
        assert out.scale == 1.0
        for p in out.poses:
            np.testing.assert_allclose(p.t, 0.0, atol=1e-12)

    def test_single_frame(self, rng):
        """Test that one frame canonicalizes to the identity and counts as static."""
        out = canonicalize([Pose(random_quat(rng), np.ones(3))])
        assert len(out.poses) == 1
        assert out.static


class TestIntrinsics:
    """Pinhole camera parameters."""

    def test_centered_principal_point(self):
        """Test that the principal point sits at the image centre."""
        K = Intrinsics.centered(64, 48, 90.0)
        assert (K.cx, K.cy) == (31.5, 23.5)
        assert K.fx == pytest.approx(32.0)

    def test_principal_point_inside_image(self):
        """Test validation of the principal point."""
        with pytest.raises(ValueError, match="outside"):
            Intrinsics(10, 10, 20, 5, 16, 16)

    def test_scaled_keeps_centre(self):
        """Test that downscaling keeps the principal point at the image centre."""
        K = Intrinsics.centered(64, 64).scaled(0.5)
        assert (K.width, K.height) == (32, 32)
        assert (K.cx, K.cy) == (15.5, 15.5)

    def test_cropped_shifts_principal_point(self):
        """Test that cropping subtracts the offset."""
        K = Intrinsics.centered(64, 64).cropped(8, 4, 48, 40)
        assert (K.cx, K.cy, K.width, K.height) == (23.5, 27.5, 48, 40)


class TestProjection:
    """Back-projection, projection and forward warping."""

    def test_backproject_then_project(self, rng):
        """Test that projecting back-projected pixels recovers the pixel grid."""
        K = Intrinsics.centered(8, 6)
        depth = rng.uniform(1.0, 5.0, size=(6, 8))
        cloud = backproject(depth, K, Pose.identity())
        u, v, z = project(cloud.points, K)
        uu, vv = np.meshgrid(np.arange(8), np.arange(6))
        np.testing.assert_allclose(u, uu.reshape(-1), atol=1e-9)
        np.testing.assert_allclose(v, vv.reshape(-1), atol=1e-9)
        np.testing.assert_allclose(z, depth.reshape(-1))

    def test_backproject_masks_invalid_depth(self):
        """Test that nonpositive depth and masked pixels are invalid."""
        K = Intrinsics.centered(2, 2)
        cloud = backproject(np.array([[1.0, 0.0], [2.0, 3.0]]), K, Pose.identity(),
                            mask=np.array([[True, True], [False, True]]))
        np.testing.assert_array_equal(cloud.valid, [True, False, False, True])
        assert len(cloud) == 2

    def test_project_behind_camera_is_nan(self):
        """Test that points with z <= 0 project to NaN."""
        u, v, _ = project(np.array([[0.0, 0.0, -1.0]]), Intrinsics.centered(4, 4))
        assert np.isnan(u[0]) and np.isnan(v[0])

    def test_point_cloud_shape_check(self):
        """Test that points and flags must agree in length."""
        with pytest.raises(ShapeError):
            PointCloud(np.zeros((3, 3)), np.ones(2, dtype=bool))

    def test_identity_warp(self, rng):
        """Test that warping with the identity reproduces the depth map."""
        K = Intrinsics.centered(8, 8)
        depth = rng.uniform(1.0, 3.0, size=(8, 8))
        warped, mask = warp_depth(depth, Pose.identity(), K)
        assert mask.all()
        np.testing.assert_allclose(warped, depth, rtol=1e-12)

    def test_forward_motion_reduces_depth(self):
        """Test that moving the scene 1 unit closer lowers the warped depth by 1."""
        K = Intrinsics.centered(5, 5)
        depth = np.full((5, 5), 4.0)
        forward = Pose(np.array([1.0, 0, 0, 0]), np.array([0.0, 0.0, -1.0]))
        warped, mask = warp_depth(depth, forward, K)
        assert mask[2, 2]
        assert warped[2, 2] == pytest.approx(3.0)

    def test_plane_warp_matches_rendered_depth(self):
        """Test that a fronto-parallel plane warped by a translation keeps the target depth."""
        K = Intrinsics.centered(16, 16)
        depth = np.full((16, 16), 5.0)
        shift = Pose(np.array([1.0, 0, 0, 0]), np.array([0.2, 0.0, 0.0]))
        warped, mask = warp_depth(depth, shift, K)
        np.testing.assert_allclose(warped[mask], 5.0)
        assert mask.mean() > 0.8


class TestUmeyama:
    """Closed-form similarity alignment."""

    def test_recovers_similarity(self, rng):
        """Test exact recovery of a known scale, rotation and translation."""
        pred = rng.normal(size=(10, 3))
        rot = quat_to_matrix(random_quat(rng))
        gt = 2.5 * pred @ rot.T + np.array([1.0, -2.0, 0.5])
        s, r, t = umeyama_align(pred, gt)
        assert s == pytest.approx(2.5)
        np.testing.assert_allclose(r, rot, atol=1e-9)
        np.testing.assert_allclose(t, [1.0, -2.0, 0.5], atol=1e-9)

    def test_no_spread_is_degenerate(self):
        """Test that identical points cannot be aligned."""
        with pytest.raises(DegenerateInputError):
            umeyama_align(np.ones((4, 3)), np.zeros((4, 3)))

    def test_rotation_is_proper(self, rng):
        """Test that a reflected target still yields det R = +1."""
        pred = rng.normal(size=(8, 3))
        gt = pred * np.array([1.0, 1.0, -1.0])
        _, r, _ = umeyama_align(pred, gt)
        assert np.linalg.det(r) == pytest.approx(1.0)


class TestPoseManifest:
    """JSON Lines pose files."""

    def test_round_trip(self, tmp_path, rng, random_poses):
        """Test that poses and intrinsics survive a write/read cycle."""
        poses = random_poses(4, rng)
        intrinsics = [Intrinsics.centered(16, 12)] * 4
        write_pose_manifest(tmp_path / "poses.txt", poses, intrinsics)
        read_poses, read_k = read_pose_manifest(tmp_path / "poses.txt")
        assert read_k == intrinsics
        for a, b in zip(poses, read_poses, strict=True):
            assert a.allclose(b, atol=1e-12)

    def test_one_record_per_line(self, tmp_path, rng, random_poses):
        """Test the line layout of the manifest."""
        intrinsics = [Intrinsics.centered(4, 4)] * 3
        write_pose_manifest(tmp_path / "p.txt", random_poses(3, rng), intrinsics)
        lines = (tmp_path / "p.txt").read_text().strip().splitlines()
        assert len(lines) == 3
        assert lines[1].startswith('{"frame": 1')

    def test_missing_file(self, tmp_path):
        """Test that a missing manifest raises CheckpointError."""
        with pytest.raises(CheckpointError, match="not found"):
            read_pose_manifest(tmp_path / "nope.txt")

    def test_malformed_record(self, tmp_path):
        """Test that a record without a translation is rejected."""
        (tmp_path / "bad.txt").write_text('{"frame": 0, "q": [1, 0, 0, 0]}\n')
        with pytest.raises(CheckpointError, match="malformed"):
            read_pose_manifest(tmp_path / "bad.txt")
