import pytest
import sys
import os

import numpy as np

# Add backend to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from geometry import Pixel, Pose, project, project_points, round_half_away, unproject, unproject_depth


class TestUnproject:
    """Test suite for pixel back-projection"""

    def test_principal_point_ray(self, intrinsics):
        """Test the principal pixel lands on the optical axis"""
        # Act
        point = unproject(Pixel(50, 50), 1.0, intrinsics, Pose.identity())

        # Assert
        np.testing.assert_allclose(point, [0.0, 0.0, 1.0])

    def test_off_axis_pixel(self, intrinsics):
        """Test the pinhole formula for a pixel right of the principal point"""
        # Act
        point = unproject(Pixel(100, 50), 1.0, intrinsics, Pose.identity())

        # Assert
        np.testing.assert_allclose(point, [0.5, 0.0, 1.0])

    def test_translated_pose(self, intrinsics):
        """Test the camera translation is applied after back-projection"""
        # Arrange
        pose = Pose(translation=np.array([1.0, 0.0, 0.0]))

        # Act
        point = unproject(Pixel(50, 50), 2.0, intrinsics, pose)

        # Assert
        np.testing.assert_allclose(point, [1.0, 0.0, 2.0])

    @pytest.mark.parametrize("depth", [0.0, -1.0, np.nan, np.inf])
    def test_invalid_depth_rejected(self, intrinsics, depth):
        """Test non-positive or non-finite depth raises"""
        with pytest.raises(ValueError, match="depth"):
            unproject(Pixel(50, 50), depth, intrinsics, Pose.identity())

    def test_unproject_depth_skips_invalid_and_far_pixels(self, small_intrinsics):
        """Test the vectorized form drops zero, NaN and out-of-range depth"""
        # Arrange
        depth = np.ones(small_intrinsics.shape)
        depth[0, 0] = 0.0
        depth[0, 1] = np.nan
        depth[0, 2] = 25.0

        # Act
        pixel_index, points = unproject_depth(depth, small_intrinsics, Pose.identity(), max_depth=20.0)

        # Assert
        assert len(pixel_index) == depth.size - 3
        assert 0 not in pixel_index and 1 not in pixel_index and 2 not in pixel_index
        np.testing.assert_allclose(points[:, 2], 1.0)

    def test_unproject_depth_matches_scalar_form(self, small_intrinsics):
        """Test vectorized and scalar back-projection agree"""
        # Arrange
        rng = np.random.default_rng(3)
        depth = rng.uniform(0.5, 3.0, small_intrinsics.shape)
        pose = Pose.look_at(eye=[1.0, 2.0, 1.5], target=[0.0, 0.0, 0.5])

        # Act
        pixel_index, points = unproject_depth(depth, small_intrinsics, pose)

        # Assert
        for k in (0, 17, 55, 99):
            v, u = divmod(int(pixel_index[k]), small_intrinsics.width)
            expected = unproject(Pixel(u, v), depth[v, u], small_intrinsics, pose)
            np.testing.assert_allclose(points[k], expected, atol=1e-12)

    def test_shape_mismatch_rejected(self, small_intrinsics):
        """Test a depth raster that disagrees with the intrinsics raises"""
        with pytest.raises(ValueError, match="does not match"):
            unproject_depth(np.ones((3, 3)), small_intrinsics, Pose.identity())


class TestProject:
    """Test suite for world-to-pixel projection"""

    def test_inverse_of_unproject(self, intrinsics):
        """Test the optical axis projects to the principal pixel"""
        # Act
        result = project(np.array([0.0, 0.0, 1.0]), intrinsics, Pose.identity())

        # Assert
        assert result == (Pixel(50, 50), 1.0)

    def test_behind_camera(self, intrinsics):
        """Test points behind the camera are out of frustum"""
        assert project(np.array([0.0, 0.0, -1.0]), intrinsics, Pose.identity()) is None

    def test_off_axis_point(self, intrinsics):
        """Test the pinhole formula in the projecting direction"""
        # Act
        pixel, depth = project(np.array([0.5, 0.0, 1.0]), intrinsics, Pose.identity())

        # Assert
        assert pixel == Pixel(100, 50)
        assert depth == 1.0

    def test_outside_raster(self, intrinsics):
        """Test points projecting past the raster border are out of frustum"""
        assert project(np.array([0.6, 0.0, 1.0]), intrinsics, Pose.identity()) is None

    def test_round_trip_through_pose(self, intrinsics):
        """Test project(unproject(p)) returns the pixel for a rotated camera"""
        # Arrange
        pose = Pose.look_at(eye=[2.0, -1.0, 1.0], target=[0.0, 0.0, 0.0])
        point = unproject(Pixel(17, 83), 2.5, intrinsics, pose)

        # Act
        pixel, depth = project(point, intrinsics, pose)

        # Assert
        assert pixel == Pixel(17, 83)
        assert depth == pytest.approx(2.5)

    def test_far_off_axis_points_do_not_wrap(self, intrinsics):
        """Test huge image coordinates are clipped rather than overflowing"""
        # Arrange
        points = np.array([[1e12, 0.0, 1e-9], [0.0, -1e15, 1.0]])

        # Act
        _, _, _, inside = project_points(points, intrinsics, Pose.identity())

        # Assert
        assert not inside.any()

    def test_round_half_away_from_zero(self):
        """Test rounding ties move away from zero"""
        np.testing.assert_array_equal(round_half_away(np.array([0.5, 1.5, -0.5, 2.4])),
                                      [1.0, 2.0, -1.0, 2.0])


class TestPose:
    """Test suite for rigid transforms"""

    def test_inverse_composes_to_identity(self):
        """Test pose @ pose.inverse() is the identity"""
        # Arrange
        pose = Pose.look_at(eye=[1.0, 2.0, 3.0], target=[0.0, 0.5, 0.0])

        # Act
        identity = pose @ pose.inverse()

        # Assert
        np.testing.assert_allclose(identity.as_matrix(), np.eye(4), atol=1e-12)

    def test_matrix_round_trip(self):
        """Test from_matrix(as_matrix()) is lossless"""
        pose = Pose.look_at(eye=[0.3, -2.0, 1.2], target=[0.0, 0.0, 0.4])
        np.testing.assert_array_equal(Pose.from_matrix(pose.as_matrix()).as_matrix(), pose.as_matrix())

    def test_look_at_points_optical_axis_at_target(self):
        """Test the camera +z axis points at the target"""
        # Arrange
        eye, target = np.array([2.0, 0.0, 1.0]), np.array([0.0, 0.0, 1.0])

        # Act
        pose = Pose.look_at(eye, target)

        # Assert
        np.testing.assert_allclose(pose.rotation[:, 2], [-1.0, 0.0, 0.0], atol=1e-12)
        # Image rows grow downward in the world
        assert pose.rotation[2, 1] < 0

    def test_non_orthonormal_rotation_rejected(self):
        """Test scaled rotations are refused"""
        with pytest.raises(ValueError, match="orthonormal"):
            Pose(rotation=2.0 * np.eye(3))

    def test_reflection_rejected(self):
        """Test improper rotations are refused"""
        with pytest.raises(ValueError, match="determinant"):
            Pose(rotation=np.diag([1.0, 1.0, -1.0]))

    def test_look_at_parallel_to_up_rejected(self):
        """Test a vertical viewing direction cannot be oriented"""
        with pytest.raises(ValueError, match="parallel"):
            Pose.look_at(eye=[0.0, 0.0, 2.0], target=[0.0, 0.0, 0.0])
