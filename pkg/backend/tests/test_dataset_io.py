import pytest
import sys
import os

import numpy as np

# Add backend to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from dataset_io import (DatasetError, open_dataset, read_class_table, read_dataset, read_frame, read_intrinsics,
                        read_pose, read_raster, write_class_table, write_dataset, write_intrinsics, write_pose,
                        write_raster)
from geometry import Pose


def assert_same_frame(actual, expected):
    np.testing.assert_array_equal(actual.depth, expected.depth)
    np.testing.assert_array_equal(actual.semantic, expected.semantic)
    np.testing.assert_array_equal(actual.instance, expected.instance)
    np.testing.assert_array_equal(actual.sem_score, expected.sem_score)
    np.testing.assert_array_equal(actual.inst_score, expected.inst_score)
    np.testing.assert_array_equal(actual.pose.as_matrix(), expected.pose.as_matrix())
    assert actual.frame_index == expected.frame_index
    assert actual.has_ground_truth == expected.has_ground_truth


class TestTextFiles:
    """Test suite for class table, intrinsics and pose files"""

    def test_class_table_round_trip(self, tmp_path, class_table):
        """Test a written class table reads back identically"""
        # Arrange
        path = tmp_path / "classes.txt"

        # Act
        write_class_table(path, class_table)
        table = read_class_table(path)

        # Assert
        assert table.entries == class_table.entries

    def test_class_table_bad_kind(self, tmp_path):
        """Test an unknown class kind is a dataset error"""
        path = tmp_path / "classes.txt"
        path.write_text("0 void stuff\n1 wall maybe\n")
        with pytest.raises(DatasetError, match="invalid class table"):
            read_class_table(path)

    def test_class_table_wrong_column_count(self, tmp_path):
        """Test a line without three columns names its line number"""
        path = tmp_path / "classes.txt"
        path.write_text("0 void stuff\n1 wall\n")
        with pytest.raises(DatasetError, match=":2:"):
            read_class_table(path)

    def test_missing_class_table(self, tmp_path):
        """Test a missing file is reported as a dataset error"""
        with pytest.raises(DatasetError, match="cannot read"):
            read_class_table(tmp_path / "absent.txt")

    def test_intrinsics_round_trip(self, tmp_path, intrinsics):
        """Test intrinsics survive a write and read exactly"""
        write_intrinsics(tmp_path / "intrinsics.txt", intrinsics)
        assert read_intrinsics(tmp_path / "intrinsics.txt") == intrinsics

    def test_intrinsics_wrong_count(self, tmp_path):
        """Test five values are rejected"""
        path = tmp_path / "intrinsics.txt"
        path.write_text("100 100 50 50 101\n")
        with pytest.raises(DatasetError, match="expected"):
            read_intrinsics(path)

    def test_pose_round_trip_is_exact(self, tmp_path):
        """Test 17 significant digits preserve every matrix entry"""
        # Arrange
        pose = Pose.look_at(eye=(1.3, -0.7, 1.1), target=(0.1, 0.2, 0.4))

        # Act
        write_pose(tmp_path / "pose.txt", pose)
        loaded = read_pose(tmp_path / "pose.txt")

        # Assert
        np.testing.assert_array_equal(loaded.as_matrix(), pose.as_matrix())

    def test_pose_wrong_count(self, tmp_path):
        """Test a pose with twelve numbers is rejected"""
        path = tmp_path / "pose.txt"
        path.write_text(" ".join(["0"] * 12))
        with pytest.raises(DatasetError, match="16 pose values"):
            read_pose(path)

    def test_pose_not_a_number(self, tmp_path):
        """Test non-numeric pose text is a dataset error"""
        path = tmp_path / "pose.txt"
        path.write_text("a " * 16)
        with pytest.raises(DatasetError, match="invalid pose"):
            read_pose(path)


class TestRasters:
    """Test suite for PGM raster files"""

    def test_sixteen_bit_round_trip(self, tmp_path):
        """Test 16-bit values above 255 survive"""
        # Arrange
        raster = np.arange(12, dtype=np.int64).reshape(3, 4) * 5000

        # Act
        write_raster(tmp_path / "r.pgm", raster, 16)
        loaded = read_raster(tmp_path / "r.pgm", (3, 4))

        # Assert
        np.testing.assert_array_equal(loaded, raster)

    def test_out_of_range_rejected(self, tmp_path):
        """Test 300 does not fit an 8-bit raster"""
        with pytest.raises(ValueError, match=r"\[0, 255\]"):
            write_raster(tmp_path / "r.pgm", np.full((2, 2), 300), 8)

    def test_negative_rejected(self, tmp_path):
        """Test negative values are rejected"""
        with pytest.raises(ValueError):
            write_raster(tmp_path / "r.pgm", np.full((2, 2), -1), 16)

    def test_shape_mismatch(self, tmp_path):
        """Test a raster disagreeing with the intrinsics is a dataset error"""
        write_raster(tmp_path / "r.pgm", np.zeros((3, 4)), 8)
        with pytest.raises(DatasetError, match="shape"):
            read_raster(tmp_path / "r.pgm", (4, 3))

    def test_missing_raster(self, tmp_path):
        """Test an absent raster is a dataset error"""
        with pytest.raises(DatasetError, match="cannot read raster"):
            read_raster(tmp_path / "absent.pgm")


class TestFrames:
    """Test suite for whole-frame and dataset round trips"""

    def test_frame_with_scores_round_trip(self, tmp_path, make_frame, class_table):
        """Test a frame with score rasters reads back as its quantized copy"""
        # Arrange
        rng = np.random.default_rng(3)
        shape = (10, 10)
        frame = make_frame(semantic=rng.integers(0, 5, shape), instance=rng.integers(0, 4, shape),
                           depth=rng.uniform(0.5, 4.0, shape), sem_score=rng.uniform(0, 1, shape),
                           inst_score=rng.uniform(0, 1, shape), frame_index=12)

        # Act
        write_dataset(tmp_path, [frame], class_table)
        loaded = read_frame(tmp_path, 12, frame.intr)

        # Assert
        assert_same_frame(loaded, frame.quantized())

    def test_dataset_round_trip_with_ground_truth(self, tmp_path, box_frames, class_table):
        """Test simulated frames and their ground truth survive the directory layout"""
        # Act
        write_dataset(tmp_path, box_frames, class_table)
        loaded = read_dataset(tmp_path)

        # Assert
        assert len(loaded) == len(box_frames)
        for actual, expected in zip(loaded, box_frames):
            assert_same_frame(actual, expected.quantized())
            np.testing.assert_array_equal(actual.gt_semantic, expected.gt_semantic)
            np.testing.assert_array_equal(actual.gt_instance, expected.gt_instance)

    def test_open_dataset_lists_indices(self, tmp_path, box_frames, class_table):
        """Test the dataset handle reports its metadata and frame indices"""
        # Act
        write_dataset(tmp_path, box_frames[:3], class_table)
        dataset = open_dataset(tmp_path)

        # Assert
        assert dataset.indices == [0, 1, 2]
        assert dataset.intrinsics == box_frames[0].intr
        assert len(dataset) == 3

    def test_scoreless_frame_writes_no_score_rasters(self, tmp_path, make_frame, class_table):
        """Test constant scores are implied rather than stored"""
        write_dataset(tmp_path, [make_frame(semantic=1, instance=0)], class_table)
        assert not (tmp_path / "semantic_score").exists()
        assert not (tmp_path / "instance_score").exists()

    def test_empty_dataset_rejected(self, tmp_path, class_table):
        """Test writing zero frames raises"""
        with pytest.raises(ValueError, match="without frames"):
            write_dataset(tmp_path, [], class_table)

    def test_mixed_intrinsics_rejected(self, tmp_path, make_frame, class_table, intrinsics):
        """Test frames with different cameras cannot share a dataset"""
        frames = [make_frame(semantic=1, instance=0), make_frame(semantic=1, instance=0, intr=intrinsics)]
        with pytest.raises(ValueError, match="same intrinsics"):
            write_dataset(tmp_path, frames, class_table)

    def test_missing_directory(self, tmp_path):
        """Test opening a missing dataset directory"""
        with pytest.raises(DatasetError, match="does not exist"):
            open_dataset(tmp_path / "nowhere")

    def test_badly_named_pose_file(self, tmp_path, make_frame, class_table):
        """Test pose files must be named by a six-digit index"""
        # Arrange
        write_dataset(tmp_path, [make_frame(semantic=1, instance=0)], class_table)
        (tmp_path / "poses" / "extra.txt").write_text("")

        # Act / Assert
        with pytest.raises(DatasetError, match="6-digit"):
            open_dataset(tmp_path)

    def test_truncated_raster_shape(self, tmp_path, make_frame, class_table):
        """Test a semantic raster of the wrong size fails the frame read"""
        # Arrange
        frame = make_frame(semantic=1, instance=0)
        write_dataset(tmp_path, [frame], class_table)
        write_raster(tmp_path / "semantic" / "000000.pgm", np.ones((5, 5)), 8)

        # Act / Assert
        with pytest.raises(DatasetError, match="shape"):
            read_dataset(tmp_path)
