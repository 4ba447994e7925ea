import pytest
import logging
import sys
import os

import numpy as np

# Add backend to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from evaluation import (MATCH_CHUNK, UNKNOWN, average_precision_50, evaluate_3d,
                        evaluate_inputs_2d, garbage_components_2d, garbage_components_3d,
                        instance_confidences, match_points_3d, panoptic_quality, pq_compute_single,
                        segment_keys, semantic_miou)
from models import OFFSET, GroundTruthCloud
from ndt_map import NdtVoxel, integrate_point


def key(class_id, instance_id=0):
    return class_id * OFFSET + instance_id


class TestSemanticMiou:
    """Test suite for semantic IoU scores"""

    def test_binary_case(self, class_table):
        """Test the two-class example gives chair 2/3, wall 1/2 and mIoU 0.5833"""
        # Arrange
        chair, wall = class_table.id_of("chair"), class_table.id_of("wall")
        gt = np.array([chair] * 50 + [wall] * 25 + [wall] * 25)
        pred = np.array([chair] * 50 + [chair] * 25 + [wall] * 25)

        # Act
        class_iou, miou = semantic_miou(pred, gt, class_table.num_classes)

        # Assert
        assert class_iou[chair] == pytest.approx(2 / 3)
        assert class_iou[wall] == pytest.approx(0.5)
        assert miou == pytest.approx((2 / 3 + 0.5) / 2)

    def test_void_ground_truth_is_ignored(self, class_table):
        """Test predictions on void ground truth cost nothing"""
        chair = class_table.id_of("chair")
        _, miou = semantic_miou(np.array([chair, chair]), np.array([chair, 0]), class_table.num_classes)
        assert miou == 1.0

    def test_void_prediction_is_false_negative(self, class_table):
        """Test an unlabeled prediction lowers the ground-truth class IoU"""
        chair = class_table.id_of("chair")
        class_iou, _ = semantic_miou(np.array([chair, 0]), np.array([chair, chair]), class_table.num_classes)
        assert class_iou == {chair: 0.5}

    def test_only_present_classes_are_averaged(self, class_table):
        """Test classes absent from ground truth do not enter the mean"""
        wall = class_table.id_of("wall")
        class_iou, miou = semantic_miou(np.full(4, wall), np.full(4, wall), class_table.num_classes)
        assert list(class_iou) == [wall]
        assert miou == 1.0


class TestPanopticQuality:
    """Test suite for segment matching and PQ"""

    def test_hand_example(self, class_table):
        """Test chair PQ 8/15, wall PQ 1 and overall PQ 23/30"""
        # Arrange
        chair, wall = class_table.id_of("chair"), class_table.id_of("wall")
        gt = np.array([key(chair, 1)] * 100 + [key(wall)] * 100 + [UNKNOWN] * 30)
        pred = np.array([key(chair, 7)] * 80 + [UNKNOWN] * 20 + [key(wall)] * 100 + [key(chair, 9)] * 30)

        # Act
        per_class, (pq, sq, rq) = panoptic_quality(pred, gt)

        # Assert
        assert per_class[chair][0] == pytest.approx(8 / 15, abs=1e-12)
        assert per_class[wall][0] == pytest.approx(1.0, abs=1e-12)
        assert pq == pytest.approx(23 / 30, abs=1e-12)

    def test_iou_at_half_does_not_match(self, class_table):
        """Test the matching threshold is strict"""
        # Arrange
        chair = class_table.id_of("chair")
        gt = np.array([key(chair, 1)] * 4 + [key(chair, 2)] * 4)
        pred = np.array([key(chair, 1)] * 2 + [key(chair, 5)] * 4 + [key(chair, 6)] * 2)

        # Act
        stat = pq_compute_single(pred, gt)

        # Assert
        assert stat[chair].tp == 0

    def test_pq_is_product_of_sq_and_rq(self):
        """Test PQ = SQ * RQ on random segmentations"""
        rng = np.random.default_rng(21)
        for _ in range(1000):
            # Arrange
            size = int(rng.integers(5, 60))
            gt = rng.integers(1, 4, size) * OFFSET + rng.integers(0, 3, size)
            pred = rng.integers(1, 4, size) * OFFSET + rng.integers(0, 3, size)

            # Act
            per_class, overall = panoptic_quality(pred, gt)

            # Assert
            for pq, sq, rq in per_class.values():
                assert pq == pytest.approx(sq * rq, abs=1e-12)
                assert 0.0 <= pq <= 1.0

    def test_swapping_sides_swaps_fp_and_fn(self):
        """Test exchanging prediction and ground truth exchanges FP and FN counts"""
        rng = np.random.default_rng(4)
        for _ in range(200):
            # Arrange
            gt = rng.integers(1, 3, 40) * OFFSET + rng.integers(0, 4, 40)
            pred = rng.integers(1, 3, 40) * OFFSET + rng.integers(0, 4, 40)

            # Act
            forward = pq_compute_single(pred, gt)
            backward = pq_compute_single(gt, pred)

            # Assert
            for class_id, stat in forward.pq_per_cat.items():
                assert stat.tp == backward[class_id].tp
                assert stat.fp == backward[class_id].fn
                assert stat.fn == backward[class_id].fp

    def test_void_overlap_leaves_union(self, class_table):
        """Test prediction area on void ground truth does not lower IoU"""
        # Arrange
        wall = class_table.id_of("wall")
        gt = np.array([key(wall)] * 10 + [UNKNOWN] * 10)
        pred = np.full(20, key(wall))

        # Act
        per_class, _ = panoptic_quality(pred, gt)

        # Assert
        assert per_class[wall] == (1.0, 1.0, 1.0)


class TestSegmentKeys:
    """Test suite for panoptic segment ids"""

    def test_stuff_things_garbage_and_void(self, class_table):
        """Test each element kind gets its own key"""
        # Arrange
        wall, chair = class_table.id_of("wall"), class_table.id_of("chair")
        classes = np.array([wall, wall, chair, chair, 0])
        instances = np.array([0, 3, 5, 0, 0])
        components = np.array([0, 0, 0, 1, 0])

        # Act
        keys = segment_keys(classes, instances, class_table.thing_mask, components)

        # Assert
        assert keys[0] == keys[1] == key(wall)
        assert keys[2] == key(chair, 5)
        assert keys[3] == key(chair) + OFFSET // 2 + 1
        assert keys[4] == UNKNOWN

    def test_garbage_regions_2d(self, class_table):
        """Test two separated instance-less chair blobs form two regions"""
        # Arrange
        chair = class_table.id_of("chair")
        classes = np.zeros((5, 5), dtype=np.int64)
        classes[0, 0:2] = chair
        classes[4, 3:5] = chair
        instances = np.zeros((5, 5), dtype=np.int64)

        # Act
        components = garbage_components_2d(classes, instances, class_table.thing_mask)

        # Assert
        assert components[0, 0] == components[0, 1]
        assert components[4, 3] == components[4, 4]
        assert components[0, 0] != components[4, 3]
        assert components[2, 2] == 0

    def test_garbage_regions_3d_connect_diagonals(self, class_table):
        """Test corner-touching cells join while distant cells stay apart"""
        # Arrange
        chair = class_table.id_of("chair")
        lattice = np.array([[0, 0, 0], [1, 1, 1], [5, 5, 5]])
        classes = np.full(3, chair)

        # Act
        components = garbage_components_3d(classes, np.zeros(3, dtype=np.int64), lattice,
                                            class_table.thing_mask)

        # Assert
        assert components[0] == components[1]
        assert components[2] != components[0]


class TestAveragePrecision:
    """Test suite for AP at 50% overlap"""

    def test_false_detection_ranked_first(self, class_table):
        """Test a wrong high-confidence detection before a correct one gives AP 0.5"""
        # Arrange
        chair = class_table.id_of("chair")
        gt = np.array([key(chair, 1)] * 10 + [UNKNOWN] * 10)
        pred = np.array([key(chair, 2)] * 10 + [key(chair, 3)] * 10)
        confidences = {key(chair, 2): 0.4, key(chair, 3): 0.9}

        # Act
        per_class, ap50 = average_precision_50(pred, gt, confidences)

        # Assert
        assert per_class[chair] == pytest.approx(0.5)
        assert ap50 == pytest.approx(0.5)

    def test_no_predictions(self, class_table):
        """Test ground truth without detections scores 0"""
        chair = class_table.id_of("chair")
        per_class, ap50 = average_precision_50(np.full(5, UNKNOWN), np.full(5, key(chair, 1)), {})
        assert per_class == {chair: 0.0}
        assert ap50 == 0.0

    def test_missing_confidence_rejected(self, class_table):
        """Test every predicted instance needs a confidence"""
        chair = class_table.id_of("chair")
        with pytest.raises(ValueError, match="confidence"):
            average_precision_50(np.full(5, key(chair, 1)), np.full(5, key(chair, 1)), {})

    def test_instance_confidences_normalized(self, empty_map, make_voxel):
        """Test the largest total mass maps to confidence 1"""
        # Arrange
        empty_map.put_voxel(make_voxel((0, 0, 0), sem={"chair": 1.0}, inst={1: 4.0, 2: 1.0}))
        empty_map.put_voxel(make_voxel((1, 0, 0), sem={"chair": 1.0}, inst={2: 1.0}))

        # Act
        confidences = instance_confidences(empty_map)

        # Assert
        assert confidences == {1: 1.0, 2: 0.5}


class TestMatchPoints3d:
    """Test suite for point-to-voxel matching"""

    def _flat_and_compact(self, pmap, class_table):
        """Flat voxel at the origin with normal +y, compact voxel next to it in +x"""
        flat = NdtVoxel.empty((0, 0, 0), 0.1, class_table)
        for x in (0.0, 0.05, 0.099):
            for z in (0.0, 0.05, 0.099):
                integrate_point(flat, np.array([x, 0.05, z]))
        flat.sem.add(class_table.id_of("wall"), 5.0)
        flat.n_sem = 5
        compact = NdtVoxel.empty((1, 0, 0), 0.1, class_table)
        for dx in (0.02, 0.05, 0.08):
            for dy in (0.02, 0.05, 0.08):
                for dz in (0.02, 0.05, 0.08):
                    integrate_point(compact, np.array([0.1 + dx, dy, dz]))
        compact.sem.add(class_table.id_of("table"), 5.0)
        compact.n_sem = 5
        return pmap.put_voxel(flat), pmap.put_voxel(compact)

    def test_point_on_flat_surface_prefers_flat_voxel(self, empty_map, class_table):
        """Test a point on the flat voxel's plane, equidistant from both means, goes to the flat voxel"""
        # Arrange
        flat, _ = self._flat_and_compact(empty_map, class_table)

        # Act
        match = match_points_3d(empty_map, np.array([[0.1, 0.05, 0.05]]), 0.9, 0.25)

        # Assert
        assert match.slot[0] == flat
        assert match.class_id[0] == class_table.id_of("wall")

    def test_point_off_flat_surface_goes_to_neighbor(self, empty_map, class_table):
        """Test the smallest Mahalanobis distance wins over the containing voxel"""
        # Arrange
        _, compact = self._flat_and_compact(empty_map, class_table)

        # Act
        match = match_points_3d(empty_map, np.array([[0.05, 0.08, 0.05]]), 0.9, 0.25)

        # Assert
        assert match.slot[0] == compact
        assert match.semantic[0] == class_table.id_of("table")

    def test_points_without_candidates_are_unknown(self, empty_map, class_table):
        """Test points far from every voxel stay unmatched"""
        # Arrange
        self._flat_and_compact(empty_map, class_table)

        # Act
        match = match_points_3d(empty_map, np.array([[3.0, 3.0, 3.0]]), 0.9, 0.25)

        # Assert
        assert not match.matched[0]
        assert match.class_id[0] == 0
        assert np.isinf(match.distance[0])

    def test_empty_map(self, empty_map):
        """Test every point is unknown against an empty map"""
        match = match_points_3d(empty_map, np.zeros((4, 3)), 0.9, 0.25)
        assert not match.matched.any()

    def test_voxel_matching_ignores_shape(self, empty_map, class_table):
        """Test voxel matching takes the containing voxel even off its surface"""
        # Arrange
        flat, _ = self._flat_and_compact(empty_map, class_table)

        # Act
        match = match_points_3d(empty_map, np.array([[0.05, 0.08, 0.05]]), 0.9, 0.25, matching="voxel")

        # Assert
        assert match.slot[0] == flat
        assert match.distance[0] == 0.0

    def test_unknown_matching_rejected(self, empty_map):
        """Test only the two matching modes are accepted"""
        with pytest.raises(ValueError, match="matching"):
            match_points_3d(empty_map, np.zeros((1, 3)), 0.9, 0.25, matching="nearest")

    def test_small_chunks_give_the_same_match(self, empty_map, class_table):
        """Test splitting the points into batches of 7 does not change any assignment"""
        # Arrange
        self._flat_and_compact(empty_map, class_table)
        points = np.random.default_rng(4).uniform(-0.1, 0.3, size=(200, 3))

        # Act
        whole = match_points_3d(empty_map, points, 0.9, 0.25)
        batched = match_points_3d(empty_map, points, 0.9, 0.25, chunk=7)

        # Assert
        assert whole.matched.any()
        np.testing.assert_array_equal(batched.slot, whole.slot)
        np.testing.assert_allclose(batched.distance, whole.distance, rtol=1e-12)
        np.testing.assert_array_equal(batched.class_id, whole.class_id)

    def test_default_chunk_bounds_batch_size(self):
        """Test one Mahalanobis batch stays in the tens of megabytes"""
        assert MATCH_CHUNK * 27 * 12 * 8 < 32 * 2 ** 20

    def test_non_positive_chunk_rejected(self, empty_map):
        """Test the batch size must be positive"""
        with pytest.raises(ValueError, match="chunk"):
            match_points_3d(empty_map, np.zeros((1, 3)), 0.9, 0.25, chunk=0)


class TestEvaluate3d:
    """Test suite for point-cloud evaluation"""

    def test_two_instances_perfect(self, empty_map, make_voxel, class_table):
        """Test two separately mapped boxes against two ground-truth instances"""
        # Arrange
        chair = class_table.id_of("chair")
        empty_map.put_voxel(make_voxel((0, 0, 0), sem={"chair": 10.0}, inst={1: 10.0}))
        empty_map.put_voxel(make_voxel((5, 0, 0), sem={"chair": 10.0}, inst={2: 10.0}))
        points = np.array([[0.05, 0.05, 0.05], [0.03, 0.06, 0.04], [0.55, 0.05, 0.05], [0.53, 0.07, 0.06]])
        cloud = GroundTruthCloud(points=points, class_id=np.full(4, chair), instance_id=[10, 10, 20, 20])

        # Act
        report = evaluate_3d(empty_map, cloud, 0.9, 0.25)

        # Assert
        assert report.ap50 == pytest.approx(1.0)
        assert report.pq == pytest.approx(1.0)
        assert report.miou == pytest.approx(1.0)
        assert report.matched_fraction == 1.0
        assert report.samples == 4

    def test_unmatched_points_count_as_void(self, empty_map, make_voxel, class_table):
        """Test unknown points lower recall"""
        # Arrange
        wall = class_table.id_of("wall")
        empty_map.put_voxel(make_voxel((0, 0, 0), sem={"wall": 10.0}))
        cloud = GroundTruthCloud(points=[[0.05, 0.05, 0.05], [4.0, 4.0, 4.0]], class_id=[wall, wall],
                                 instance_id=[0, 0])

        # Act
        report = evaluate_3d(empty_map, cloud, 0.9, 0.25)

        # Assert
        assert report.matched_fraction == 0.5
        assert report.class_iou["wall"] == pytest.approx(0.5)

    def test_cloud_length_mismatch_rejected(self):
        """Test ground-truth arrays must line up"""
        with pytest.raises(ValueError, match="equal length"):
            GroundTruthCloud(points=np.zeros((2, 3)), class_id=[1], instance_id=[0, 0])


class TestEvaluateInputs2d:
    """Test suite for scoring the per-frame inputs"""

    def test_ground_truth_inputs_score_perfectly(self, box_frames, class_table):
        """Test noise-free frames reproduce their own annotation"""
        # Act
        report = evaluate_inputs_2d(box_frames, class_table)

        # Assert
        assert report.mode == "input"
        assert report.samples == len(box_frames)
        assert report.miou == pytest.approx(1.0)
        assert report.pq == pytest.approx(1.0)
        assert report.ap50 == pytest.approx(1.0)

    def test_frames_without_ground_truth_are_skipped(self, make_frame, class_table, caplog):
        """Test unannotated frames are reported and left out"""
        # Arrange
        caplog.set_level(logging.WARNING)

        # Act
        report = evaluate_inputs_2d([make_frame(1, 0)], class_table)

        # Assert
        assert report.samples == 0
        assert any("without ground truth" in r.getMessage() for r in caplog.records)
