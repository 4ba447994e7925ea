import pytest
import sys
import os

import numpy as np

# Add backend to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from label_propagation import (export_arrays, export_labels, labels_for_slots, propagate_label, pt_thing,
                               refresh_labels)
from models import PanopticLabel3D
from ndt_map import integrate_points


class TestPtThing:
    """Test suite for the thing propagation predicate"""

    def test_too_few_instance_observations(self, make_voxel):
        """Test nZ 2 against nL 10 fails theta_o 0.25"""
        voxel = make_voxel((0, 0, 10), sem={"chair": 10.0}, inst={4: 2.0}, n_sem=10, n_inst=2)
        assert not pt_thing(voxel, 0.9, 0.25)

    def test_enough_instance_observations(self, make_voxel):
        """Test nZ 3 against nL 10 passes theta_o 0.25"""
        voxel = make_voxel((0, 0, 10), sem={"chair": 10.0}, inst={4: 3.0}, n_sem=10, n_inst=3)
        assert pt_thing(voxel, 0.9, 0.25)

    def test_stuff_voxel(self, make_voxel):
        """Test a stuff-dominated voxel never propagates things"""
        voxel = make_voxel((0, 0, 10), sem={"wall": 10.0}, inst={4: 10.0})
        assert not pt_thing(voxel, 0.9, 0.25)

    def test_unobserved_voxel(self, make_voxel):
        """Test a voxel without semantic observations is not a thing"""
        assert not pt_thing(make_voxel((0, 0, 10)), 0.9, 0.25)


class TestPropagateLabel:
    """Test suite for per-voxel panoptic labels"""

    def test_thing_with_instance(self, make_voxel, class_table):
        """Test a confident chair voxel takes its strongest instance"""
        # Arrange
        voxel = make_voxel((0, 0, 10), sem={"chair": 10.0}, inst={42: 5.0, 7: 1.0}, n_sem=10, n_inst=10)

        # Act
        label = propagate_label(voxel, class_table, 0.9, 0.25)

        # Assert
        assert label == PanopticLabel3D(class_id=class_table.id_of("chair"), instance_id=42)

    def test_thing_without_enough_instances(self, make_voxel, class_table):
        """Test a chair voxel failing theta_o keeps instance 0"""
        # Arrange
        voxel = make_voxel((0, 0, 10), sem={"chair": 10.0}, inst={42: 1.0}, n_sem=10, n_inst=1)

        # Act
        label = propagate_label(voxel, class_table, 0.9, 0.25)

        # Assert
        assert label == PanopticLabel3D(class_id=class_table.id_of("chair"), instance_id=0)

    def test_stuff_voxel(self, make_voxel, class_table):
        """Test a wall voxel is labeled wall without instance"""
        voxel = make_voxel((0, 0, 10), sem={"wall": 10.0})
        label = propagate_label(voxel, class_table, 0.9, 0.25)
        assert label == PanopticLabel3D(class_id=class_table.id_of("wall"), instance_id=0)

    def test_thing_class_wins_over_stuff_minority(self, make_voxel, class_table):
        """Test a thing voxel with stuff mass takes the best thing class"""
        # Arrange
        voxel = make_voxel((0, 0, 10), sem={"wall": 5.0, "table": 4.0, "chair": 1.0}, inst={3: 5.0})

        # Act
        label = propagate_label(voxel, class_table, 0.9, 0.25)

        # Assert
        assert label == PanopticLabel3D(class_id=class_table.id_of("table"), instance_id=3)

    def test_unobserved_voxel_is_void(self, make_voxel, class_table):
        """Test nL 0 gives the void label"""
        assert propagate_label(make_voxel((0, 0, 10)), class_table, 0.9, 0.25) == PanopticLabel3D()


class TestLabelCache:
    """Test suite for cached voxel labels"""

    def test_fresh_labels_are_computed_once(self, empty_map, make_voxel):
        """Test a second refresh without changes recomputes nothing"""
        # Arrange
        empty_map.put_voxel(make_voxel((0, 0, 10), sem={"chair": 10.0}, inst={1: 10.0}))

        # Act
        first = refresh_labels(empty_map, 0.9, 0.25)
        second = refresh_labels(empty_map, 0.9, 0.25)

        # Assert
        assert (first, second) == (1, 0)

    def test_rewritten_voxel_is_stale(self, empty_map, make_voxel, class_table):
        """Test writing a voxel back invalidates its cached label"""
        # Arrange
        empty_map.put_voxel(make_voxel((0, 0, 10), sem={"chair": 10.0}, inst={1: 10.0}))
        refresh_labels(empty_map, 0.9, 0.25)

        # Act
        empty_map.put_voxel(make_voxel((0, 0, 10), sem={"wall": 10.0}))
        recomputed = refresh_labels(empty_map, 0.9, 0.25)

        # Assert
        assert recomputed == 1
        _, class_id, instance_id = labels_for_slots(empty_map, np.array([0]), 0.9, 0.25)
        assert (class_id[0], instance_id[0]) == (class_table.id_of("wall"), 0)

    def test_threshold_change_invalidates_everything(self, empty_map, make_voxel):
        """Test labels computed under other thresholds are recomputed"""
        # Arrange
        empty_map.put_voxel(make_voxel((0, 0, 10), sem={"chair": 10.0}))
        empty_map.put_voxel(make_voxel((1, 0, 10), sem={"wall": 10.0}))
        refresh_labels(empty_map, 0.9, 0.25)

        # Act
        recomputed = refresh_labels(empty_map, 0.5, 0.25)

        # Assert
        assert recomputed == 2

    def test_cache_is_stamped_with_frame_counter(self, empty_map, make_voxel):
        """Test the snapshot carries the label with its frame stamp"""
        # Arrange
        empty_map.put_voxel(make_voxel((0, 0, 10), sem={"chair": 10.0}, inst={5: 10.0}))
        empty_map.frame_counter = 3

        # Act
        refresh_labels(empty_map, 0.9, 0.25)

        # Assert
        label, stamp = empty_map.get_voxel((0, 0, 10)).cached_label
        assert label.instance_id == 5
        assert stamp == 3


class TestExport:
    """Test suite for exporting labeled voxels"""

    def test_empty_map(self, empty_map):
        """Test an empty map exports nothing"""
        assert export_labels(empty_map, 0.9, 0.25) == []
        assert len(export_arrays(empty_map, 0.9, 0.25)) == 0

    def test_geometry_only_voxels_are_skipped(self, empty_map):
        """Test voxels without semantic observations are not exported"""
        integrate_points(empty_map, np.full((5, 3), 0.05))
        assert export_labels(empty_map, 0.9, 0.25) == []

    def test_morton_order_and_labels(self, empty_map, make_voxel, class_table):
        """Test records come sorted by Morton code with their labels"""
        # Arrange
        empty_map.put_voxel(make_voxel((3, 0, 0), sem={"wall": 10.0}))
        empty_map.put_voxel(make_voxel((0, 0, 0), sem={"chair": 10.0}, inst={2: 10.0}))
        empty_map.put_voxel(make_voxel((1, 1, 1), sem={"floor": 10.0}))

        # Act
        records = export_labels(empty_map, 0.9, 0.25)

        # Assert
        assert [tuple(r.index) for r in records] == [(0, 0, 0), (1, 1, 1), (3, 0, 0)]
        assert records[0].label == PanopticLabel3D(class_id=class_table.id_of("chair"), instance_id=2)
        np.testing.assert_allclose(records[0].mean, [0.05, 0.05, 0.05])
        assert records[0].covariance.shape == (3, 3)

    def test_labels_for_slots_without_payload(self, empty_map):
        """Test geometry-only voxels read as void"""
        # Arrange
        slots = integrate_points(empty_map, np.full((3, 3), 0.05))

        # Act
        semantic, class_id, instance_id = labels_for_slots(empty_map, slots[:1], 0.9, 0.25)

        # Assert
        assert (semantic[0], class_id[0], instance_id[0]) == (0, 0, 0)
