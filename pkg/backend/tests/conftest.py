import pytest
import os
import sys

import numpy as np

# Add backend directory to path so we can import modules
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from config import Config
from geometry import Pose
from models import ClassTable, Intrinsics, default_class_table
from histograms import InstanceHistogram
from ndt_map import NdtVoxel, PanopticMap, integrate_point
from panoptic_frame import PanopticFrame
from scene_simulator import BoxObject, Orbit, Room, SceneSpec, default_scene, simulate_sequence


@pytest.fixture
def class_table() -> ClassTable:
    """Indoor class table: void, wall, floor, ceiling, chair, table, sofa, cabinet, lamp"""
    return default_class_table()


@pytest.fixture
def intrinsics() -> Intrinsics:
    """Pinhole camera with fx = fy = 100 and the principal point at (50, 50)"""
    return Intrinsics(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=101, height=101)


@pytest.fixture
def small_intrinsics() -> Intrinsics:
    """Tiny raster for hand-built frames"""
    return Intrinsics(fx=100.0, fy=100.0, cx=4.5, cy=4.5, width=10, height=10)


@pytest.fixture
def empty_map(class_table) -> PanopticMap:
    """Fresh 10 cm map"""
    return PanopticMap(0.1, class_table)


@pytest.fixture
def make_voxel(class_table):
    """Factory for 10 cm voxels holding 27 grid points and the given histograms"""
    offsets = np.array([0.02, 0.05, 0.08])
    grid = np.stack(np.meshgrid(offsets, offsets, offsets, indexing="ij"), axis=-1).reshape(-1, 3)

    def _make(index, sem=None, inst=None, n_sem=None, n_inst=None):
        voxel = NdtVoxel.empty(index, 0.1, class_table)
        for point in np.asarray(index, dtype=np.float64) * 0.1 + grid:
            integrate_point(voxel, point)
        for name, mass in (sem or {}).items():
            voxel.sem.add(class_table.id_of(name), mass)
        voxel.inst = InstanceHistogram.from_entries(list((inst or {}).items()))
        voxel.n_sem = (10 if sem else 0) if n_sem is None else n_sem
        voxel.n_inst = (10 if inst else 0) if n_inst is None else n_inst
        return voxel

    return _make


@pytest.fixture
def make_frame(small_intrinsics):
    """Factory for constant-depth frames facing +z from the origin"""

    def _make(semantic, instance, depth=1.0, sem_score=None, inst_score=None, frame_index=0,
              pose=None, intr=None):
        intr = intr or small_intrinsics
        semantic = np.broadcast_to(np.asarray(semantic, dtype=np.int64), intr.shape).copy()
        instance = np.broadcast_to(np.asarray(instance, dtype=np.int64), intr.shape).copy()
        depth = np.broadcast_to(np.asarray(depth, dtype=np.float64), intr.shape).copy()
        return PanopticFrame(depth=depth, semantic=semantic, instance=instance,
                             pose=pose or Pose.identity(), intr=intr,
                             sem_score=sem_score, inst_score=inst_score, frame_index=frame_index)

    return _make


@pytest.fixture
def box_scene() -> SceneSpec:
    """Small room with one table box, seen from a short orbit"""
    return SceneSpec(
        room=Room(min_corner=(-2.0, -2.0, 0.0), max_corner=(2.0, 2.0, 2.5)),
        objects=[BoxObject(min_corner=(-0.4, -0.3, 0.0), max_corner=(0.4, 0.3, 0.7),
                           class_name="table", instance_id=1)],
        intrinsics=Intrinsics(fx=60.0, fy=60.0, cx=39.5, cy=29.5, width=80, height=60),
        orbit=Orbit(center=(0.0, 0.0, 0.4), radius=1.6, height=1.3, n_frames=8),
    )


@pytest.fixture
def box_frames(box_scene):
    """Noise-free frames of the single-box scene"""
    return simulate_sequence(box_scene)


@pytest.fixture(scope="session")
def room_scene() -> SceneSpec:
    """Built-in furnished room at reduced resolution"""
    return default_scene(n_frames=24, width=120, height=90, focal=90.0)


@pytest.fixture(scope="session")
def room_frames(room_scene):
    """Noise-free frames of the furnished room"""
    return simulate_sequence(room_scene)


@pytest.fixture
def test_config():
    """Configuration with the documented default thresholds"""
    return Config(
        VOXEL_SIZE=0.1, MAX_DEPTH=20.0, THETA_ST=0.9, THETA_B=0.8, THETA_M=0.2, THETA_N=0.1,
        THETA_L=0.7, THETA_Z=0.1, THETA_O=0.25, VTOU_K_SIGMA=2.0, RENDER_K_SIGMA=3.0,
        FREE_SPACE_STRIDE=8, TRACE_MATCHES=False, SEED=0,
    )


@pytest.fixture
def broken_config(test_config):
    """Configuration violating theta_m >= theta_n"""
    return test_config.with_overrides(THETA_M=0.05, THETA_N=0.1)
