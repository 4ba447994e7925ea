"""
Panoptic label of each voxel from its histograms.

Voxels that pass the thing test and were observed with instance information
often enough take the best thing class and their strongest instance. All other
voxels take the overall best class without an instance, which leaves thing
regions that could not be separated into instances as instance 0.
"""
import logging
from dataclasses import dataclass
from typing import List, NamedTuple, Tuple

import numpy as np

from histograms import thing_flags
from models import ClassTable, PanopticLabel3D, VOID_CLASS
from ndt_map import (MIN_POINTS_FOR_DISTRIBUTION, NdtVoxel, PanopticMap, VoxelIndex,
                     distributions_from_statistics)

logger = logging.getLogger(__name__)


def _observation_ratio_ok(n_sem: np.ndarray, n_inst: np.ndarray, theta_o: float) -> np.ndarray:
    n_sem = np.asarray(n_sem, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.asarray(n_inst, dtype=np.float64) / n_sem
    return (n_sem > 0) & (ratio >= theta_o)


def pt_thing(voxel: NdtVoxel, theta_st: float, theta_o: float) -> bool:
    """Whether a voxel propagates thing information"""
    is_thing = thing_flags(voxel.sem.total, voxel.sem.stuff, theta_st)
    return bool(is_thing & _observation_ratio_ok(voxel.n_sem, voxel.n_inst, theta_o))


def propagate_label(voxel: NdtVoxel, table: ClassTable, theta_st: float,
                    theta_o: float) -> PanopticLabel3D:
    if voxel.n_sem == 0:
        return PanopticLabel3D()
    if pt_thing(voxel, theta_st, theta_o):
        return PanopticLabel3D(class_id=voxel.sem.argmax(restrict=table.thing_mask),
                               instance_id=voxel.inst.top())
    return PanopticLabel3D(class_id=voxel.sem.argmax(), instance_id=0)


def propagate_rows(pmap: PanopticMap, rows: np.ndarray, theta_st: float,
                   theta_o: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Vectorized propagate_label over payload rows.

    Returns:
        Tuple of (semantic-only argmax class, panoptic class, panoptic instance)
    """
    p = pmap.payload
    sem = p.sem[rows]
    semantic = np.argmax(sem, axis=1)
    things = np.argmax(np.where(pmap.thing_mask, sem, -np.inf), axis=1)
    propagate = (thing_flags(p.sem_total[rows], p.sem_stuff[rows], theta_st)
                 & _observation_ratio_ok(p.n_sem[rows], p.n_inst[rows], theta_o))
    # A thing voxel with no instance mass keeps instance 0
    panoptic_class = np.where(propagate, things, semantic)
    panoptic_instance = np.where(propagate, p.inst_ids[rows, 0], 0)

    unobserved = p.n_sem[rows] == 0
    semantic = np.where(unobserved, VOID_CLASS, semantic)
    panoptic_class = np.where(unobserved, VOID_CLASS, panoptic_class)
    panoptic_instance = np.where(unobserved, 0, panoptic_instance)
    return semantic, panoptic_class, panoptic_instance


def refresh_labels(pmap: PanopticMap, theta_st: float, theta_o: float) -> int:
    """Recompute stale cached labels; returns the number recomputed"""
    params = (float(theta_st), float(theta_o))
    if pmap.label_params != params:
        pmap.invalidate_labels()
        pmap.label_params = params
    p = pmap.payload
    stale = np.flatnonzero(p.label_stamp[:pmap.payload_size] < 0)
    if len(stale):
        semantic, panoptic_class, panoptic_instance = propagate_rows(pmap, stale, theta_st, theta_o)
        p.label_semantic[stale] = semantic
        p.label_class[stale] = panoptic_class
        p.label_instance[stale] = panoptic_instance
        p.label_stamp[stale] = pmap.frame_counter
        logger.debug(f"Recomputed {len(stale)} voxel label(s) at frame {pmap.frame_counter}")
    return len(stale)


@dataclass
class LabelArrays:
    """Labeled voxels as parallel arrays"""
    slots: np.ndarray
    codes: np.ndarray
    means: np.ndarray          # (N, 3)
    covariances: np.ndarray    # (N, 3, 3), regularized
    logodds: np.ndarray
    semantic: np.ndarray       # Semantic-only argmax class
    class_id: np.ndarray       # Panoptic class
    instance_id: np.ndarray    # Panoptic global instance, 0 for none

    def __len__(self) -> int:
        return len(self.slots)


def export_arrays(pmap: PanopticMap, theta_st: float, theta_o: float) -> LabelArrays:
    """Every voxel with semantic observations and a valid distribution"""
    refresh_labels(pmap, theta_st, theta_o)
    g = pmap.geometry
    p = pmap.payload
    rows = np.arange(pmap.payload_size)
    slots = p.slot[rows]
    keep = (p.n_sem[rows] > 0) & (g.n[slots] >= MIN_POINTS_FOR_DISTRIBUTION)
    rows, slots = rows[keep], slots[keep]
    means, covariances = distributions_from_statistics(g.n[slots], g.mean[slots], g.m2[slots])
    return LabelArrays(
        slots=slots,
        codes=g.codes[slots],
        means=means,
        covariances=covariances,
        logodds=g.logodds[slots],
        semantic=p.label_semantic[rows],
        class_id=p.label_class[rows],
        instance_id=p.label_instance[rows],
    )


def labels_for_slots(pmap: PanopticMap, slots: np.ndarray, theta_st: float,
                     theta_o: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(semantic, class, instance) of arbitrary voxels; void for voxels without a payload"""
    refresh_labels(pmap, theta_st, theta_o)
    p = pmap.payload
    rows = pmap.geometry.payload[slots]
    labeled = rows >= 0
    semantic = np.full(len(slots), VOID_CLASS, dtype=np.int64)
    class_id = np.full(len(slots), VOID_CLASS, dtype=np.int64)
    instance_id = np.zeros(len(slots), dtype=np.int64)
    semantic[labeled] = p.label_semantic[rows[labeled]]
    class_id[labeled] = p.label_class[rows[labeled]]
    instance_id[labeled] = p.label_instance[rows[labeled]]
    return semantic, class_id, instance_id


class LabeledVoxel(NamedTuple):
    index: VoxelIndex
    label: PanopticLabel3D
    mean: np.ndarray
    covariance: np.ndarray
    logodds: float


def export_labels(pmap: PanopticMap, theta_st: float, theta_o: float) -> List[LabeledVoxel]:
    """One record per labeled voxel, ordered by Morton code"""
    arrays = export_arrays(pmap, theta_st, theta_o)
    order = np.argsort(arrays.codes, kind="stable")
    indices = pmap.indices(arrays.slots[order])
    return [
        LabeledVoxel(index=VoxelIndex(*(int(c) for c in indices[k])),
                     label=PanopticLabel3D(class_id=int(arrays.class_id[i]),
                                           instance_id=int(arrays.instance_id[i])),
                     mean=arrays.means[i],
                     covariance=arrays.covariances[i],
                     logodds=float(arrays.logodds[i]))
        for k, i in enumerate(order)
    ]
