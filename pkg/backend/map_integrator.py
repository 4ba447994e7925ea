"""Per-frame map update: geometry, instance association, then histograms."""
import logging
from typing import Dict, List

import numpy as np

from histograms import hist_add
from instance_tracker import FrameVoxelCache, build_masks, forward_map, match_instances
from models import FrameStats, MappingParams, MatchDecision, MatchOutcome, VOID_CLASS
from ndt_map import PanopticMap, integrate_points, integrate_rays
from panoptic_frame import PanopticFrame
from renderer import ProjectionRenderer

logger = logging.getLogger(__name__)


def _resolved_ids(local_ids: np.ndarray, decisions: Dict[int, MatchDecision]) -> np.ndarray:
    """Global id per pixel from the frame's match decisions, 0 where unresolved"""
    resolved = np.zeros(len(local_ids), dtype=np.int64)
    for local_id, decision in decisions.items():
        if decision.resolved_id:
            resolved[local_ids == local_id] = decision.resolved_id
    return resolved


def update_instances(pmap: PanopticMap, frame: PanopticFrame, cache: FrameVoxelCache,
                     decisions: Dict[int, MatchDecision], theta_z: float) -> int:
    """
    Add the panoptic score of every resolved pixel to its voxel's instance histogram.

    Returns:
        Number of pixel increments applied
    """
    if not len(cache):
        return 0
    _, merged_instance = frame.merge(pmap.class_table)
    resolved = _resolved_ids(merged_instance.flat[cache.pixel_index], decisions)
    score = frame.panoptic_score().flat[cache.pixel_index]
    gate = (resolved != 0) & (score > theta_z)
    if not np.any(gate):
        return 0

    slots, global_ids, score = cache.slots[gate], resolved[gate], score[gate]
    # One histogram write per (voxel, id) pair, in order of the first pixel
    keys = slots * pmap.next_global_id + global_ids
    _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    masses = np.bincount(inverse, weights=score)
    counts = np.bincount(inverse)
    rows = pmap.ensure_payload(slots[first])
    p = pmap.payload
    for k in np.argsort(first, kind="stable"):
        row = int(rows[k])
        histogram = hist_add(pmap.instance_histogram(row), int(global_ids[first[k]]), float(masses[k]))
        pmap.store_instance_histogram(row, histogram)
    np.add.at(p.n_inst, rows, counts)
    pmap.invalidate_labels(rows)
    return int(np.count_nonzero(gate))


def update_semantics(pmap: PanopticMap, frame: PanopticFrame, cache: FrameVoxelCache,
                     theta_l: float) -> int:
    """
    Add the semantic score of every confident non-void pixel to its voxel's class histogram.

    Returns:
        Number of pixel increments applied
    """
    if not len(cache):
        return 0
    merged_class, _ = frame.merge(pmap.class_table)
    classes = merged_class.flat[cache.pixel_index]
    score = frame.sem_score.flat[cache.pixel_index]
    gate = (score > theta_l) & (classes != VOID_CLASS)
    if not np.any(gate):
        return 0

    rows = pmap.ensure_payload(cache.slots[gate])
    p = pmap.payload
    np.add.at(p.sem, (rows, classes[gate]), score[gate])
    np.add.at(p.n_sem, rows, 1)
    touched = np.unique(rows)
    pmap.refresh_semantic_totals(touched)
    pmap.invalidate_labels(touched)
    return int(np.count_nonzero(gate))


def carve_mask(num_pixels: int, stride: int) -> np.ndarray:
    """Every stride-th valid pixel casts a free-space ray; stride 0 disables carving"""
    carve = np.zeros(num_pixels, dtype=bool)
    if stride > 0:
        carve[::stride] = True
    return carve


def process_frame(pmap: PanopticMap, frame: PanopticFrame, params: MappingParams) -> FrameStats:
    """Integrate one frame into the map"""
    if frame.depth.shape != frame.intr.shape:
        raise ValueError(f"frame {frame.frame_index}: depth raster {frame.depth.shape} does not "
                         f"match intrinsics {frame.intr.shape}")
    stats = FrameStats(frame_index=frame.frame_index)
    frame.merge(pmap.class_table)

    # Geometry first so new voxels exist for the histogram writes
    cache = forward_map(frame, pmap, params.max_depth)
    if len(cache):
        integrate_points(pmap, cache.points, cache.slots)
        integrate_rays(pmap, frame.pose.translation, cache.points, is_hit=np.ones(len(cache), dtype=bool),
                       carve=carve_mask(len(cache), params.free_space_stride))
    else:
        # Instances still take part in matching, against empty masks
        logger.debug(f"Frame {frame.frame_index} has no valid depth")

    # Association reads histograms that do not yet contain this frame
    renderer = ProjectionRenderer(frame.intr, frame.pose, params.vtou_k_sigma, params.max_depth)
    masks = build_masks(cache, pmap, renderer, params.theta_st, params.theta_b)
    _, merged_instance = frame.merge(pmap.class_table)
    decisions = match_instances(masks, merged_instance, params.theta_m, params.theta_n,
                                alloc=pmap.alloc_global_id, frame_index=frame.frame_index,
                                trace=params.trace_matches)

    stats.instance_updates = update_instances(pmap, frame, cache, decisions, params.theta_z)
    stats.semantic_updates = update_semantics(pmap, frame, cache, params.theta_l)
    pmap.frame_counter += 1

    outcomes = [d.outcome for d in decisions.values()]
    stats.pixels_integrated = len(cache)
    stats.voxels_touched = len(cache.voxels)
    stats.voxels_created = cache.created
    stats.instances_matched = outcomes.count(MatchOutcome.MATCHED)
    stats.instances_new = outcomes.count(MatchOutcome.NEW)
    stats.instances_ignored = outcomes.count(MatchOutcome.IGNORED)
    return stats


class MapIntegrator:
    """Feeds frames into one map and keeps per-frame statistics"""

    def __init__(self, pmap: PanopticMap, params: MappingParams):
        self.map = pmap
        self.params = params
        self.history: List[FrameStats] = []
        logger.info(f"🔧 Map integrator ready (voxel size {pmap.voxel_size} m, "
                    f"theta_m={params.theta_m}, theta_n={params.theta_n})")

    def integrate(self, frame: PanopticFrame) -> FrameStats:
        stats = process_frame(self.map, frame, self.params)
        self.history.append(stats)
        logger.debug(f"Frame {stats.frame_index}: {stats.pixels_integrated} px, "
                     f"{stats.instances_matched} matched, {stats.instances_new} new, "
                     f"{stats.instances_ignored} ignored")
        return stats

    def summary(self) -> Dict[str, int]:
        """Totals over every integrated frame"""
        totals = {"frames": len(self.history)}
        for name in ("pixels_integrated", "voxels_created", "instances_matched",
                     "instances_new", "instances_ignored", "semantic_updates", "instance_updates"):
            totals[name] = sum(getattr(s, name) for s in self.history)
        return totals
