"""
Frame-local to global instance association.

Map instances seen by the current frame are projected back to the image as
binary masks; each frame-local instance is then matched by IoU, creates a new
global id, or is ignored for this frame.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from geometry import unproject_depth
from histograms import thing_flags, top_z_mask
from models import MatchDecision, MatchOutcome
from ndt_map import MIN_POINTS_FOR_DISTRIBUTION, NdtVoxel, PanopticMap, distributions_from_statistics
from panoptic_frame import PanopticFrame
from renderer import ProjectionRenderer

logger = logging.getLogger(__name__)
trace_logger = logging.getLogger("match_trace")


@dataclass
class FrameVoxelCache:
    """Forward mapping of one frame: the voxel behind each valid pixel"""
    pixel_index: np.ndarray    # Flat raster index of each valid pixel, scan order
    points: np.ndarray         # (N, 3) world points
    slots: np.ndarray          # Map slot of each valid pixel
    voxels: np.ndarray         # Distinct slots touched, ascending
    created: int = 0

    def __len__(self) -> int:
        return len(self.pixel_index)


@dataclass
class InstanceMask:
    global_id: int
    mask: np.ndarray   # Boolean raster

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.mask))


def forward_map(frame: PanopticFrame, pmap: PanopticMap, max_depth: float) -> FrameVoxelCache:
    """Unproject every valid pixel and fetch or create its voxel"""
    pixel_index, points = unproject_depth(frame.depth, frame.intr, frame.pose, max_depth)
    before = len(pmap)
    slots = pmap.slots_for_points(points, create=True) if len(points) else np.empty(0, np.int64)
    return FrameVoxelCache(pixel_index=pixel_index, points=points, slots=slots,
                           voxels=np.unique(slots), created=len(pmap) - before)


def is_thing(voxel: NdtVoxel, theta_st: float) -> bool:
    """Stuff proportion of the semantic histogram below theta_st"""
    return bool(thing_flags(voxel.sem.total, voxel.sem.stuff, theta_st))


def is_in_top_z(voxel: NdtVoxel, global_id: int, theta_b: float) -> bool:
    """Whether an id belongs to the most relevant share of the voxel's instance mass"""
    keep = top_z_mask(voxel.inst.ids, voxel.inst.masses, theta_b)[0]
    hits = np.flatnonzero((voxel.inst.ids == global_id) & (global_id > 0))
    return bool(len(hits) and keep[hits[0]])


def build_masks(cache: FrameVoxelCache, pmap: PanopticMap, renderer: ProjectionRenderer,
                theta_st: float, theta_b: float) -> List[InstanceMask]:
    """
    Back-project the relevant instances of the frame's voxels.

    Only thing voxels with a valid distribution contribute. Each pixel is owned
    by the nearest contributing voxel, which marks it in the mask of every
    instance in its top share.

    Returns:
        Masks sorted by global id
    """
    g = pmap.geometry
    p = pmap.payload
    slots = cache.voxels
    if not len(slots):
        return []
    rows = g.payload[slots]
    has_payload = rows >= 0
    slots, rows = slots[has_payload], rows[has_payload]
    contributing = (thing_flags(p.sem_total[rows], p.sem_stuff[rows], theta_st)
                    & (g.n[slots] >= MIN_POINTS_FOR_DISTRIBUTION)
                    & (p.inst_ids[rows, 0] > 0))
    slots, rows = slots[contributing], rows[contributing]
    if not len(slots):
        return []

    means, covariances = distributions_from_statistics(g.n[slots], g.mean[slots], g.m2[slots])
    footprints = renderer.footprints(means, covariances)
    pixels, winners = renderer.front_most(footprints, g.codes[slots])
    if not len(pixels):
        return []

    ids = p.inst_ids[rows]
    keep = top_z_mask(ids, p.inst_mass[rows], theta_b)
    owner, entry = np.nonzero(keep[winners])
    mask_ids = ids[winners[owner], entry]
    mask_pixels = pixels[owner]

    shape = renderer.intr.shape
    masks = []
    for global_id in np.unique(mask_ids).tolist():
        raster = np.zeros(shape, dtype=bool)
        raster.flat[mask_pixels[mask_ids == global_id]] = True
        masks.append(InstanceMask(global_id=global_id, mask=raster))
    logger.debug(f"Built {len(masks)} instance mask(s) from {len(slots)} voxel(s)")
    return masks


def compute_iou(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """Jaccard index of two boolean rasters, 0 for an empty union"""
    if mask_a.shape != mask_b.shape:
        raise ValueError(f"mask shapes differ: {mask_a.shape} vs {mask_b.shape}")
    union = np.count_nonzero(mask_a | mask_b)
    if union == 0:
        return 0.0
    return np.count_nonzero(mask_a & mask_b) / union


def match_instances(masks: List[InstanceMask], instance_raster: np.ndarray, theta_m: float,
                    theta_n: float, alloc: Callable[[], int],
                    frame_index: int = 0, trace: bool = False) -> Dict[int, MatchDecision]:
    """
    Resolve every frame-local instance of a merged instance raster.

    Best IoU above theta_m matches the map instance with that IoU (lowest
    global id on ties); at or below theta_n allocates one new global id per
    local id; anything in between is ignored for this frame. Several local
    instances may match the same map instance.
    """
    if theta_m < theta_n:
        raise ValueError(f"theta_m ({theta_m}) must be >= theta_n ({theta_n})")
    masks = sorted(masks, key=lambda m: m.global_id)
    decisions: Dict[int, MatchDecision] = {}
    for local_id in np.unique(instance_raster[instance_raster > 0]).tolist():
        local_mask = instance_raster == local_id
        ious = np.array([compute_iou(m.mask, local_mask) for m in masks])
        best = int(np.argmax(ious)) if len(ious) else -1
        best_iou = float(ious[best]) if len(ious) else 0.0

        if best_iou > theta_m:
            decision = MatchDecision(local_id=local_id, outcome=MatchOutcome.MATCHED,
                                     global_id=masks[best].global_id, best_iou=best_iou)
        elif best_iou <= theta_n:
            decision = MatchDecision(local_id=local_id, outcome=MatchOutcome.NEW,
                                     global_id=alloc(), best_iou=best_iou)
        else:
            decision = MatchDecision(local_id=local_id, outcome=MatchOutcome.IGNORED,
                                     best_iou=best_iou)
        decisions[local_id] = decision
        if trace:
            trace_logger.info(f"frame={frame_index} local={local_id} outcome={decision.outcome.value} "
                              f"global={decision.global_id} iou={best_iou:.6f}")
    return decisions


def alloc_global_id(pmap: PanopticMap) -> int:
    return pmap.alloc_global_id()
