"""One RGB-D panoptic observation and its 2D panoptic merge."""
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np

from geometry import Pose
from models import ClassEntry, ClassTable, Intrinsics, VOID_CLASS

logger = logging.getLogger(__name__)

SCORE_SCALE = 65535.0
DEPTH_SCALE = 1000.0   # Depth rasters store millimeters


@dataclass
class PanopticFrame:
    """
    Depth, label and score rasters of one view plus its camera.

    Depth is in meters with 0 or NaN marking invalid pixels. Missing score
    rasters mean constant 1.0 (ground-truth labels). Optional ground-truth
    rasters are carried for evaluation only.
    """
    depth: np.ndarray
    semantic: np.ndarray
    instance: np.ndarray
    pose: Pose
    intr: Intrinsics
    sem_score: Optional[np.ndarray] = None
    inst_score: Optional[np.ndarray] = None
    frame_index: int = 0
    gt_semantic: Optional[np.ndarray] = None
    gt_instance: Optional[np.ndarray] = None
    _merged: Dict[Tuple[ClassEntry, ...], Tuple[np.ndarray, np.ndarray]] = field(
        default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.semantic = np.asarray(self.semantic, dtype=np.int64)
        self.instance = np.asarray(self.instance, dtype=np.int64)
        if self.sem_score is None:
            self.sem_score = np.ones(self.intr.shape)
        if self.inst_score is None:
            self.inst_score = np.ones(self.intr.shape)
        self.sem_score = np.asarray(self.sem_score, dtype=np.float64)
        self.inst_score = np.asarray(self.inst_score, dtype=np.float64)

        rasters = {"depth": self.depth, "semantic": self.semantic, "instance": self.instance,
                   "sem_score": self.sem_score, "inst_score": self.inst_score}
        if self.gt_semantic is not None:
            self.gt_semantic = np.asarray(self.gt_semantic, dtype=np.int64)
            rasters["gt_semantic"] = self.gt_semantic
        if self.gt_instance is not None:
            self.gt_instance = np.asarray(self.gt_instance, dtype=np.int64)
            rasters["gt_instance"] = self.gt_instance
        for name, raster in rasters.items():
            if raster.shape != self.intr.shape:
                raise ValueError(
                    f"frame {self.frame_index}: {name} raster {raster.shape} does not match "
                    f"intrinsics {self.intr.shape}")
        for name in ("sem_score", "inst_score"):
            scores = rasters[name]
            if np.any(scores < 0) or np.any(scores > 1):
                raise ValueError(f"frame {self.frame_index}: {name} must lie within [0, 1]")
        if np.any(self.instance < 0):
            raise ValueError(f"frame {self.frame_index}: instance ids must be >= 0")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.intr.shape

    @property
    def has_ground_truth(self) -> bool:
        return self.gt_semantic is not None and self.gt_instance is not None

    def merge(self, table: ClassTable) -> Tuple[np.ndarray, np.ndarray]:
        """Merged (class, instance) rasters; computed once per distinct class table"""
        key = tuple(table.entries)
        if key not in self._merged:
            self._merged[key] = merge_panoptic(self.semantic, self.instance, table)
        return self._merged[key]

    def panoptic_score(self) -> np.ndarray:
        return panoptic_score(self.sem_score, self.inst_score)

    def quantized(self) -> "PanopticFrame":
        """Copy with depth and scores rounded to the dataset raster precision"""
        depth = np.where(np.isfinite(self.depth), self.depth, 0.0)
        depth = np.clip(np.round(depth * DEPTH_SCALE), 0, 65535) / DEPTH_SCALE
        return replace(self,
                       depth=depth,
                       sem_score=np.round(self.sem_score * SCORE_SCALE) / SCORE_SCALE,
                       inst_score=np.round(self.inst_score * SCORE_SCALE) / SCORE_SCALE,
                       _merged={})


def merge_panoptic(semantic: np.ndarray, instance: np.ndarray,
                   table: ClassTable) -> Tuple[np.ndarray, np.ndarray]:
    """
    Combine semantic and instance rasters into panoptic labels.

    Every instance takes the most frequent non-void class of its pixels (lowest
    class id on ties). Instances whose mode is a stuff class, or that cover only
    void pixels, are dissolved. Void pixels never join an instance.

    Returns:
        Tuple of (class raster, instance raster)
    """
    semantic = np.asarray(semantic, dtype=np.int64)
    instance = np.asarray(instance, dtype=np.int64)
    if semantic.shape != instance.shape:
        raise ValueError(f"semantic raster {semantic.shape} and instance raster {instance.shape} differ")
    num_classes = table.num_classes
    if semantic.size and (semantic.min() < 0 or semantic.max() >= num_classes):
        bad = semantic[(semantic < 0) | (semantic >= num_classes)]
        raise ValueError(f"unknown class id {int(bad[0])} for a table of {num_classes} classes")

    merged_class = semantic.copy()
    merged_instance = np.zeros_like(instance)

    member = (instance > 0) & (semantic != VOID_CLASS)
    if not np.any(member):
        return merged_class, merged_instance

    # Class histogram per instance, then the mode with lowest class id on ties
    keys = instance[member] * num_classes + semantic[member]
    pairs, counts = np.unique(keys, return_counts=True)
    pair_instance, pair_class = np.divmod(pairs, num_classes)
    order = np.lexsort((pair_class, -counts, pair_instance))
    first = np.unique(pair_instance[order], return_index=True)[1]
    mode_instance = pair_instance[order][first]
    mode_class = pair_class[order][first]

    kept = table.thing_mask[mode_class]
    if np.any(~kept):
        logger.debug(f"Dissolving {int(np.count_nonzero(~kept))} instance(s) with stuff mode")
    lookup_class = dict(zip(mode_instance[kept].tolist(), mode_class[kept].tolist()))
    if lookup_class:
        ids = np.fromiter(lookup_class.keys(), dtype=np.int64)
        classes = np.fromiter(lookup_class.values(), dtype=np.int64)
        position = np.searchsorted(ids, instance[member])
        position = np.clip(position, 0, len(ids) - 1)
        hit = ids[position] == instance[member]
        rows, cols = np.nonzero(member)
        merged_class[rows[hit], cols[hit]] = classes[position[hit]]
        merged_instance[rows[hit], cols[hit]] = instance[member][hit]
    return merged_class, merged_instance


def panoptic_score(sem_score: np.ndarray, inst_score: np.ndarray) -> np.ndarray:
    """Per-pixel confidence of the panoptic label"""
    sem_score = np.asarray(sem_score, dtype=np.float64)
    inst_score = np.asarray(inst_score, dtype=np.float64)
    for name, scores in (("sem_score", sem_score), ("inst_score", inst_score)):
        if np.any(scores < 0) or np.any(scores > 1):
            raise ValueError(f"{name} must lie within [0, 1]")
    return sem_score * inst_score
