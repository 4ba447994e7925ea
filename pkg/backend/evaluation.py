"""
Scoring of panoptic maps against ground truth.

2D evaluation renders the map into every annotated camera and compares label
rasters; 3D evaluation assigns every ground-truth point the label of the best
matching voxel. Both accumulate one global set of statistics and score once:
mIoU on the semantic-only labels, mIoU_P on the class channel of the panoptic
labels, PQ/SQ/RQ on panoptic segments and AP50 on instances.
"""
import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
from scipy import ndimage

from label_propagation import labels_for_slots
from models import GARBAGE_BASE, OFFSET, ClassTable, EvalReport, GroundTruthCloud, VOID_CLASS
from ndt_map import (MIN_POINTS_FOR_DISTRIBUTION, PanopticMap, distributions_from_statistics,
                     morton_encode, voxel_indices)
from panoptic_frame import PanopticFrame
from renderer import ProjectionRenderer, render_view

logger = logging.getLogger(__name__)

MATCH_IOU = 0.5
MATCH_CHUNK = 8192              # Points per Mahalanobis batch; temporaries take about 5 kB per point
UNKNOWN = -1

# Face, edge and corner neighbors plus the voxel itself
NEIGHBOR_OFFSETS = np.array([(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)])


# Semantic scores

def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """Rows ground truth, columns prediction; void ground truth is excluded"""
    pred = np.asarray(pred, dtype=np.int64).ravel()
    gt = np.asarray(gt, dtype=np.int64).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"prediction and ground truth differ in size: {pred.shape} vs {gt.shape}")
    pred = np.where(pred < 0, VOID_CLASS, pred)
    scored = gt != VOID_CLASS
    return np.bincount(gt[scored] * num_classes + pred[scored],
                       minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def iou_from_confusion(confusion: np.ndarray) -> Tuple[Dict[int, float], float]:
    """
    Per-class IoU for every class present in ground truth, and their mean.

    Predicted void is a false negative of the ground-truth class and never a
    false positive.
    """
    tp = np.diag(confusion).astype(np.float64)
    fn = confusion.sum(axis=1) - tp
    fp = confusion.sum(axis=0) - tp
    present = np.flatnonzero(confusion.sum(axis=1) > 0)
    present = present[present != VOID_CLASS]
    class_iou = {int(c): float(tp[c] / (tp[c] + fp[c] + fn[c])) for c in present}
    miou = float(np.mean(list(class_iou.values()))) if class_iou else 0.0
    return class_iou, miou


def semantic_miou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> Tuple[Dict[int, float], float]:
    return iou_from_confusion(confusion_matrix(pred, gt, num_classes))


# Panoptic segments

def garbage_components_2d(classes: np.ndarray, instances: np.ndarray,
                          thing_mask: np.ndarray) -> np.ndarray:
    """Connected-region label (from 1) of thing pixels without an instance, 0 elsewhere"""
    components = np.zeros(classes.shape, dtype=np.int64)
    garbage = thing_mask[classes] & (instances == 0)
    for class_id in np.unique(classes[garbage]).tolist():
        labeled, _ = ndimage.label(garbage & (classes == class_id))
        components = np.where(labeled > 0, labeled, components)
    return components


def garbage_components_3d(classes: np.ndarray, instances: np.ndarray, lattice: np.ndarray,
                          thing_mask: np.ndarray) -> np.ndarray:
    """Connected regions of garbage elements over 26-connected lattice cells"""
    components = np.zeros(len(classes), dtype=np.int64)
    garbage = thing_mask[classes] & (instances == 0)
    for class_id in np.unique(classes[garbage]).tolist():
        members = np.flatnonzero(garbage & (classes == class_id))
        cells, inverse = np.unique(lattice[members], axis=0, return_inverse=True)
        origin = cells.min(axis=0)
        grid = np.zeros(tuple(cells.max(axis=0) - origin + 1), dtype=bool)
        local = cells - origin
        grid[local[:, 0], local[:, 1], local[:, 2]] = True
        labeled, _ = ndimage.label(grid, structure=np.ones((3, 3, 3)))
        components[members] = labeled[local[:, 0], local[:, 1], local[:, 2]][inverse.reshape(-1)]
    return components


def segment_keys(classes: np.ndarray, instances: np.ndarray, thing_mask: np.ndarray,
                 components: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Segment id of every element, -1 for void.

    Stuff classes form one segment per class. Thing elements with an instance
    belong to that instance; without one they belong to their garbage region.
    """
    classes = np.asarray(classes, dtype=np.int64)
    instances = np.asarray(instances, dtype=np.int64)
    keys = classes * OFFSET
    is_thing = thing_mask[classes]
    if np.any(instances[is_thing] >= GARBAGE_BASE):
        raise ValueError(f"instance ids must be < {GARBAGE_BASE}")
    keys = np.where(is_thing & (instances > 0), keys + instances, keys)
    if components is not None:
        keys = np.where(is_thing & (instances == 0), keys + GARBAGE_BASE + components, keys)
    return np.where(classes == VOID_CLASS, UNKNOWN, keys)


class PQStatCat:
    """Accumulated matching statistics of one class"""

    def __init__(self):
        self.iou = 0.0
        self.tp = 0
        self.fp = 0
        self.fn = 0

    def __iadd__(self, other: "PQStatCat") -> "PQStatCat":
        self.iou += other.iou
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self

    @property
    def denominator(self) -> float:
        return self.tp + 0.5 * self.fp + 0.5 * self.fn

    def scores(self) -> Tuple[float, float, float]:
        """(PQ, SQ, RQ); PQ is computed as SQ * RQ"""
        sq = self.iou / self.tp if self.tp else 0.0
        rq = self.tp / self.denominator if self.denominator else 0.0
        return sq * rq, sq, rq


class PQStat:
    def __init__(self):
        self.pq_per_cat: Dict[int, PQStatCat] = defaultdict(PQStatCat)

    def __getitem__(self, class_id: int) -> PQStatCat:
        return self.pq_per_cat[class_id]

    def __iadd__(self, other: "PQStat") -> "PQStat":
        for class_id, stat in other.pq_per_cat.items():
            self.pq_per_cat[class_id] += stat
        return self

    def pq_average(self, class_ids: Optional[Iterable[int]] = None) -> Tuple[float, float, float]:
        """Mean PQ/SQ/RQ over classes that occurred; 0 for an empty selection"""
        selected = self.pq_per_cat.keys() if class_ids is None else set(class_ids)
        scores = [self.pq_per_cat[c].scores() for c in sorted(selected)
                  if c in self.pq_per_cat and self.pq_per_cat[c].denominator > 0]
        if not scores:
            return 0.0, 0.0, 0.0
        pq, sq, rq = np.mean(np.array(scores), axis=0)
        return float(pq), float(sq), float(rq)

    def per_class(self) -> Dict[int, Tuple[float, float, float]]:
        return {c: stat.scores() for c, stat in sorted(self.pq_per_cat.items()) if stat.denominator > 0}


def _overlaps(pred_keys: np.ndarray, gt_keys: np.ndarray):
    """Unique segments of both sides with areas and pairwise intersections"""
    pred_ids, pred_inverse, pred_area = np.unique(pred_keys, return_inverse=True, return_counts=True)
    gt_ids, gt_inverse, gt_area = np.unique(gt_keys, return_inverse=True, return_counts=True)
    joint = gt_inverse.reshape(-1) * len(pred_ids) + pred_inverse.reshape(-1)
    pairs, intersection = np.unique(joint, return_counts=True)
    gt_index, pred_index = np.divmod(pairs, len(pred_ids))
    return pred_ids, pred_area, gt_ids, gt_area, gt_index, pred_index, intersection


def pq_compute_single(pred_keys: np.ndarray, gt_keys: np.ndarray) -> PQStat:
    """
    Match segments of one sample.

    A pair matches when both share a class and IoU > 0.5; prediction area lying
    on void ground truth is left out of the union. Every unmatched prediction
    is a false positive and every unmatched ground-truth segment a false negative.
    """
    pred_keys = np.asarray(pred_keys, dtype=np.int64).ravel()
    gt_keys = np.asarray(gt_keys, dtype=np.int64).ravel()
    stat = PQStat()
    pred_ids, pred_area, gt_ids, gt_area, gt_index, pred_index, intersection = _overlaps(pred_keys, gt_keys)

    void_overlap = np.zeros(len(pred_ids), dtype=np.int64)
    on_void = gt_ids[gt_index] == UNKNOWN
    void_overlap[pred_index[on_void]] = intersection[on_void]

    pred_matched = np.zeros(len(pred_ids), dtype=bool)
    gt_matched = np.zeros(len(gt_ids), dtype=bool)
    for g, p, inter in zip(gt_index.tolist(), pred_index.tolist(), intersection.tolist()):
        gt_key, pred_key = gt_ids[g], pred_ids[p]
        if gt_key == UNKNOWN or pred_key == UNKNOWN or gt_key // OFFSET != pred_key // OFFSET:
            continue
        union = pred_area[p] + gt_area[g] - inter - void_overlap[p]
        iou = inter / union
        if iou > MATCH_IOU:
            # IoU > 0.5 makes matches unique
            assert not pred_matched[p] and not gt_matched[g]
            class_id = int(gt_key // OFFSET)
            stat[class_id].tp += 1
            stat[class_id].iou += iou
            pred_matched[p] = gt_matched[g] = True

    for g, gt_key in enumerate(gt_ids.tolist()):
        if gt_key != UNKNOWN and not gt_matched[g]:
            stat[gt_key // OFFSET].fn += 1
    for p, pred_key in enumerate(pred_ids.tolist()):
        if pred_key != UNKNOWN and not pred_matched[p]:
            stat[pred_key // OFFSET].fp += 1
    return stat


def panoptic_quality(pred_keys: np.ndarray, gt_keys: np.ndarray) -> Tuple[Dict[int, Tuple[float, float, float]],
                                                                            Tuple[float, float, float]]:
    """Per-class and mean (PQ, SQ, RQ) of one segmentation pair"""
    stat = pq_compute_single(pred_keys, gt_keys)
    return stat.per_class(), stat.pq_average()


# Instance detection

class APAccumulator:
    """Greedy IoU >= 0.5 detection matching pooled over samples, scored per class"""

    def __init__(self):
        self.detections: Dict[int, List[Tuple[float, int, bool]]] = defaultdict(list)
        self.num_gt: Dict[int, int] = defaultdict(int)
        self._order = 0

    def add(self, pred_keys: np.ndarray, gt_keys: np.ndarray, confidences: Dict[int, float]):
        """
        Register one sample.

        Args:
            pred_keys: Instance segment id per element (class * OFFSET + id), -1 elsewhere
            gt_keys: Same for ground truth
            confidences: Confidence of every predicted segment id
        """
        pred_ids, pred_area, gt_ids, gt_area, gt_index, pred_index, intersection = \
            _overlaps(np.asarray(pred_keys).ravel(), np.asarray(gt_keys).ravel())
        iou = np.zeros((len(gt_ids), len(pred_ids)))
        iou[gt_index, pred_index] = intersection / (gt_area[gt_index] + pred_area[pred_index] - intersection)

        real_gt = gt_ids != UNKNOWN
        for gt_key in gt_ids[real_gt].tolist():
            self.num_gt[gt_key // OFFSET] += 1

        predictions = []
        for p, pred_key in enumerate(pred_ids.tolist()):
            if pred_key == UNKNOWN:
                continue
            if pred_key not in confidences:
                raise ValueError(f"predicted instance {pred_key % OFFSET} has no confidence")
            predictions.append((-confidences[pred_key], pred_key, p))
        gt_taken = np.zeros(len(gt_ids), dtype=bool)
        for negative_confidence, pred_key, p in sorted(predictions):
            class_id = pred_key // OFFSET
            candidates = real_gt & ~gt_taken & (gt_ids // OFFSET == class_id) & (iou[:, p] >= MATCH_IOU)
            hit = bool(np.any(candidates))
            if hit:
                gt_taken[np.argmax(np.where(candidates, iou[:, p], -1.0))] = True
            self.detections[class_id].append((-negative_confidence, self._order, hit))
            self._order += 1

    def average_precision(self) -> Dict[int, float]:
        """All-point interpolated AP for every class with ground truth"""
        result = {}
        for class_id, num_gt in sorted(self.num_gt.items()):
            detections = sorted(self.detections.get(class_id, []), key=lambda d: (-d[0], d[1]))
            result[class_id] = _interpolated_ap(np.array([d[2] for d in detections], dtype=bool), num_gt)
        return result


def _interpolated_ap(hits: np.ndarray, num_gt: int) -> float:
    if num_gt == 0 or not len(hits):
        return 0.0
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision_50(pred_keys: np.ndarray, gt_keys: np.ndarray,
                         confidences: Dict[int, float]) -> Tuple[Dict[int, float], float]:
    """AP50 per thing class present in ground truth, and their mean"""
    accumulator = APAccumulator()
    accumulator.add(pred_keys, gt_keys, confidences)
    per_class = accumulator.average_precision()
    return per_class, float(np.mean(list(per_class.values()))) if per_class else 0.0


def instance_keys(classes: np.ndarray, instances: np.ndarray, thing_mask: np.ndarray) -> np.ndarray:
    classes = np.asarray(classes, dtype=np.int64)
    instances = np.asarray(instances, dtype=np.int64)
    real = thing_mask[classes] & (instances > 0)
    return np.where(real, classes * OFFSET + instances, UNKNOWN)


def instance_confidences(pmap: PanopticMap) -> Dict[int, float]:
    """Total histogram mass of each global id across the map, scaled so the largest is 1"""
    p = pmap.payload
    ids = p.inst_ids[:pmap.payload_size].ravel()
    masses = p.inst_mass[:pmap.payload_size].ravel()
    present = ids > 0
    if not np.any(present):
        return {}
    totals = np.bincount(ids[present], weights=masses[present])
    found = np.flatnonzero(totals > 0)
    return {int(i): float(totals[i] / totals.max()) for i in found}


# Accumulation

class PanopticEvaluator:
    """Global accumulation of every metric over samples"""

    def __init__(self, table: ClassTable, mode: str):
        self.table = table
        self.mode = mode
        self.num_classes = table.num_classes
        self.thing_mask = table.thing_mask
        self.confusion = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        self.confusion_panoptic = np.zeros_like(self.confusion)
        self.pq_stat = PQStat()
        self.ap = APAccumulator()
        self.samples = 0
        self.matched = 0
        self.total = 0

    def add(self, pred_semantic: np.ndarray, pred_class: np.ndarray, pred_instance: np.ndarray,
            gt_class: np.ndarray, gt_instance: np.ndarray, confidences: Dict[int, float],
            pred_components: np.ndarray, gt_components: np.ndarray, samples: int = 1):
        self.confusion += confusion_matrix(pred_semantic, gt_class, self.num_classes)
        self.confusion_panoptic += confusion_matrix(pred_class, gt_class, self.num_classes)
        self.pq_stat += pq_compute_single(
            segment_keys(pred_class, pred_instance, self.thing_mask, pred_components),
            segment_keys(gt_class, gt_instance, self.thing_mask, gt_components))
        pred_instance_keys = instance_keys(pred_class, pred_instance, self.thing_mask)
        keyed = {int(k): confidences.get(int(k) % OFFSET) for k in np.unique(pred_instance_keys)
                 if k != UNKNOWN and int(k) % OFFSET in confidences}
        self.ap.add(pred_instance_keys, instance_keys(gt_class, gt_instance, self.thing_mask), keyed)
        self.samples += samples

    def report(self) -> EvalReport:
        name = self.table.name_of
        class_iou, miou = iou_from_confusion(self.confusion)
        class_iou_p, miou_p = iou_from_confusion(self.confusion_panoptic)
        per_class = self.pq_stat.per_class()
        pq, sq, rq = self.pq_stat.pq_average()
        pq_things = self.pq_stat.pq_average(self.table.thing_ids)[0]
        pq_stuff = self.pq_stat.pq_average(self.table.stuff_ids)[0]
        class_ap = self.ap.average_precision()
        return EvalReport(
            mode=self.mode,
            class_iou={name(c): v for c, v in class_iou.items()},
            miou=miou,
            class_iou_panoptic={name(c): v for c, v in class_iou_p.items()},
            miou_panoptic=miou_p,
            class_pq={name(c): s[0] for c, s in per_class.items()},
            class_sq={name(c): s[1] for c, s in per_class.items()},
            class_rq={name(c): s[2] for c, s in per_class.items()},
            pq=pq, sq=sq, rq=rq,
            pq_things=pq_things,
            pq_stuff=pq_stuff,
            class_ap50={name(c): v for c, v in class_ap.items()},
            ap50=float(np.mean(list(class_ap.values()))) if class_ap else 0.0,
            tp={name(c): s.tp for c, s in self.pq_stat.pq_per_cat.items()},
            fp={name(c): s.fp for c, s in self.pq_stat.pq_per_cat.items()},
            fn={name(c): s.fn for c, s in self.pq_stat.pq_per_cat.items()},
            matched_fraction=self.matched / self.total if self.total else None,
            samples=self.samples,
        )


def _frames_with_ground_truth(frames: Iterable[PanopticFrame]) -> List[PanopticFrame]:
    frames = list(frames)
    usable = [f for f in frames if f.has_ground_truth]
    if len(usable) < len(frames):
        logger.warning(f"⚠️  {len(frames) - len(usable)} frame(s) without ground truth skipped")
    return usable


def evaluate_2d(pmap: PanopticMap, frames: Iterable[PanopticFrame], k_sigma: float, max_depth: float,
                theta_st: float, theta_o: float) -> EvalReport:
    """Render the map into every annotated frame and score the label rasters"""
    evaluator = PanopticEvaluator(pmap.class_table, mode="2d")
    confidences = instance_confidences(pmap)
    thing_mask = pmap.class_table.thing_mask
    for frame in _frames_with_ground_truth(frames):
        renderer = ProjectionRenderer(frame.intr, frame.pose, k_sigma, max_depth)
        view = render_view(pmap, frame.intr, frame.pose, k_sigma, max_depth, theta_st, theta_o,
                           renderer=renderer)
        evaluator.add(
            pred_semantic=view.semantic,
            pred_class=view.panoptic_class,
            pred_instance=view.instance,
            gt_class=frame.gt_semantic,
            gt_instance=frame.gt_instance,
            confidences=confidences,
            pred_components=garbage_components_2d(view.panoptic_class, view.instance, thing_mask),
            gt_components=garbage_components_2d(frame.gt_semantic, frame.gt_instance, thing_mask),
        )
    report = evaluator.report()
    logger.info(f"📊 2D evaluation over {report.samples} frame(s): mIoU {report.miou:.4f}, "
                f"PQ {report.pq:.4f}, AP50 {report.ap50:.4f}")
    return report


def evaluate_inputs_2d(frames: Iterable[PanopticFrame], table: ClassTable) -> EvalReport:
    """
    Score the per-frame inputs themselves with the 2D metrics.

    The raw semantic raster feeds mIoU, the merged panoptic labels feed the
    other metrics. A local instance's confidence is its mean panoptic score.
    """
    evaluator = PanopticEvaluator(table, mode="input")
    thing_mask = table.thing_mask
    for frame in _frames_with_ground_truth(frames):
        merged_class, merged_instance = frame.merge(table)
        score = frame.panoptic_score()
        confidences = {}
        for local_id in np.unique(merged_instance[merged_instance > 0]).tolist():
            confidences[local_id] = float(np.mean(score[merged_instance == local_id]))
        evaluator.add(
            pred_semantic=frame.semantic,
            pred_class=merged_class,
            pred_instance=merged_instance,
            gt_class=frame.gt_semantic,
            gt_instance=frame.gt_instance,
            confidences=confidences,
            pred_components=garbage_components_2d(merged_class, merged_instance, thing_mask),
            gt_components=garbage_components_2d(frame.gt_semantic, frame.gt_instance, thing_mask),
        )
    return evaluator.report()


# 3D

@dataclass
class PointMatch:
    """Voxel assigned to each ground-truth point; slot -1 means unknown"""
    slot: np.ndarray
    distance: np.ndarray
    semantic: np.ndarray
    class_id: np.ndarray
    instance_id: np.ndarray

    @property
    def matched(self) -> np.ndarray:
        return self.slot >= 0


def _candidate_voxels(pmap: PanopticMap, theta_st: float, theta_o: float, require_shape: bool):
    """Sorted codes of candidate voxels with their slots and labels"""
    g = pmap.geometry
    slots = np.arange(len(pmap))
    rows = g.payload[slots]
    if require_shape:
        keep = g.n[slots] >= MIN_POINTS_FOR_DISTRIBUTION
    else:
        keep = rows >= 0
        keep[keep] = pmap.payload.n_sem[rows[keep]] > 0
    slots = slots[keep]
    semantic, class_id, instance_id = labels_for_slots(pmap, slots, theta_st, theta_o)
    codes = g.codes[slots]
    order = np.argsort(codes)
    return codes[order], slots[order], semantic[order], class_id[order], instance_id[order]


def _lookup(sorted_codes: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Position of each code in sorted_codes, -1 when absent"""
    if not len(sorted_codes):
        return np.full(codes.shape, -1, dtype=np.int64)
    position = np.clip(np.searchsorted(sorted_codes, codes), 0, len(sorted_codes) - 1)
    return np.where(sorted_codes[position] == codes, position, -1)


def match_points_3d(pmap: PanopticMap, points: np.ndarray, theta_st: float, theta_o: float,
                    matching: str = "mahalanobis", chunk: int = MATCH_CHUNK) -> PointMatch:
    """
    Assign every point the label of a map voxel.

    "mahalanobis" picks, among the containing voxel and its 26 neighbors with a
    valid distribution, the one with the smallest Mahalanobis distance.
    "voxel" takes the labeled voxel containing the point and ignores shape.
    """
    if matching not in ("mahalanobis", "voxel"):
        raise ValueError(f"matching must be 'mahalanobis' or 'voxel', got '{matching}'")
    if chunk < 1:
        raise ValueError(f"chunk ({chunk}) must be positive")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    codes, slots, semantic, class_id, instance_id = _candidate_voxels(
        pmap, theta_st, theta_o, require_shape=matching == "mahalanobis")

    best = np.full(len(points), -1, dtype=np.int64)
    distance = np.full(len(points), np.inf)
    cells = voxel_indices(points, pmap.voxel_size)
    if matching == "voxel":
        best = _lookup(codes, morton_encode(cells)) if len(points) else best
        distance = np.where(best >= 0, 0.0, np.inf)
    elif len(codes):
        g = pmap.geometry
        means, covariances = distributions_from_statistics(g.n[slots], g.mean[slots], g.m2[slots])
        precisions = np.linalg.inv(covariances)
        for start in range(0, len(points), chunk):
            part = slice(start, start + chunk)
            neighbors = cells[part, None, :] + NEIGHBOR_OFFSETS[None, :, :]
            found = _lookup(codes, morton_encode(neighbors.reshape(-1, 3)).reshape(-1, 27))
            candidate = np.where(found >= 0, found, 0)
            delta = points[part, None, :] - means[candidate]
            squared = np.einsum("nki,nkij,nkj->nk", delta, precisions[candidate], delta)
            squared = np.where(found >= 0, squared, np.inf)
            # Ties go to the lowest Morton code
            squared_order = np.lexsort((np.where(found >= 0, codes[candidate], np.iinfo(np.int64).max),
                                        squared), axis=1)[:, 0]
            rows = np.arange(len(found))
            nearest = found[rows, squared_order]
            best[part] = nearest
            distance[part] = np.sqrt(np.maximum(squared[rows, squared_order], 0.0))

    matched = best >= 0
    take = np.where(matched, best, 0)

    def pick(values: np.ndarray, fill: int) -> np.ndarray:
        if not len(values):
            return np.full(len(points), fill, dtype=np.int64)
        return np.where(matched, values[take], fill)

    return PointMatch(slot=pick(slots, -1), distance=distance, semantic=pick(semantic, VOID_CLASS),
                      class_id=pick(class_id, VOID_CLASS), instance_id=pick(instance_id, 0))


def evaluate_3d(pmap: PanopticMap, cloud: GroundTruthCloud, theta_st: float, theta_o: float,
                matching: str = "mahalanobis", chunk: int = MATCH_CHUNK) -> EvalReport:
    """Score the map labels at ground-truth points"""
    match = match_points_3d(pmap, cloud.points, theta_st, theta_o, matching=matching, chunk=chunk)
    thing_mask = pmap.class_table.thing_mask
    evaluator = PanopticEvaluator(pmap.class_table, mode="3d")
    # Garbage regions are grouped on the map lattice: predictions by their voxel
    predicted_cells = np.where(match.matched[:, None], pmap.indices(np.maximum(match.slot, 0)),
                               voxel_indices(cloud.points, pmap.voxel_size)) \
        if len(cloud) else np.empty((0, 3), dtype=np.int64)
    gt_cells = voxel_indices(cloud.points, pmap.voxel_size)
    evaluator.add(
        pred_semantic=match.semantic,
        pred_class=match.class_id,
        pred_instance=match.instance_id,
        gt_class=cloud.class_id,
        gt_instance=cloud.instance_id,
        confidences=instance_confidences(pmap),
        pred_components=garbage_components_3d(match.class_id, match.instance_id, predicted_cells, thing_mask),
        gt_components=garbage_components_3d(cloud.class_id, cloud.instance_id, gt_cells, thing_mask),
        samples=len(cloud),
    )
    evaluator.matched = int(np.count_nonzero(match.matched))
    evaluator.total = len(cloud)
    report = evaluator.report()
    logger.info(f"📊 3D evaluation over {len(cloud)} point(s): matched {report.matched_fraction or 0:.4f}, "
                f"mIoU {report.miou:.4f}, PQ {report.pq:.4f}, AP50 {report.ap50:.4f}")
    return report
