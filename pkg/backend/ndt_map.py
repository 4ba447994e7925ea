"""
Occupancy NDT voxel map.

Voxels live on a lattice anchored at the world origin (floor indexing). The
octree is addressed implicitly: every voxel index is interleaved into a 63-bit
Morton code, so a code's parent cell is `code >> 3` and lookups go through a
single hash map from code to storage slot.

Storage is struct-of-arrays. Geometry (shape statistics and occupancy) exists
for every voxel; the panoptic payload (histograms, counters, cached label) is
allocated on first histogram write, so free-space voxels stay small.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, NamedTuple, Optional, Tuple

import numpy as np

from histograms import InstanceHistogram, MAX_INSTANCE_ENTRIES, SemanticHistogram, stuff_mass
from models import ClassTable, PanopticLabel3D

logger = logging.getLogger(__name__)

# Occupancy log-odds increments and clamping bounds
L_OCC = 0.85
L_FREE = -0.4
LOGODDS_MIN = -2.0
LOGODDS_MAX = 3.5

MIN_POINTS_FOR_DISTRIBUTION = 3
COV_EPSILON = 1e-6   # m², added at query time only

MORTON_BITS = 21
MORTON_OFFSET = 1 << (MORTON_BITS - 1)
MORTON_LIMIT = 1 << MORTON_BITS

# Upper triangle order of the stored scatter matrix
TRIU_ROWS = np.array([0, 0, 0, 1, 1, 2])
TRIU_COLS = np.array([0, 1, 2, 1, 2, 2])


class VoxelIndex(NamedTuple):
    ix: int
    iy: int
    iz: int


def voxel_index(point: np.ndarray, voxel_size: float) -> VoxelIndex:
    """Lattice cell containing a point (per-axis floor division)"""
    if voxel_size <= 0:
        raise ValueError(f"voxel_size must be > 0, got {voxel_size}")
    point = np.asarray(point, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(point)):
        raise ValueError(f"point must be finite, got {point}")
    return VoxelIndex(*(int(i) for i in voxel_indices(point[None], voxel_size)[0]))


def voxel_indices(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """Vectorized voxel_index for (N, 3) points"""
    return np.floor(np.asarray(points, dtype=np.float64) / voxel_size).astype(np.int64)


def voxel_center(index, voxel_size: float) -> np.ndarray:
    return (np.asarray(index, dtype=np.float64) + 0.5) * voxel_size


def _spread_bits(values: np.ndarray) -> np.ndarray:
    x = values.astype(np.uint64) & np.uint64(0x1FFFFF)
    x = (x | (x << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    x = (x | (x << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    x = (x | (x << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    x = (x | (x << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    x = (x | (x << np.uint64(2))) & np.uint64(0x1249249249249249)
    return x


def _compact_bits(values: np.ndarray) -> np.ndarray:
    x = values & np.uint64(0x1249249249249249)
    x = (x | (x >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    x = (x | (x >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    x = (x | (x >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    x = (x | (x >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    x = (x | (x >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return x


def morton_encode(indices: np.ndarray) -> np.ndarray:
    """Interleave (N, 3) signed voxel indices into Morton codes"""
    indices = np.atleast_2d(np.asarray(indices, dtype=np.int64))
    shifted = indices + MORTON_OFFSET
    if np.any(shifted < 0) or np.any(shifted >= MORTON_LIMIT):
        raise ValueError(f"voxel index outside the addressable range ±{MORTON_OFFSET}")
    code = (_spread_bits(shifted[:, 0])
            | (_spread_bits(shifted[:, 1]) << np.uint64(1))
            | (_spread_bits(shifted[:, 2]) << np.uint64(2)))
    return code.astype(np.int64)


def morton_decode(codes: np.ndarray) -> np.ndarray:
    codes = np.atleast_1d(np.asarray(codes, dtype=np.int64)).astype(np.uint64)
    indices = np.column_stack([_compact_bits(codes),
                               _compact_bits(codes >> np.uint64(1)),
                               _compact_bits(codes >> np.uint64(2))]).astype(np.int64)
    return indices - MORTON_OFFSET


def parent_code(code: int, levels: int = 1) -> int:
    """Morton code of the enclosing octree cell `levels` levels up"""
    return int(code) >> (3 * levels)


@dataclass
class NdtShape:
    """
    Running statistics of the points inside a voxel.

    Kept as count, centroid and scatter matrix M2 = Σ(p − μ)(p − μ)ᵀ, so the
    covariance never subtracts large raw moments far from the origin.
    """
    n: int = 0
    centroid: np.ndarray = field(default_factory=lambda: np.zeros(3))
    m2: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))

    @property
    def is_valid(self) -> bool:
        return self.n >= MIN_POINTS_FOR_DISTRIBUTION

    @property
    def mean(self) -> Optional[np.ndarray]:
        return self.centroid.copy() if self.n > 0 else None

    @property
    def covariance(self) -> Optional[np.ndarray]:
        """Sample covariance, undefined below two points"""
        if self.n < 2:
            return None
        return self.m2 / (self.n - 1)

    def add(self, point: np.ndarray) -> "NdtShape":
        """Welford update with one point"""
        self.n += 1
        delta = point - self.centroid
        self.centroid = self.centroid + delta / self.n
        self.m2 = self.m2 + np.outer(delta, delta) * ((self.n - 1) / self.n)
        return self


@dataclass
class Occupancy:
    logodds: float = 0.0

    def update(self, delta: float) -> "Occupancy":
        self.logodds = float(np.clip(self.logodds + delta, LOGODDS_MIN, LOGODDS_MAX))
        return self


@dataclass
class NdtVoxel:
    """Snapshot of one voxel's state"""
    index: VoxelIndex
    voxel_size: float
    shape: NdtShape
    occ: Occupancy
    sem: SemanticHistogram
    inst: InstanceHistogram
    n_sem: int = 0     # Number of semantic increments applied
    n_inst: int = 0    # Number of instance increments applied
    cached_label: Optional[Tuple[PanopticLabel3D, int]] = None

    @classmethod
    def empty(cls, index, voxel_size: float, class_table: ClassTable) -> "NdtVoxel":
        return cls(index=VoxelIndex(*index), voxel_size=voxel_size, shape=NdtShape(),
                   occ=Occupancy(), sem=SemanticHistogram.empty(class_table.stuff_mask),
                   inst=InstanceHistogram())

    def contains(self, point: np.ndarray) -> bool:
        cell = voxel_indices(np.asarray(point, dtype=np.float64)[None], self.voxel_size)[0]
        return bool(np.all(cell == np.asarray(self.index)))


def integrate_point(voxel: NdtVoxel, point: np.ndarray) -> NdtVoxel:
    """Add one point to the voxel's shape statistics"""
    point = np.asarray(point, dtype=np.float64).reshape(3)
    if not voxel.contains(point):
        raise ValueError(f"point {point} lies outside voxel {tuple(voxel.index)}")
    voxel.shape.add(point)
    return voxel


def voxel_distribution(voxel: NdtVoxel) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """Mean and regularized covariance, None below the minimum point count"""
    if not voxel.shape.is_valid:
        return None
    return voxel.shape.mean, voxel.shape.covariance + COV_EPSILON * np.eye(3)


def unpack_scatter(m2: np.ndarray) -> np.ndarray:
    """(..., 6) upper triangles to symmetric (..., 3, 3) matrices"""
    m2 = np.asarray(m2, dtype=np.float64)
    full = np.empty(m2.shape[:-1] + (3, 3))
    full[..., TRIU_ROWS, TRIU_COLS] = m2
    full[..., TRIU_COLS, TRIU_ROWS] = m2
    return full


def distributions_from_statistics(n: np.ndarray, means: np.ndarray,
                                  m2: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized mean and regularized covariance from (N,), (N, 3), (N, 6) statistics"""
    n = n.astype(np.float64)
    covariances = unpack_scatter(m2) / (n - 1.0)[:, None, None]
    covariances += COV_EPSILON * np.eye(3)
    return np.array(means, dtype=np.float64), covariances


class _GrowableArrays:
    """Named numpy arrays sharing a leading dimension that doubles on demand"""

    def __init__(self, specs: Dict[str, Tuple[tuple, np.dtype, float]], capacity: int):
        self._specs = specs
        self.capacity = capacity
        for name, (tail, dtype, fill) in specs.items():
            setattr(self, name, np.full((capacity,) + tail, fill, dtype=dtype))

    def reserve(self, size: int):
        if size <= self.capacity:
            return
        capacity = max(size, 2 * self.capacity)
        for name, (tail, dtype, fill) in self._specs.items():
            old = getattr(self, name)
            new = np.full((capacity,) + tail, fill, dtype=dtype)
            new[:self.capacity] = old
            setattr(self, name, new)
        self.capacity = capacity


class PanopticMap:
    """Octree-addressed store of occupancy NDT voxels with panoptic payloads"""

    def __init__(self, voxel_size: float, class_table: ClassTable, initial_capacity: int = 4096):
        if voxel_size <= 0:
            raise ValueError(f"voxel_size must be > 0, got {voxel_size}")
        self.voxel_size = float(voxel_size)
        self.class_table = class_table
        self.stuff_mask = class_table.stuff_mask
        self.thing_mask = class_table.thing_mask
        self.next_global_id = 1
        self.frame_counter = 0

        self._lookup: Dict[int, int] = {}
        self.size = 0
        self.payload_size = 0
        self.geometry = _GrowableArrays({
            "codes": ((), np.int64, 0),
            "n": ((), np.int64, 0),
            "mean": ((3,), np.float64, 0.0),
            "m2": ((6,), np.float64, 0.0),
            "logodds": ((), np.float64, 0.0),
            "payload": ((), np.int64, -1),
        }, initial_capacity)
        num_classes = class_table.num_classes
        self.payload = _GrowableArrays({
            "slot": ((), np.int64, -1),
            "sem": ((num_classes,), np.float64, 0.0),
            "sem_total": ((), np.float64, 0.0),
            "sem_stuff": ((), np.float64, 0.0),
            "inst_ids": ((MAX_INSTANCE_ENTRIES,), np.int64, 0),
            "inst_mass": ((MAX_INSTANCE_ENTRIES,), np.float64, 0.0),
            "inst_total": ((), np.float64, 0.0),
            "n_sem": ((), np.int64, 0),
            "n_inst": ((), np.int64, 0),
            "label_semantic": ((), np.int64, 0),
            "label_class": ((), np.int64, 0),
            "label_instance": ((), np.int64, 0),
            "label_stamp": ((), np.int64, -1),
        }, max(16, initial_capacity // 4))
        self.label_params: Optional[Tuple[float, float]] = None

    def __len__(self) -> int:
        return self.size

    # Lookup

    def find_slot(self, index) -> Optional[int]:
        code = int(morton_encode(np.asarray(index, dtype=np.int64)[None])[0])
        return self._lookup.get(code)

    def find_node(self, point: np.ndarray) -> Optional[NdtVoxel]:
        """Voxel containing a point, None when not stored"""
        slot = self.find_slot(voxel_index(point, self.voxel_size))
        return None if slot is None else self.get_voxel_at(slot)

    def slots_for_codes(self, codes: np.ndarray, create: bool = False) -> np.ndarray:
        """Slots for Morton codes; -1 for missing codes unless create is set"""
        codes = np.asarray(codes, dtype=np.int64)
        unique, inverse = np.unique(codes, return_inverse=True)
        slots = np.empty(len(unique), dtype=np.int64)
        lookup = self._lookup
        if create:
            self.geometry.reserve(self.size + len(unique))
        for i, code in enumerate(unique.tolist()):
            slot = lookup.get(code)
            if slot is None:
                if not create:
                    slot = -1
                else:
                    slot = self.size
                    lookup[code] = slot
                    self.geometry.codes[slot] = code
                    self.size += 1
            slots[i] = slot
        return slots[inverse.reshape(-1)]

    def slots_for_points(self, points: np.ndarray, create: bool = False) -> np.ndarray:
        return self.slots_for_codes(morton_encode(voxel_indices(points, self.voxel_size)), create)

    def indices(self, slots: Optional[np.ndarray] = None) -> np.ndarray:
        """Voxel indices (N, 3) of the given slots, all slots by default"""
        codes = self.geometry.codes[:self.size] if slots is None else self.geometry.codes[slots]
        return morton_decode(codes)

    def ensure_payload(self, slots: np.ndarray) -> np.ndarray:
        """Payload rows for the given slots, allocating missing ones"""
        slots = np.asarray(slots, dtype=np.int64)
        payload = self.geometry.payload[slots]
        missing = np.unique(slots[payload < 0])
        if len(missing):
            start = self.payload_size
            self.payload.reserve(start + len(missing))
            rows = np.arange(start, start + len(missing))
            self.geometry.payload[missing] = rows
            self.payload.slot[rows] = missing
            self.payload_size += len(missing)
            payload = self.geometry.payload[slots]
        return payload

    # Voxel snapshots

    def get_voxel_at(self, slot: int) -> NdtVoxel:
        g = self.geometry
        voxel = NdtVoxel(
            index=VoxelIndex(*(int(i) for i in self.indices(np.array([slot]))[0])),
            voxel_size=self.voxel_size,
            shape=NdtShape(n=int(g.n[slot]), centroid=g.mean[slot].copy(), m2=unpack_scatter(g.m2[slot])),
            occ=Occupancy(float(g.logodds[slot])),
            sem=SemanticHistogram.empty(self.stuff_mask),
            inst=InstanceHistogram(),
        )
        row = int(g.payload[slot])
        if row >= 0:
            p = self.payload
            voxel.sem = SemanticHistogram(p.sem[row].copy(), self.stuff_mask)
            voxel.inst = InstanceHistogram(p.inst_ids[row].copy(), p.inst_mass[row].copy())
            voxel.n_sem = int(p.n_sem[row])
            voxel.n_inst = int(p.n_inst[row])
            if p.label_stamp[row] >= 0:
                label = PanopticLabel3D(class_id=int(p.label_class[row]),
                                        instance_id=int(p.label_instance[row]))
                voxel.cached_label = (label, int(p.label_stamp[row]))
        return voxel

    def get_voxel(self, index) -> Optional[NdtVoxel]:
        slot = self.find_slot(index)
        return None if slot is None else self.get_voxel_at(slot)

    def put_voxel(self, voxel: NdtVoxel) -> int:
        """Write a voxel snapshot back, creating the voxel if needed"""
        code = morton_encode(np.asarray(voxel.index, dtype=np.int64)[None])
        slot = int(self.slots_for_codes(code, create=True)[0])
        g = self.geometry
        g.n[slot] = voxel.shape.n
        g.mean[slot] = voxel.shape.centroid
        g.m2[slot] = voxel.shape.m2[TRIU_ROWS, TRIU_COLS]
        g.logodds[slot] = voxel.occ.logodds
        has_payload = voxel.n_sem or voxel.n_inst or voxel.sem.total > 0 or len(voxel.inst)
        if has_payload or g.payload[slot] >= 0:
            row = int(self.ensure_payload(np.array([slot]))[0])
            self.store_semantic_histogram(row, voxel.sem.masses)
            self.store_instance_histogram(row, voxel.inst)
            self.payload.n_sem[row] = voxel.n_sem
            self.payload.n_inst[row] = voxel.n_inst
            self.payload.label_stamp[row] = -1
        return slot

    # Payload helpers

    def store_semantic_histogram(self, row: int, masses: np.ndarray):
        self.payload.sem[row] = masses
        self.refresh_semantic_totals(np.array([row]))

    def refresh_semantic_totals(self, rows: np.ndarray):
        sem = self.payload.sem[rows]
        self.payload.sem_total[rows] = np.sum(sem, axis=-1)
        self.payload.sem_stuff[rows] = stuff_mass(sem, self.stuff_mask)

    def instance_histogram(self, row: int) -> InstanceHistogram:
        """Histogram over views of the stored row; mutate, then store it back"""
        return InstanceHistogram(self.payload.inst_ids[row], self.payload.inst_mass[row])

    def store_instance_histogram(self, row: int, histogram: InstanceHistogram):
        self.payload.inst_ids[row] = histogram.ids
        self.payload.inst_mass[row] = histogram.masses
        self.payload.inst_total[row] = histogram.total

    def invalidate_labels(self, rows: Optional[np.ndarray] = None):
        if rows is None:
            self.payload.label_stamp[:self.payload_size] = -1
        else:
            self.payload.label_stamp[rows] = -1

    def alloc_global_id(self) -> int:
        """Fresh globally unique instance id; never reused"""
        global_id = self.next_global_id
        self.next_global_id += 1
        return global_id

    def analytics(self) -> Dict[str, float]:
        g = self.geometry
        n = g.n[:self.size]
        return {
            "voxels": self.size,
            "surface_voxels": int(np.count_nonzero(n > 0)),
            "valid_distributions": int(np.count_nonzero(n >= MIN_POINTS_FOR_DISTRIBUTION)),
            "payload_voxels": self.payload_size,
            "occupied_voxels": int(np.count_nonzero(g.logodds[:self.size] > 0)),
            "instances_allocated": self.next_global_id - 1,
            "frames": self.frame_counter,
        }


def integrate_points(pmap: PanopticMap, points: np.ndarray,
                     slots: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Add (N, 3) points to the shape statistics of their voxels; returns slots.

    Each voxel's points form a batch whose centroid and scatter are taken
    relative to its first point, then merged into the stored statistics with
    the pairwise (Chan) combination.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if slots is None:
        slots = pmap.slots_for_points(points, create=True)
    if not len(points):
        return slots
    g = pmap.geometry
    touched, first, inverse, counts = np.unique(slots, return_index=True, return_inverse=True,
                                               return_counts=True)
    inverse = inverse.reshape(-1)
    batch_n = counts.astype(np.float64)

    anchor = points[first]
    offset = np.zeros((len(touched), 3))
    np.add.at(offset, inverse, points - anchor[inverse])
    batch_mean = anchor + offset / batch_n[:, None]
    centered = points - batch_mean[inverse]
    batch_m2 = np.zeros((len(touched), 6))
    np.add.at(batch_m2, inverse, centered[:, TRIU_ROWS] * centered[:, TRIU_COLS])

    old_n = g.n[touched].astype(np.float64)
    total = old_n + batch_n
    delta = batch_mean - g.mean[touched]
    g.mean[touched] = g.mean[touched] + delta * (batch_n / total)[:, None]
    g.m2[touched] = g.m2[touched] + batch_m2 \
        + delta[:, TRIU_ROWS] * delta[:, TRIU_COLS] * (old_n * batch_n / total)[:, None]
    g.n[touched] += counts
    return slots


def traverse_rays(origin: np.ndarray, endpoints: np.ndarray,
                  voxel_size: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Lattice traversal from the origin's voxel to each endpoint's voxel.

    Every step moves one face-neighbor toward the end voxel, choosing the axis
    whose boundary the ray crosses first.

    Returns:
        Tuple of (ray id per visited voxel, visited voxel indices (K, 3),
        flag marking each ray's last voxel); rows are grouped by step, not by ray
    """
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    endpoints = np.atleast_2d(np.asarray(endpoints, dtype=np.float64))
    num_rays = len(endpoints)
    start = voxel_indices(origin[None], voxel_size)[0]
    end = voxel_indices(endpoints, voxel_size)
    direction = endpoints - origin
    step = np.sign(end - start).astype(np.int64)

    boundary = (start + (step > 0)) * voxel_size
    with np.errstate(divide="ignore", invalid="ignore"):
        t_max = np.where(step != 0, (boundary - origin) / direction, np.inf)
        t_delta = np.where(step != 0, voxel_size / np.abs(direction), np.inf)

    remaining = np.abs(end - start)
    steps = remaining.sum(axis=1)
    current = np.tile(start, (num_rays, 1))
    ray_chunks = [np.arange(num_rays)]
    voxel_chunks = [current.copy()]
    active = np.flatnonzero(steps > 0)
    while len(active):
        candidate = np.where(remaining[active] > 0, t_max[active], np.inf)
        axis = np.argmin(candidate, axis=1)
        current[active, axis] += step[active, axis]
        t_max[active, axis] += t_delta[active, axis]
        remaining[active, axis] -= 1
        ray_chunks.append(active)
        voxel_chunks.append(current[active].copy())
        active = active[remaining[active].sum(axis=1) > 0]

    ray_ids = np.concatenate(ray_chunks)
    visited = np.concatenate(voxel_chunks)
    # The last visit of each ray is its end voxel
    is_last = np.zeros(len(ray_ids), dtype=bool)
    last_row = np.zeros(num_rays, dtype=np.int64)
    np.maximum.at(last_row, ray_ids, np.arange(len(ray_ids)))
    is_last[last_row] = True
    return ray_ids, visited, is_last


def integrate_rays(pmap: PanopticMap, origin: np.ndarray, endpoints: np.ndarray,
                   is_hit: np.ndarray, carve: Optional[np.ndarray] = None) -> Dict[str, int]:
    """
    Batch occupancy update for rays sharing one origin.

    Carved rays lower the log-odds of every traversed voxel except the end voxel
    of a hit; hit rays raise the log-odds of their end voxel. Each voxel is updated at most
    once per batch, voxels hit in this batch get no free-space update from it,
    and free updates are applied before hits.
    """
    endpoints = np.atleast_2d(np.asarray(endpoints, dtype=np.float64))
    is_hit = np.broadcast_to(np.asarray(is_hit, dtype=bool), (len(endpoints),))
    carve = np.ones(len(endpoints), dtype=bool) if carve is None else np.asarray(carve, dtype=bool)
    g = pmap.geometry

    hit_codes = morton_encode(voxel_indices(endpoints[is_hit], pmap.voxel_size)) \
        if np.any(is_hit) else np.empty(0, dtype=np.int64)

    freed = 0
    carved = np.flatnonzero(carve)
    if len(carved):
        ray_ids, visited, is_last = traverse_rays(origin, endpoints[carved], pmap.voxel_size)
        # Miss rays free their end voxel too
        free = ~is_last | ~is_hit[carved][ray_ids]
        free_codes = morton_encode(visited[free]) if np.any(free) else np.empty(0, np.int64)
        free_codes = np.setdiff1d(free_codes, hit_codes)
        if len(free_codes):
            slots = pmap.slots_for_codes(free_codes, create=True)
            g.logodds[slots] = np.clip(g.logodds[slots] + L_FREE, LOGODDS_MIN, LOGODDS_MAX)
            freed = len(free_codes)

    hit_codes = np.unique(hit_codes)
    if len(hit_codes):
        slots = pmap.slots_for_codes(hit_codes, create=True)
        g.logodds[slots] = np.clip(g.logodds[slots] + L_OCC, LOGODDS_MIN, LOGODDS_MAX)

    return {"free_voxels": freed, "hit_voxels": len(hit_codes)}


def update_occupancy(pmap: PanopticMap, origin: np.ndarray, endpoint: np.ndarray, is_hit: bool):
    """Single-ray occupancy update; a zero-length ray is a no-op"""
    origin = np.asarray(origin, dtype=np.float64)
    endpoint = np.asarray(endpoint, dtype=np.float64)
    if np.array_equal(origin, endpoint):
        return
    integrate_rays(pmap, origin, endpoint[None], np.array([is_hit]))
