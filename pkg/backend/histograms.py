"""Per-voxel semantic and instance histograms."""
from typing import List, Optional, Tuple

import numpy as np

MAX_INSTANCE_ENTRIES = 16


def stuff_mass(masses: np.ndarray, stuff_mask: np.ndarray) -> np.ndarray:
    """Mass on stuff classes; rows of (N, |L|) or a single (|L|,) histogram"""
    return np.sum(np.where(stuff_mask, masses, 0.0), axis=-1)


class SemanticHistogram:
    """Dense class histogram with cached total and stuff mass"""

    def __init__(self, masses: np.ndarray, stuff_mask: np.ndarray):
        self.masses = np.asarray(masses, dtype=np.float64)
        self.stuff_mask = np.asarray(stuff_mask, dtype=bool)
        if self.masses.shape != self.stuff_mask.shape:
            raise ValueError(
                f"histogram size {self.masses.shape} does not match class table {self.stuff_mask.shape}")
        self._refresh()

    @classmethod
    def empty(cls, stuff_mask: np.ndarray) -> "SemanticHistogram":
        return cls(np.zeros(len(stuff_mask)), stuff_mask)

    def _refresh(self):
        # Totals are always recomputed from the bins so they survive serialization bit-exactly
        self.total = float(np.sum(self.masses))
        self.stuff = float(stuff_mass(self.masses, self.stuff_mask))

    def add(self, class_id: int, mass: float) -> "SemanticHistogram":
        if mass <= 0:
            raise ValueError(f"mass must be > 0, got {mass}")
        self.masses[class_id] += mass
        self._refresh()
        return self

    def stuff_proportion(self) -> Optional[float]:
        """Share of mass on stuff classes; None for an empty histogram"""
        if self.total <= 0:
            return None
        return self.stuff / self.total

    def argmax(self, restrict: Optional[np.ndarray] = None) -> int:
        """Class with the largest mass, lowest id on ties"""
        masses = self.masses if restrict is None else np.where(restrict, self.masses, -np.inf)
        return int(np.argmax(masses))


class InstanceHistogram:
    """
    Sparse histogram of global instance ids.

    At most MAX_INSTANCE_ENTRIES (id, mass) pairs, sorted by mass descending with
    id ascending on ties. Unused slots hold id 0 and mass 0 at the tail.
    """

    def __init__(self, ids: Optional[np.ndarray] = None, masses: Optional[np.ndarray] = None):
        self.ids = np.zeros(MAX_INSTANCE_ENTRIES, dtype=np.int64) if ids is None else ids
        self.masses = np.zeros(MAX_INSTANCE_ENTRIES, dtype=np.float64) if masses is None else masses
        if self.ids.shape != (MAX_INSTANCE_ENTRIES,) or self.masses.shape != (MAX_INSTANCE_ENTRIES,):
            raise ValueError(f"instance histogram needs {MAX_INSTANCE_ENTRIES} slots")
        self.count = int(np.count_nonzero(self.ids))
        self.total = float(np.sum(self.masses[:self.count]))

    @classmethod
    def from_entries(cls, entries: List[Tuple[int, float]]) -> "InstanceHistogram":
        histogram = cls()
        for global_id, mass in entries:
            histogram.add(global_id, mass)
        return histogram

    def __len__(self) -> int:
        return self.count

    def __contains__(self, global_id: int) -> bool:
        return global_id > 0 and bool(np.any(self.ids[:self.count] == global_id))

    def entries(self) -> List[Tuple[int, float]]:
        return [(int(i), float(m)) for i, m in zip(self.ids[:self.count], self.masses[:self.count])]

    def mass_of(self, global_id: int) -> float:
        hits = np.flatnonzero(self.ids[:self.count] == global_id)
        return float(self.masses[hits[0]]) if len(hits) else 0.0

    def top(self) -> int:
        """Id with the largest mass (lowest id on ties), 0 when empty"""
        return int(self.ids[0]) if self.count else 0

    def add(self, global_id: int, mass: float) -> "InstanceHistogram":
        """Accumulate mass; a new id evicts the smallest entry when full"""
        if mass <= 0:
            raise ValueError(f"mass must be > 0, got {mass}")
        if global_id <= 0:
            raise ValueError(f"global id must be > 0, got {global_id}")
        hits = np.flatnonzero(self.ids[:self.count] == global_id)
        if len(hits):
            self.masses[hits[0]] += mass
        elif self.count < MAX_INSTANCE_ENTRIES:
            self.ids[self.count] = global_id
            self.masses[self.count] = mass
            self.count += 1
        else:
            # The tail is the minimum; evicted mass is forgotten
            self.ids[-1] = global_id
            self.masses[-1] = mass
        self._sort()
        return self

    def _sort(self):
        n = self.count
        order = np.lexsort((self.ids[:n], -self.masses[:n]))
        self.ids[:n] = self.ids[:n][order]
        self.masses[:n] = self.masses[:n][order]
        self.total = float(np.sum(self.masses[:n]))


def thing_flags(totals: np.ndarray, stuff: np.ndarray, theta_st: float) -> np.ndarray:
    """Stuff proportion strictly below theta_st; empty histograms are never things"""
    totals = np.asarray(totals, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        proportion = np.asarray(stuff, dtype=np.float64) / totals
    return (totals > 0) & (proportion < theta_st)


def hist_add(histogram: InstanceHistogram, global_id: int, mass: float) -> InstanceHistogram:
    """Add mass for a global id to an instance histogram"""
    return histogram.add(global_id, mass)


def top_z_mask(ids: np.ndarray, masses: np.ndarray, theta_b: float) -> np.ndarray:
    """
    Which entries of each (N, 16) histogram row are among the most relevant.

    Entries are ordered ascending by mass (id ascending on ties); an entry is kept
    when the cumulative share up to and including it reaches 1 - theta_b.
    """
    ids = np.atleast_2d(ids)
    masses = np.atleast_2d(masses)
    totals = masses.sum(axis=1, keepdims=True)
    # Empty slots sort first and add nothing to the cumulative sum
    order = np.lexsort((ids, masses), axis=-1)
    sorted_masses = np.take_along_axis(masses, order, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cumulative = np.cumsum(sorted_masses, axis=1) / totals
    keep_sorted = cumulative >= 1.0 - theta_b
    keep = np.zeros_like(keep_sorted)
    np.put_along_axis(keep, order, keep_sorted, axis=1)
    return keep & (ids > 0) & (totals > 0)
