"""
Binary map files and PLY export.

Map file layout, little endian:
    header   b"PNDT", u32 version, f64 voxel size, u32 class count,
             per class (u32 id, u8 kind, u16 name length, utf-8 name),
             u64 next global id, u64 voxel count
    voxel    3 x i64 index, u64 n, 3 x f64 mean, 6 x f64 upper-triangle scatter,
             f64 log-odds, u64 semantic count, u64 instance count,
             |L| x f64 semantic histogram, u8 entry count, entries (u64 id, f64 mass)

Voxels are written in Morton order, so saving a loaded map reproduces the
file byte for byte.
"""
import colorsys
import logging
import struct
from pathlib import Path
from typing import Tuple

import numpy as np
from plyfile import PlyData, PlyElement

from histograms import InstanceHistogram, MAX_INSTANCE_ENTRIES
from label_propagation import labels_for_slots
from models import ClassEntry, ClassKind, ClassTable, VOID_CLASS
from ndt_map import MIN_POINTS_FOR_DISTRIBUTION, PanopticMap, morton_encode

logger = logging.getLogger(__name__)

MAGIC = b"PNDT"
FORMAT_VERSION = 1
KIND_CODES = {ClassKind.STUFF: 0, ClassKind.THING: 1}
VOXEL_HEAD = struct.Struct("<3qQ3d6ddQQ")
ENTRY = struct.Struct("<Qd")
PLY_MODES = ("semantic", "instance", "panoptic")


class MapFormatError(ValueError):
    """Corrupt or unsupported map file"""

    def __init__(self, message: str, offset: int, record: int = -1):
        where = f"offset {offset}" if record < 0 else f"voxel record {record} at offset {offset}"
        super().__init__(f"{message} ({where})")
        self.offset = offset
        self.record = record


def _header_bytes(pmap: PanopticMap) -> bytes:
    parts = [MAGIC, struct.pack("<Id", FORMAT_VERSION, pmap.voxel_size),
             struct.pack("<I", pmap.class_table.num_classes)]
    for entry in pmap.class_table.entries:
        name = entry.name.encode("utf-8")
        parts.append(struct.pack("<IBH", entry.class_id, KIND_CODES[entry.kind], len(name)))
        parts.append(name)
    parts.append(struct.pack("<QQ", pmap.next_global_id, len(pmap)))
    return b"".join(parts)


def serialize_map(pmap: PanopticMap) -> bytes:
    g = pmap.geometry
    p = pmap.payload
    num_classes = pmap.class_table.num_classes
    empty_sem = np.zeros(num_classes)
    semantic = struct.Struct(f"<{num_classes}d")
    slots = np.arange(len(pmap))
    slots = slots[np.argsort(g.codes[:len(pmap)], kind="stable")]
    indices = pmap.indices(slots)

    parts = [_header_bytes(pmap)]
    for k, slot in enumerate(slots.tolist()):
        row = int(g.payload[slot])
        if row >= 0:
            n_sem, n_inst, sem = int(p.n_sem[row]), int(p.n_inst[row]), p.sem[row]
            histogram = InstanceHistogram(p.inst_ids[row].copy(), p.inst_mass[row].copy())
        else:
            n_sem, n_inst, sem, histogram = 0, 0, empty_sem, InstanceHistogram()
        parts.append(VOXEL_HEAD.pack(*indices[k].tolist(), int(g.n[slot]), *g.mean[slot].tolist(),
                                     *g.m2[slot].tolist(), float(g.logodds[slot]), n_sem, n_inst))
        parts.append(semantic.pack(*sem.tolist()))
        parts.append(struct.pack("<B", len(histogram)))
        for global_id, mass in histogram.entries():
            parts.append(ENTRY.pack(global_id, mass))
    return b"".join(parts)


def save_map(pmap: PanopticMap, path: Path) -> int:
    """Write the map; returns the number of bytes written"""
    data = serialize_map(pmap)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)
    logger.info(f"📁 Saved {len(pmap)} voxel(s) to {path} ({len(data)} bytes)")
    return len(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0
        self.record = -1

    def unpack(self, layout: struct.Struct, what: str) -> Tuple:
        end = self.offset + layout.size
        if end > len(self.data):
            raise MapFormatError(f"file truncated while reading {what}", self.offset, self.record)
        values = layout.unpack_from(self.data, self.offset)
        self.offset = end
        return values

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise MapFormatError(f"file truncated while reading {what}", self.offset, self.record)
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk


def deserialize_map(data: bytes) -> PanopticMap:
    reader = _Reader(data)
    if reader.take(4, "magic") != MAGIC:
        raise MapFormatError("not a map file (bad magic)", 0)
    version, voxel_size = reader.unpack(struct.Struct("<Id"), "version")
    if version != FORMAT_VERSION:
        raise MapFormatError(f"unsupported format version {version}, expected {FORMAT_VERSION}", 4)
    (num_classes,) = reader.unpack(struct.Struct("<I"), "class count")
    entries = []
    kinds = {code: kind for kind, code in KIND_CODES.items()}
    for _ in range(num_classes):
        start = reader.offset
        class_id, kind, length = reader.unpack(struct.Struct("<IBH"), "class entry")
        if kind not in kinds:
            raise MapFormatError(f"unknown class kind code {kind}", start)
        try:
            name = reader.take(length, "class name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise MapFormatError(f"class name is not utf-8: {e}", start) from e
        entries.append(ClassEntry(class_id=class_id, name=name, kind=kinds[kind]))
    try:
        table = ClassTable(entries=entries)
    except ValueError as e:
        raise MapFormatError(f"invalid class table: {e}", reader.offset) from e
    next_global_id, voxel_count = reader.unpack(struct.Struct("<QQ"), "map counters")
    if voxel_size <= 0 or not np.isfinite(voxel_size):
        raise MapFormatError(f"invalid voxel size {voxel_size}", 8)

    pmap = PanopticMap(voxel_size, table, initial_capacity=max(16, int(min(voxel_count, 1 << 24))))
    pmap.next_global_id = int(next_global_id)
    semantic = struct.Struct(f"<{num_classes}d")
    g = pmap.geometry
    p = pmap.payload
    previous_code = None
    for record in range(voxel_count):
        reader.record = record
        start = reader.offset
        values = reader.unpack(VOXEL_HEAD, "voxel")
        index = np.array(values[0:3], dtype=np.int64)
        n, mean, m2, logodds, n_sem, n_inst = values[3], values[4:7], values[7:13], values[13], values[14], values[15]
        semantic_values = reader.unpack(semantic, "semantic histogram")
        sem = np.array(semantic_values)
        (count,) = reader.unpack(struct.Struct("<B"), "instance entry count")
        if count > MAX_INSTANCE_ENTRIES:
            raise MapFormatError(f"instance entry count {count} exceeds {MAX_INSTANCE_ENTRIES}", start, record)
        ids = np.zeros(MAX_INSTANCE_ENTRIES, dtype=np.int64)
        masses = np.zeros(MAX_INSTANCE_ENTRIES)
        for k in range(count):
            ids[k], masses[k] = reader.unpack(ENTRY, "instance entry")
        if np.any(ids[:count] <= 0) or np.any(ids[:count] >= next_global_id) or np.any(masses[:count] <= 0):
            raise MapFormatError("instance entries need ids in [1, next_global_id) and positive masses",
                                 start, record)

        try:
            code = int(morton_encode(index[None])[0])
        except ValueError as e:
            raise MapFormatError(str(e), start, record) from e
        if previous_code is not None and code <= previous_code:
            raise MapFormatError("voxel records are not in strictly increasing Morton order", start, record)
        previous_code = code

        slot = int(pmap.slots_for_codes(np.array([code]), create=True)[0])
        g.n[slot] = n
        g.mean[slot] = mean
        g.m2[slot] = m2
        g.logodds[slot] = logodds
        if n_sem or n_inst or count or any(semantic_values):
            row = int(pmap.ensure_payload(np.array([slot]))[0])
            pmap.store_semantic_histogram(row, sem)
            pmap.store_instance_histogram(row, InstanceHistogram(ids, masses))
            p.n_sem[row] = n_sem
            p.n_inst[row] = n_inst

    if reader.offset != len(data):
        raise MapFormatError(f"{len(data) - reader.offset} trailing byte(s) after the last voxel", reader.offset)
    return pmap


def load_map(path: Path) -> PanopticMap:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise MapFormatError(f"cannot read map file {path}: {e}", 0) from e
    pmap = deserialize_map(data)
    logger.info(f"📁 Loaded {len(pmap)} voxel(s) from {path}")
    return pmap


# PLY export

def _color(hue: float, saturation: float = 0.65, value: float = 0.95) -> np.ndarray:
    return np.round(np.array(colorsys.hsv_to_rgb(hue % 1.0, saturation, value)) * 255).astype(np.int64)


def class_palette(num_classes: int) -> np.ndarray:
    """One color per class; void is gray"""
    golden = 0.618033988749895
    palette = np.array([_color(i * golden) for i in range(num_classes)])
    palette[VOID_CLASS] = (128, 128, 128)
    return palette


def instance_color(instance_id: int) -> np.ndarray:
    return _color(0.137 + instance_id * 0.618033988749895, saturation=0.8, value=0.9)


def panoptic_color(base: np.ndarray, instance_id: int) -> np.ndarray:
    """Semantic color shifted by a small instance-dependent offset"""
    if instance_id == 0:
        return base
    offset = (instance_id * np.array([37, 59, 83])) % 61 - 30
    return np.clip(base + offset, 0, 255)


def export_ply(pmap: PanopticMap, path: Path, mode: str, theta_st: float, theta_o: float) -> int:
    """
    Write one ASCII vertex per voxel with a valid distribution at its mean.

    Returns:
        Number of vertices written
    """
    if mode not in PLY_MODES:
        raise ValueError(f"mode must be one of {PLY_MODES}, got '{mode}'")
    g = pmap.geometry
    slots = np.flatnonzero(g.n[:len(pmap)] >= MIN_POINTS_FOR_DISTRIBUTION)
    slots = slots[np.argsort(g.codes[slots], kind="stable")]
    means = g.mean[slots]
    _, class_id, instance_id = labels_for_slots(pmap, slots, theta_st, theta_o)

    palette = class_palette(pmap.class_table.num_classes)
    colors = np.empty((len(slots), 3), dtype=np.int64)
    for k in range(len(slots)):
        base = palette[class_id[k]]
        if mode == "semantic":
            colors[k] = base
        elif mode == "instance":
            colors[k] = instance_color(int(instance_id[k])) if instance_id[k] else base
        else:
            colors[k] = panoptic_color(base, int(instance_id[k]))

    vertex = np.empty(len(slots), dtype=[("x", "f8"), ("y", "f8"), ("z", "f8"),
                                         ("red", "u1"), ("green", "u1"), ("blue", "u1"),
                                         ("class_id", "u1"), ("instance_id", "u4")])
    vertex["x"], vertex["y"], vertex["z"] = means[:, 0], means[:, 1], means[:, 2]
    vertex["red"], vertex["green"], vertex["blue"] = colors[:, 0], colors[:, 1], colors[:, 2]
    vertex["class_id"] = class_id
    vertex["instance_id"] = instance_id
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PlyData([PlyElement.describe(vertex, "vertex")], text=True).write(str(path))
    logger.info(f"📁 Exported {len(slots)} vertices ({mode}) to {path}")
    return len(slots)
