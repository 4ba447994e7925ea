from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

VOID_CLASS = 0

# Panoptic segment key: class_id * OFFSET + instance_id
OFFSET = 256 * 256 * 256
GARBAGE_BASE = OFFSET // 2      # Segment ids at or above this are garbage regions


class ClassKind(str, Enum):
    """Stuff (background) or thing (countable object)"""
    STUFF = "stuff"
    THING = "thing"


class ClassEntry(BaseModel):
    """One semantic class of the class table"""
    model_config = ConfigDict(frozen=True)

    class_id: int   # Contiguous from 0, 0 is void
    name: str
    kind: ClassKind


class ClassTable(BaseModel):
    """Ordered semantic class list; defines histogram dimensionality"""
    model_config = ConfigDict(frozen=True)

    entries: List[ClassEntry]

    @model_validator(mode="after")
    def _check_contiguous(self) -> "ClassTable":
        ids = [entry.class_id for entry in self.entries]
        if ids != list(range(len(ids))):
            raise ValueError(f"class ids must be contiguous from 0, got {ids}")
        if len(ids) < 2:
            raise ValueError("class table needs void plus at least one class")
        if len(ids) > 256:
            raise ValueError(f"at most 256 classes fit the 8-bit semantic rasters, got {len(ids)}")
        return self

    @classmethod
    def from_pairs(cls, pairs: List[tuple]) -> "ClassTable":
        """Build from (name, kind) pairs for classes 1..n; void is prepended"""
        entries = [ClassEntry(class_id=0, name="void", kind=ClassKind.STUFF)]
        for class_id, (name, kind) in enumerate(pairs, start=1):
            entries.append(ClassEntry(class_id=class_id, name=name, kind=ClassKind(kind)))
        return cls(entries=entries)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def num_classes(self) -> int:
        return len(self.entries)

    def name_of(self, class_id: int) -> str:
        return self.entries[class_id].name

    def id_of(self, name: str) -> int:
        for entry in self.entries:
            if entry.name == name:
                return entry.class_id
        raise KeyError(f"Unknown class name '{name}'")

    def is_thing(self, class_id: int) -> bool:
        return class_id != VOID_CLASS and self.entries[class_id].kind == ClassKind.THING

    def is_stuff(self, class_id: int) -> bool:
        return class_id != VOID_CLASS and self.entries[class_id].kind == ClassKind.STUFF

    @property
    def thing_mask(self) -> np.ndarray:
        mask = np.array([entry.kind == ClassKind.THING for entry in self.entries], dtype=bool)
        mask[VOID_CLASS] = False
        return mask

    @property
    def stuff_mask(self) -> np.ndarray:
        mask = np.array([entry.kind == ClassKind.STUFF for entry in self.entries], dtype=bool)
        mask[VOID_CLASS] = False
        return mask

    @property
    def thing_ids(self) -> List[int]:
        return [int(i) for i in np.flatnonzero(self.thing_mask)]

    @property
    def stuff_ids(self) -> List[int]:
        return [int(i) for i in np.flatnonzero(self.stuff_mask)]


def default_class_table() -> ClassTable:
    """Indoor class set used by the simulator and the CLI"""
    return ClassTable.from_pairs([
        ("wall", "stuff"),
        ("floor", "stuff"),
        ("ceiling", "stuff"),
        ("chair", "thing"),
        ("table", "thing"),
        ("sofa", "thing"),
        ("cabinet", "thing"),
        ("lamp", "thing"),
    ])


class Intrinsics(BaseModel):
    """Pinhole intrinsics in raster units"""
    model_config = ConfigDict(frozen=True)

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    @model_validator(mode="after")
    def _check_ranges(self) -> "Intrinsics":
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be > 0, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"raster size must be > 0, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside raster {self.width}x{self.height}")
        return self

    @property
    def shape(self) -> tuple:
        """Raster shape as (rows, columns)"""
        return (self.height, self.width)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


class PanopticLabel3D(BaseModel):
    """Panoptic label of a voxel; instance 0 means none"""
    model_config = ConfigDict(frozen=True)

    class_id: int = VOID_CLASS
    instance_id: int = 0


class MatchOutcome(str, Enum):
    MATCHED = "matched"
    NEW = "new"
    IGNORED = "ignored"


class MatchDecision(BaseModel):
    """Resolution of one frame-local instance against the map"""
    local_id: int
    outcome: MatchOutcome
    global_id: int = 0   # 0 when ignored
    best_iou: float = 0.0

    @property
    def resolved_id(self) -> int:
        return 0 if self.outcome == MatchOutcome.IGNORED else self.global_id


class MappingParams(BaseModel):
    """Thresholds and limits consumed by the per-frame update"""
    model_config = ConfigDict(frozen=True)

    max_depth: float = 20.0
    theta_st: float = 0.9    # Stuff proportion threshold
    theta_b: float = 0.8     # Back-projected share of instance mass
    theta_m: float = 0.2     # IoU to match a map instance
    theta_n: float = 0.1     # IoU at or below which a new instance is created
    theta_l: float = 0.7     # Semantic score gate
    theta_z: float = 0.1     # Panoptic score gate
    theta_o: float = 0.25    # Instance to semantic observation ratio
    vtou_k_sigma: float = 2.0
    free_space_stride: int = 8
    trace_matches: bool = False

    @model_validator(mode="after")
    def _check_thresholds(self) -> "MappingParams":
        if self.theta_m < self.theta_n:
            raise ValueError(f"theta_m ({self.theta_m}) must be >= theta_n ({self.theta_n})")
        if self.max_depth <= 0:
            raise ValueError(f"max_depth ({self.max_depth}) must be > 0")
        if self.vtou_k_sigma <= 0:
            raise ValueError(f"vtou_k_sigma ({self.vtou_k_sigma}) must be > 0")
        if self.free_space_stride < 0:
            raise ValueError(f"free_space_stride ({self.free_space_stride}) must be >= 0")
        for name in ("theta_st", "theta_b", "theta_m", "theta_n", "theta_l", "theta_z", "theta_o"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} ({value}) must be within [0, 1]")
        return self


class FrameStats(BaseModel):
    """Counts produced by integrating one frame"""
    frame_index: int = 0
    pixels_integrated: int = 0
    voxels_touched: int = 0
    voxels_created: int = 0
    instances_matched: int = 0
    instances_new: int = 0
    instances_ignored: int = 0
    semantic_updates: int = 0
    instance_updates: int = 0


class EvalReport(BaseModel):
    """Scores of a map against ground truth"""
    mode: str                                   # "2d", "3d" or "input"
    class_iou: Dict[str, float] = {}
    miou: float = 0.0
    class_iou_panoptic: Dict[str, float] = {}
    miou_panoptic: float = 0.0
    class_pq: Dict[str, float] = {}
    class_sq: Dict[str, float] = {}
    class_rq: Dict[str, float] = {}
    pq: float = 0.0
    sq: float = 0.0
    rq: float = 0.0
    pq_things: float = 0.0
    pq_stuff: float = 0.0
    class_ap50: Dict[str, float] = {}
    ap50: float = 0.0
    tp: Dict[str, int] = {}
    fp: Dict[str, int] = {}
    fn: Dict[str, int] = {}
    matched_fraction: Optional[float] = None
    samples: int = 0                            # Frames (2D) or points (3D)

    @field_validator("miou", "miou_panoptic", "pq", "sq", "rq", "pq_things", "pq_stuff", "ap50")
    @classmethod
    def _check_bounds(cls, value: float) -> float:
        if not 0.0 <= value <= 1.0 + 1e-12:
            raise ValueError(f"score {value} outside [0, 1]")
        return value

    def to_records(self) -> str:
        """Flat key=value block, one metric per line"""
        lines = [f"mode={self.mode}", f"samples={self.samples}"]
        for key in ("miou", "miou_panoptic", "pq", "sq", "rq", "pq_things", "pq_stuff", "ap50"):
            lines.append(f"{key}={getattr(self, key):.6f}")
        if self.matched_fraction is not None:
            lines.append(f"matched_fraction={self.matched_fraction:.6f}")
        for prefix, table in (("iou", self.class_iou), ("iou_panoptic", self.class_iou_panoptic),
                              ("pq", self.class_pq), ("sq", self.class_sq), ("rq", self.class_rq),
                              ("ap50", self.class_ap50)):
            for name in sorted(table):
                lines.append(f"{prefix}.{name}={table[name]:.6f}")
        for prefix, table in (("tp", self.tp), ("fp", self.fp), ("fn", self.fn)):
            for name in sorted(table):
                lines.append(f"{prefix}.{name}={table[name]}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        """Human readable summary with a per-class table"""
        lines = [
            f"Evaluation ({self.mode}, {self.samples} samples)",
            f"  mIoU:    {100 * self.miou:6.2f}",
            f"  mIoU_P:  {100 * self.miou_panoptic:6.2f}",
            f"  PQ:      {100 * self.pq:6.2f}  (SQ {100 * self.sq:6.2f}, RQ {100 * self.rq:6.2f})",
            f"  PQ_th:   {100 * self.pq_things:6.2f}  PQ_st: {100 * self.pq_stuff:6.2f}",
            f"  AP50:    {100 * self.ap50:6.2f}",
        ]
        if self.matched_fraction is not None:
            lines.append(f"  matched: {100 * self.matched_fraction:6.2f}% of ground-truth points")
        names = sorted(set(self.class_iou) | set(self.class_pq))
        if names:
            lines.append(f"  {'class':<12} {'IoU':>7} {'IoU_P':>7} {'PQ':>7} {'SQ':>7} {'RQ':>7} {'AP50':>7}")
            for name in names:
                cells = [self.class_iou, self.class_iou_panoptic, self.class_pq,
                         self.class_sq, self.class_rq, self.class_ap50]
                row = " ".join(
                    f"{100 * table[name]:7.2f}" if name in table else f"{'-':>7}" for table in cells)
                lines.append(f"  {name:<12} {row}")
        return "\n".join(lines) + "\n"


@dataclass
class GroundTruthCloud:
    """Annotated points; instance 0 for stuff"""
    points: np.ndarray        # (N, 3)
    class_id: np.ndarray
    instance_id: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.class_id = np.asarray(self.class_id, dtype=np.int64)
        self.instance_id = np.asarray(self.instance_id, dtype=np.int64)
        if not (len(self.points) == len(self.class_id) == len(self.instance_id)):
            raise ValueError("ground-truth points, classes and instances must have equal length")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("ground-truth points must be finite")

    def __len__(self) -> int:
        return len(self.points)
