"""
Dataset directory reader and writer.

Layout:
    classes.txt             one `id name stuff|thing` line per class
    intrinsics.txt          `fx fy cx cy width height`
    poses/NNNNNN.txt        16 numbers, row-major camera-to-world matrix
    depth/NNNNNN.pgm        16-bit, millimeters, 0 = invalid
    semantic/NNNNNN.pgm     8-bit class ids
    instance/NNNNNN.pgm     16-bit frame-local instance ids
    semantic_score/, instance_score/   optional 16-bit, value / 65535
    gt_semantic/, gt_instance/         optional ground truth
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional

import cv2
import numpy as np

from geometry import Pose
from models import ClassEntry, ClassKind, ClassTable, Intrinsics
from panoptic_frame import DEPTH_SCALE, SCORE_SCALE, PanopticFrame

logger = logging.getLogger(__name__)

INDEX_WIDTH = 6


class DatasetError(ValueError):
    """Unreadable or inconsistent dataset directory"""


@dataclass
class Dataset:
    root: Path
    class_table: ClassTable
    intrinsics: Intrinsics
    indices: List[int]

    def __len__(self) -> int:
        return len(self.indices)

    def frames(self) -> Iterator[PanopticFrame]:
        for index in self.indices:
            yield read_frame(self.root, index, self.intrinsics)


def frame_name(index: int, suffix: str) -> str:
    return f"{index:0{INDEX_WIDTH}d}{suffix}"


# Text files

def write_class_table(path: Path, table: ClassTable):
    lines = [f"{e.class_id} {e.name} {e.kind.value}" for e in table.entries]
    Path(path).write_text("\n".join(lines) + "\n")


def read_class_table(path: Path) -> ClassTable:
    entries = []
    try:
        for number, line in enumerate(Path(path).read_text().splitlines(), start=1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise DatasetError(f"{path}:{number}: expected 'id name stuff|thing', got '{line}'")
            entries.append(ClassEntry(class_id=int(parts[0]), name=parts[1], kind=ClassKind(parts[2])))
        return ClassTable(entries=entries)
    except OSError as e:
        raise DatasetError(f"cannot read class table {path}: {e}") from e
    except DatasetError:
        raise
    except ValueError as e:
        raise DatasetError(f"invalid class table {path}: {e}") from e


def write_intrinsics(path: Path, intr: Intrinsics):
    Path(path).write_text(f"{intr.fx!r} {intr.fy!r} {intr.cx!r} {intr.cy!r} {intr.width} {intr.height}\n")


def read_intrinsics(path: Path) -> Intrinsics:
    try:
        values = Path(path).read_text().split()
        if len(values) != 6:
            raise DatasetError(f"{path}: expected 'fx fy cx cy width height', got {len(values)} values")
        fx, fy, cx, cy = (float(v) for v in values[:4])
        return Intrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=int(values[4]), height=int(values[5]))
    except OSError as e:
        raise DatasetError(f"cannot read intrinsics {path}: {e}") from e
    except DatasetError:
        raise
    except ValueError as e:
        raise DatasetError(f"invalid intrinsics {path}: {e}") from e


def write_pose(path: Path, pose: Pose):
    values = " ".join(f"{v:.17g}" for v in pose.as_matrix().ravel())
    Path(path).write_text(values + "\n")


def read_pose(path: Path) -> Pose:
    try:
        values = np.array([float(v) for v in Path(path).read_text().split()])
        if values.size != 16:
            raise DatasetError(f"{path}: expected 16 pose values, got {values.size}")
        return Pose.from_matrix(values.reshape(4, 4))
    except OSError as e:
        raise DatasetError(f"cannot read pose {path}: {e}") from e
    except DatasetError:
        raise
    except ValueError as e:
        raise DatasetError(f"invalid pose {path}: {e}") from e


# Rasters

def write_raster(path: Path, raster: np.ndarray, bits: int):
    """Write an integer raster as binary PGM"""
    dtype = np.uint8 if bits == 8 else np.uint16
    limit = np.iinfo(dtype).max
    if raster.size and (raster.min() < 0 or raster.max() > limit):
        raise ValueError(f"raster values for {path} must lie within [0, {limit}]")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), raster.astype(dtype)):
        raise DatasetError(f"failed to write raster {path}")


def read_raster(path: Path, shape: Optional[tuple] = None) -> np.ndarray:
    raster = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raster is None:
        raise DatasetError(f"cannot read raster {path}")
    if shape is not None and raster.shape != tuple(shape):
        raise DatasetError(f"raster {path} has shape {raster.shape}, intrinsics declare {tuple(shape)}")
    return raster


def depth_to_raster(depth: np.ndarray) -> np.ndarray:
    depth = np.where(np.isfinite(depth), depth, 0.0)
    return np.clip(np.round(depth * DEPTH_SCALE), 0, 65535).astype(np.uint16)


def score_to_raster(score: np.ndarray) -> np.ndarray:
    return np.round(score * SCORE_SCALE).astype(np.uint16)


def write_frame(root: Path, frame: PanopticFrame):
    root = Path(root)
    index = frame.frame_index
    name = frame_name(index, ".pgm")
    (root / "poses").mkdir(parents=True, exist_ok=True)
    write_pose(root / "poses" / frame_name(index, ".txt"), frame.pose)
    write_raster(root / "depth" / name, depth_to_raster(frame.depth), 16)
    write_raster(root / "semantic" / name, frame.semantic, 8)
    write_raster(root / "instance" / name, frame.instance, 16)
    if not np.all(frame.sem_score == 1.0):
        write_raster(root / "semantic_score" / name, score_to_raster(frame.sem_score), 16)
    if not np.all(frame.inst_score == 1.0):
        write_raster(root / "instance_score" / name, score_to_raster(frame.inst_score), 16)
    if frame.has_ground_truth:
        write_raster(root / "gt_semantic" / name, frame.gt_semantic, 8)
        write_raster(root / "gt_instance" / name, frame.gt_instance, 16)


def read_frame(root: Path, index: int, intr: Intrinsics) -> PanopticFrame:
    root = Path(root)
    name = frame_name(index, ".pgm")
    shape = intr.shape

    def optional(folder: str) -> Optional[np.ndarray]:
        path = root / folder / name
        return read_raster(path, shape) if path.exists() else None

    depth = read_raster(root / "depth" / name, shape).astype(np.float64) / DEPTH_SCALE
    semantic = read_raster(root / "semantic" / name, shape)
    instance = read_raster(root / "instance" / name, shape)
    sem_score = optional("semantic_score")
    inst_score = optional("instance_score")
    try:
        return PanopticFrame(
            depth=depth,
            semantic=semantic,
            instance=instance,
            pose=read_pose(root / "poses" / frame_name(index, ".txt")),
            intr=intr,
            sem_score=None if sem_score is None else sem_score / SCORE_SCALE,
            inst_score=None if inst_score is None else inst_score / SCORE_SCALE,
            frame_index=index,
            gt_semantic=optional("gt_semantic"),
            gt_instance=optional("gt_instance"),
        )
    except DatasetError:
        raise
    except ValueError as e:
        raise DatasetError(f"frame {index} in {root}: {e}") from e


def write_dataset(root: Path, frames: List[PanopticFrame], table: ClassTable) -> Path:
    """Write frames and metadata; every frame must share one set of intrinsics"""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if not frames:
        raise ValueError("cannot write a dataset without frames")
    intr = frames[0].intr
    if any(f.intr != intr for f in frames):
        raise ValueError("all frames of a dataset must share the same intrinsics")
    write_class_table(root / "classes.txt", table)
    write_intrinsics(root / "intrinsics.txt", intr)
    for frame in frames:
        write_frame(root, frame)
    logger.info(f"📁 Wrote {len(frames)} frame(s) to {root}")
    return root


def open_dataset(root: Path) -> Dataset:
    """Read the metadata and list the frame indices of a dataset directory"""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    table = read_class_table(root / "classes.txt")
    intr = read_intrinsics(root / "intrinsics.txt")
    pose_dir = root / "poses"
    if not pose_dir.is_dir():
        raise DatasetError(f"dataset {root} has no poses directory")
    indices = []
    for path in sorted(pose_dir.glob("*.txt")):
        if len(path.stem) != INDEX_WIDTH or not path.stem.isdigit():
            raise DatasetError(f"pose file {path} is not named by a {INDEX_WIDTH}-digit index")
        indices.append(int(path.stem))
    logger.info(f"📁 Opened dataset {root}: {len(indices)} frame(s), {table.num_classes} classes")
    return Dataset(root=root, class_table=table, intrinsics=intr, indices=indices)


def read_dataset(root: Path) -> List[PanopticFrame]:
    return list(open_dataset(root).frames())
