"""Pinhole camera model and rigid-body transforms.

Camera frame convention: +z forward, +x right, +y down. Depth rasters hold the
camera-frame z coordinate, not the ray length.
"""
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Tuple

import numpy as np

from models import Intrinsics

ORTHONORMAL_TOLERANCE = 1e-9


class Pixel(NamedTuple):
    """Raster coordinate (column, row)"""
    u: int
    v: int


def round_half_away(values: np.ndarray) -> np.ndarray:
    """Round to the nearest integer, halves away from zero"""
    values = np.asarray(values, dtype=np.float64)
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform"""
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(rotation)) or not np.all(np.isfinite(translation)):
            raise ValueError("pose contains non-finite values")
        if np.max(np.abs(rotation.T @ rotation - np.eye(3))) > ORTHONORMAL_TOLERANCE:
            raise ValueError("pose rotation is not orthonormal")
        if np.linalg.det(rotation) <= 0:
            raise ValueError("pose rotation must have determinant +1")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "Pose":
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape != (4, 4):
            raise ValueError(f"pose matrix must be 4x4, got {matrix.shape}")
        return cls(rotation=matrix[:3, :3], translation=matrix[:3, 3])

    @classmethod
    def look_at(cls, eye: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> "Pose":
        """Camera at eye with +z pointing at target and +y pointing away from up"""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        norm = np.linalg.norm(right)
        if norm < 1e-12:
            raise ValueError("look_at direction is parallel to the up vector")
        right /= norm
        down = np.cross(forward, right)
        return cls(rotation=np.column_stack([right, down, forward]), translation=eye)

    def as_matrix(self) -> np.ndarray:
        matrix = np.eye(4)
        matrix[:3, :3] = self.rotation
        matrix[:3, 3] = self.translation
        return matrix

    def inverse(self) -> "Pose":
        rotation_t = self.rotation.T
        return Pose(rotation=rotation_t, translation=-rotation_t @ self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        """Composition: (self @ other) applies other first"""
        return Pose(rotation=self.rotation @ other.rotation,
                    translation=self.rotation @ other.translation + self.translation)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply to one point (3,) or many (N, 3)"""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def inverse_transform(self, points: np.ndarray) -> np.ndarray:
        """World to camera frame"""
        points = np.asarray(points, dtype=np.float64)
        return (points - self.translation) @ self.rotation


def unproject(pixel: Pixel, depth: float, intr: Intrinsics, pose: Pose) -> np.ndarray:
    """Back-project one pixel with its depth into the world frame"""
    if not np.isfinite(depth) or depth <= 0:
        raise ValueError(f"depth must be finite and > 0, got {depth}")
    u, v = pixel
    camera_point = np.array([(u - intr.cx) * depth / intr.fx,
                             (v - intr.cy) * depth / intr.fy,
                             depth])
    return pose.transform(camera_point)


def unproject_depth(depth: np.ndarray, intr: Intrinsics, pose: Pose,
                    max_depth: float = np.inf) -> Tuple[np.ndarray, np.ndarray]:
    """
    Back-project every valid pixel of a depth raster.

    Returns:
        Tuple of (flat pixel indices in scan order, world points (N, 3))
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != intr.shape:
        raise ValueError(f"depth raster {depth.shape} does not match intrinsics {intr.shape}")
    flat = depth.ravel()
    with np.errstate(invalid="ignore"):
        valid = np.isfinite(flat) & (flat > 0) & (flat <= max_depth)
    pixel_index = np.flatnonzero(valid)
    d = flat[pixel_index]
    v, u = np.divmod(pixel_index, intr.width)
    camera_points = np.column_stack([(u - intr.cx) * d / intr.fx,
                                     (v - intr.cy) * d / intr.fy,
                                     d])
    return pixel_index, pose.transform(camera_points)


def project(point: np.ndarray, intr: Intrinsics, pose: Pose) -> Optional[Tuple[Pixel, float]]:
    """Project a world point; None when behind the camera or outside the raster"""
    u, v, z, inside = project_points(np.asarray(point, dtype=np.float64).reshape(1, 3), intr, pose)
    if not inside[0]:
        return None
    return Pixel(int(u[0]), int(v[0])), float(z[0])


def project_points(points: np.ndarray, intr: Intrinsics,
                   pose: Pose) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Vectorized projection.

    Returns:
        Tuple of (rounded u, rounded v, camera-frame depth, in-frustum mask)
    """
    camera_points = pose.inverse_transform(points)
    z = camera_points[:, 2]
    in_front = z > 0
    safe_z = np.where(in_front, z, 1.0)
    # Clipped before the integer cast so far off-axis points cannot wrap around
    u = np.clip(round_half_away(intr.fx * camera_points[:, 0] / safe_z + intr.cx),
                -1, intr.width).astype(np.int64)
    v = np.clip(round_half_away(intr.fy * camera_points[:, 1] / safe_z + intr.cy),
                -1, intr.height).astype(np.int64)
    inside = in_front & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
    return u, v, z, inside
