"""
Back-projection of NDT voxels onto a camera plane.

A voxel's footprint is the set of pixels inside the k-sigma ellipse of its
Gaussian pushed through the first-order linearization of the pinhole
projection at the mean. Footprints are rasterized in batches grouped by their
half-extent so that every batch is a dense (voxels x window) array.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Set, Tuple

import numpy as np

from geometry import Pixel, Pose, round_half_away
from label_propagation import export_arrays
from models import Intrinsics, VOID_CLASS
from ndt_map import NdtVoxel, PanopticMap, voxel_distribution

logger = logging.getLogger(__name__)

# Upper bound on the number of candidate pixels tested per batch
MAX_BATCH_PIXELS = 4_000_000


@dataclass
class Footprints:
    """Flattened voxel footprints: pixel k belongs to voxel `voxel[k]`"""
    voxel: np.ndarray     # Index into the input arrays
    pixel: np.ndarray     # Flat raster index (row * width + column)
    depth: np.ndarray     # Camera-frame depth of each input voxel's mean

    def __len__(self) -> int:
        return len(self.pixel)


@dataclass
class RenderedView:
    """Map labels seen from one camera; uncovered pixels are void with depth 0"""
    semantic: np.ndarray            # Semantic-only best class
    instance: np.ndarray            # Global instance ids
    panoptic_class: np.ndarray      # Class of the panoptic label
    depth: np.ndarray
    voxel: np.ndarray               # Winning voxel slot, -1 where uncovered

    @property
    def covered(self) -> np.ndarray:
        return self.voxel >= 0


class ProjectionRenderer:
    """Footprint rasterizer for one camera"""

    def __init__(self, intr: Intrinsics, pose: Pose, k_sigma: float, max_depth: float = np.inf):
        if k_sigma <= 0:
            raise ValueError(f"k_sigma must be > 0, got {k_sigma}")
        self.intr = intr
        self.pose = pose
        self.k_sigma = float(k_sigma)
        self.max_depth = float(max_depth)

    def image_covariances(self, camera_means: np.ndarray, covariances: np.ndarray) -> np.ndarray:
        """2x2 pixel covariances of (N, 3) camera-frame means and (N, 3, 3) world covariances"""
        rotation = self.pose.rotation
        camera_cov = np.einsum("ji,njk,kl->nil", rotation, covariances, rotation)
        x, y, z = camera_means[:, 0], camera_means[:, 1], camera_means[:, 2]
        jacobian = np.zeros((len(z), 2, 3))
        jacobian[:, 0, 0] = self.intr.fx / z
        jacobian[:, 0, 2] = -self.intr.fx * x / z ** 2
        jacobian[:, 1, 1] = self.intr.fy / z
        jacobian[:, 1, 2] = -self.intr.fy * y / z ** 2
        return np.einsum("nij,njk,nlk->nil", jacobian, camera_cov, jacobian)

    def footprints(self, means: np.ndarray, covariances: np.ndarray) -> Footprints:
        """Rasterize the footprints of (N, 3) means with (N, 3, 3) covariances"""
        intr = self.intr
        means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
        camera_means = self.pose.inverse_transform(means)
        z = camera_means[:, 2]
        depth = z.copy()
        empty = Footprints(np.empty(0, np.int64), np.empty(0, np.int64), depth)
        if not len(means):
            return empty

        visible = (z > 0) & (z <= self.max_depth)
        safe_z = np.where(visible, z, 1.0)
        u0 = round_half_away(intr.fx * camera_means[:, 0] / safe_z + intr.cx)
        v0 = round_half_away(intr.fy * camera_means[:, 1] / safe_z + intr.cy)
        visible &= (u0 >= 0) & (u0 < intr.width) & (v0 >= 0) & (v0 < intr.height)
        candidates = np.flatnonzero(visible)
        if not len(candidates):
            return empty

        image_cov = self.image_covariances(camera_means[candidates], covariances[candidates])
        a, b, c = image_cov[:, 0, 0], image_cov[:, 0, 1], image_cov[:, 1, 1]
        det = a * c - b * b
        k2 = self.k_sigma ** 2
        half_u = np.minimum(np.floor(self.k_sigma * np.sqrt(a)), intr.width).astype(np.int64)
        half_v = np.minimum(np.floor(self.k_sigma * np.sqrt(c)), intr.height).astype(np.int64)
        radius = np.maximum(half_u, half_v)
        u0 = u0[candidates].astype(np.int64)
        v0 = v0[candidates].astype(np.int64)

        voxel_parts, pixel_parts = [], []
        for r in np.unique(radius).tolist():
            group = np.flatnonzero(radius == r)
            du, dv = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1))
            du, dv = du.ravel(), dv.ravel()
            chunk = max(1, MAX_BATCH_PIXELS // len(du))
            for start in range(0, len(group), chunk):
                members = group[start:start + chunk]
                # Mahalanobis test with the closed-form 2x2 inverse
                with np.errstate(invalid="ignore", divide="ignore"):
                    q = (c[members, None] * du ** 2 - 2 * b[members, None] * du * dv
                         + a[members, None] * dv ** 2) / det[members, None]
                u = u0[members, None] + du
                v = v0[members, None] + dv
                inside = ((q <= k2) | ((du == 0) & (dv == 0))) \
                    & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
                rows, cols = np.nonzero(inside)
                voxel_parts.append(candidates[members[rows]])
                pixel_parts.append(v[rows, cols] * intr.width + u[rows, cols])

        return Footprints(voxel=np.concatenate(voxel_parts),
                          pixel=np.concatenate(pixel_parts),
                          depth=depth)

    @staticmethod
    def front_most(footprints: Footprints, tiebreak: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Depth test over footprints: nearest mean wins, then the lowest tiebreak key.

        Returns:
            Tuple of (covered flat pixel indices, winning voxel per pixel)
        """
        if not len(footprints):
            return np.empty(0, np.int64), np.empty(0, np.int64)
        voxel = footprints.voxel
        order = np.lexsort((tiebreak[voxel], footprints.depth[voxel], footprints.pixel))
        pixels, first = np.unique(footprints.pixel[order], return_index=True)
        return pixels, voxel[order][first]

    def vtou(self, voxel: NdtVoxel) -> Set[Pixel]:
        """Pixel footprint of a single voxel; empty when invalid or not visible"""
        distribution = voxel_distribution(voxel)
        if distribution is None:
            return set()
        mean, covariance = distribution
        result = self.footprints(mean[None], covariance[None])
        v, u = np.divmod(result.pixel, self.intr.width)
        return {Pixel(int(uu), int(vv)) for uu, vv in zip(u, v)}


def render_view(pmap: PanopticMap, intr: Intrinsics, pose: Pose, k_sigma: float,
                max_depth: float, theta_st: float, theta_o: float,
                renderer: Optional[ProjectionRenderer] = None) -> RenderedView:
    """Composite the labeled voxels of a map into label rasters with a depth test"""
    renderer = renderer or ProjectionRenderer(intr, pose, k_sigma, max_depth)
    shape = intr.shape
    semantic = np.full(shape, VOID_CLASS, dtype=np.int64)
    instance = np.zeros(shape, dtype=np.int64)
    panoptic_class = np.full(shape, VOID_CLASS, dtype=np.int64)
    depth = np.zeros(shape, dtype=np.float64)
    voxel = np.full(shape, -1, dtype=np.int64)

    labels = export_arrays(pmap, theta_st, theta_o)
    if len(labels):
        footprints = renderer.footprints(labels.means, labels.covariances)
        pixels, winners = renderer.front_most(footprints, labels.codes)
        semantic.flat[pixels] = labels.semantic[winners]
        instance.flat[pixels] = labels.instance_id[winners]
        panoptic_class.flat[pixels] = labels.class_id[winners]
        depth.flat[pixels] = footprints.depth[winners]
        voxel.flat[pixels] = labels.slots[winners]

    covered = int(np.count_nonzero(voxel >= 0))
    logger.debug(f"Rendered {len(labels)} voxel(s) covering {covered}/{voxel.size} pixels")
    return RenderedView(semantic=semantic, instance=instance, panoptic_class=panoptic_class,
                        depth=depth, voxel=voxel)
