"""
Synthetic panoptic RGB-D sequences from primitive scenes.

A scene is an axis-aligned room whose shell carries the stuff classes, with
axis-aligned boxes and spheres as thing instances. Frames are produced by
casting one ray per pixel; the ray direction is scaled so that the ray
parameter equals the camera-frame depth.
"""
import logging
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator
from scipy import ndimage

from geometry import Pose, unproject_depth
from models import OFFSET, ClassTable, GroundTruthCloud, Intrinsics, default_class_table
from ndt_map import morton_encode, voxel_indices
from panoptic_frame import PanopticFrame

logger = logging.getLogger(__name__)

FLIPPED_SCORE = 0.6
Vector3 = Tuple[float, float, float]


class Opening(BaseModel):
    """Box cut out of the room shell (doorway, window)"""
    min_corner: Vector3
    max_corner: Vector3

    def contains(self, points: np.ndarray) -> np.ndarray:
        return np.all((points >= np.array(self.min_corner)) & (points <= np.array(self.max_corner)), axis=-1)


class Room(BaseModel):
    min_corner: Vector3
    max_corner: Vector3
    wall_class: str = "wall"
    floor_class: str = "floor"
    ceiling_class: str = "ceiling"
    openings: List[Opening] = []

    @model_validator(mode="after")
    def _check_extent(self) -> "Room":
        if not all(lo < hi for lo, hi in zip(self.min_corner, self.max_corner)):
            raise ValueError(f"room min corner {self.min_corner} must be below max corner {self.max_corner}")
        return self


class BoxObject(BaseModel):
    kind: Literal["box"] = "box"
    min_corner: Vector3
    max_corner: Vector3
    class_name: str
    instance_id: int

    @model_validator(mode="after")
    def _check_extent(self) -> "BoxObject":
        if not all(lo < hi for lo, hi in zip(self.min_corner, self.max_corner)):
            raise ValueError(f"box min corner {self.min_corner} must be below max corner {self.max_corner}")
        return self

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.array(self.min_corner), np.array(self.max_corner)


class SphereObject(BaseModel):
    kind: Literal["sphere"] = "sphere"
    center: Vector3
    radius: float = Field(gt=0)
    class_name: str
    instance_id: int

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.array(self.center) - self.radius, np.array(self.center) + self.radius


SceneObject = Union[BoxObject, SphereObject]


class Orbit(BaseModel):
    """Camera circling a target at fixed height, always aimed at the target"""
    center: Vector3
    radius: float = Field(gt=0)
    height: float
    n_frames: int = Field(gt=0)
    start_angle: float = 0.0
    turns: float = 1.0


class SceneSpec(BaseModel):
    room: Room
    objects: List[SceneObject] = []
    intrinsics: Intrinsics
    orbit: Optional[Orbit] = None
    waypoints: List[List[List[float]]] = []     # Camera-to-world 4x4 matrices
    class_table: ClassTable = Field(default_factory=default_class_table)

    @model_validator(mode="after")
    def _check_scene(self) -> "SceneSpec":
        table = self.class_table
        for name in (self.room.wall_class, self.room.floor_class, self.room.ceiling_class):
            if not table.is_stuff(table.id_of(name)):
                raise ValueError(f"room surface class '{name}' must be a stuff class")
        ids = [obj.instance_id for obj in self.objects]
        if any(i <= 0 for i in ids) or len(set(ids)) != len(ids):
            raise ValueError(f"object instance ids must be unique and > 0, got {ids}")
        room_lo, room_hi = np.array(self.room.min_corner), np.array(self.room.max_corner)
        for obj in self.objects:
            if not table.is_thing(table.id_of(obj.class_name)):
                raise ValueError(f"object class '{obj.class_name}' must be a thing class")
            lo, hi = obj.bounds()
            if np.any(lo < room_lo) or np.any(hi > room_hi):
                raise ValueError(f"object {obj.instance_id} must lie inside the room")
        if self.orbit is None and not self.waypoints:
            raise ValueError("scene needs an orbit or waypoints")
        return self

    def poses(self) -> List[Pose]:
        if self.orbit is not None:
            o = self.orbit
            return orbit_trajectory(o.center, o.radius, o.height, o.n_frames, o.start_angle, o.turns)
        return [Pose.from_matrix(np.array(m)) for m in self.waypoints]

    @property
    def frame_count(self) -> int:
        return self.orbit.n_frames if self.orbit is not None else len(self.waypoints)


class NoiseSpec(BaseModel):
    depth_sigma_at_1m: float = Field(default=0.0, ge=0)    # Meters, scaled by depth squared
    sem_flip_prob: float = Field(default=0.0, ge=0, le=1)
    border_erode_px: int = Field(default=0, ge=0)
    seed: int = 0
    confusable: Dict[str, str] = {"chair": "sofa", "sofa": "chair", "table": "cabinet", "cabinet": "table"}

    @field_validator("confusable")
    @classmethod
    def _check_pairs(cls, value: Dict[str, str]) -> Dict[str, str]:
        if any(a == b for a, b in value.items()):
            raise ValueError("a class cannot be confusable with itself")
        return value

    @property
    def is_noise_free(self) -> bool:
        return self.depth_sigma_at_1m == 0 and self.sem_flip_prob == 0 and self.border_erode_px == 0


def orbit_trajectory(center, radius: float, height: float, n_frames: int,
                     start_angle: float = 0.0, turns: float = 1.0) -> List[Pose]:
    """Poses evenly spaced on a horizontal circle, looking at the center"""
    center = np.asarray(center, dtype=np.float64)
    angles = start_angle + turns * 2.0 * np.pi * np.arange(n_frames) / n_frames
    poses = []
    for angle in angles:
        eye = np.array([center[0] + radius * np.cos(angle), center[1] + radius * np.sin(angle), height])
        poses.append(Pose.look_at(eye, center))
    return poses


def camera_rays(intr: Intrinsics, pose: Pose) -> Tuple[np.ndarray, np.ndarray]:
    """World origin and (H*W, 3) directions whose ray parameter is camera depth"""
    v, u = np.mgrid[0:intr.height, 0:intr.width]
    directions = np.stack([(u.ravel() - intr.cx) / intr.fx,
                           (v.ravel() - intr.cy) / intr.fy,
                           np.ones(u.size)], axis=1)
    return pose.translation, directions @ pose.rotation.T


def _room_exit(origin: np.ndarray, directions: np.ndarray, room: Room) -> Tuple[np.ndarray, np.ndarray]:
    """Ray parameter where each ray leaves the room, and the exit axis/side code"""
    lo, hi = np.array(room.min_corner), np.array(room.max_corner)
    with np.errstate(divide="ignore", invalid="ignore"):
        bound = np.where(directions > 0, hi, lo)
        t_axis = np.where(directions != 0, (bound - origin) / directions, np.inf)
    axis = np.argmin(t_axis, axis=1)
    t = t_axis[np.arange(len(directions)), axis]
    upward = directions[np.arange(len(directions)), axis] > 0
    return t, axis * 2 + upward


def _box_hits(origin: np.ndarray, directions: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Entry parameter of the slab test, inf on a miss"""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origin) / directions
        t2 = (hi - origin) / directions
    t_near = np.nanmax(np.minimum(t1, t2), axis=1)
    t_far = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (t_near <= t_far) & (t_near > 0)
    return np.where(hit, t_near, np.inf)


def _sphere_hits(origin: np.ndarray, directions: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    offset = origin - center
    a = np.einsum("ni,ni->n", directions, directions)
    b = 2.0 * directions @ offset
    c = offset @ offset - radius * radius
    discriminant = b * b - 4 * a * c
    root = np.sqrt(np.maximum(discriminant, 0.0))
    t = (-b - root) / (2 * a)
    return np.where((discriminant >= 0) & (t > 0), t, np.inf)


def raycast(scene: SceneSpec, pose: Pose, frame_index: int = 0) -> PanopticFrame:
    """Noise-free frame with ground-truth labels from an arbitrary pose"""
    intr = scene.intrinsics
    table = scene.class_table
    origin, directions = camera_rays(intr, pose)
    num_pixels = len(directions)

    t_best, exit_code = _room_exit(origin, directions, scene.room)
    surface_class = np.array([table.id_of(scene.room.wall_class)] * 6)
    surface_class[4] = table.id_of(scene.room.floor_class)     # leaving through z min
    surface_class[5] = table.id_of(scene.room.ceiling_class)   # leaving through z max
    classes = surface_class[exit_code]
    instances = np.zeros(num_pixels, dtype=np.int64)
    if scene.room.openings:
        exit_points = origin + t_best[:, None] * directions
        through = np.zeros(num_pixels, dtype=bool)
        for opening in scene.room.openings:
            through |= opening.contains(exit_points)
        t_best = np.where(through, np.inf, t_best)

    for obj in scene.objects:
        if isinstance(obj, BoxObject):
            lo, hi = obj.bounds()
            t = _box_hits(origin, directions, lo, hi)
        else:
            t = _sphere_hits(origin, directions, np.array(obj.center), obj.radius)
        nearer = t < t_best
        t_best = np.where(nearer, t, t_best)
        classes = np.where(nearer, table.id_of(obj.class_name), classes)
        instances = np.where(nearer, obj.instance_id, instances)

    missed = ~np.isfinite(t_best)
    depth = np.where(missed, 0.0, t_best).reshape(intr.shape)
    classes = np.where(missed, 0, classes).reshape(intr.shape)
    instances = np.where(missed, 0, instances).reshape(intr.shape)
    return PanopticFrame(depth=depth, semantic=classes, instance=instances, pose=pose, intr=intr,
                         frame_index=frame_index, gt_semantic=classes.copy(), gt_instance=instances.copy())


def raycast_frame(scene: SceneSpec, pose_index: int) -> PanopticFrame:
    """Frame `pose_index` of the scene's trajectory"""
    if not 0 <= pose_index < scene.frame_count:
        raise ValueError(f"pose_index {pose_index} must be within [0, {scene.frame_count})")
    return raycast(scene, scene.poses()[pose_index], frame_index=pose_index)


def apply_noise(frame: PanopticFrame, noise: NoiseSpec, table: ClassTable) -> PanopticFrame:
    """Corrupt depth and labels; ground-truth rasters are left untouched"""
    if noise.is_noise_free:
        return PanopticFrame(depth=frame.depth.copy(), semantic=frame.semantic.copy(),
                             instance=frame.instance.copy(), pose=frame.pose, intr=frame.intr,
                             sem_score=frame.sem_score.copy(), inst_score=frame.inst_score.copy(),
                             frame_index=frame.frame_index, gt_semantic=frame.gt_semantic,
                             gt_instance=frame.gt_instance)
    rng = np.random.default_rng((noise.seed, frame.frame_index))
    depth = frame.depth.copy()
    semantic = frame.semantic.copy()
    instance = frame.instance.copy()
    sem_score = frame.sem_score.copy()

    if noise.depth_sigma_at_1m > 0:
        valid = depth > 0
        z = depth[valid]
        noisy = z + rng.normal(0.0, 1.0, size=z.shape) * noise.depth_sigma_at_1m * z ** 2
        depth[valid] = np.where(noisy > 0, noisy, 0.0)

    if noise.sem_flip_prob > 0:
        partner = np.arange(table.num_classes)
        for name, other in noise.confusable.items():
            partner[table.id_of(name)] = table.id_of(other)
        draws = rng.random(semantic.shape)
        flip = (draws < noise.sem_flip_prob) & (partner[semantic] != semantic)
        semantic[flip] = partner[semantic[flip]]
        sem_score[flip] = FLIPPED_SCORE

    if noise.border_erode_px > 0:
        for instance_id in np.unique(instance[instance > 0]).tolist():
            mask = instance == instance_id
            core = ndimage.binary_erosion(mask, iterations=noise.border_erode_px)
            instance[mask & ~core] = 0

    return PanopticFrame(depth=depth, semantic=semantic, instance=instance, pose=frame.pose,
                         intr=frame.intr, sem_score=sem_score, inst_score=frame.inst_score.copy(),
                         frame_index=frame.frame_index, gt_semantic=frame.gt_semantic,
                         gt_instance=frame.gt_instance)


def simulate_sequence(scene: SceneSpec, noise: Optional[NoiseSpec] = None) -> List[PanopticFrame]:
    """Every frame of the trajectory, optionally corrupted"""
    frames = [raycast(scene, pose, frame_index=i) for i, pose in enumerate(scene.poses())]
    if noise is not None:
        frames = [apply_noise(frame, noise, scene.class_table) for frame in frames]
    logger.info(f"✅ Simulated {len(frames)} frame(s) of a scene with {len(scene.objects)} object(s)")
    return frames


def _box_faces(lo: np.ndarray, hi: np.ndarray):
    """(axis, coordinate, other-axis bounds) of the six faces of a box"""
    for axis in range(3):
        others = [a for a in range(3) if a != axis]
        for coordinate in (lo[axis], hi[axis]):
            yield axis, coordinate, others, lo[others], hi[others]


def _sample_box_surface(rng: np.random.Generator, lo: np.ndarray, hi: np.ndarray,
                        density: float) -> Tuple[np.ndarray, np.ndarray]:
    """Uniform face samples and the exit code of each face (axis * 2 + upper side)"""
    points, codes = [], []
    for axis, coordinate, others, other_lo, other_hi in _box_faces(lo, hi):
        count = int(round(np.prod(other_hi - other_lo) * density))
        face = np.empty((count, 3))
        face[:, axis] = coordinate
        face[:, others] = other_lo + rng.random((count, 2)) * (other_hi - other_lo)
        points.append(face)
        codes.append(np.full(count, axis * 2 + int(coordinate == hi[axis])))
    return np.concatenate(points), np.concatenate(codes)


def sample_gt_cloud(scene: SceneSpec, points_per_m2: float, seed: int = 0) -> GroundTruthCloud:
    """Uniform surface samples of every primitive with its annotation"""
    if points_per_m2 <= 0:
        raise ValueError(f"points_per_m2 must be > 0, got {points_per_m2}")
    rng = np.random.default_rng(seed)
    table = scene.class_table
    room = scene.room

    points, codes = _sample_box_surface(rng, np.array(room.min_corner), np.array(room.max_corner),
                                        points_per_m2)
    keep = np.ones(len(points), dtype=bool)
    for opening in room.openings:
        keep &= ~opening.contains(points)
    points, codes = points[keep], codes[keep]
    surface_class = np.array([table.id_of(room.wall_class)] * 6)
    surface_class[4] = table.id_of(room.floor_class)
    surface_class[5] = table.id_of(room.ceiling_class)
    all_points = [points]
    all_classes = [surface_class[codes]]
    all_instances = [np.zeros(len(points), dtype=np.int64)]

    for obj in scene.objects:
        if isinstance(obj, BoxObject):
            lo, hi = obj.bounds()
            samples, _ = _sample_box_surface(rng, lo, hi, points_per_m2)
        else:
            count = int(round(4.0 * np.pi * obj.radius ** 2 * points_per_m2))
            normals = rng.normal(size=(count, 3))
            normals /= np.linalg.norm(normals, axis=1, keepdims=True)
            samples = np.array(obj.center) + obj.radius * normals
        all_points.append(samples)
        all_classes.append(np.full(len(samples), table.id_of(obj.class_name)))
        all_instances.append(np.full(len(samples), obj.instance_id))

    return GroundTruthCloud(points=np.concatenate(all_points), class_id=np.concatenate(all_classes),
                            instance_id=np.concatenate(all_instances))


def gt_cloud_from_frames(frames: List[PanopticFrame], leaf_size: float = 0.01) -> GroundTruthCloud:
    """
    Ground-truth cloud of the surfaces the trajectory actually observed.

    Ground-truth pixels of noise-free frames are unprojected and reduced with a
    voxel-grid filter: one centroid per leaf carrying its most frequent label.
    """
    points, labels = [], []
    for frame in frames:
        if not frame.has_ground_truth:
            continue
        pixel_index, world = unproject_depth(frame.depth, frame.intr, frame.pose)
        gt_class = frame.gt_semantic.flat[pixel_index]
        annotated = gt_class != 0
        points.append(world[annotated])
        labels.append(gt_class[annotated] * OFFSET + frame.gt_instance.flat[pixel_index][annotated])
    if not points:
        return GroundTruthCloud(points=np.empty((0, 3)), class_id=np.empty(0), instance_id=np.empty(0))
    points = np.concatenate(points)
    labels = np.concatenate(labels)

    leaves, leaf_inverse = np.unique(morton_encode(voxel_indices(points, leaf_size)), return_inverse=True)
    leaf_inverse = leaf_inverse.reshape(-1)
    counts = np.bincount(leaf_inverse)
    centroids = np.stack([np.bincount(leaf_inverse, weights=points[:, i]) for i in range(3)], axis=1)
    centroids /= counts[:, None]

    pairs, pair_count = np.unique(np.stack([leaf_inverse, labels], axis=1), axis=0, return_counts=True)
    # Most frequent label per leaf, lowest label on ties
    order = np.lexsort((pairs[:, 1], -pair_count, pairs[:, 0]))
    first = np.unique(pairs[order, 0], return_index=True)[1]
    label = pairs[order][first, 1]
    logger.info(f"📊 Ground-truth cloud: {len(leaves)} leaves from {len(points)} points")
    return GroundTruthCloud(points=centroids, class_id=label // OFFSET, instance_id=label % OFFSET)


def default_scene(n_frames: int = 60, width: int = 240, height: int = 180,
                  focal: float = 180.0) -> SceneSpec:
    """Room with a doorway, a table, a chair and a lamp, seen from an orbit"""
    return SceneSpec(
        room=Room(min_corner=(-3.0, -2.5, 0.0), max_corner=(3.0, 2.5, 2.6),
                  openings=[Opening(min_corner=(2.99, -0.5, 0.0), max_corner=(3.01, 0.5, 2.0))]),
        objects=[
            BoxObject(min_corner=(-0.6, -0.4, 0.0), max_corner=(0.6, 0.4, 0.75),
                      class_name="table", instance_id=1),
            BoxObject(min_corner=(1.0, 0.8, 0.0), max_corner=(1.5, 1.3, 0.9),
                      class_name="chair", instance_id=2),
            SphereObject(center=(-1.5, -1.0, 0.5), radius=0.35, class_name="lamp", instance_id=3),
        ],
        intrinsics=Intrinsics(fx=focal, fy=focal, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                              width=width, height=height),
        orbit=Orbit(center=(0.0, 0.0, 0.5), radius=2.2, height=1.6, n_frames=n_frames),
    )
