from pathlib import Path
from typing import Dict, Iterable, List, Optional
import logging

from dataset_io import Dataset, open_dataset
from evaluation import evaluate_2d, evaluate_3d, evaluate_inputs_2d
from geometry import Pose
from map_integrator import MapIntegrator
from map_io import export_ply, load_map, save_map
from models import ClassTable, EvalReport, FrameStats, GroundTruthCloud, Intrinsics, default_class_table
from ndt_map import PanopticMap
from panoptic_frame import PanopticFrame
from renderer import RenderedView, render_view

# Setup logging
logger = logging.getLogger(__name__)


class PanopticMappingSystem:
    """Main orchestrator tying map integration, rendering, evaluation and persistence together"""

    def __init__(self, config, class_table: Optional[ClassTable] = None):
        logger.info("🚀 Initializing panoptic mapping system...")
        self.config = config

        # Validate configuration before proceeding
        logger.info("✅ Validating configuration...")
        if not config.validate_and_log():
            raise ValueError("Configuration validation failed. Cannot initialize mapping system.")

        try:
            self.params = config.mapping_params()
            self._attach(PanopticMap(config.VOXEL_SIZE, class_table or default_class_table()))
            logger.info("✅ Mapping system initialization complete!")
        except Exception as e:
            logger.error(f"❌ Mapping system initialization failed: {e}")
            logger.error(f"   Configuration: {config.get_summary()}")
            raise RuntimeError(f"Failed to initialize mapping system: {e}") from e

    @classmethod
    def from_map_file(cls, config, path: Path) -> "PanopticMappingSystem":
        """System around a saved map; the map's voxel size and class table take precedence"""
        pmap = load_map(path)
        system = cls(config.with_overrides(VOXEL_SIZE=pmap.voxel_size), pmap.class_table)
        system._attach(pmap)
        return system

    def _attach(self, pmap: PanopticMap):
        self.map = pmap
        self.integrator = MapIntegrator(pmap, self.params)

    @property
    def class_table(self) -> ClassTable:
        return self.map.class_table

    def integrate_frame(self, frame: PanopticFrame) -> FrameStats:
        try:
            return self.integrator.integrate(frame)
        except ValueError:
            raise
        except Exception as e:
            logger.error(f"❌ Failed to integrate frame {frame.frame_index}: {e}")
            raise RuntimeError(f"Failed to integrate frame {frame.frame_index}: {e}") from e

    def integrate_frames(self, frames: Iterable[PanopticFrame]) -> List[FrameStats]:
        stats = [self.integrate_frame(frame) for frame in frames]
        logger.info(f"📊 Integrated {len(stats)} frame(s), map holds {len(self.map)} voxel(s)")
        return stats

    def integrate_dataset(self, dataset: Dataset | Path) -> List[FrameStats]:
        """
        Integrate every frame of a dataset directory.

        The dataset's class table replaces the current one while the map is still empty.
        """
        if not isinstance(dataset, Dataset):
            dataset = open_dataset(dataset)
        self.use_class_table(dataset.class_table)
        return self.integrate_frames(dataset.frames())

    def use_class_table(self, table: ClassTable):
        """Switch class tables; only an empty map can change its table"""
        if table == self.class_table:
            return
        if len(self.map):
            raise ValueError("class table differs from the class table of the non-empty map")
        self._attach(PanopticMap(self.map.voxel_size, table))

    def render(self, intr: Intrinsics, pose: Pose, k_sigma: Optional[float] = None) -> RenderedView:
        return render_view(self.map, intr, pose, k_sigma or self.config.RENDER_K_SIGMA,
                           self.config.MAX_DEPTH, self.config.THETA_ST, self.config.THETA_O)

    def evaluate_2d(self, frames: Iterable[PanopticFrame], k_sigma: Optional[float] = None) -> EvalReport:
        return evaluate_2d(self.map, frames, k_sigma or self.config.RENDER_K_SIGMA, self.config.MAX_DEPTH,
                           self.config.THETA_ST, self.config.THETA_O)

    def evaluate_inputs_2d(self, frames: Iterable[PanopticFrame]) -> EvalReport:
        return evaluate_inputs_2d(frames, self.class_table)

    def evaluate_3d(self, cloud: GroundTruthCloud, matching: str = "mahalanobis") -> EvalReport:
        return evaluate_3d(self.map, cloud, self.config.THETA_ST, self.config.THETA_O, matching=matching)

    def save(self, path: Path) -> int:
        return save_map(self.map, path)

    def load(self, path: Path) -> PanopticMap:
        """Replace the current map with one read from disk"""
        pmap = load_map(path)
        if pmap.voxel_size != self.config.VOXEL_SIZE:
            logger.warning(f"⚠️  Loaded map uses {pmap.voxel_size} m voxels, "
                           f"configuration says {self.config.VOXEL_SIZE} m")
        self._attach(pmap)
        return pmap

    def export_ply(self, path: Path, mode: str = "panoptic") -> int:
        return export_ply(self.map, path, mode, self.config.THETA_ST, self.config.THETA_O)

    def get_map_analytics(self) -> Dict:
        """Map size, instance count and integration totals"""
        analytics = dict(self.map.analytics())
        analytics["voxel_size"] = self.map.voxel_size
        analytics.update({f"integrated_{k}": v for k, v in self.integrator.summary().items()})
        return analytics
