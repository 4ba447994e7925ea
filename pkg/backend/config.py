import os
import logging
from dataclasses import dataclass, fields, replace
from typing import List
from dotenv import load_dotenv

from models import MappingParams

# Load environment variables from .env file
load_dotenv()

# Setup logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


# Malformed environment values found while reading the defaults below
ENV_ISSUES: List[str] = []


def _env_number(name: str, default, cast):
    raw = os.getenv(name)
    if raw is None:
        return default
    try:
        return cast(raw)
    except ValueError:
        ENV_ISSUES.append(f"{name} ('{raw}') must be a valid {cast.__name__}, using {default}")
        return default


def _env_float(name: str, default: float) -> float:
    return _env_number(name, default, float)


def _env_int(name: str, default: int) -> int:
    return _env_number(name, default, int)


def _env_bool(name: str, default: bool) -> bool:
    return os.getenv(name, str(default)).strip().lower() in ("1", "true", "yes", "on")


# Threshold sets selectable with --profile
PROFILES = {
    "default": {},
    # Real-world deployment uses slightly stricter instance matching
    "application": {"THETA_M": 0.3, "THETA_N": 0.2},
    # Clean synthetic inputs tolerate a higher panoptic score gate
    "clean": {"THETA_Z": 0.4},
    "noisy": {"THETA_Z": 0.1},
}


@dataclass
class Config:
    """Configuration settings for panoptic mapping with validation"""
    # Map settings
    VOXEL_SIZE: float = _env_float("PNDT_VOXEL_SIZE", 0.1)    # Voxel edge length in meters
    MAX_DEPTH: float = _env_float("PNDT_MAX_DEPTH", 20.0)     # Pixels farther away are skipped

    # Instance matching thresholds
    THETA_ST: float = _env_float("PNDT_THETA_ST", 0.9)   # Stuff proportion above which a voxel is stuff
    THETA_B: float = _env_float("PNDT_THETA_B", 0.8)     # Share of instance mass that is back-projected
    THETA_M: float = _env_float("PNDT_THETA_M", 0.2)     # IoU above which an instance matches
    THETA_N: float = _env_float("PNDT_THETA_N", 0.1)     # IoU at or below which a new instance is created

    # Histogram update gates
    THETA_L: float = _env_float("PNDT_THETA_L", 0.7)     # Semantic score gate
    THETA_Z: float = _env_float("PNDT_THETA_Z", 0.1)     # Panoptic score gate
    THETA_O: float = _env_float("PNDT_THETA_O", 0.25)    # Instance/semantic observation ratio for propagation

    # Back-projection settings
    VTOU_K_SIGMA: float = _env_float("PNDT_VTOU_K_SIGMA", 2.0)      # Footprint ellipse for mask building
    RENDER_K_SIGMA: float = _env_float("PNDT_RENDER_K_SIGMA", 3.0)  # Footprint ellipse for rendered views

    # Free-space carving uses every n-th valid pixel, 0 disables it
    FREE_SPACE_STRIDE: int = _env_int("PNDT_FREE_SPACE_STRIDE", 8)

    TRACE_MATCHES: bool = _env_bool("PNDT_TRACE_MATCHES", False)
    SEED: int = _env_int("PNDT_SEED", 0)

    @classmethod
    def for_profile(cls, profile: str) -> "Config":
        """Create a configuration with the thresholds of a named profile"""
        if profile not in PROFILES:
            raise ValueError(f"Unknown profile '{profile}', expected one of {sorted(PROFILES)}")
        return cls().with_overrides(**PROFILES[profile])

    def with_overrides(self, **overrides) -> "Config":
        """Return a copy with the given fields replaced; None values are ignored"""
        known = {f.name for f in fields(self)}
        unknown = sorted(set(overrides) - known)
        if unknown:
            raise ValueError(f"Unknown configuration keys: {unknown}")
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def mapping_params(self) -> MappingParams:
        """Thresholds in the form consumed by the map integrator"""
        return MappingParams(
            max_depth=self.MAX_DEPTH,
            theta_st=self.THETA_ST,
            theta_b=self.THETA_B,
            theta_m=self.THETA_M,
            theta_n=self.THETA_N,
            theta_l=self.THETA_L,
            theta_z=self.THETA_Z,
            theta_o=self.THETA_O,
            vtou_k_sigma=self.VTOU_K_SIGMA,
            free_space_stride=self.FREE_SPACE_STRIDE,
            trace_matches=self.TRACE_MATCHES,
        )

    def validate(self) -> List[str]:
        """
        Validate configuration settings and return list of issues found.

        Returns:
            List of validation error messages (empty if all valid)
        """
        issues = list(ENV_ISSUES)

        if self.VOXEL_SIZE <= 0:
            issues.append(f"VOXEL_SIZE ({self.VOXEL_SIZE}) must be > 0")

        if self.MAX_DEPTH <= 0:
            issues.append(f"MAX_DEPTH ({self.MAX_DEPTH}) must be > 0")

        for name in ("THETA_ST", "THETA_B", "THETA_M", "THETA_N", "THETA_L", "THETA_Z", "THETA_O"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                issues.append(f"{name} ({value}) must be within [0, 1]")

        if self.THETA_M < self.THETA_N:
            issues.append(f"THETA_M ({self.THETA_M}) must be >= THETA_N ({self.THETA_N})")

        if self.VTOU_K_SIGMA <= 0 or self.RENDER_K_SIGMA <= 0:
            issues.append(
                f"VTOU_K_SIGMA ({self.VTOU_K_SIGMA}) and RENDER_K_SIGMA ({self.RENDER_K_SIGMA}) must be > 0")

        if self.FREE_SPACE_STRIDE < 0:
            issues.append(f"FREE_SPACE_STRIDE ({self.FREE_SPACE_STRIDE}) must be >= 0")

        # Warnings for suboptimal values
        if 0 < self.VOXEL_SIZE < 0.02:
            issues.append(f"VOXEL_SIZE ({self.VOXEL_SIZE}) is very small - map memory grows quickly")

        if self.MAX_DEPTH > 50:
            issues.append(f"MAX_DEPTH ({self.MAX_DEPTH}) is very large - far depth is unreliable")

        if self.FREE_SPACE_STRIDE == 0:
            issues.append("FREE_SPACE_STRIDE is 0 - free space is not carved")

        return issues

    def validate_and_log(self) -> bool:
        """
        Validate configuration and log issues.

        Returns:
            True if configuration is valid, False if critical issues found
        """
        issues = self.validate()

        if not issues:
            logger.info("✅ Configuration validation passed")
            return True

        critical_issues = [issue for issue in issues if "must be" in issue]
        warnings = [issue for issue in issues if "must be" not in issue]

        for warning in warnings:
            logger.warning(f"⚠️  Config Warning: {warning}")

        for critical in critical_issues:
            logger.error(f"❌ Config Error: {critical}")

        if critical_issues:
            logger.error(f"❌ Configuration has {len(critical_issues)} critical issue(s)")
            return False

        logger.info(f"✅ Configuration validation passed with {len(warnings)} warning(s)")
        return True

    def get_summary(self) -> str:
        """Get a summary of current configuration for debugging"""
        return f"""
Configuration Summary:
• VOXEL_SIZE: {self.VOXEL_SIZE} m
• MAX_DEPTH: {self.MAX_DEPTH} m
• THETA_ST / THETA_B: {self.THETA_ST} / {self.THETA_B}
• THETA_M / THETA_N: {self.THETA_M} / {self.THETA_N}
• THETA_L / THETA_Z / THETA_O: {self.THETA_L} / {self.THETA_Z} / {self.THETA_O}
• VTOU_K_SIGMA / RENDER_K_SIGMA: {self.VTOU_K_SIGMA} / {self.RENDER_K_SIGMA}
• FREE_SPACE_STRIDE: {self.FREE_SPACE_STRIDE}
• SEED: {self.SEED}
"""

# Create and validate config on import
config = Config()

# Validate configuration on startup
if __name__ != "__main__":  # Don't validate during direct script execution
    try:
        config.validate_and_log()
    except Exception as e:
        logger.error(f"❌ Configuration validation failed with exception: {e}")
        logger.info("📋 Current configuration:" + config.get_summary())
