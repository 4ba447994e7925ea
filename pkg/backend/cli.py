"""
Command-line surface.

    simulate    scene description -> dataset directory
    map         dataset directory -> map file
    render      map file + pose -> label and depth rasters
    eval2d      map file + annotated dataset -> report
    eval3d      map file + ground-truth cloud from an annotated dataset -> report
    export-ply  map file -> ASCII point cloud
    bench       frames per second over a dataset

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
"""
import argparse
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

from config import Config, PROFILES
from dataset_io import depth_to_raster, open_dataset, read_intrinsics, read_pose, write_dataset, write_raster
from map_io import PLY_MODES
from mapping_system import PanopticMappingSystem
from models import EvalReport, GroundTruthCloud
from scene_simulator import NoiseSpec, SceneSpec, default_scene, gt_cloud_from_frames, simulate_sequence

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

# Flag name -> Config field
THRESHOLD_FLAGS = {
    "voxel_size": "VOXEL_SIZE",
    "max_depth": "MAX_DEPTH",
    "theta_st": "THETA_ST",
    "theta_b": "THETA_B",
    "theta_m": "THETA_M",
    "theta_n": "THETA_N",
    "theta_l": "THETA_L",
    "theta_z": "THETA_Z",
    "theta_o": "THETA_O",
    "vtou_k_sigma": "VTOU_K_SIGMA",
    "render_k_sigma": "RENDER_K_SIGMA",
    "free_space_stride": "FREE_SPACE_STRIDE",
}


class UsageError(ValueError):
    """Arguments parse but do not form a valid configuration"""


def _common_parent() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="logging verbosity")
    return parent


def _threshold_parent() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--profile", default="default", choices=sorted(PROFILES),
                        help="named threshold set applied before individual flags")
    parent.add_argument("--voxel-size", type=float, help="voxel edge length in meters")
    parent.add_argument("--max-depth", type=float, help="ignore depth beyond this range (m)")
    parent.add_argument("--theta-st", type=float, help="stuff proportion threshold")
    parent.add_argument("--theta-b", type=float, help="back-projected share of instance mass")
    parent.add_argument("--theta-m", type=float, help="IoU needed to match a map instance")
    parent.add_argument("--theta-n", type=float, help="IoU at or below which a new instance is created")
    parent.add_argument("--theta-l", type=float, help="semantic score gate")
    parent.add_argument("--theta-z", type=float, help="panoptic score gate")
    parent.add_argument("--theta-o", type=float, help="instance/semantic observation ratio")
    parent.add_argument("--vtou-k-sigma", type=float, help="footprint size for instance masks")
    parent.add_argument("--render-k-sigma", type=float, help="footprint size for rendered views")
    parent.add_argument("--free-space-stride", type=int, help="carve free space along every n-th pixel ray")
    parent.add_argument("--trace-matches", action="store_true", help="log every instance match decision")
    return parent


def build_parser() -> argparse.ArgumentParser:
    common = _common_parent()
    thresholds = _threshold_parent()
    parser = argparse.ArgumentParser(prog="pndt", description="Panoptic occupancy NDT mapping")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="render a synthetic dataset")
    p.add_argument("--out", type=Path, required=True, help="dataset directory to write")
    p.add_argument("--scene", type=Path, help="scene description (JSON); built-in room when omitted")
    p.add_argument("--frames", type=int, default=60, help="orbit frames of the built-in scene")
    p.add_argument("--depth-sigma", type=float, default=0.0, help="depth noise at 1 m (m)")
    p.add_argument("--flip-prob", type=float, default=0.0, help="probability of a confusable-class flip")
    p.add_argument("--erode", type=int, default=0, help="instance border erosion in pixels")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("map", parents=[common, thresholds], help="build a map from a dataset")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="map file to write")

    p = sub.add_parser("render", parents=[common, thresholds], help="render label rasters from a map")
    p.add_argument("--map", type=Path, required=True)
    p.add_argument("--pose", type=Path, required=True, help="pose file (16 values, camera to world)")
    p.add_argument("--intrinsics", type=Path, required=True, help="intrinsics file")
    p.add_argument("--out", type=Path, required=True, help="directory for the rasters")

    for name, help_text in (("eval2d", "score rendered views against annotated frames"),
                            ("eval3d", "score the map at ground-truth points")):
        p = sub.add_parser(name, parents=[common, thresholds], help=help_text)
        p.add_argument("--map", type=Path, required=True)
        p.add_argument("--dataset", type=Path, required=True, help="dataset with ground-truth rasters")
        p.add_argument("--json", action="store_true", help="also print the report as JSON")
    sub.choices["eval2d"].add_argument("--inputs", action="store_true",
                                       help="also score the raw per-frame inputs")
    sub.choices["eval3d"].add_argument("--leaf-size", type=float, default=0.01,
                                       help="voxel-grid filter for the ground-truth cloud (m)")
    sub.choices["eval3d"].add_argument("--matching", choices=["mahalanobis", "voxel"], default="mahalanobis")

    p = sub.add_parser("export-ply", parents=[common, thresholds], help="write the map as a point cloud")
    p.add_argument("--map", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--mode", choices=list(PLY_MODES), default="panoptic")

    p = sub.add_parser("bench", parents=[common, thresholds], help="measure integration throughput")
    p.add_argument("--dataset", type=Path, required=True)
    return parser


def config_from_args(args: argparse.Namespace) -> Config:
    """Profile thresholds overridden by explicit flags; invalid combinations raise UsageError"""
    try:
        cfg = Config.for_profile(args.profile)
        overrides = {field: getattr(args, flag) for flag, field in THRESHOLD_FLAGS.items()}
        if args.trace_matches:
            overrides["TRACE_MATCHES"] = True
        cfg = cfg.with_overrides(**overrides)
    except ValueError as e:
        raise UsageError(str(e)) from e
    critical = [issue for issue in cfg.validate() if "must be" in issue]
    if critical:
        raise UsageError("; ".join(critical))
    return cfg


def _print_report(report: EvalReport, as_json: bool):
    print(report.to_text())
    print(report.to_records(), end="")
    if as_json:
        print(report.model_dump_json(indent=2))


# Subcommands

def cmd_simulate(args: argparse.Namespace) -> int:
    if args.scene is not None:
        scene = SceneSpec.model_validate_json(args.scene.read_text())
    else:
        scene = default_scene(n_frames=args.frames)
    noise = NoiseSpec(depth_sigma_at_1m=args.depth_sigma, sem_flip_prob=args.flip_prob,
                      border_erode_px=args.erode, seed=args.seed)
    frames = simulate_sequence(scene, noise)
    write_dataset(args.out, frames, scene.class_table)
    print(f"wrote {len(frames)} frame(s) to {args.out}")
    return EXIT_OK


def cmd_map(args: argparse.Namespace) -> int:
    system = PanopticMappingSystem(config_from_args(args))
    system.integrate_dataset(args.dataset)
    size = system.save(args.out)
    analytics = system.get_map_analytics()
    print(f"map: {analytics['voxels']} voxel(s), {analytics['instances_allocated']} instance id(s), "
          f"{size} bytes -> {args.out}")
    return EXIT_OK


def cmd_render(args: argparse.Namespace) -> int:
    system = PanopticMappingSystem.from_map_file(config_from_args(args), args.map)
    view = system.render(read_intrinsics(args.intrinsics), read_pose(args.pose))
    out = Path(args.out)
    write_raster(out / "semantic.pgm", view.semantic, 8)
    write_raster(out / "instance.pgm", view.instance, 16)
    write_raster(out / "panoptic_class.pgm", view.panoptic_class, 8)
    write_raster(out / "depth.pgm", depth_to_raster(view.depth), 16)
    print(f"rendered {view.covered.sum()} covered pixel(s) to {out}")
    return EXIT_OK


def cmd_eval2d(args: argparse.Namespace) -> int:
    system = PanopticMappingSystem.from_map_file(config_from_args(args), args.map)
    frames = list(open_dataset(args.dataset).frames())
    _print_report(system.evaluate_2d(frames), args.json)
    if args.inputs:
        _print_report(system.evaluate_inputs_2d(frames), args.json)
    return EXIT_OK


def cmd_eval3d(args: argparse.Namespace) -> int:
    system = PanopticMappingSystem.from_map_file(config_from_args(args), args.map)
    frames = [f for f in open_dataset(args.dataset).frames() if f.has_ground_truth]
    if not frames:
        raise ValueError(f"dataset {args.dataset} has no ground-truth rasters")
    cloud: GroundTruthCloud = gt_cloud_from_frames(frames, leaf_size=args.leaf_size)
    _print_report(system.evaluate_3d(cloud, matching=args.matching), args.json)
    return EXIT_OK


def cmd_export_ply(args: argparse.Namespace) -> int:
    system = PanopticMappingSystem.from_map_file(config_from_args(args), args.map)
    count = system.export_ply(args.out, mode=args.mode)
    print(f"exported {count} vertices to {args.out}")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    system = PanopticMappingSystem(config_from_args(args))
    dataset = open_dataset(args.dataset)
    frames = list(dataset.frames())
    system.use_class_table(dataset.class_table)
    start = time.perf_counter()
    system.integrate_frames(frames)
    elapsed = time.perf_counter() - start
    fps = len(frames) / elapsed if elapsed > 0 else float("inf")
    print(f"frames={len(frames)}")
    print(f"seconds={elapsed:.3f}")
    print(f"fps={fps:.2f}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "map": cmd_map,
    "render": cmd_render,
    "eval2d": cmd_eval2d,
    "eval3d": cmd_eval3d,
    "export-ply": cmd_export_ply,
    "bench": cmd_bench,
}


def run_cli(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    logging.getLogger().setLevel(args.log_level)
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        logger.error(f"❌ Invalid arguments: {e}")
        return EXIT_USAGE
    except Exception as e:
        logger.error(f"❌ {args.command} failed: {e}")
        logger.debug("Traceback", exc_info=True)
        return EXIT_RUNTIME


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
