"""Command line entry point: ``graspsort <subcommand>``.

Exit codes: 0 success, 1 I/O or configuration error, 2 no target,
3 no grasp, 4 planning failure. ``GRASPSORT_LOG_LEVEL`` sets log verbosity.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, GraspSortError, PlanningError, ReplayAborted
from .geometry import RigidTransform
from .kinematics import default_robot, forward_kinematics, load_robot
from .pcd import PCDError, read_pcd, write_pcd
from .pipeline import (HOME_JOINTS, exit_code_for, export_artifacts, load_scenario, run_pipeline)
from .planning import (DistanceField, PlanParams, StdoutSink, TrajectoryOptimizer, build_distance_field,
                       load_trajectory, replay, save_trajectory, validate_trajectory)
from .scene import bundled_scene_spec, generate_synthetic_scene, load_scene_spec
from .selection import format_detections

logger = logging.getLogger("graspsort")

EXIT_OK, EXIT_IO, EXIT_NO_TARGET, EXIT_NO_GRASP, EXIT_PLAN = 0, 1, 2, 3, 4
TAG_OFFSET = RigidTransform(np.eye(3), [0.0, 0.0, 0.02], "tag", "ee")


def _setup_logging():
    level = os.environ.get("GRASPSORT_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _joints(text):
    vals = [float(v) for v in text.replace(",", " ").split()]
    if len(vals) != 6:
        raise argparse.ArgumentTypeError("expected 6 joint values")
    return np.array(vals)


def load_field(path, resolution=0.01, padding=0.1):
    """Distance field from a saved ``.npz`` or built from an obstacle ``.pcd`` in the base frame."""
    path = Path(path)
    if path.suffix == ".pcd":
        cloud, _ = read_pcd(path, frame_id="base")
        return build_distance_field(cloud, resolution, padding)
    return DistanceField.load(path)


def cmd_run(args):
    sc = load_scenario(args.scenario)
    if args.seed is not None:
        sc.seed = args.seed
    if args.replay_rate is not None:
        sc.replay_rate = args.replay_rate
    report = run_pipeline(sc)
    written = export_artifacts(report, args.out)
    summary = {"status": report.status, "failed_stage": report.failed_stage, "error": report.error,
               "seed": report.seed, "files": {k: str(v) for k, v in written.items()}}
    print(json.dumps(summary, indent=1))
    return report.exit_code


def cmd_gen_scene(args):
    spec = bundled_scene_spec() if args.spec == "bundled" else load_scene_spec(args.spec)
    scene = generate_synthetic_scene(spec, args.n_points, args.noise, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_pcd(out / "cloud.pcd", scene.cloud)
    (out / "detections.jsonl").write_text(format_detections(scene.detections))
    (out / "scene.json").write_text(json.dumps(spec.to_dict(), indent=1) + "\n")
    (out / "ground_truth.json").write_text(json.dumps(scene.ground_truth, indent=1) + "\n")

    robot = default_robot()
    base_ee = forward_kinematics(robot, HOME_JOINTS)[0].with_frames("ee", "base")
    tag_cam = (base_ee @ TAG_OFFSET).inverse() @ scene.camera_pose
    (x0, y0), (x1, y1) = spec.table_extent
    h = spec.table_height
    scenario = {
        "format": "scenario", "version": 1, "seed": args.seed,
        "cloud": "cloud.pcd", "detections": "detections.jsonl",
        "camera": scene.camera.to_dict(),
        "transforms": {"base_ee": {"joints": list(HOME_JOINTS)}, "ee_tag": {"matrix": TAG_OFFSET.to_list()},
                       "tag_cam": {"matrix": tag_cam.to_list()}},
        "start_joints": list(HOME_JOINTS),
        "priority": args.priority.split(","),
        "pipeline": {"workspace": {"min": [x0, y0, h - 0.05], "max": [x1, y1, h + 0.5]}},
    }
    (out / "scenario.json").write_text(json.dumps(scenario, indent=1) + "\n")
    print(json.dumps({"points": len(scene.cloud), "detections": len(scene.detections), "out": str(out)}))
    return EXIT_OK


def cmd_plan_only(args):
    robot = load_robot(args.robot) if args.robot else default_robot()
    fld = load_field(args.field)
    params = PlanParams.from_dict(json.loads(Path(args.params).read_text())) if args.params else PlanParams()
    opt = TrajectoryOptimizer(robot, fld, params)
    try:
        traj = opt.plan(args.start, args.goal)
    except PlanningError as exc:
        print(json.dumps({"status": "failed", "best_clearance": exc.best_clearance}))
        return EXIT_PLAN
    save_trajectory(traj.quantized(), args.out)
    print(json.dumps({"status": "feasible", "n_waypoints": len(traj), "report": opt.report.to_dict()}))
    return EXIT_OK


def cmd_validate(args):
    traj = load_trajectory(args.trajectory)
    robot = load_robot(args.robot) if args.robot else default_robot()
    fld = load_field(args.field)
    rep = validate_trajectory(traj, robot, fld, args.d_safe, args.step_limit)
    print(json.dumps(rep.to_dict(), indent=1))
    return EXIT_OK if rep.feasible else EXIT_PLAN


def cmd_replay(args):
    traj = load_trajectory(args.trajectory)
    try:
        log = replay(traj, args.rate, StdoutSink())
    except ReplayAborted as exc:
        logger.error("%s", exc)
        return EXIT_IO
    logger.info("replayed %d waypoints in %.3f s", len(log.emissions), log.duration)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="graspsort", description="Perception-to-trajectory grasp pipeline.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the full pipeline on a scenario")
    r.add_argument("--scenario", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", default="out")
    r.add_argument("--replay-rate", type=float, dest="replay_rate")
    r.set_defaults(func=cmd_run)

    g = sub.add_parser("gen-scene", help="generate a synthetic scene and scenario")
    g.add_argument("--spec", required=True, help="scene spec JSON, or 'bundled'")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-points", type=int, default=50000, dest="n_points")
    g.add_argument("--noise", type=float, default=0.001)
    g.add_argument("--priority", default="cup", help="comma-separated class order")
    g.set_defaults(func=cmd_gen_scene)

    po = sub.add_parser("plan-only", help="plan between two joint configurations")
    po.add_argument("--field", required=True, help=".npz distance field or obstacle .pcd (base frame)")
    po.add_argument("--start", type=_joints, required=True)
    po.add_argument("--goal", type=_joints, required=True)
    po.add_argument("--robot")
    po.add_argument("--params", help="planning parameter JSON")
    po.add_argument("--out", default="trajectory.txt")
    po.set_defaults(func=cmd_plan_only)

    v = sub.add_parser("validate", help="check a trajectory against a distance field")
    v.add_argument("--trajectory", required=True)
    v.add_argument("--robot")
    v.add_argument("--field", required=True)
    v.add_argument("--d-safe", type=float, default=0.02, dest="d_safe")
    v.add_argument("--step-limit", type=float, default=0.25, dest="step_limit")
    v.set_defaults(func=cmd_validate)

    rp = sub.add_parser("replay", help="emit trajectory waypoints to stdout at a fixed rate")
    rp.add_argument("--trajectory", required=True)
    rp.add_argument("--rate", type=float, default=10.0)
    rp.set_defaults(func=cmd_replay)
    return p


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, PCDError, OSError, ValueError) as exc:
        logger.error("%s", exc)
        return EXIT_IO
    except GraspSortError as exc:
        logger.error("%s", exc)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
