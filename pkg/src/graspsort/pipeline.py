"""Scenario loading, end-to-end orchestration and artifact export.

A scenario is a JSON file (paths inside it are relative to the file)::

    {"format": "scenario", "version": 1, "seed": 0,
     "cloud": "cloud.pcd",                  # or {"synthetic": "scene.json", "n_points": 50000, "noise": 0.001}
     "detections": "detections.jsonl",      # optional for synthetic clouds
     "camera": {"fx": 525.0, ...},          # optional
     "transforms": {"base_ee": {"joints": [...]} | {"matrix": [[...]]},
                    "ee_tag": {"matrix": ...}, "tag_cam": {"matrix": ...}},
     "robot": "robot.json",                 # optional, bundled arm by default
     "start_joints": [...],
     "priority": ["cup", "can"],
     "depth_correction": {"scale": 1.0, "offset": 0.0},
     "pipeline": {...}, "gripper": {...}, "grasp": {...}, "scoring": {...},
     "planning": {...}, "field": {"resolution": 0.01, "padding": 0.1},
     "replay_rate": null}
"""

import json
import logging
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .cloud import (PipelineParams, euclidean_cluster, segment_plane_ransac, statistical_outlier_filter,
                    voxel_downsample, workspace_crop)
from .exceptions import (ConfigError, DetectionFileError, GraspSortError, NoCandidateError, NoGraspError,
                         NoTargetError, PlanningError, UnreachableError)
from .geometry import CameraModel, DepthCorrection, PointCloud, RigidTransform, compose, transform_cloud
from .grasping import GraspCandidate, GripperGeometry, sample_candidates
from .kinematics import N_JOINTS, default_robot, forward_kinematics, inverse_kinematics, load_robot
from .pcd import PCDError, read_pcd, write_pcd
from .planning import (PlanParams, Trajectory, TrajectoryOptimizer, build_distance_field, ListSink, replay,
                       save_trajectory, load_trajectory, validate_trajectory)
from .scene import SceneSpec, generate_synthetic_scene, load_scene_spec
from .scoring import ScoreWeights, ScoringContext, rank_candidates, score_grasp
from .selection import (PrioritySpec, associate_cluster, bbox_center, parse_detections,
                        select_target_index)

logger = logging.getLogger(__name__)

SCENARIO_FORMAT = "scenario"
SCENARIO_VERSION = 1
REPORT_HEADER = "GRASPSORT-REPORT"
REPORT_VERSION = 1
CANDIDATES_FORMAT = "grasp-candidates"
GRASP_FORMAT = "grasp"
FORMAT_VERSION = 1

HOME_JOINTS = (2.868, -1.67, 1.511, -1.412, -1.571, 1.297)
STAGES = ("load", "filter", "transform", "segment", "cluster", "associate", "generate", "score", "ik",
          "plan", "replay")
ARTIFACT_NAMES = {"clusters": "clusters.pcd", "candidates": "candidates.jsonl", "grasp": "grasp.json",
                  "trajectory": "trajectory.txt", "report": "report.txt"}


def compose_hand_eye(m_base_e, m_e_tag, m_tag_cam):
    """Camera pose in the robot base frame through the end-effector tag."""
    return compose(compose(m_base_e, m_e_tag), m_tag_cam)


# -- scenario ------------------------------------------------------------------

@dataclass
class GraspParams:
    n_samples: int = 100
    n_orientations: int = 8
    radius: float = 0.015
    step: float = 0.001
    min_region_points: int = 5
    sample_region_radius: Optional[float] = None
    pregrasp_offset: float = 0.05
    approach_steps: int = 5
    max_ik_attempts: int = 30


def _block(cls, d, name):
    d = dict(d or {})
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {name} parameters: {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {name} parameters: {exc}") from None


@dataclass
class Scenario:
    cloud_path: Optional[Path] = None
    scene_spec: Optional[SceneSpec] = None
    n_points: int = 50000
    noise: float = 0.001
    detections_path: Optional[Path] = None
    camera: CameraModel = field(default_factory=CameraModel)
    base_ee: Optional[RigidTransform] = None
    ee_tag: Optional[RigidTransform] = None
    tag_cam: Optional[RigidTransform] = None
    robot_path: Optional[Path] = None
    start_joints: np.ndarray = field(default_factory=lambda: np.array(HOME_JOINTS))
    priority: PrioritySpec = field(default_factory=lambda: PrioritySpec(("cup",)))
    depth_correction: Optional[DepthCorrection] = None
    pipeline: PipelineParams = field(default_factory=PipelineParams)
    gripper: GripperGeometry = field(default_factory=GripperGeometry)
    grasp: GraspParams = field(default_factory=GraspParams)
    scoring: ScoreWeights = field(default_factory=ScoreWeights)
    planning: PlanParams = field(default_factory=PlanParams)
    field_resolution: float = 0.01
    field_padding: float = 0.1
    seed: int = 0
    replay_rate: Optional[float] = None
    source: Optional[Path] = None

    def robot(self):
        return load_robot(self.robot_path) if self.robot_path else default_robot()


def _transform(d, name, from_frame, to_frame, robot):
    if d is None:
        return None
    if "joints" in d:
        if name != "base_ee":
            raise ConfigError(f"only base_ee may be given as joints, not {name}")
        return forward_kinematics(robot, d["joints"])[0].with_frames(from_frame, to_frame)
    try:
        return RigidTransform.from_matrix(d["matrix"], from_frame, to_frame)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad transform {name}: {exc}") from None


def _existing(root, rel, what):
    p = (root / rel).resolve()
    if not p.exists():
        raise ConfigError(f"{what} file not found: {p}")
    return p


def scenario_from_dict(d, root="."):
    root = Path(root)
    if d.get("format") != SCENARIO_FORMAT or d.get("version") != SCENARIO_VERSION:
        raise ConfigError(f"expected a version {SCENARIO_VERSION} scenario file")
    sc = Scenario(source=root)
    sc.seed = int(d.get("seed", 0))
    src = d.get("cloud")
    if isinstance(src, str):
        sc.cloud_path = _existing(root, src, "cloud")
    elif isinstance(src, dict) and "synthetic" in src:
        spec = src["synthetic"]
        sc.scene_spec = (load_scene_spec(_existing(root, spec, "scene spec")) if isinstance(spec, str)
                         else SceneSpec.from_dict(spec))
        sc.n_points = int(src.get("n_points", sc.n_points))
        sc.noise = float(src.get("noise", sc.noise))
    else:
        raise ConfigError("scenario needs a cloud path or a synthetic scene spec")
    if d.get("detections"):
        sc.detections_path = _existing(root, d["detections"], "detections")
    elif sc.scene_spec is None:
        raise ConfigError("scenario needs a detections file")
    if d.get("robot"):
        sc.robot_path = _existing(root, d["robot"], "robot")
    try:
        if "camera" in d:
            sc.camera = CameraModel(**d["camera"])
        if "start_joints" in d:
            sc.start_joints = np.asarray(d["start_joints"], dtype=float).reshape(N_JOINTS)
        if "priority" in d:
            sc.priority = PrioritySpec(tuple(d["priority"]))
        if d.get("depth_correction"):
            dc = d["depth_correction"]
            sc.depth_correction = DepthCorrection(dc.get("scale", 1.0), dc.get("offset", 0.0))
        sc.pipeline = PipelineParams.from_dict(d.get("pipeline"))
        sc.planning = PlanParams.from_dict(d.get("planning"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad scenario value: {exc}") from None
    sc.gripper = _block(GripperGeometry, d.get("gripper"), "gripper")
    sc.grasp = _block(GraspParams, d.get("grasp"), "grasp")
    sc.scoring = _block(ScoreWeights, d.get("scoring"), "scoring")
    fd = dict(d.get("field") or {})
    sc.field_resolution = float(fd.pop("resolution", sc.field_resolution))
    sc.field_padding = float(fd.pop("padding", sc.field_padding))
    if fd:
        raise ConfigError(f"unknown field parameters: {sorted(fd)}")
    tf = d.get("transforms")
    if tf:
        robot = sc.robot()
        sc.base_ee = _transform(tf.get("base_ee"), "base_ee", "ee", "base", robot)
        sc.ee_tag = _transform(tf.get("ee_tag"), "ee_tag", "tag", "ee", robot)
        sc.tag_cam = _transform(tf.get("tag_cam"), "tag_cam", "camera", "tag", robot)
        if None in (sc.base_ee, sc.ee_tag, sc.tag_cam):
            raise ConfigError("transforms need base_ee, ee_tag and tag_cam")
    elif sc.scene_spec is None:
        raise ConfigError("scenario needs hand-eye transforms")
    rate = d.get("replay_rate")
    sc.replay_rate = None if rate is None else float(rate)
    return sc


def load_scenario(path):
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read scenario: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"scenario is not valid JSON: {exc}") from None
    return scenario_from_dict(d, path.parent)


# -- report --------------------------------------------------------------------

@dataclass
class RunReport:
    seed: int
    status: str = "running"
    failed_stage: Optional[str] = None
    error: Optional[str] = None
    exit_code: int = 0
    stages: dict = field(default_factory=lambda: {s: {"status": "skipped", "seconds": 0.0} for s in STAGES})
    total_seconds: float = 0.0
    counts: dict = field(default_factory=dict)
    n_clusters: int = 0
    association: Optional[dict] = None
    candidates: dict = field(default_factory=lambda: {"generated": 0, "surviving": 0, "selected": 0})
    grasp_pose: Optional[dict] = None
    plan: dict = field(default_factory=lambda: {"status": "not run"})
    trajectory: Optional[dict] = None
    replay: Optional[dict] = None
    artifacts: dict = field(default_factory=dict, repr=False)

    WALL_CLOCK_KEYS = ("stages", "total_seconds", "replay")

    def to_dict(self, wall_clock=True):
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "artifacts"}
        if not wall_clock:
            for k in self.WALL_CLOCK_KEYS:
                d.pop(k)
            d["stage_status"] = {s: v["status"] for s, v in self.stages.items()}
        return json.loads(json.dumps(d))

    @property
    def ok(self):
        return self.status == "ok"


def format_report(report):
    lines = [f"{REPORT_HEADER} {REPORT_VERSION}"]
    for k, v in report.to_dict().items():
        lines.append(f"{k}\t{json.dumps(v, sort_keys=True)}")
    return "\n".join(lines) + "\n"


def parse_report(text):
    lines = text.splitlines()
    if not lines or lines[0] != f"{REPORT_HEADER} {REPORT_VERSION}":
        raise ConfigError("not a version 1 run report")
    d = {}
    for ln in lines[1:]:
        if not ln:
            continue
        key, _, val = ln.partition("\t")
        d[key] = json.loads(val)
    known = {f.name for f in fields(RunReport)} - {"artifacts"}
    if set(d) != known:
        raise ConfigError(f"report fields differ from schema: {sorted(set(d) ^ known)}")
    return RunReport(**d)


EXIT_CODES = ((NoTargetError, 2), (NoCandidateError, 2), (NoGraspError, 3), (UnreachableError, 4),
              (PlanningError, 4))


def exit_code_for(exc):
    for cls, code in EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return 1


class _Stages:
    def __init__(self, report):
        self.report = report
        self.current = None

    def __call__(self, name):
        self.current = name
        return self

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        dt = time.perf_counter() - self.t0
        self.report.stages[self.current] = {"status": "failed" if exc else "ok", "seconds": dt}
        return False


# -- pipeline --------------------------------------------------------------------

def _load_inputs(sc):
    if sc.scene_spec is not None:
        scene = generate_synthetic_scene(sc.scene_spec, sc.n_points, sc.noise, sc.seed, sc.camera)
        cloud, detections = scene.cloud, scene.detections
        base_cam = scene.camera_pose
    else:
        try:
            cloud, _ = read_pcd(sc.cloud_path, frame_id="camera")
        except (OSError, PCDError) as exc:
            raise ConfigError(f"cannot read cloud: {exc}") from None
        if cloud.view_point is None:
            # camera-frame file: the sensor sits at the frame origin
            cloud = PointCloud(cloud.points, cloud.frame_id, np.zeros(3))
        detections = None
        base_cam = None
    if sc.detections_path is not None:
        try:
            detections = parse_detections(Path(sc.detections_path).read_bytes(),
                                          (sc.camera.width, sc.camera.height))
        except OSError as exc:
            raise ConfigError(f"cannot read detections: {exc}") from None
    if sc.base_ee is not None:
        base_cam = compose_hand_eye(sc.base_ee, sc.ee_tag, sc.tag_cam)
    return cloud, detections, base_cam


def _approach_segment(robot, pregrasp_q, grasp_pose, offset, steps, max_step):
    """IK-tracked straight line from the pregrasp pose to the grasp pose.

    Raises :class:`UnreachableError` if IK jumps branches (a joint step above ``max_step``).
    """
    qs = [pregrasp_q]
    approach = grasp_pose.rotation[:, 0]
    for k in range(1, steps + 1):
        back = offset * (1 - k / steps)
        target = RigidTransform(grasp_pose.rotation, grasp_pose.translation - back * approach,
                                grasp_pose.from_frame, grasp_pose.to_frame)
        q = inverse_kinematics(robot, target, qs[-1])
        if np.abs(q - qs[-1]).max() > max_step:
            raise UnreachableError("approach segment leaves the IK branch", q_best=q)
        qs.append(q)
    return np.array(qs)


def _pregrasp(pose, offset):
    return RigidTransform(pose.rotation, pose.translation - offset * pose.rotation[:, 0],
                          pose.from_frame, pose.to_frame)


def run_pipeline(sc, replay_sink=None):
    """Full perception-to-trajectory run. Never raises pipeline errors: failures land in the report."""
    report = RunReport(seed=sc.seed)
    stage = _Stages(report)
    art = report.artifacts
    t_start = time.perf_counter()
    try:
        with stage("load"):
            cloud, detections, base_cam = _load_inputs(sc)
            robot = sc.robot()
            report.counts["raw"] = len(cloud)
            if not robot.within_limits(sc.start_joints):
                raise ConfigError("start_joints violate joint limits")
        p = sc.pipeline
        with stage("filter"):
            if sc.depth_correction is not None:
                cloud = sc.depth_correction.apply_to_cloud(cloud)
            cloud = statistical_outlier_filter(cloud, p.k, p.stddev_mult)
            report.counts["after_statistical"] = len(cloud)
            cloud = voxel_downsample(cloud, p.leaf)
            report.counts["after_voxel"] = len(cloud)
        with stage("transform"):
            if base_cam is None:
                raise ConfigError("no camera-to-base transform available")
            cloud = transform_cloud(cloud, base_cam)
            if p.workspace is not None:
                cloud = workspace_crop(cloud, p.workspace)
            report.counts["after_crop"] = len(cloud)
            art["scene_cloud"] = cloud
        with stage("segment"):
            _, inliers = segment_plane_ransac(cloud, p.plane_thresh, p.plane_iterations, sc.seed)
            report.counts["plane_inliers"] = int(len(inliers))
            keep = np.setdiff1d(np.arange(len(cloud)), inliers)
            objects = cloud.select(keep)
        with stage("cluster"):
            clusters = euclidean_cluster(objects, p.cluster_tol, p.min_size, p.max_size)
            labels = np.full(len(cloud), -1, dtype=np.int64)
            for k, c in enumerate(clusters):
                labels[keep[c.indices]] = k
            art["labels"] = labels
            report.n_clusters = len(clusters)
        with stage("associate"):
            if not detections:
                raise NoTargetError("no detections")
            cam_from_base = base_cam.inverse()
            cam_clusters = [type(c)(c.indices, cam_from_base.apply(c.centroid[None])[0]) for c in clusters]
            assoc = [associate_cluster(bbox_center(d), cam_clusters, sc.camera, i)
                     for i, d in enumerate(detections)] if clusters else []
            if not assoc:
                raise NoCandidateError("no clusters to associate")
            proximity = [float(np.linalg.norm(cam_clusters[a.cluster_index].centroid)) for a in assoc]
            ti = select_target_index(detections, sc.priority, proximity)
            a = assoc[ti]
            target = clusters[a.cluster_index]
            report.association = {"detection_index": ti, "class_name": detections[ti].class_name,
                                  "cluster_index": a.cluster_index, "distance_px": a.distance}
        g = sc.grasp
        with stage("generate"):
            target_global = keep[target.indices]
            gen_cluster = type(target)(target_global, target.centroid)
            cands = sample_candidates(cloud, gen_cluster, sc.gripper, g.n_samples, g.n_orientations, sc.seed,
                                      g.radius, g.step, g.min_region_points, g.sample_region_radius)
            report.candidates["generated"] = int(min(g.n_samples, len(target_global)) * g.n_orientations)
            report.candidates["surviving"] = len(cands)
            if not cands:
                raise NoGraspError("no collision-free grasp candidate on the target")
        with stage("score"):
            z = cloud.points[target_global, 2]
            current = forward_kinematics(robot, sc.start_joints)[0]
            ctx = ScoringContext(float(z.max()), float(z.min()), current)
            order = rank_candidates(cands, ctx, sc.scoring)
            cands = [replace(c, score=score_grasp(c, ctx, sc.scoring)) for c in cands]
            art["candidates"] = cands
        with stage("ik"):
            chosen = None
            last = None
            for i in order[:g.max_ik_attempts]:
                c = cands[i]
                try:
                    q_pre = inverse_kinematics(robot, _pregrasp(c.pose, g.pregrasp_offset), sc.start_joints)
                    approach = _approach_segment(robot, q_pre, c.pose, g.pregrasp_offset, g.approach_steps,
                                                 sc.planning.step_limit)
                except UnreachableError as exc:
                    last = exc
                    continue
                chosen = (i, c, q_pre, approach)
                break
            if chosen is None:
                raise last or UnreachableError("no ranked candidate is reachable")
            i, c, q_pre, approach = chosen
            report.candidates["selected"] = 1
            report.candidates["selected_index"] = int(i)
            report.candidates["selected_rank"] = int(order.index(i))
            report.grasp_pose = c.pose.to_dict()
            art["grasp"] = {"candidate": c, "pregrasp_joints": q_pre, "grasp_joints": approach[-1]}
        with stage("plan"):
            obstacle_mask = np.ones(len(cloud), dtype=bool)
            obstacle_mask[target_global] = False
            fld = build_distance_field(cloud.select(np.flatnonzero(obstacle_mask)), sc.field_resolution,
                                       sc.field_padding)
            start = np.round(sc.start_joints, 9)
            q_pre = np.round(q_pre, 9)
            opt = TrajectoryOptimizer(robot, fld, sc.planning)
            try:
                traj = opt.plan(start, q_pre)
            except PlanningError as exc:
                report.plan = {"status": "failed", "best_clearance": exc.best_clearance,
                               "outer_iterations": len(opt.history)}
                if exc.trajectory is not None:
                    art["trajectory"] = exc.trajectory.quantized()
                raise
            traj = traj.quantized().concatenate(Trajectory(np.round(approach, 9), traj.dt))
            rep = validate_trajectory(traj, robot, fld, sc.planning.d_safe, sc.planning.step_limit)
            art["trajectory"] = traj
            report.plan = {"status": "feasible" if rep.feasible else "infeasible", "penalty": opt.penalty,
                           "outer_iterations": len(opt.history),
                           "accepted_iterations": sum(len(h) - 1 for h in opt.history),
                           "validation": rep.to_dict()}
            report.trajectory = {"n_waypoints": len(traj), "dt": traj.dt, "duration": traj.duration,
                                 "max_step": traj.max_step(), "approach_waypoints": len(approach) - 1}
            if not rep.feasible:
                raise PlanningError(f"trajectory with approach segment is infeasible (margin {rep.margin:.4f} m)",
                                    rep.min_clearance, traj)
        if sc.replay_rate:
            with stage("replay"):
                log = replay(traj, sc.replay_rate, replay_sink or ListSink())
                report.replay = {"rate": log.rate, "emissions": len(log.emissions), "duration": log.duration}
        report.status = "ok"
    except (GraspSortError, OSError, DetectionFileError) as exc:
        report.status = "failed"
        report.failed_stage = stage.current
        report.error = f"{type(exc).__name__}: {exc}"
        report.exit_code = exit_code_for(exc)
        logger.error("stage %s failed: %s", stage.current, exc)
    report.total_seconds = time.perf_counter() - t_start
    return report


# -- export --------------------------------------------------------------------

def _write_jsonl(path, header, rows):
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for r in rows:
            fh.write(json.dumps(r) + "\n")


def export_artifacts(report, out_dir):
    """Write every artifact the run produced; returns ``{name: path}``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    art = report.artifacts
    written = {}
    if "scene_cloud" in art:
        labels = art.get("labels", np.full(len(art["scene_cloud"]), -1, dtype=np.int64))
        p = out / ARTIFACT_NAMES["clusters"]
        write_pcd(p, art["scene_cloud"], {"label": labels})
        written["clusters"] = p
    if "candidates" in art:
        p = out / ARTIFACT_NAMES["candidates"]
        _write_jsonl(p, {"format": CANDIDATES_FORMAT, "version": FORMAT_VERSION, "frame": "base",
                         "seed": report.seed}, [c.to_dict() for c in art["candidates"]])
        written["candidates"] = p
    if "grasp" in art:
        gr = art["grasp"]
        p = out / ARTIFACT_NAMES["grasp"]
        p.write_text(json.dumps({"format": GRASP_FORMAT, "version": FORMAT_VERSION, "seed": report.seed,
                                 "candidate": gr["candidate"].to_dict(),
                                 "pregrasp_joints": list(map(float, gr["pregrasp_joints"])),
                                 "grasp_joints": list(map(float, gr["grasp_joints"]))}, indent=1) + "\n")
        written["grasp"] = p
    if "trajectory" in art:
        p = out / ARTIFACT_NAMES["trajectory"]
        save_trajectory(art["trajectory"], p)
        written["trajectory"] = p
    p = out / ARTIFACT_NAMES["report"]
    p.write_text(format_report(report))
    written["report"] = p
    return written


def read_candidates(path):
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    header = json.loads(lines[0])
    if header.get("format") != CANDIDATES_FORMAT or header.get("version") != FORMAT_VERSION:
        raise ConfigError("not a version 1 candidates file")
    return header, [GraspCandidate.from_dict(json.loads(ln)) for ln in lines[1:]]


def read_grasp(path):
    d = json.loads(Path(path).read_text())
    if d.get("format") != GRASP_FORMAT or d.get("version") != FORMAT_VERSION:
        raise ConfigError("not a version 1 grasp file")
    d["candidate"] = GraspCandidate.from_dict(d["candidate"])
    d["pregrasp_joints"] = np.array(d["pregrasp_joints"])
    d["grasp_joints"] = np.array(d["grasp_joints"])
    return d


def read_artifacts(out_dir):
    """Re-parse the exported files of a run directory (missing ones are skipped)."""
    out = Path(out_dir)
    res = {}
    if (out / ARTIFACT_NAMES["clusters"]).exists():
        res["clusters"] = read_pcd(out / ARTIFACT_NAMES["clusters"], frame_id="base")
    if (out / ARTIFACT_NAMES["candidates"]).exists():
        res["candidates"] = read_candidates(out / ARTIFACT_NAMES["candidates"])[1]
    if (out / ARTIFACT_NAMES["grasp"]).exists():
        res["grasp"] = read_grasp(out / ARTIFACT_NAMES["grasp"])
    if (out / ARTIFACT_NAMES["trajectory"]).exists():
        res["trajectory"] = load_trajectory(out / ARTIFACT_NAMES["trajectory"])
    res["report"] = parse_report((out / ARTIFACT_NAMES["report"]).read_text())
    return res
