"""Perception-to-trajectory pipeline for tabletop two-finger grasping."""

from .cloud import (Cluster, EuclideanClusterer, PipelineParams, Plane, PlaneSegmenter, StatisticalOutlierFilter,
                    VoxelDownsampler, WorkspaceBox, WorkspaceCrop, compute_centroid, euclidean_cluster,
                    segment_plane_ransac, statistical_outlier_filter, voxel_downsample, workspace_crop)
from .exceptions import *  # noqa: F401,F403
from .geometry import (CameraModel, DepthCorrection, DepthCorrector, Point2, PointCloud, RigidTransform, compose,
                       fit_depth_correction, invert, transform_cloud)
from .grasping import (GraspCandidate, GraspDetector, GripperGeometry, LocalFrame, check_closing_region,
                       check_finger_collision, estimate_local_frame, push_forward, sample_candidates)
from .kinematics import (DHRow, RobotModel, default_robot, forward_kinematics, inverse_kinematics, jacobian,
                         load_robot, save_robot)
from .pcd import read_pcd, write_pcd
from .pipeline import (RunReport, Scenario, compose_hand_eye, export_artifacts, load_scenario, read_artifacts,
                       run_pipeline)
from .planning import (DistanceField, PlanParams, Trajectory, TrajectoryOptimizer, build_distance_field,
                       load_trajectory, plan, replay, save_trajectory, validate_trajectory)
from .scene import SceneObject, SceneSpec, bundled_scene_spec, generate_synthetic_scene
from .scoring import GraspScorer, ScoreWeights, ScoringContext, rank_candidates, score_grasp, select_best
from .selection import (Association, CentroidAssociator, Detection2D, PrioritySpec, associate_cluster,
                        bbox_center, parse_detections, select_target)

__version__ = "0.1.0"
