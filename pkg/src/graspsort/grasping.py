"""Two-finger grasp candidates on a point-cloud cluster.

Gripper frame: +x is the approach direction, +y the closing direction and +z
the finger axis. The origin sits on the palm face, midway between the
fingers. In gripper coordinates the hand is three boxes plus the region
between the fingers::

    closing region  x in [0, depth]       |y| <= aperture/2              |z| <= height/2
    fingers         x in (0, depth)       aperture/2 < |y| < aperture/2 + thickness
    palm            x in (-palm_depth, 0) |y| < hand_width/2

The closing region is closed (points on its faces count); the finger and
palm volumes are open, so a point resting on a finger face is contact, not
penetration.
"""

import logging
import warnings
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator

from ._validation import check_points
from .exceptions import DegenerateError, GraspWarning
from .geometry import PointCloud, RigidTransform

logger = logging.getLogger(__name__)


FACE_TOL = 1e-9   # m


@dataclass(frozen=True)
class GripperGeometry:
    """Parallel-jaw gripper dimensions in meters (defaults: Robotiq 2F-85 class)."""

    max_aperture: float = 0.085
    finger_depth: float = 0.04
    finger_thickness: float = 0.01
    hand_width: float = 0.105
    hand_height: float = 0.02
    palm_depth: float = 0.02

    def __post_init__(self):
        for name in ("max_aperture", "finger_depth", "finger_thickness", "hand_width", "hand_height", "palm_depth"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.max_aperture < self.hand_width:
            raise ValueError("max_aperture must be smaller than hand_width")

    def to_dict(self):
        return dict(self.__dict__)


@dataclass(frozen=True, eq=False)
class LocalFrame:
    origin: np.ndarray
    normal: np.ndarray
    curvature_axis: np.ndarray
    binormal: np.ndarray

    @property
    def matrix(self):
        """Columns (normal, curvature_axis, binormal)."""
        return np.column_stack([self.normal, self.curvature_axis, self.binormal])


@dataclass(frozen=True, eq=False)
class GraspCandidate:
    pose: RigidTransform  # gripper -> cloud frame
    aperture: float
    contact_depth: float = 0.0
    source_index: int = -1
    orientation_index: int = 0
    score: Optional[float] = None

    @property
    def position(self):
        return self.pose.translation

    @property
    def approach(self):
        return self.pose.rotation[:, 0]

    @property
    def closing(self):
        return self.pose.rotation[:, 1]

    @property
    def axis(self):
        return self.pose.rotation[:, 2]

    def transformed(self, t):
        """The same grasp expressed through ``t`` (``t.from_frame`` must be the pose's frame)."""
        return replace(self, pose=t @ self.pose)

    def to_dict(self):
        return {"pose": self.pose.to_dict(), "aperture": self.aperture, "contact_depth": self.contact_depth,
                "source_index": self.source_index, "orientation_index": self.orientation_index,
                "score": self.score}

    @classmethod
    def from_dict(cls, d):
        return cls(RigidTransform.from_dict(d["pose"]), float(d["aperture"]), float(d["contact_depth"]),
                   int(d["source_index"]), int(d["orientation_index"]),
                   None if d.get("score") is None else float(d["score"]))

    def __eq__(self, other):
        if not isinstance(other, GraspCandidate):
            return NotImplemented
        return self.to_dict() == other.to_dict() and self.pose == other.pose


def _points(cloud):
    return cloud.points if isinstance(cloud, PointCloud) else check_points(cloud)


def to_hand(candidate, points):
    """Points expressed in the candidate's gripper frame."""
    R, t = candidate.pose.rotation, candidate.pose.translation
    return (points - t) @ R


# -- local frames -------------------------------------------------------------------

def _canonical_sign(v):
    k = int(np.argmax(np.abs(v)))
    return v if v[k] >= 0 else -v


def estimate_normals(points, radius, view_point, tree=None):
    """PCA normals oriented toward ``view_point``.

    Returns ``normals`` (n, 3) and a boolean ``valid`` mask (>= 3 neighbors
    and a rank-2 neighborhood); invalid rows are zero.
    """
    n = len(points)
    normals = np.zeros((n, 3))
    valid = np.zeros(n, dtype=bool)
    if n == 0:
        return normals, valid
    tree = tree or cKDTree(points)
    nbrs = tree.query_ball_point(points, radius)
    counts = np.array([len(x) for x in nbrs])
    flat = np.concatenate([np.asarray(x, dtype=np.int64) for x in nbrs])
    owner = np.repeat(np.arange(n), counts)
    Q = points[flat]
    s1 = np.zeros((n, 3))
    np.add.at(s1, owner, Q)
    s2 = np.zeros((n, 3, 3))
    np.add.at(s2, owner, Q[:, :, None] * Q[:, None, :])
    mean = s1 / counts[:, None]
    cov = s2 / counts[:, None, None] - mean[:, :, None] * mean[:, None, :]
    w, V = np.linalg.eigh(cov)
    ok = (counts >= 3) & (w[:, 1] > 1e-12 * np.maximum(w[:, 2], 1e-30)) & (w[:, 1] > 1e-14)
    normals = V[:, :, 0].copy()
    flip = np.einsum("ij,ij->i", normals, view_point - points) < 0
    normals[flip] *= -1
    normals[~ok] = 0.0
    valid[:] = ok
    return normals, valid


def _frame_at(points, idx, nbr_idx, normals, valid, view_point):
    nbr_idx = np.asarray(nbr_idx, dtype=np.int64)
    if len(nbr_idx) < 3:
        raise DegenerateError(f"point {idx} has {len(nbr_idx)} neighbors, need >= 3")
    Q = points[nbr_idx]
    w, V = np.linalg.eigh(np.cov(Q.T, bias=True))
    if w[1] <= 1e-12 * max(w[2], 1e-30) or w[1] <= 1e-14:
        raise DegenerateError(f"neighborhood of point {idx} is rank deficient")
    p = points[idx]
    normal = V[:, 0]
    if normal @ (view_point - p) < 0:
        normal = -normal
    P_t = np.eye(3) - np.outer(normal, normal)

    # direction along which the surface normal varies least
    nb = normals[nbr_idx[valid[nbr_idx]]]
    axis = None
    if len(nb) >= 3:
        T = nb @ P_t
        wt, Vt = np.linalg.eigh(T.T @ T / len(T))
        if wt[2] > 1e-8 and wt[2] > 2.0 * wt[1]:
            axis = np.cross(normal, Vt[:, 2])
    if axis is None:
        # flat or isotropic patch: longest in-plane spread of the points
        C = P_t @ np.cov(Q.T, bias=True) @ P_t
        axis = np.linalg.eigh(C)[1][:, 2]
    axis = axis - (axis @ normal) * normal
    axis = _canonical_sign(axis / np.linalg.norm(axis))
    binormal = np.cross(normal, axis)
    return LocalFrame(p.copy(), normal, axis, binormal)


def estimate_local_frame(cloud, idx, radius=0.015):
    """Darboux frame at ``cloud.points[idx]`` from its ``radius`` neighborhood.

    The normal is the least-variance direction of the neighborhood, oriented
    toward the sensor. The curvature axis is the tangent direction along
    which neighboring normals change least (the axis of a cylinder); on flat
    patches, where normals do not vary, it falls back to the main in-plane
    spread of the points.
    """
    P = cloud.points
    vp = cloud.sensor_origin
    tree = cKDTree(P)
    nbr = tree.query_ball_point(P[idx], radius)
    if len(nbr) < 3:
        raise DegenerateError(f"point {idx} has {len(nbr)} neighbors within {radius} m")
    sub = np.unique(np.concatenate([nbr, *tree.query_ball_point(P[nbr], radius)])).astype(np.int64)
    normals = np.zeros((len(P), 3))
    valid = np.zeros(len(P), dtype=bool)
    n_sub, v_sub = estimate_normals(P[sub], radius, vp)
    normals[sub], valid[sub] = n_sub, v_sub
    return _frame_at(P, idx, nbr, normals, valid, vp)


# -- gripper volumes ----------------------------------------------------------------

def closing_region_mask(H, aperture, gripper):
    """Closed box between the fingers, for gripper-frame points ``H``."""
    return ((H[:, 0] >= 0) & (H[:, 0] <= gripper.finger_depth)
            & (np.abs(H[:, 1]) <= aperture / 2) & (np.abs(H[:, 2]) <= gripper.hand_height / 2))


def _lateral_masks(H, aperture, gripper):
    z_in = np.abs(H[:, 2]) < gripper.hand_height / 2
    ay = np.abs(H[:, 1])
    finger = z_in & (ay > aperture / 2) & (ay < aperture / 2 + gripper.finger_thickness)
    palm = z_in & (ay < gripper.hand_width / 2)
    return finger, palm


def hand_collision_mask(H, aperture, gripper):
    """Points strictly inside either finger or the palm."""
    finger, palm = _lateral_masks(H, aperture, gripper)
    x = H[:, 0]
    return (finger & (x > 0) & (x < gripper.finger_depth)) | (palm & (x > -gripper.palm_depth) & (x < 0))


def check_closing_region(candidate, cloud, gripper, min_region_points=5):
    H = to_hand(candidate, _points(cloud))
    return int(np.count_nonzero(closing_region_mask(H, candidate.aperture, gripper))) >= min_region_points


def check_finger_collision(candidate, cloud, gripper):
    P = _points(cloud)
    if len(P) == 0:
        return False
    return bool(np.any(hand_collision_mask(to_hand(candidate, P), candidate.aperture, gripper)))


def push_forward(candidate, cloud, gripper, step=0.001):
    """Advance ``candidate`` along its approach axis until the next step would collide.

    Travel is tried in multiples of ``step`` up to ``finger_depth``. Returns
    the advanced candidate with ``contact_depth`` set to the travel, or
    ``None`` if the starting pose already collides or no contact happens
    within ``finger_depth``.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    P = _points(cloud)
    if len(P) == 0:
        return None
    H = to_hand(candidate, P)
    finger, palm = _lateral_masks(H, candidate.aperture, gripper)
    H = H[finger | palm]
    finger, palm = finger[finger | palm], palm[finger | palm]
    fd, pd = gripper.finger_depth, gripper.palm_depth
    n_steps = int(np.floor(fd / step + 1e-9))
    t = np.arange(n_steps + 2) * step  # t[k + 1] is the probe for travel t[k]
    x = H[:, 0][None, :] - t[:, None]
    # faces count as touching within FACE_TOL so a point left exactly on a face cannot round inside
    tol = FACE_TOL
    hit = ((finger[None, :] & (x > -tol) & (x < fd + tol)) | (palm[None, :] & (x > -pd - tol) & (x < tol))).any(axis=1)
    if hit[0]:
        return None
    k = np.flatnonzero(hit[1:])
    if k.size == 0:
        return None
    travel = float(t[k[0]])
    pose = RigidTransform(candidate.pose.rotation, candidate.pose.translation + travel * candidate.approach,
                          candidate.pose.from_frame, candidate.pose.to_frame)
    return replace(candidate, pose=pose, contact_depth=travel)


# -- sampling -------------------------------------------------------------------------

def orientation_angles(n_orientations):
    """``n`` angles evenly spaced over [-pi/2, pi/2] (cell centers; 1 -> 0)."""
    n = int(n_orientations)
    return -np.pi / 2 + (np.arange(n) + 0.5) * np.pi / n


def candidate_pose(frame, angle, gripper, frame_id):
    """Initial pose for a frame rotated by ``angle`` about its curvature axis.

    The fingertips start level with the sample point, the palm one finger
    depth behind it.
    """
    approach = -(np.cos(angle) * frame.normal + np.sin(angle) * frame.binormal)
    axis = frame.curvature_axis
    closing = np.cross(axis, approach)
    R = np.column_stack([approach, closing, axis])
    origin = frame.origin - gripper.finger_depth * approach
    return RigidTransform(R, origin, "gripper", frame_id)


def sample_candidates(cloud, cluster, gripper=None, n_samples=100, n_orientations=8, seed=0,
                      radius=0.015, step=0.001, min_region_points=5, sample_region_radius=None):
    """Collision-free grasp candidates on ``cluster``.

    Sample points are drawn uniformly (seeded) from the cluster points within
    ``sample_region_radius`` of its centroid (default: the whole cluster).
    Local frames come from the cluster points; collisions are checked against
    the whole ``cloud``, the closing region against the cluster only.
    Output order is (sample index, orientation index).
    """
    gripper = gripper or GripperGeometry()
    if n_samples < 1 or n_orientations < 1:
        raise ValueError("n_samples and n_orientations must be >= 1")
    idx = np.asarray(cluster.indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("cluster is empty")
    scene = cloud.points
    obj = scene[idx]
    vp = cloud.sensor_origin
    centroid = obj.mean(axis=0)
    region_r = sample_region_radius
    if region_r is None:
        region_r = float(np.linalg.norm(obj - centroid, axis=1).max())
    region = np.flatnonzero(np.linalg.norm(obj - centroid, axis=1) <= region_r + 1e-12)
    rng = np.random.default_rng(seed)
    picks = rng.choice(region, size=min(int(n_samples), len(region)), replace=False)

    obj_tree = cKDTree(obj)
    scene_tree = cKDTree(scene)
    normals, valid = estimate_normals(obj, radius, vp, obj_tree)
    obj_cloud_nbrs = obj_tree.query_ball_point(obj[picks], radius)
    reach = np.sqrt((gripper.finger_depth + gripper.palm_depth + step) ** 2
                    + (gripper.hand_width / 2) ** 2 + (gripper.hand_height / 2) ** 2)
    angles = orientation_angles(n_orientations)

    out = []
    n_frames = 0
    for pick, nbr in zip(picks, obj_cloud_nbrs):
        try:
            frame = _frame_at(obj, pick, nbr, normals, valid, vp)
        except DegenerateError:
            continue
        n_frames += 1
        local_scene = scene[scene_tree.query_ball_point(obj[pick], reach)]
        local_obj = obj[obj_tree.query_ball_point(obj[pick], reach)]
        for j, a in enumerate(angles):
            cand = GraspCandidate(candidate_pose(frame, a, gripper, cloud.frame_id), gripper.max_aperture,
                                  0.0, int(idx[pick]), j)
            cand = push_forward(cand, local_scene, gripper, step)
            if cand is None:
                continue
            if not check_closing_region(cand, local_obj, gripper, min_region_points):
                continue
            if check_finger_collision(cand, local_scene, gripper):
                continue
            out.append(cand)
    if n_frames == 0:
        warnings.warn(f"no local frame could be built on a cluster of {len(idx)} points", GraspWarning,
                      stacklevel=2)
    logger.info("grasp sampling: %d samples, %d frames, %d candidates", len(picks), n_frames, len(out))
    return out


class GraspDetector(BaseEstimator):
    """Estimator wrapper around :func:`sample_candidates`.

    ``fit(cloud, cluster)`` sets ``candidates_`` and ``diagnostics_`` (warning texts).
    """

    def __init__(self, gripper=None, n_samples=100, n_orientations=8, radius=0.015, step=0.001,
                 min_region_points=5, sample_region_radius=None, seed=0):
        self.gripper = gripper
        self.n_samples = n_samples
        self.n_orientations = n_orientations
        self.radius = radius
        self.step = step
        self.min_region_points = min_region_points
        self.sample_region_radius = sample_region_radius
        self.seed = seed

    def fit(self, cloud, cluster):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", GraspWarning)
            self.candidates_ = sample_candidates(
                cloud, cluster, self.gripper, self.n_samples, self.n_orientations, self.seed,
                self.radius, self.step, self.min_region_points, self.sample_region_radius)
        self.diagnostics_ = [str(w.message) for w in caught]
        return self
