"""Rigid transforms, point clouds, the pinhole camera and depth-bias correction.

Transforms carry frame labels. ``T`` with ``from_frame="camera"`` and
``to_frame="base"`` maps camera coordinates to base coordinates, so a chain
``base <- ee <- tag <- camera`` is written ``T_base_ee @ T_ee_tag @ T_tag_cam``
and every product is checked for matching labels.
"""

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_points, check_vector
from .exceptions import BehindCameraError, DegenerateError, FrameMismatchError

ORTHONORMAL_TOL = 1e-9
DRIFT_TOL = 1e-12


class Point2(NamedTuple):
    u: float
    v: float


def _readonly(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def orthonormalize(R):
    """Nearest rotation matrix to ``R`` (polar decomposition via SVD)."""
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] *= -1
        Q = U @ Vt
    return Q


def rotation_about(axis, angle):
    """Rodrigues rotation matrix for a rotation of ``angle`` radians about ``axis``."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0.0, -axis[2], axis[1]],
                  [axis[2], 0.0, -axis[0]],
                  [-axis[1], axis[0], 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def rotation_angle(R):
    """Geodesic angle of a rotation matrix, in [0, pi]."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def rotation_log(R):
    """Rotation vector (axis * angle) of ``R``; robust near 0 and pi."""
    angle = rotation_angle(R)
    if angle < 1e-7:
        return 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if np.pi - angle < 1e-6:
        # axis from the symmetric part; sign is irrelevant at pi
        B = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / np.sqrt(max(B[k, k], 1e-300))
        return axis / np.linalg.norm(axis) * angle
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return w * (angle / (2.0 * np.sin(angle)))


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Homogeneous pose mapping ``from_frame`` coordinates into ``to_frame``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    from_frame: str = "world"
    to_frame: str = "world"

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        t = check_vector(self.translation, 3, "translation")
        if R.shape != (3, 3) or not np.all(np.isfinite(R)):
            raise ValueError("rotation must be a finite 3x3 matrix")
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHONORMAL_TOL or abs(np.linalg.det(R) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("rotation is not orthonormal with determinant +1")
        if not self.from_frame or not self.to_frame:
            raise ValueError("frame labels must be non-empty")
        object.__setattr__(self, "rotation", _readonly(R))
        object.__setattr__(self, "translation", _readonly(t))

    @classmethod
    def identity(cls, frame="world"):
        return cls(np.eye(3), np.zeros(3), frame, frame)

    @classmethod
    def from_matrix(cls, M, from_frame="world", to_frame="world"):
        M = np.asarray(M, dtype=float).reshape(4, 4)
        if not np.allclose(M[3], [0, 0, 0, 1], atol=1e-12):
            raise ValueError("last row of a homogeneous matrix must be [0, 0, 0, 1]")
        return cls(M[:3, :3], M[:3, 3], from_frame, to_frame)

    @classmethod
    def from_translation(cls, t, from_frame="world", to_frame="world"):
        return cls(np.eye(3), t, from_frame, to_frame)

    @property
    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def compose(self, other):
        """``self @ other``: apply ``other`` first, then ``self``."""
        if other.to_frame != self.from_frame:
            raise FrameMismatchError(self.from_frame, other.to_frame)
        R = self.rotation @ other.rotation
        if np.abs(R.T @ R - np.eye(3)).max() > DRIFT_TOL:
            R = orthonormalize(R)
        t = self.rotation @ other.translation + self.translation
        return RigidTransform(R, t, other.from_frame, self.to_frame)

    __matmul__ = compose

    def inverse(self):
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation, self.to_frame, self.from_frame)

    def apply(self, points):
        """Map an (n, 3) array (or a single 3-vector) from ``from_frame`` to ``to_frame``."""
        P = np.asarray(points, dtype=float)
        if P.ndim == 1:
            return self.rotation @ P + self.translation
        return P @ self.rotation.T + self.translation

    def with_frames(self, from_frame, to_frame):
        return RigidTransform(self.rotation, self.translation, from_frame, to_frame)

    def to_list(self):
        """16 row-major numbers."""
        return [float(x) for x in self.matrix.reshape(-1)]

    def to_dict(self):
        return {"matrix": self.to_list(), "from": self.from_frame, "to": self.to_frame}

    @classmethod
    def from_dict(cls, d):
        return cls.from_matrix(d["matrix"], d["from"], d["to"])

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return (self.from_frame == other.from_frame and self.to_frame == other.to_frame
                and np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    def allclose(self, other, atol=1e-12):
        return (self.from_frame == other.from_frame and self.to_frame == other.to_frame
                and np.allclose(self.matrix, other.matrix, atol=atol, rtol=0))

    def __repr__(self):
        t = np.array2string(self.translation, precision=4)
        return f"RigidTransform({self.from_frame!r} -> {self.to_frame!r}, t={t})"


def compose(a, b):
    return a.compose(b)


def invert(t):
    return t.inverse()


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An (n, 3) array of finite points labelled with the frame they live in.

    ``view_point`` is the sensor origin in the same frame (all points were
    captured from it).
    """

    points: np.ndarray
    frame_id: str = "camera"
    view_point: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.frame_id:
            raise ValueError("frame_id must be non-empty")
        object.__setattr__(self, "points", _readonly(check_points(self.points, "points")))
        if self.view_point is not None:
            object.__setattr__(self, "view_point", _readonly(check_vector(self.view_point, 3, "view_point")))

    def __len__(self):
        return self.points.shape[0]

    def select(self, indices):
        """Sub-cloud with the given indices or boolean mask, same frame and viewpoint."""
        return PointCloud(self.points[indices], self.frame_id, self.view_point)

    def with_points(self, points):
        return PointCloud(points, self.frame_id, self.view_point)

    @property
    def sensor_origin(self):
        return np.zeros(3) if self.view_point is None else np.array(self.view_point)

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        vp_eq = (self.view_point is None and other.view_point is None) or (
            self.view_point is not None and other.view_point is not None
            and np.array_equal(self.view_point, other.view_point))
        return self.frame_id == other.frame_id and vp_eq and np.array_equal(self.points, other.points)

    def __repr__(self):
        return f"PointCloud(n={len(self)}, frame_id={self.frame_id!r})"


def transform_cloud(cloud, t):
    if cloud.frame_id != t.from_frame:
        raise FrameMismatchError(t.from_frame, cloud.frame_id)
    vp = None if cloud.view_point is None else t.apply(cloud.view_point)
    return PointCloud(t.apply(cloud.points), t.to_frame, vp)


@dataclass(frozen=True)
class CameraModel:
    """Distortion-free pinhole intrinsics. Camera frame: x right, y down, z forward."""

    fx: float = 525.0
    fy: float = 525.0
    cx: float = 319.5
    cy: float = 239.5
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def project(self, p):
        x, y, z = check_vector(p, 3, "point")
        if z <= 0:
            raise BehindCameraError(f"point has non-positive depth z={z}")
        return Point2(self.fx * x / z + self.cx, self.fy * y / z + self.cy)

    def project_points(self, P):
        """Vectorized projection of (n, 3) points; rows with z <= 0 become NaN."""
        P = check_points(P)
        uv = np.full((P.shape[0], 2), np.nan)
        front = P[:, 2] > 0
        z = P[front, 2]
        uv[front, 0] = self.fx * P[front, 0] / z + self.cx
        uv[front, 1] = self.fy * P[front, 1] / z + self.cy
        return uv

    def unproject(self, u, v, z):
        return np.array([(u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z])

    def scaled(self, s):
        """Intrinsics for the same camera with the image resized by factor ``s``."""
        return CameraModel(self.fx * s, self.fy * s, self.cx * s, self.cy * s,
                           int(round(self.width * s)), int(round(self.height * s)))

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


@dataclass(frozen=True)
class DepthCorrection:
    """Affine depth correction ``z_true ~ scale * z_measured + offset``."""

    scale: float = 1.0
    offset: float = 0.0
    rms: float = 0.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    def apply(self, z):
        return self.scale * np.asarray(z, dtype=float) + self.offset

    def apply_to_cloud(self, cloud):
        """Move every point along its camera ray so its depth is corrected.

        The cloud must be in the camera frame (rays through the origin).
        """
        P = cloud.points
        z = P[:, 2]
        factor = np.ones_like(z)
        ok = z > 0
        factor[ok] = self.apply(z[ok]) / z[ok]
        return cloud.with_points(P * factor[:, None])


def _fit_affine(measured, true):
    measured = np.asarray(measured, dtype=float).reshape(-1)
    true = np.asarray(true, dtype=float).reshape(-1)
    if measured.shape != true.shape:
        raise ValueError("measured and true depths must have the same length")
    if measured.size < 2:
        raise DegenerateError("need at least 2 depth pairs")
    if np.ptp(measured) == 0:
        raise DegenerateError("all measured depths are equal; scale is not identifiable")
    A = np.column_stack([measured, np.ones_like(measured)])
    (scale, offset), *_ = np.linalg.lstsq(A, true, rcond=None)
    if scale <= 0:
        raise DegenerateError(f"fitted scale {scale} is not positive")
    rms = float(np.sqrt(np.mean((scale * measured + offset - true) ** 2)))
    return float(scale), float(offset), rms


def fit_depth_correction(pairs):
    """Least-squares depth correction from ``(measured_z, true_z)`` pairs."""
    pairs = np.asarray(pairs, dtype=float).reshape(-1, 2)
    scale, offset, rms = _fit_affine(pairs[:, 0], pairs[:, 1])
    return DepthCorrection(scale, offset, rms)


class DepthCorrector(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`fit_depth_correction`.

    ``fit(z_measured, z_true)`` learns ``scale_`` and ``offset_``;
    ``transform`` corrects depths, or a camera-frame :class:`PointCloud`.
    """

    def fit(self, X, y):
        X = np.asarray(X, dtype=float).reshape(-1)
        self.scale_, self.offset_, self.rms_ = _fit_affine(X, y)
        self.rms_before_ = float(np.sqrt(np.mean((X - np.asarray(y, dtype=float).reshape(-1)) ** 2)))
        return self

    @property
    def correction_(self):
        check_is_fitted(self, "scale_")
        return DepthCorrection(self.scale_, self.offset_, self.rms_)

    def transform(self, X):
        corr = self.correction_
        if isinstance(X, PointCloud):
            return corr.apply_to_cloud(X)
        return corr.apply(X)
