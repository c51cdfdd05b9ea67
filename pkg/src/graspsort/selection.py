"""Detection ingestion and detection-to-cluster association.

Detection files are JSON Lines. The first non-blank line is a header::

    {"format": "detections", "version": 1, "image_width": 640, "image_height": 480}

followed by one record per line::

    {"class_name": "cup", "score": 0.93, "bbox": [u_min, v_min, width, height]}

``bbox`` values are integer pixels. Boxes are clamped to the image; a box that
is empty after clamping is rejected.
"""

import json
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import DetectionFileError, NoCandidateError, NoTargetError
from .geometry import Point2

DETECTION_FORMAT = "detections"
DETECTION_VERSION = 1


@dataclass(frozen=True)
class Detection2D:
    class_name: str
    score: float
    bbox: tuple  # (u_min, v_min, width, height), pixels

    def __post_init__(self):
        if not self.class_name:
            raise ValueError("class_name must be non-empty")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if len(self.bbox) != 4:
            raise ValueError("bbox must have 4 values")
        if self.bbox[2] <= 0 or self.bbox[3] <= 0:
            raise ValueError(f"bbox {self.bbox} has non-positive width or height")
        object.__setattr__(self, "bbox", tuple(int(b) for b in self.bbox))

    def to_dict(self):
        return {"class_name": self.class_name, "score": self.score, "bbox": list(self.bbox)}


def bbox_center(d):
    u, v, w, h = d.bbox
    return Point2(u + w / 2.0, v + h / 2.0)


def clamp_bbox(bbox, width, height):
    u, v, w, h = bbox
    u0, v0 = max(u, 0), max(v, 0)
    u1, v1 = min(u + w, width), min(v + h, height)
    return (u0, v0, u1 - u0, v1 - v0)


def _parse_record(obj, lineno, width, height):
    if not isinstance(obj, dict):
        raise DetectionFileError("record must be a JSON object", lineno)
    missing = {"class_name", "score", "bbox"} - set(obj)
    if missing:
        raise DetectionFileError(f"missing keys {sorted(missing)}", lineno)
    name, score, bbox = obj["class_name"], obj["score"], obj["bbox"]
    if not isinstance(name, str) or not name:
        raise DetectionFileError("class_name must be a non-empty string", lineno)
    if isinstance(score, bool) or not isinstance(score, (int, float)) or not 0.0 <= score <= 1.0:
        raise DetectionFileError(f"score {score!r} outside [0, 1]", lineno)
    if (not isinstance(bbox, list) or len(bbox) != 4
            or not all(isinstance(b, int) and not isinstance(b, bool) for b in bbox)):
        raise DetectionFileError("bbox must be four integers", lineno)
    if bbox[2] <= 0 or bbox[3] <= 0:
        raise DetectionFileError(f"bbox {bbox} has empty width or height", lineno)
    clamped = clamp_bbox(bbox, width, height)
    if clamped[2] <= 0 or clamped[3] <= 0:
        raise DetectionFileError(f"bbox {bbox} lies outside the {width}x{height} image", lineno)
    return Detection2D(name, float(score), clamped)


def parse_detections(data, image_size=(640, 480)):
    """Parse a detection file (``bytes`` or ``str``) into validated detections.

    ``image_size`` is used when the header does not state the image size.
    Raises :class:`DetectionFileError` naming the offending line.
    """
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DetectionFileError(f"not UTF-8: {exc}") from None
    width, height = image_size
    detections = []
    header_seen = False
    for lineno, line in enumerate(data.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DetectionFileError(f"invalid JSON: {exc.msg}", lineno) from None
        if not header_seen:
            header_seen = True
            if not isinstance(obj, dict) or obj.get("format") != DETECTION_FORMAT:
                raise DetectionFileError("first line must be the detections header", lineno)
            if obj.get("version") != DETECTION_VERSION:
                raise DetectionFileError(f"unsupported version {obj.get('version')!r}", lineno)
            width = obj.get("image_width", width)
            height = obj.get("image_height", height)
            continue
        detections.append(_parse_record(obj, lineno, width, height))
    return detections


def format_detections(detections, image_size=(640, 480)):
    header = {"format": DETECTION_FORMAT, "version": DETECTION_VERSION,
              "image_width": image_size[0], "image_height": image_size[1]}
    lines = [json.dumps(header)] + [json.dumps(d.to_dict()) for d in detections]
    return "\n".join(lines) + "\n"


class Association(NamedTuple):
    detection_index: int
    cluster_index: int
    distance: float  # pixels


def projected_centroids(clusters, camera):
    """(n, 2) pixel positions of cluster centroids; NaN rows for centroids behind the camera."""
    C = np.array([c.centroid for c in clusters], dtype=float).reshape(-1, 3)
    return camera.project_points(C)


def associate_cluster(s2d, clusters, camera, detection_index=0):
    """Cluster whose projected centroid is nearest to the pixel ``s2d``.

    Centroids must be in the camera frame. Those behind the camera are
    excluded; ties go to the lowest cluster index.
    """
    uv = projected_centroids(clusters, camera)
    d2 = (s2d[0] - uv[:, 0]) ** 2 + (s2d[1] - uv[:, 1]) ** 2
    if d2.size == 0 or np.all(np.isnan(d2)):
        raise NoCandidateError("no cluster centroid lies in front of the camera")
    i = int(np.nanargmin(d2))
    return Association(detection_index, i, float(np.sqrt(d2[i])))


class CentroidAssociator(BaseEstimator):
    """Nearest-projected-centroid classifier.

    ``fit`` takes camera-frame cluster centroids (n, 3); ``predict`` maps
    (m, 2) pixel positions to cluster indices.
    """

    def __init__(self, camera=None):
        self.camera = camera

    def fit(self, X, y=None):
        from .cloud import Cluster
        from .geometry import CameraModel
        camera = self.camera or CameraModel()
        C = np.asarray(X, dtype=float).reshape(-1, 3)
        self.clusters_ = [Cluster(np.array([i]), c) for i, c in enumerate(C)]
        self.projected_ = camera.project_points(C)
        self.camera_ = camera
        return self

    def predict(self, X):
        check_is_fitted(self, "projected_")
        S = np.asarray(X, dtype=float).reshape(-1, 2)
        return np.array([associate_cluster(s, self.clusters_, self.camera_).cluster_index for s in S])


@dataclass(frozen=True)
class PrioritySpec:
    """Ordered class preference; earlier classes win."""

    classes: tuple

    def __post_init__(self):
        classes = tuple(self.classes)
        if len(set(classes)) != len(classes):
            raise ValueError("priority classes must be unique")
        object.__setattr__(self, "classes", classes)

    def rank(self, class_name):
        try:
            return self.classes.index(class_name)
        except ValueError:
            return None


def select_target_index(detections: Sequence[Detection2D], spec: PrioritySpec, proximity=None):
    """Index of the detection to grasp.

    Highest-priority class present, then highest score, then smallest
    ``proximity`` (distance from the camera to the associated centroid).
    Remaining ties fall back to a total order on the detection's fields so the
    result never depends on file order.
    """
    if not detections:
        raise NoTargetError("no detections")
    if proximity is None:
        proximity = [np.inf] * len(detections)
    keys = []
    for i, d in enumerate(detections):
        r = spec.rank(d.class_name)
        if r is None:
            continue
        prox = proximity[i]
        prox = np.inf if prox is None or np.isnan(prox) else float(prox)
        keys.append(((r, -d.score, prox, d.class_name, d.bbox), i))
    if not keys:
        raise NoTargetError(f"no detection matches priority classes {list(spec.classes)}")
    return min(keys)[1]


def select_target(detections, spec, proximity=None):
    return detections[select_target_index(detections, spec, proximity)]
