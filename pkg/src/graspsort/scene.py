"""Synthetic tabletop scenes for testing the pipeline end to end.

Points are produced by casting rays from a pinhole camera through uniformly
random pixel positions and keeping the nearest hit on the table rectangle or an
object. Hidden surfaces (back faces, occluded table) therefore never appear.
Objects are vertical boxes (yawed) or cylinders resting on the table.

Scene spec (JSON)::

    {"format": "scene", "version": 1,
     "table_height": 0.0, "table_extent": [[0.2, -0.5], [0.8, 0.5]],
     "camera_position": [1.0, 0.0, 0.6], "camera_target": [0.45, 0.0, 0.0],
     "objects": [{"class_name": "cup", "shape": "cylinder",
                  "dims": [0.03, 0.1], "position": [0.45, 0.08], "yaw": 0.0}]}

``dims`` is ``[lx, ly, lz]`` for boxes and ``[radius, height]`` for cylinders.
"""

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import List

import numpy as np

from .exceptions import ConfigError
from .geometry import CameraModel, PointCloud, RigidTransform, rotation_about
from .selection import Detection2D, clamp_bbox

SCENE_FORMAT = "scene"
SCENE_VERSION = 1


@dataclass(frozen=True)
class SceneObject:
    class_name: str
    shape: str
    dims: tuple
    position: tuple            # (x, y) of the footprint center on the table
    yaw: float = 0.0
    score: float = 0.9         # confidence given to the synthetic detection

    def __post_init__(self):
        if self.shape not in ("box", "cylinder"):
            raise ConfigError(f"unknown shape {self.shape!r}")
        need = 3 if self.shape == "box" else 2
        dims = tuple(float(v) for v in self.dims)
        if len(dims) != need or min(dims) <= 0:
            raise ConfigError(f"{self.shape} needs {need} positive dims, got {self.dims}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "position", tuple(float(v) for v in self.position[:2]))

    @property
    def height(self):
        return self.dims[2] if self.shape == "box" else self.dims[1]

    def to_dict(self):
        return {"class_name": self.class_name, "shape": self.shape, "dims": list(self.dims),
                "position": list(self.position), "yaw": self.yaw, "score": self.score}


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple
    table_height: float = 0.0
    table_extent: tuple = ((0.2, -0.5), (0.8, 0.5))
    camera_position: tuple = (1.0, 0.0, 0.6)
    camera_target: tuple = (0.45, 0.0, 0.0)

    @classmethod
    def from_dict(cls, d):
        if d.get("format", SCENE_FORMAT) != SCENE_FORMAT or d.get("version", SCENE_VERSION) != SCENE_VERSION:
            raise ConfigError("not a version 1 scene spec")
        try:
            objs = tuple(SceneObject(**o) for o in d["objects"])
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad scene object: {exc}") from None
        kw = {k: d[k] for k in ("table_height", "table_extent", "camera_position", "camera_target") if k in d}
        if "table_extent" in kw:
            kw["table_extent"] = tuple(tuple(float(v) for v in c) for c in kw["table_extent"])
        return cls(objs, **kw)

    def to_dict(self):
        return {"format": SCENE_FORMAT, "version": SCENE_VERSION, "table_height": self.table_height,
                "table_extent": [list(c) for c in self.table_extent],
                "camera_position": list(self.camera_position), "camera_target": list(self.camera_target),
                "objects": [o.to_dict() for o in self.objects]}


def load_scene_spec(path):
    with open(path) as fh:
        return SceneSpec.from_dict(json.load(fh))


def bundled_scene_spec():
    """Four objects in a row: lotion, deodorant, cup, can (left to right in the image)."""
    text = resources.files("graspsort.data").joinpath("four_objects.json").read_text()
    return SceneSpec.from_dict(json.loads(text))


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """Camera pose (camera -> base) with z forward, x right, y down in the image."""
    eye = np.asarray(eye, float)
    f = np.asarray(target, float) - eye
    f /= np.linalg.norm(f)
    right = np.cross(f, up)
    if np.linalg.norm(right) < 1e-9:
        raise ConfigError("camera cannot look straight along the up vector")
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    return RigidTransform(np.column_stack([right, down, f]), eye, "camera", "base")


# -- footprint overlap ---------------------------------------------------------

def _footprint_corners(o):
    hx, hy = o.dims[0] / 2, o.dims[1] / 2
    R = rotation_about([0, 0, 1], o.yaw)[:2, :2]
    c = np.array([[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]])
    return c @ R.T + np.array(o.position)


def _box_box_overlap(a, b):
    A, B = _footprint_corners(a), _footprint_corners(b)
    for P in (A, B):
        for k in range(4):
            edge = P[(k + 1) % 4] - P[k]
            axis = np.array([-edge[1], edge[0]])
            pa, pb = A @ axis, B @ axis
            if pa.max() <= pb.min() or pb.max() <= pa.min():
                return False
    return True


def _circle_box_overlap(c, b):
    R = rotation_about([0, 0, 1], b.yaw)[:2, :2]
    local = R.T @ (np.array(c.position) - np.array(b.position))
    half = np.array(b.dims[:2]) / 2
    nearest = np.clip(local, -half, half)
    return np.linalg.norm(local - nearest) < c.dims[0]


def footprints_overlap(a, b):
    if a.shape == "cylinder" and b.shape == "cylinder":
        return np.linalg.norm(np.subtract(a.position, b.position)) < a.dims[0] + b.dims[0]
    if a.shape == "box" and b.shape == "box":
        return _box_box_overlap(a, b)
    c, bx = (a, b) if a.shape == "cylinder" else (b, a)
    return _circle_box_overlap(c, bx)


# -- ray casting -----------------------------------------------------------------

def _hit_table(O, D, h, extent):
    t = np.full(len(D), np.inf)
    dz = D[:, 2]
    ok = dz < -1e-12
    t[ok] = (h - O[2]) / dz[ok]
    P = O + t[:, None] * D
    (x0, y0), (x1, y1) = extent
    inside = ok & (t > 0) & (P[:, 0] >= x0) & (P[:, 0] <= x1) & (P[:, 1] >= y0) & (P[:, 1] <= y1)
    return np.where(inside, t, np.inf)


def _hit_box(O, D, o, h):
    R = rotation_about([0, 0, 1], o.yaw)
    center = np.array([o.position[0], o.position[1], h + o.dims[2] / 2])
    Ol = R.T @ (O - center)
    Dl = D @ R
    half = np.array(o.dims) / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - Ol) / Dl
        t2 = (half - Ol) / Dl
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    tmin = np.minimum(t1, t2).max(axis=1)
    tmax = np.maximum(t1, t2).min(axis=1)
    hit = (tmax >= tmin) & (tmin > 0)
    return np.where(hit, tmin, np.inf)


def _hit_cylinder(O, D, o, h):
    r, height = o.dims
    cx, cy = o.position
    ox, oy = O[0] - cx, O[1] - cy
    a = D[:, 0] ** 2 + D[:, 1] ** 2
    b = 2 * (ox * D[:, 0] + oy * D[:, 1])
    c = ox ** 2 + oy ** 2 - r ** 2
    disc = b ** 2 - 4 * a * c
    t = np.full(len(D), np.inf)
    ok = (disc >= 0) & (a > 1e-15)
    tl = np.full(len(D), np.inf)
    tl[ok] = (-b[ok] - np.sqrt(disc[ok])) / (2 * a[ok])
    z = O[2] + tl * D[:, 2]
    lateral = ok & (tl > 0) & (z >= h) & (z <= h + height)
    t[lateral] = tl[lateral]
    dz = D[:, 2]
    cap = dz < -1e-12
    tc = np.full(len(D), np.inf)
    tc[cap] = (h + height - O[2]) / dz[cap]
    P = O + tc[:, None] * D
    on_cap = cap & (tc > 0) & ((P[:, 0] - cx) ** 2 + (P[:, 1] - cy) ** 2 <= r ** 2)
    t = np.where(on_cap & (tc < t), tc, t)
    return t


def cast_rays(spec, O, D):
    """Nearest hit distance per ray and the id of the surface hit (-1 table, k object)."""
    hits = [_hit_table(O, D, spec.table_height, spec.table_extent)]
    for o in spec.objects:
        fn = _hit_box if o.shape == "box" else _hit_cylinder
        hits.append(fn(O, D, o, spec.table_height))
    T = np.column_stack(hits)
    which = np.argmin(T, axis=1)
    return T[np.arange(len(D)), which], which - 1


# -- detections ------------------------------------------------------------------

def bounding_points(o, h):
    """Points whose convex hull contains the object (corners / rim samples)."""
    if o.shape == "box":
        xy = _footprint_corners(o)
    else:
        a = np.linspace(0, 2 * np.pi, 64, endpoint=False)
        # circumscribed polygon so the hull covers the circle
        rr = o.dims[0] / np.cos(np.pi / 64)
        xy = np.column_stack([np.cos(a), np.sin(a)]) * rr + np.array(o.position)
    lo = np.column_stack([xy, np.full(len(xy), h)])
    hi = np.column_stack([xy, np.full(len(xy), h + o.height)])
    return np.vstack([lo, hi])


def object_detection(o, h, camera, base_from_camera):
    P = base_from_camera.inverse().apply(bounding_points(o, h))
    if np.any(P[:, 2] <= 0):
        return None
    uv = camera.project_points(P)
    u0, v0 = np.floor(uv.min(axis=0)).astype(int)
    u1, v1 = np.ceil(uv.max(axis=0)).astype(int)
    box = clamp_bbox((int(u0), int(v0), int(u1 - u0), int(v1 - v0)), camera.width, camera.height)
    if box[2] <= 0 or box[3] <= 0:
        return None
    return Detection2D(o.class_name, o.score, box)


@dataclass
class SyntheticScene:
    cloud: PointCloud                  # camera frame, sensor at the origin
    detections: List[Detection2D]
    camera: CameraModel
    camera_pose: RigidTransform       # camera -> base
    labels: np.ndarray                 # -1 table, k object index
    spec: SceneSpec
    ground_truth: dict = field(default_factory=dict)


def generate_synthetic_scene(spec, n_points=50000, noise=0.0, seed=0, camera=None):
    """Sample a single-view cloud of ``spec`` plus ground-truth detections.

    Raises :class:`ConfigError` if object footprints overlap.
    """
    if isinstance(spec, dict):
        spec = SceneSpec.from_dict(spec)
    objs = spec.objects
    for i in range(len(objs)):
        for j in range(i + 1, len(objs)):
            if footprints_overlap(objs[i], objs[j]):
                raise ConfigError(f"footprints of objects {i} ({objs[i].class_name}) and "
                                  f"{j} ({objs[j].class_name}) overlap")
    camera = camera or CameraModel()
    pose = look_at(spec.camera_position, spec.camera_target)
    O = np.asarray(spec.camera_position, float)
    K_inv = np.array([[1 / camera.fx, 0, -camera.cx / camera.fx],
                      [0, 1 / camera.fy, -camera.cy / camera.fy],
                      [0, 0, 1]])
    rng = np.random.default_rng(seed)
    pts, labels = [], []
    total = 0
    for _ in range(100):
        m = max(2 * (n_points - total), 1024)
        uv1 = np.column_stack([rng.uniform(-0.5, camera.width - 0.5, m),
                               rng.uniform(-0.5, camera.height - 0.5, m), np.ones(m)])
        D = (uv1 @ K_inv.T) @ pose.rotation.T
        D /= np.linalg.norm(D, axis=1, keepdims=True)
        t, which = cast_rays(spec, O, D)
        keep = np.isfinite(t)
        pts.append(O + t[keep, None] * D[keep])
        labels.append(which[keep])
        total += int(keep.sum())
        if total >= n_points:
            break
    P = np.vstack(pts)[:n_points]
    L = np.concatenate(labels)[:n_points]
    if noise > 0:
        P = P + rng.normal(0.0, noise, P.shape)
    P_cam = pose.inverse().apply(P)
    cloud = PointCloud(P_cam, "camera", np.zeros(3))
    detections = []
    for o in objs:
        d = object_detection(o, spec.table_height, camera, pose)
        if d is not None:
            detections.append(d)
    truth = {"objects": [o.to_dict() for o in objs],
             "centroids_base": [P[L == k].mean(axis=0).tolist() if np.any(L == k) else None
                                for k in range(len(objs))],
             "table_height": spec.table_height, "n_points": int(len(P)), "noise": noise, "seed": seed}
    return SyntheticScene(cloud, detections, camera, pose, L, spec, truth)
