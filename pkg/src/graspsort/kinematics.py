"""Six-joint serial arm: standard DH forward kinematics, Jacobian, DLS inverse kinematics.

Convention (standard / distal DH): link ``i`` frame is reached from frame
``i-1`` by ::

    A_i(q_i) = Rz(q_i + theta_offset_i) · Tz(d_i) · Tx(a_i) · Rx(alpha_i)

Joint ``i`` rotates about ``z_{i-1}``; frame 0 is the base. The tool
transform maps the gripper frame (x = approach, y = closing, z = finger axis)
into flange (frame 6) coordinates, so the end-effector pose is
``A_1 ... A_6 · tool``.

Collision geometry is a list of spheres rigidly attached to link frames
(link 0 = base, fixed).
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import check_vector
from .exceptions import ConfigError, UnreachableError
from .geometry import RigidTransform, rotation_log

N_JOINTS = 6
ROBOT_FORMAT = "robot"
ROBOT_VERSION = 1


@dataclass(frozen=True)
class DHRow:
    a: float
    alpha: float
    d: float
    theta_offset: float = 0.0

    def __post_init__(self):
        if not all(np.isfinite([self.a, self.alpha, self.d, self.theta_offset])):
            raise ValueError("DH parameters must be finite")


def dh_matrix(theta, row):
    ct, st = np.cos(theta + row.theta_offset), np.sin(theta + row.theta_offset)
    ca, sa = np.cos(row.alpha), np.sin(row.alpha)
    return np.array([[ct, -st * ca, st * sa, row.a * ct],
                     [st, ct * ca, -ct * sa, row.a * st],
                     [0.0, sa, ca, row.d],
                     [0.0, 0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class RobotModel:
    dh: tuple
    limits: np.ndarray
    sphere_links: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    sphere_centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    sphere_radii: np.ndarray = field(default_factory=lambda: np.zeros(0))
    tool: RigidTransform = None
    base_frame: str = "base"
    name: str = "robot"

    def __post_init__(self):
        dh = tuple(r if isinstance(r, DHRow) else DHRow(*r) for r in self.dh)
        if len(dh) != N_JOINTS:
            raise ValueError(f"robot must have exactly {N_JOINTS} DH rows, got {len(dh)}")
        limits = np.asarray(self.limits, dtype=float).reshape(N_JOINTS, 2)
        if not np.all(limits[:, 0] < limits[:, 1]):
            raise ValueError("joint limits need min < max")
        links = np.asarray(self.sphere_links, dtype=int).reshape(-1)
        centers = np.asarray(self.sphere_centers, dtype=float).reshape(-1, 3)
        radii = np.asarray(self.sphere_radii, dtype=float).reshape(-1)
        if not (len(links) == len(centers) == len(radii)):
            raise ValueError("sphere arrays differ in length")
        if np.any(radii <= 0):
            raise ValueError("sphere radii must be positive")
        if np.any((links < 0) | (links > N_JOINTS)):
            raise ValueError("sphere link index must be in [0, 6]")
        tool = self.tool
        if tool is None:
            tool = RigidTransform.identity()
        tool = tool.with_frames("tool", "flange")
        for name, value in [("dh", dh), ("limits", limits), ("sphere_links", links),
                            ("sphere_centers", centers), ("sphere_radii", radii), ("tool", tool)]:
            object.__setattr__(self, name, value)

    @property
    def n_spheres(self):
        return len(self.sphere_radii)

    def within_limits(self, q, tol=0.0):
        q = np.asarray(q, dtype=float)
        return bool(np.all(q >= self.limits[:, 0] - tol) and np.all(q <= self.limits[:, 1] + tol))

    def clip(self, q):
        return np.clip(q, self.limits[:, 0], self.limits[:, 1])

    # -- serialization -------------------------------------------------------
    def to_dict(self):
        return {
            "format": ROBOT_FORMAT, "version": ROBOT_VERSION, "name": self.name,
            "base_frame": self.base_frame,
            "units": {"length": "m", "angle": "rad"},
            "dh": [{"a": r.a, "alpha": r.alpha, "d": r.d, "theta_offset": r.theta_offset} for r in self.dh],
            "limits": self.limits.tolist(),
            "tool": {"matrix": self.tool.to_list()},
            "spheres": [{"link": int(l), "center": c.tolist(), "radius": float(r)}
                        for l, c, r in zip(self.sphere_links, self.sphere_centers, self.sphere_radii)],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != ROBOT_FORMAT or d.get("version") != ROBOT_VERSION:
            raise ConfigError(f"not a version {ROBOT_VERSION} robot file")
        try:
            dh = [DHRow(r["a"], r["alpha"], r["d"], r.get("theta_offset", 0.0)) for r in d["dh"]]
            spheres = d.get("spheres", [])
            tool = d.get("tool")
            tool = RigidTransform.from_matrix(tool["matrix"], "tool", "flange") if tool else None
            return cls(dh=tuple(dh), limits=d["limits"],
                       sphere_links=[s["link"] for s in spheres],
                       sphere_centers=[s["center"] for s in spheres],
                       sphere_radii=[s["radius"] for s in spheres],
                       tool=tool, base_frame=d.get("base_frame", "base"), name=d.get("name", "robot"))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid robot config: {exc}") from exc


def load_robot(path):
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read robot config {path}: {exc}") from exc
    return RobotModel.from_dict(d)


def save_robot(model, path):
    Path(path).write_text(json.dumps(model.to_dict(), indent=2) + "\n")


def default_robot():
    """The bundled approximate AUBO-i5-like model (not the manufacturer's geometry)."""
    from importlib.resources import files
    return RobotModel.from_dict(json.loads(files("graspsort.data").joinpath("aubo_i5_like.json").read_text()))


# -- forward kinematics ------------------------------------------------------

def link_frames(model, q):
    """List of 7 homogeneous matrices: base (identity) and links 1..6."""
    q = check_vector(q, N_JOINTS, "q")
    frames = [np.eye(4)]
    for qi, row in zip(q, model.dh):
        frames.append(frames[-1] @ dh_matrix(qi, row))
    return frames


def forward_kinematics(model, q):
    """End-effector pose (tool -> base) and the per-link frames as RigidTransforms."""
    frames = link_frames(model, q)
    links = [RigidTransform.from_matrix(F, f"link{i}", model.base_frame) for i, F in enumerate(frames)]
    ee = frames[-1] @ model.tool.matrix
    return RigidTransform.from_matrix(ee, "tool", model.base_frame), links


def end_effector_matrix(model, q):
    return link_frames(model, q)[-1] @ model.tool.matrix


def link_frames_batch(model, Q):
    """Vectorized :func:`link_frames` for (b, 6) configurations -> (b, 7, 4, 4)."""
    Q = np.asarray(Q, dtype=float).reshape(-1, N_JOINTS)
    b = Q.shape[0]
    F = np.empty((b, N_JOINTS + 1, 4, 4))
    F[:, 0] = np.eye(4)
    for i, row in enumerate(model.dh):
        th = Q[:, i] + row.theta_offset
        ct, st = np.cos(th), np.sin(th)
        ca, sa = np.cos(row.alpha), np.sin(row.alpha)
        A = np.zeros((b, 4, 4))
        A[:, 0, 0], A[:, 0, 1], A[:, 0, 2], A[:, 0, 3] = ct, -st * ca, st * sa, row.a * ct
        A[:, 1, 0], A[:, 1, 1], A[:, 1, 2], A[:, 1, 3] = st, ct * ca, -ct * sa, row.a * st
        A[:, 2, 1], A[:, 2, 2], A[:, 2, 3] = sa, ca, row.d
        A[:, 3, 3] = 1.0
        F[:, i + 1] = F[:, i] @ A
    return F


def sphere_positions(model, q):
    """World centers (m, 3) of the collision spheres at configuration ``q``."""
    F = link_frames_batch(model, q)[0]
    return np.einsum("mij,mj->mi", F[model.sphere_links, :3, :3], model.sphere_centers) + F[model.sphere_links, :3, 3]


def sphere_positions_batch(model, Q, with_jacobian=False):
    """Sphere centers for (b, 6) configurations.

    Returns ``centers`` (b, m, 3) and, if requested, ``J`` (b, m, 6, 3) with
    ``J[k, s, j] = d center_s / d q_j``.
    """
    F = link_frames_batch(model, Q)
    links = model.sphere_links
    R = F[:, links, :3, :3]
    t = F[:, links, :3, :][..., 3]
    C = np.einsum("bmij,mj->bmi", R, model.sphere_centers) + t
    if not with_jacobian:
        return C
    z = F[:, :N_JOINTS, :3, 2]   # (b, 6, 3): axis of joint j is z_{j-1}
    o = F[:, :N_JOINTS, :3, 3]
    J = np.cross(z[:, None, :, :], C[:, :, None, :] - o[:, None, :, :])
    moves = (np.arange(N_JOINTS)[None, :] < links[:, None])  # joint j (0-based) moves link > j
    J *= moves[None, :, :, None]
    return C, J


# -- Jacobian and IK ------------------------------------------------------------

def jacobian(model, q):
    """Geometric Jacobian (6, 6) of the tool point: rows [linear; angular] in the base frame."""
    frames = link_frames(model, q)
    p = (frames[-1] @ model.tool.matrix)[:3, 3]
    J = np.zeros((6, N_JOINTS))
    for j in range(N_JOINTS):
        z = frames[j][:3, 2]
        o = frames[j][:3, 3]
        J[:3, j] = np.cross(z, p - o)
        J[3:, j] = z
    return J


def pose_error(target, current):
    """(position error, rotation-vector error) taking ``current`` to ``target``, both 4x4."""
    e_pos = target[:3, 3] - current[:3, 3]
    e_rot = rotation_log(target[:3, :3] @ current[:3, :3].T)
    return e_pos, e_rot


def _wrap_into_limits(q, limits):
    q = q.copy()
    for k in range(N_JOINTS):
        lo, hi = limits[k]
        while q[k] > hi and q[k] - 2 * np.pi >= lo:
            q[k] -= 2 * np.pi
        while q[k] < lo and q[k] + 2 * np.pi <= hi:
            q[k] += 2 * np.pi
    return np.clip(q, limits[:, 0], limits[:, 1])


def inverse_kinematics(model, target, seed_q, tol_pos=1e-6, tol_rot=1e-6, max_iters=200, damping=1e-2):
    """Damped least-squares IK with adaptive (Levenberg-Marquardt) damping.

    ``target`` is a RigidTransform of the tool frame in the base frame. The
    seed is returned unchanged if it already meets the tolerances.

    Raises
    ------
    UnreachableError
        If the tolerances are not met within ``max_iters``; carries the best
        residual ``(pos, rot)`` and configuration.
    """
    if target.to_frame != model.base_frame:
        raise ValueError(f"IK target must be in frame {model.base_frame!r}, got {target.to_frame!r}")
    T = target.matrix
    q = model.clip(check_vector(seed_q, N_JOINTS, "seed_q"))
    e_pos, e_rot = pose_error(T, end_effector_matrix(model, q))
    err = np.concatenate([e_pos, e_rot])
    cost = err @ err
    lam = damping
    for _ in range(max_iters):
        if np.linalg.norm(err[:3]) <= tol_pos and np.linalg.norm(err[3:]) <= tol_rot:
            return q
        J = jacobian(model, q)
        JJt = J @ J.T
        improved = False
        for _ in range(12):
            dq = J.T @ np.linalg.solve(JJt + lam ** 2 * np.eye(6), err)
            q_new = _wrap_into_limits(q + dq, model.limits)
            e_pos, e_rot = pose_error(T, end_effector_matrix(model, q_new))
            err_new = np.concatenate([e_pos, e_rot])
            cost_new = err_new @ err_new
            if cost_new < cost:
                q, err, cost = q_new, err_new, cost_new
                lam = max(lam * 0.5, 1e-6)
                improved = True
                break
            lam *= 4.0
        if not improved:
            break
    if np.linalg.norm(err[:3]) <= tol_pos and np.linalg.norm(err[3:]) <= tol_rot:
        return q
    residual = (float(np.linalg.norm(err[:3])), float(np.linalg.norm(err[3:])))
    raise UnreachableError(f"IK did not converge: residual pos={residual[0]:.3g} m, rot={residual[1]:.3g} rad",
                           residual=residual, q_best=q)
