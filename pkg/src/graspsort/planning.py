"""Collision-penalized joint-space trajectory optimization over a distance field.

The robot's collision spheres are checked against a grid distance field built
from the obstacle cloud. ``plan`` minimizes

    sum_t ||q[t+1] - q[t]||^2  +  mu * sum_samples sum_spheres hinge(d_safe + r - D(c))^2

over interior waypoints with fixed endpoints, seeded by linear
interpolation. Samples are the waypoints plus ``n_substeps`` interpolated
configurations per segment. The penalty weight ``mu`` is escalated until the
densely resampled trajectory keeps every sphere at least ``d_safe`` from the
obstacles.
"""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple

import numpy as np
from scipy.ndimage import distance_transform_edt

from ._validation import check_points, check_positive
from .exceptions import ConfigError, PlanningError, ReplayAborted
from .kinematics import N_JOINTS, sphere_positions_batch

logger = logging.getLogger(__name__)

EMPTY_DISTANCE = 1e3
FIELD_VERSION = 1
TRAJECTORY_HEADER = "GRASPSORT-TRAJECTORY"
TRAJECTORY_VERSION = 1
STEP_TOLERANCE = 1e-9          # rad; absorbs rounding in evenly spaced waypoints


# -- distance field ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DistanceField:
    """Grid of clearance values (meters). Cell ``(i, j, k)`` is centered at ``origin + res * (i, j, k)``.

    Stored values are ``EDT - res * sqrt(3) / 2`` (clipped at zero) so that a
    cell never claims more clearance than its center has to the nearest
    obstacle point. Occupied cells hold exactly zero.
    """

    origin: np.ndarray
    resolution: float
    distances: np.ndarray
    padding: float = 0.0

    @property
    def dims(self):
        return self.distances.shape

    @property
    def is_empty(self):
        return self.distances.size == 0

    def query(self, points, gradient=False):
        P = check_points(points)
        n = len(P)
        if self.is_empty:
            vals = np.full(n, EMPTY_DISTANCE)
            return (vals, np.zeros((n, 3))) if gradient else vals
        res = self.resolution
        dims = np.array(self.dims)
        u = (P - self.origin) / res
        uc = np.clip(u, 0.0, dims - 1)
        outside = (u - uc) * res
        i0 = np.minimum(np.floor(uc).astype(np.int64), dims - 2)
        f = uc - i0
        D = self.distances
        c = np.empty((n, 2, 2, 2))
        for a in (0, 1):
            for b in (0, 1):
                for e in (0, 1):
                    c[:, a, b, e] = D[i0[:, 0] + a, i0[:, 1] + b, i0[:, 2] + e]
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        cx = c[:, 0] * (1 - fx)[:, None, None] + c[:, 1] * fx[:, None, None]   # (n, 2, 2)
        cxy = cx[:, 0] * (1 - fy)[:, None] + cx[:, 1] * fy[:, None]            # (n, 2)
        val = cxy[:, 0] * (1 - fz) + cxy[:, 1] * fz

        off = np.linalg.norm(outside, axis=1)
        out_mask = off > 0
        result = val.copy()
        result[out_mask] = off[out_mask] + np.minimum(val[out_mask], self.padding)
        if not gradient:
            return result

        wx = np.column_stack([1 - fx, fx])
        wy = np.column_stack([1 - fy, fy])
        wz = np.column_stack([1 - fz, fz])
        gx = np.einsum("nbe,nb,ne->n", c[:, 1] - c[:, 0], wy, wz)
        gy = np.einsum("nae,na,ne->n", c[:, :, 1] - c[:, :, 0], wx, wz)
        gz = np.einsum("nab,na,nb->n", c[:, :, :, 1] - c[:, :, :, 0], wx, wy)
        grad = np.column_stack([gx, gy, gz]) / res
        clamped = (u != uc)
        grad[clamped] = 0.0
        if np.any(out_mask):
            g_out = outside[out_mask] / off[out_mask, None]
            inner = np.where((val[out_mask] < self.padding)[:, None], grad[out_mask], 0.0)
            grad[out_mask] = g_out + inner
        return result, grad

    def save(self, path):
        np.savez(path, version=FIELD_VERSION, origin=self.origin, resolution=self.resolution,
                 padding=self.padding, distances=self.distances)

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            if int(z["version"]) != FIELD_VERSION:
                raise ConfigError(f"unsupported distance field version {int(z['version'])}")
            return cls(z["origin"], float(z["resolution"]), z["distances"], float(z["padding"]))


def build_distance_field(obstacle_cloud, resolution=0.01, padding=0.1):
    """Rasterize ``obstacle_cloud`` into a grid and take its exact Euclidean distance transform."""
    check_positive(resolution, "resolution")
    P = obstacle_cloud.points if hasattr(obstacle_cloud, "points") else check_points(obstacle_cloud)
    if len(P) == 0:
        return DistanceField(np.zeros(3), float(resolution), np.zeros((0, 0, 0)), float(padding))
    pad = max(float(padding), resolution)
    lo = P.min(axis=0) - pad
    hi = P.max(axis=0) + pad
    dims = np.maximum(np.ceil((hi - lo) / resolution).astype(int) + 1, 2)
    idx = np.clip(np.rint((P - lo) / resolution).astype(np.int64), 0, dims - 1)
    occ = np.zeros(tuple(dims), dtype=bool)
    occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    edt = distance_transform_edt(~occ) * resolution
    stored = np.where(occ, 0.0, np.maximum(edt - resolution * np.sqrt(3) / 2, 0.0))
    return DistanceField(lo, float(resolution), stored, pad)


# -- trajectories --------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Trajectory:
    """Joint waypoints (n, 6) in radians emitted every ``dt`` seconds."""

    waypoints: np.ndarray
    dt: float = 0.1

    def __post_init__(self):
        W = np.array(self.waypoints, dtype=float).reshape(-1, N_JOINTS)
        if len(W) < 1 or not np.all(np.isfinite(W)):
            raise ValueError("trajectory needs at least one finite waypoint")
        check_positive(self.dt, "dt")
        W.setflags(write=False)
        object.__setattr__(self, "waypoints", W)

    def __len__(self):
        return len(self.waypoints)

    @property
    def duration(self):
        return (len(self) - 1) * self.dt

    def max_step(self):
        if len(self) < 2:
            return 0.0
        return float(np.abs(np.diff(self.waypoints, axis=0)).max())

    def densify(self, subdivisions=10):
        """Configurations at ``subdivisions`` equal steps per segment (endpoints included)."""
        W = self.waypoints
        if len(W) == 1:
            return W.copy()
        s = np.arange(subdivisions) / subdivisions
        seg = W[:-1, None, :] * (1 - s)[None, :, None] + W[1:, None, :] * s[None, :, None]
        return np.vstack([seg.reshape(-1, N_JOINTS), W[-1:]])

    def quantized(self, decimals=9):
        """Copy rounded so the text format reproduces it exactly."""
        return Trajectory(np.round(self.waypoints, decimals), self.dt)

    def concatenate(self, other):
        """Append ``other``; its first waypoint is dropped if it repeats our last one."""
        W2 = other.waypoints
        if np.array_equal(W2[0], self.waypoints[-1]):
            W2 = W2[1:]
        return Trajectory(np.vstack([self.waypoints, W2]), self.dt)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return self.dt == other.dt and np.array_equal(self.waypoints, other.waypoints)


def format_trajectory(traj):
    lines = [f"{TRAJECTORY_HEADER} {TRAJECTORY_VERSION}", f"dt {traj.dt!r}", f"waypoints {len(traj)}"]
    lines += [" ".join(f"{v:.9f}" for v in q) for q in traj.waypoints]
    return "\n".join(lines) + "\n"


def parse_trajectory(text):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    try:
        name, version = lines[0].split()
        if name != TRAJECTORY_HEADER or int(version) != TRAJECTORY_VERSION:
            raise ConfigError(f"not a version {TRAJECTORY_VERSION} trajectory file")
        key, dt = lines[1].split()
        key2, n = lines[2].split()
        if key != "dt" or key2 != "waypoints":
            raise ConfigError("trajectory header must give dt and waypoints")
        rows = [[float(v) for v in ln.split()] for ln in lines[3:]]
    except (IndexError, ValueError) as exc:
        raise ConfigError(f"malformed trajectory file: {exc}") from None
    if len(rows) != int(n) or any(len(r) != N_JOINTS for r in rows):
        raise ConfigError(f"expected {n} rows of {N_JOINTS} joint values")
    return Trajectory(np.array(rows), float(dt))


def save_trajectory(traj, path):
    Path(path).write_text(format_trajectory(traj))


def load_trajectory(path):
    return parse_trajectory(Path(path).read_text())


# -- validation ------------------------------------------------------------------

class ValidationReport(NamedTuple):
    min_clearance: float          # min over dense samples of (D(center) - radius)
    margin: float                 # min_clearance - d_safe
    limit_violations: list        # (waypoint index, joint index)
    max_step: float
    step_ok: bool
    n_checked: int

    @property
    def collision_free(self):
        return self.margin >= 0

    @property
    def feasible(self):
        return self.collision_free and not self.limit_violations and self.step_ok

    def to_dict(self):
        return {"min_clearance": self.min_clearance, "margin": self.margin,
                "limit_violations": [list(v) for v in self.limit_violations],
                "max_step": self.max_step, "step_ok": self.step_ok, "n_checked": self.n_checked,
                "feasible": self.feasible}


def clearances(model, Q, field):
    """(b, m) sphere clearances for configurations ``Q``."""
    C = sphere_positions_batch(model, Q)
    b, m, _ = C.shape
    if m == 0:
        return np.full((b, 0), np.inf)
    D = field.query(C.reshape(-1, 3)).reshape(b, m)
    return D - model.sphere_radii[None, :]


def validate_trajectory(traj, model, field, d_safe=0.02, step_limit=None, subdivisions=10):
    dense = traj.densify(subdivisions)
    clr = clearances(model, dense, field)
    min_clr = float(clr.min()) if clr.size else float("inf")
    W = traj.waypoints
    lo, hi = model.limits[:, 0], model.limits[:, 1]
    bad = np.argwhere((W < lo) | (W > hi))
    max_step = traj.max_step()
    step_ok = step_limit is None or max_step <= step_limit + STEP_TOLERANCE
    return ValidationReport(min_clr, min_clr - d_safe, [tuple(int(x) for x in v) for v in bad],
                            max_step, bool(step_ok), len(dense))


# -- optimization --------------------------------------------------------------

@dataclass
class PlanParams:
    n_waypoints: int = 20
    d_safe: float = 0.02
    penalty_init: float = 10.0
    penalty_scale: float = 10.0
    trust_region_init: float = 0.1
    max_outer: int = 5
    max_inner: int = 100
    step_limit: float = 0.25
    n_substeps: int = 3
    buffer: float = 0.005         # added to d_safe inside the objective only

    def __post_init__(self):
        for name in ("n_waypoints", "d_safe", "penalty_init", "trust_region_init", "max_outer",
                     "max_inner", "step_limit"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.penalty_scale > 1:
            raise ValueError("penalty_scale must be > 1")
        if self.n_waypoints < 2:
            raise ValueError("n_waypoints must be >= 2")
        if self.buffer < 0:
            raise ValueError("buffer must be >= 0")
        if self.n_substeps < 0:
            raise ValueError("n_substeps must be >= 0")

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown planning parameters: {sorted(unknown)}")
        return cls(**d)


class TrajectoryObjective:
    """Smoothness + penalty objective over the full waypoint matrix (n, 6)."""

    def __init__(self, model, field, d_safe, n_substeps=3):
        self.model = model
        self.field = field
        self.d_safe = d_safe
        self.n_substeps = n_substeps

    def _samples(self, n):
        """Interpolation weights: sample k = (1 - s_k) * W[lo_k] + s_k * W[lo_k + 1]."""
        lo, s = [], []
        m = self.n_substeps
        for t in range(n - 1):
            for j in range(m + 1):
                lo.append(t)
                s.append(j / (m + 1))
        lo.append(n - 2 if n >= 2 else 0)
        s.append(1.0 if n >= 2 else 0.0)
        return np.array(lo), np.array(s)

    def smoothness(self, W):
        return float(np.sum(np.diff(W, axis=0) ** 2))

    def evaluate(self, W, mu, derivatives=False):
        """Objective value; with ``derivatives`` also gradient (n, 6) and Gauss-Newton Hessian (6n, 6n)."""
        n = len(W)
        f = self.smoothness(W)
        if self.model.n_spheres == 0 or self.field.is_empty or n < 2:
            if not derivatives:
                return f
            g = np.zeros_like(W)
            g[:-1] -= 2 * np.diff(W, axis=0)
            g[1:] += 2 * np.diff(W, axis=0)
            return f, g, np.zeros((6 * n, 6 * n))
        lo, s = self._samples(n)
        Q = W[lo] * (1 - s)[:, None] + W[lo + 1] * s[:, None]
        if not derivatives:
            C = sphere_positions_batch(self.model, Q)
            D = self.field.query(C.reshape(-1, 3)).reshape(C.shape[:2])
            r = np.maximum(self.d_safe + self.model.sphere_radii[None, :] - D, 0.0)
            return f + mu * float(np.sum(r ** 2))
        C, J = sphere_positions_batch(self.model, Q, with_jacobian=True)
        b, m = C.shape[:2]
        D, G = self.field.query(C.reshape(-1, 3), gradient=True)
        D, G = D.reshape(b, m), G.reshape(b, m, 3)
        r = np.maximum(self.d_safe + self.model.sphere_radii[None, :] - D, 0.0)
        f += mu * float(np.sum(r ** 2))
        a = np.einsum("bmi,bmji->bmj", G, J)           # dD/dq per sample and sphere (b, m, 6)
        active = r > 0
        gq = -2 * mu * np.einsum("bm,bmj->bj", r, a)    # gradient wrt the sample configuration
        Hq = 2 * mu * np.einsum("bm,bmi,bmj->bij", active.astype(float), a, a)

        g = np.zeros_like(W)
        g[:-1] -= 2 * np.diff(W, axis=0)
        g[1:] += 2 * np.diff(W, axis=0)
        np.add.at(g, lo, (1 - s)[:, None] * gq)
        np.add.at(g, lo + 1, s[:, None] * gq)

        H = np.zeros((n, 6, n, 6))
        for (i0, wi), (j0, wj) in [((lo, 1 - s), (lo, 1 - s)), ((lo, 1 - s), (lo + 1, s)),
                                   ((lo + 1, s), (lo, 1 - s)), ((lo + 1, s), (lo + 1, s))]:
            np.add.at(H, (i0, slice(None), j0, slice(None)), (wi * wj)[:, None, None] * Hq)
        return f, g, H.reshape(6 * n, 6 * n)


def smoothness_hessian(n):
    L = np.zeros((n, n))
    for t in range(n - 1):
        L[t, t] += 2
        L[t + 1, t + 1] += 2
        L[t, t + 1] -= 2
        L[t + 1, t] -= 2
    return np.kron(L, np.eye(N_JOINTS))


class TrajectoryOptimizer:
    """Penalty-escalation planner.

    The inner loop is a trust-region descent that preconditions the gradient
    with the smoothness Hessian plus the Gauss-Newton term of the active
    penalties; the step is clipped to the trust radius (max-norm, radians)
    and accepted only when the objective decreases. ``history`` keeps the
    accepted objective values for every outer iteration.
    """

    def __init__(self, model, field, params=None):
        self.model = model
        self.field = field
        self.params = params or PlanParams()
        self.history: List[List[float]] = []
        self.report = None
        self.penalty = None

    def _n_waypoints(self, start, goal):
        p = self.params
        span = float(np.abs(goal - start).max())
        n = max(p.n_waypoints, int(np.ceil(span / p.step_limit)) + 1)
        return n

    def _inner(self, W, mu, objective, A, lo_lim, hi_lim):
        p = self.params
        n = len(W)
        interior = slice(N_JOINTS, N_JOINTS * (n - 1))
        radius = p.trust_region_init
        f, g, H = objective.evaluate(W, mu, derivatives=True)
        trace = [f]
        damping = 0.0
        for _ in range(p.max_inner):
            gi = g.reshape(-1)[interior]
            if np.abs(gi).max() < 1e-10:
                break
            Hi = (A + H)[interior, interior]
            try:
                d = -np.linalg.solve(Hi + damping * np.eye(len(gi)), gi)
            except np.linalg.LinAlgError:
                d = -gi
            scale = np.abs(d).max()
            if scale > radius:
                d *= radius / scale
            W_new = W.copy()
            W_new[1:-1] = np.clip(W[1:-1] + d.reshape(n - 2, N_JOINTS), lo_lim, hi_lim)
            f_new = objective.evaluate(W_new, mu)
            if f_new < f:
                if f - f_new <= 1e-12 * max(1.0, abs(f)):
                    W, f = W_new, f_new
                    trace.append(f)
                    break
                W = W_new
                f, g, H = objective.evaluate(W, mu, derivatives=True)
                trace.append(f)
                radius = min(radius * 2.0, 1.0)
                damping = max(damping * 0.5, 0.0)
            else:
                radius *= 0.5
                damping = max(damping * 4.0, 1e-3)
                if radius < 1e-7:
                    break
        return W, trace

    def plan(self, start, goal):
        p = self.params
        start = np.asarray(start, dtype=float)
        goal = np.asarray(goal, dtype=float)
        if not (self.model.within_limits(start) and self.model.within_limits(goal)):
            raise PlanningError("start or goal violates joint limits")
        n = self._n_waypoints(start, goal)
        s = np.linspace(0.0, 1.0, n)[:, None]
        W = start[None, :] + (goal - start)[None, :] * s
        W[0], W[-1] = start, goal
        objective = TrajectoryObjective(self.model, self.field, p.d_safe + p.buffer, p.n_substeps)
        A = smoothness_hessian(n)
        lo_lim, hi_lim = self.model.limits[:, 0], self.model.limits[:, 1]
        mu = p.penalty_init
        self.history = []
        best = None
        for outer in range(p.max_outer):
            W, trace = self._inner(W, mu, objective, A, lo_lim, hi_lim)
            W[0], W[-1] = start, goal
            self.history.append(trace)
            traj = Trajectory(W.copy())
            report = validate_trajectory(traj, self.model, self.field, p.d_safe, p.step_limit)
            logger.info("plan outer %d: mu=%g objective=%.6g margin=%.4f m", outer, mu, trace[-1], report.margin)
            if best is None or report.margin > best[1].margin:
                best = (traj, report)
            if report.feasible:
                self.report, self.penalty = report, mu
                return traj
            mu *= p.penalty_scale
        self.report = best[1]
        raise PlanningError(f"no feasible trajectory after {p.max_outer} penalty escalations "
                            f"(best clearance margin {best[1].margin:.4f} m)",
                            best_clearance=best[1].min_clearance, trajectory=best[0])


def plan(model, start, goal, field, params=None):
    return TrajectoryOptimizer(model, field, params).plan(start, goal)


# -- replay ---------------------------------------------------------------------

class Emission(NamedTuple):
    index: int
    time: float   # seconds since the first emission


@dataclass
class ReplayLog:
    rate: float
    emissions: List[Emission] = field(default_factory=list)

    @property
    def duration(self):
        return self.emissions[-1].time if self.emissions else 0.0


class ListSink:
    def __init__(self):
        self.received = []

    def emit(self, index, q):
        self.received.append((index, np.array(q)))


class StdoutSink:
    def __init__(self, stream=None):
        import sys
        self.stream = stream or sys.stdout

    def emit(self, index, q):
        self.stream.write(f"{index} " + " ".join(f"{v:.9f}" for v in q) + "\n")
        self.stream.flush()


def replay(traj, rate=10.0, sink=None, clock=time.perf_counter, sleep=time.sleep):
    """Emit waypoints to ``sink`` at a fixed rate.

    Emission ``k`` is scheduled at ``k / rate`` after the first, against an
    absolute clock so delays do not accumulate. ``sink`` needs an
    ``emit(index, q)`` method. If it raises, :class:`ReplayAborted` carries
    the partial log.
    """
    check_positive(rate, "rate")
    sink = sink or StdoutSink()
    log = ReplayLog(float(rate))
    t0 = clock()
    for k, q in enumerate(traj.waypoints):
        deadline = t0 + k / rate
        while True:
            remaining = deadline - clock()
            if remaining <= 0:
                break
            sleep(remaining if remaining > 2e-3 else remaining / 2)
        now = clock()
        try:
            sink.emit(k, q)
        except Exception as exc:
            raise ReplayAborted(f"sink failed at waypoint {k}: {exc}", log) from exc
        log.emissions.append(Emission(k, now - t0))
    return log
