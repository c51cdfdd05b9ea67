import numpy as np
import pytest
from hypothesis import given, strategies as st

from graspsort.exceptions import ConfigError, PlanningError, ReplayAborted
from graspsort.geometry import PointCloud
from graspsort.kinematics import RobotModel
from graspsort.planning import (DistanceField, ListSink, PlanParams, Trajectory, TrajectoryObjective,
                                TrajectoryOptimizer, build_distance_field, format_trajectory, parse_trajectory,
                                load_trajectory, replay, save_trajectory, validate_trajectory)

import oracles


def box_points(lo, hi, step=0.01):
    axes = [np.arange(a, b + 1e-9, step) for a, b in zip(lo, hi)]
    return np.array(np.meshgrid(*axes, indexing="ij")).reshape(3, -1).T


def planar_arm():
    """Two 0.3 m links in the base xy plane; the remaining joints carry nothing."""
    dh = [(0.3, 0, 0), (0.3, 0, 0)] + [(0, 0, 0)] * 4
    links = [1] * 3 + [2] * 3
    centers = [(-0.3 + 0.1 * k, 0, 0) for k in range(3)] + [(-0.2 + 0.1 * k, 0, 0) for k in range(3)]
    return RobotModel(dh, [[-np.pi, np.pi]] * 6, links, centers, [0.03] * 6)


def rows(m):
    return [(r.a, r.alpha, r.d, r.theta_offset) for r in m.dh]


def oracle_clearance(m, W, obstacles):
    return oracles.dense_clearance(rows(m), m.tool.matrix, m.sphere_links, m.sphere_centers, m.sphere_radii,
                                   W, obstacles)


class TestDistanceField:
    def test_single_point(self):
        f = build_distance_field(np.zeros((1, 3)), 0.01, 0.1)
        assert abs(f.query([[0.05, 0, 0]])[0] - 0.05) <= 0.01

    def test_empty(self):
        f = build_distance_field(np.zeros((0, 3)), 0.01, 0.1)
        assert f.is_empty and f.query([[0, 0, 0]])[0] >= 0.1

    def test_slab_linear(self):
        P = box_points((-0.1, -0.1, 0), (0.1, 0.1, 0))
        f = build_distance_field(P, 0.01, 0.15)
        z = np.linspace(0.02, 0.1, 9)
        d = f.query(np.column_stack([np.zeros(9), np.zeros(9), z]))
        np.testing.assert_allclose(np.diff(d), 0.01, atol=2e-3)

    def test_conservative(self, rng):
        P = rng.uniform(-0.1, 0.1, (200, 3))
        f = build_distance_field(P, 0.01, 0.1)
        Q = rng.uniform(-0.2, 0.2, (500, 3))
        true = oracles.brute_point_distance(P, Q)
        got = f.query(Q)
        assert np.all(got <= true + 0.01 * np.sqrt(3) + 1e-12)
        # snapping to cells, the conservative shift and interpolation together stay within 3 cells
        inside = true < 0.09
        assert np.all(got[inside] >= true[inside] - 0.03)

    def test_gradient_matches_finite_difference(self, rng):
        P = rng.uniform(-0.1, 0.1, (100, 3))
        f = build_distance_field(P, 0.01, 0.1)
        Q = rng.uniform(-0.15, 0.15, (50, 3))
        _, G = f.query(Q, gradient=True)
        h = 1e-7
        for axis in range(3):
            e = np.zeros(3)
            e[axis] = h
            num = (f.query(Q + e) - f.query(Q - e)) / (2 * h)
            # trilinear interpolation is piecewise; compare away from cell faces
            u = (Q - f.origin) / f.resolution
            away = np.abs(u[:, axis] - np.rint(u[:, axis])) > 1e-3
            np.testing.assert_allclose(G[away, axis], num[away], atol=1e-5)

    def test_save_load(self, tmp_path, rng):
        f = build_distance_field(rng.uniform(-0.1, 0.1, (50, 3)))
        f.save(tmp_path / "f.npz")
        g = DistanceField.load(tmp_path / "f.npz")
        np.testing.assert_array_equal(f.distances, g.distances)
        np.testing.assert_array_equal(f.origin, g.origin)

    def test_accepts_cloud(self):
        f = build_distance_field(PointCloud(np.zeros((1, 3)), "base"))
        assert f.query([[0, 0, 0]])[0] == 0.0


class TestTrajectory:
    def test_file_round_trip_bitwise(self, rng, tmp_path):
        t = Trajectory(rng.normal(size=(13, 6))).quantized()
        save_trajectory(t, tmp_path / "t.txt")
        assert load_trajectory(tmp_path / "t.txt") == t
        assert parse_trajectory(format_trajectory(t)) == t

    def test_bad_file(self):
        with pytest.raises(ConfigError):
            parse_trajectory("nonsense\n")

    def test_densify_keeps_endpoints(self):
        t = Trajectory([[0] * 6, [1] * 6])
        d = t.densify(10)
        assert len(d) == 11
        np.testing.assert_array_equal(d[0], 0)
        np.testing.assert_array_equal(d[-1], 1)

    def test_concatenate(self):
        a = Trajectory([[0] * 6, [1] * 6])
        b = Trajectory([[1] * 6, [2] * 6])
        assert len(a.concatenate(b)) == 3

    def test_invalid(self):
        with pytest.raises(ValueError):
            Trajectory(np.zeros((0, 6)))
        with pytest.raises(ValueError):
            Trajectory(np.zeros((3, 5)))


class TestValidate:
    def test_obstacle_negative_clearance(self):
        m = planar_arm()
        f = build_distance_field(box_points((0.15, -0.05, -0.05), (0.25, 0.05, 0.05)))
        rep = validate_trajectory(Trajectory([np.zeros(6)] * 2), m, f)
        assert rep.min_clearance < 0 and not rep.collision_free and not rep.feasible

    def test_step_limit(self):
        m = planar_arm()
        f = build_distance_field(np.zeros((0, 3)))
        rep = validate_trajectory(Trajectory([np.zeros(6), [0.5] + [0] * 5]), m, f, step_limit=0.25)
        assert not rep.step_ok and not rep.feasible
        assert rep.collision_free

    def test_limit_violations(self):
        m = planar_arm()
        f = build_distance_field(np.zeros((0, 3)))
        rep = validate_trajectory(Trajectory([np.zeros(6), [4.0] + [0] * 5]), m, f)
        assert rep.limit_violations == [(1, 0)]


class TestPlanner:
    def test_free_space_is_linear(self, robot):
        f = build_distance_field(np.zeros((0, 3)))
        start = np.array([0.0, -0.5, 0.5, 0, 0, 0])
        goal = np.array([0.8, -0.2, 0.9, 0.3, -0.2, 0.1])
        opt = TrajectoryOptimizer(robot, f)
        W = opt.plan(start, goal).waypoints
        s = np.linspace(0, 1, len(W))[:, None]
        assert np.abs(W - (start * (1 - s) + goal * s)).max() < 1e-6
        assert np.array_equal(W[0], start) and np.array_equal(W[-1], goal)

    def test_start_equals_goal(self, robot):
        f = build_distance_field(np.zeros((0, 3)))
        q = np.array([0.1, -0.4, 0.5, 0, 0.2, 0])
        W = TrajectoryOptimizer(robot, f).plan(q, q).waypoints
        assert np.all(W == q)

    def test_waypoints_raised_for_step_limit(self, robot):
        f = build_distance_field(np.zeros((0, 3)))
        start, goal = np.zeros(6), np.array([3.0, 0, 0, 0, 0, 0])
        traj = TrajectoryOptimizer(robot, f, PlanParams(n_waypoints=5, step_limit=0.25)).plan(start, goal)
        assert traj.max_step() <= 0.25 + 1e-9

    def test_planar_detour(self):
        m = planar_arm()
        # small block just beyond the tip's sweep at 45 degrees; clearing it needs the elbow to fold
        c = 0.62 / np.sqrt(2)
        obstacles = box_points((c - 0.01, c - 0.01, -0.01), (c + 0.01, c + 0.01, 0.01), 0.005)
        f = build_distance_field(obstacles, 0.01, 0.1)
        start = np.array([0.0, 0.3, 0, 0, 0, 0])
        goal = np.array([np.pi / 2, 0.3, 0, 0, 0, 0])
        straight = Trajectory(np.linspace(start, goal, 20))
        assert oracle_clearance(m, straight.waypoints, obstacles) < 0.02
        opt = TrajectoryOptimizer(m, f)
        traj = opt.plan(start, goal)
        assert oracle_clearance(m, traj.waypoints, obstacles) >= 0.02
        for trace in opt.history:
            assert all(b <= a for a, b in zip(trace, trace[1:]))

    def test_infeasible_raises(self):
        m = planar_arm()
        f = build_distance_field(box_points((-0.7, -0.7, -0.05), (0.7, 0.7, 0.05), 0.02))
        with pytest.raises(PlanningError) as ei:
            TrajectoryOptimizer(m, f, PlanParams(max_outer=2, max_inner=5)).plan(np.zeros(6), [0.5] + [0] * 5)
        assert ei.value.best_clearance < 0

    def test_limits_checked(self, robot):
        f = build_distance_field(np.zeros((0, 3)))
        with pytest.raises(PlanningError):
            TrajectoryOptimizer(robot, f).plan(np.full(6, 10.0), np.zeros(6))

    def test_params(self):
        with pytest.raises(ValueError):
            PlanParams(penalty_scale=1.0)
        with pytest.raises(ValueError):
            PlanParams.from_dict({"bogus": 1})
        assert PlanParams.from_dict({"d_safe": 0.03}).d_safe == 0.03


def test_objective_gradient(robot, rng):
    P = rng.uniform([0.2, -0.3, 0.0], [0.6, 0.3, 0.4], (300, 3))
    f = build_distance_field(P, 0.01, 0.1)
    obj = TrajectoryObjective(robot, f, 0.05, 1)
    checked = 0
    for _ in range(100):
        W = rng.uniform(-1, 1, (4, 6)) + np.array([0, -0.8, 1.2, 0, 0, 0])
        _, g, _ = obj.evaluate(W, 10.0, derivatives=True)
        num = oracles.numeric_jacobian(lambda x: obj.evaluate(x.reshape(4, 6), 10.0), W.ravel()).ravel()
        scale = max(np.linalg.norm(num), 1e-8)
        # piecewise-linear interpolation makes a few states straddle cell faces
        if np.linalg.norm(g.ravel() - num) / scale < 1e-4:
            checked += 1
    assert checked >= 90


class TestReplay:
    def test_rate(self):
        log = replay(Trajectory(np.zeros((21, 6))), 10, ListSink())
        assert abs(log.duration - 2.0) <= 0.1
        assert [e.index for e in log.emissions] == list(range(21))

    def test_single_waypoint(self):
        sink = ListSink()
        log = replay(Trajectory(np.zeros((1, 6))), 10, sink)
        assert log.duration < 0.01 and len(sink.received) == 1

    def test_fast(self):
        log = replay(Trajectory(np.zeros((100, 6))), 100, ListSink())
        assert abs(log.duration - 0.99) <= 0.05

    def test_fake_clock_no_drift(self):
        t = [0.0]
        sink = ListSink()

        def sleep(dt):
            t[0] += dt + 0.003      # oversleep every call
        log = replay(Trajectory(np.zeros((11, 6))), 10, sink, clock=lambda: t[0], sleep=sleep)
        assert log.duration < 1.0 + 0.01

    def test_sink_failure(self):
        class Broken:
            def __init__(self):
                self.n = 0

            def emit(self, index, q):
                if index == 3:
                    raise IOError("pipe closed")
        with pytest.raises(ReplayAborted) as ei:
            replay(Trajectory(np.zeros((10, 6))), 1000, Broken())
        assert len(ei.value.log.emissions) == 3

    def test_bad_rate(self):
        with pytest.raises(ValueError):
            replay(Trajectory(np.zeros((2, 6))), 0)
