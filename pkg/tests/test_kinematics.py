import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from graspsort.exceptions import ConfigError, UnreachableError
from graspsort.geometry import RigidTransform, rotation_log
from graspsort.kinematics import (DHRow, RobotModel, end_effector_matrix, forward_kinematics, inverse_kinematics,
                                  jacobian, load_robot, save_robot, sphere_positions, sphere_positions_batch)

import oracles


def rows(model):
    return [(r.a, r.alpha, r.d, r.theta_offset) for r in model.dh]


def random_q(rng, model, n=None):
    lo, hi = model.limits[:, 0], model.limits[:, 1]
    return rng.uniform(lo, hi, (n, 6)) if n else rng.uniform(lo, hi)


class TestForward:
    def test_single_link(self):
        m = RobotModel([(1, 0, 0)] + [(0, 0, 0)] * 5, [[-3, 3]] * 6)
        ee, links = forward_kinematics(m, np.zeros(6))
        np.testing.assert_allclose(ee.translation, [1, 0, 0], atol=1e-15)
        assert len(links) == 7

    def test_zero_matches_oracle(self, robot):
        T, _ = oracles.dh_chain(rows(robot), np.zeros(6), robot.tool.matrix)
        assert np.abs(end_effector_matrix(robot, np.zeros(6)) - T).max() < 1e-9

    def test_random_matches_oracle(self, robot, rng):
        for q in random_q(rng, robot, 100):
            T, _ = oracles.dh_chain(rows(robot), q, robot.tool.matrix)
            assert np.abs(forward_kinematics(robot, q)[0].matrix - T).max() < 1e-9

    def test_joint1_rotates_about_base_z(self, robot):
        p0 = forward_kinematics(robot, np.zeros(6))[0].translation
        q = np.zeros(6)
        q[0] = np.pi / 2
        p1 = forward_kinematics(robot, q)[0].translation
        np.testing.assert_allclose(p1, [-p0[1], p0[0], p0[2]], atol=1e-12)

    def test_frames(self, robot):
        ee, links = forward_kinematics(robot, np.zeros(6))
        assert ee.from_frame == "tool" and ee.to_frame == "base"


class TestJacobian:
    def test_finite_difference(self, robot, rng):
        for q in random_q(rng, robot, 20):
            J = jacobian(robot, q)
            Jp = oracles.numeric_jacobian(lambda x: end_effector_matrix(robot, x)[:3, 3], q)
            R0 = end_effector_matrix(robot, q)[:3, :3]
            Jw = oracles.numeric_jacobian(
                lambda x: oracles.rotation_vector_between(end_effector_matrix(robot, x)[:3, :3], R0), q)
            num = np.vstack([Jp, Jw])
            assert np.abs(J - num).max() / max(np.abs(num).max(), 1e-12) < 1e-5

    def test_sphere_jacobian(self, robot, rng):
        q = random_q(rng, robot)
        C, J = sphere_positions_batch(robot, q[None], with_jacobian=True)
        num = oracles.numeric_jacobian(lambda x: sphere_positions(robot, x).ravel(), q)
        got = J[0].transpose(0, 2, 1).reshape(-1, 6)
        assert np.abs(got - num).max() < 1e-7


class TestSpheres:
    def test_match_oracle(self, robot, rng):
        for q in random_q(rng, robot, 10):
            ref = oracles.sphere_centers(rows(robot), robot.tool.matrix, robot.sphere_links, robot.sphere_centers, q)
            np.testing.assert_allclose(sphere_positions(robot, q), ref, atol=1e-12)

    def test_batch_equals_single(self, robot, rng):
        Q = random_q(rng, robot, 7)
        B = sphere_positions_batch(robot, Q)
        for k, q in enumerate(Q):
            np.testing.assert_allclose(B[k], sphere_positions(robot, q), atol=1e-14)

    def test_rigid_per_link(self, robot, rng):
        Q = random_q(rng, robot, 5)
        for link in range(7):
            idx = np.flatnonzero(robot.sphere_links == link)
            if len(idx) < 2:
                continue
            ref = None
            for q in Q:
                C = sphere_positions(robot, q)[idx]
                d = np.linalg.norm(C[:, None] - C[None], axis=-1)
                ref = d if ref is None else ref
                np.testing.assert_allclose(d, ref, atol=1e-12)


class TestInverse:
    def test_fixed_point(self, robot, rng):
        q = random_q(rng, robot)
        out = inverse_kinematics(robot, forward_kinematics(robot, q)[0], q)
        np.testing.assert_array_equal(out, q)

    def test_round_trip(self, robot, rng):
        for _ in range(30):
            q = random_q(rng, robot) * 0.8
            target = forward_kinematics(robot, q)[0]
            seed = robot.clip(q + rng.normal(0, 0.1, 6))
            out = inverse_kinematics(robot, target, seed)
            T = end_effector_matrix(robot, out)
            assert np.linalg.norm(T[:3, 3] - target.translation) < 1e-4
            assert np.linalg.norm(rotation_log(T[:3, :3] @ target.rotation.T)) < 1e-4
            assert robot.within_limits(out)

    def test_unreachable(self, robot):
        target = RigidTransform(np.eye(3), [10, 0, 0], "tool", "base")
        with pytest.raises(UnreachableError) as ei:
            inverse_kinematics(robot, target, np.zeros(6))
        assert ei.value.residual[0] > 8
        assert ei.value.q_best is not None

    def test_target_frame_checked(self, robot):
        with pytest.raises(ValueError):
            inverse_kinematics(robot, RigidTransform(from_frame="tool", to_frame="camera"), np.zeros(6))


class TestModel:
    def test_file_round_trip(self, robot, tmp_path):
        save_robot(robot, tmp_path / "r.json")
        m = load_robot(tmp_path / "r.json")
        assert m.to_dict() == robot.to_dict()

    def test_config_errors(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"format": "robot", "version": 1, "dh": [], "limits": []}))
        with pytest.raises(ConfigError):
            load_robot(p)
        p.write_text("{")
        with pytest.raises(ConfigError):
            load_robot(p)

    def test_invariants(self):
        with pytest.raises(ValueError):
            RobotModel([(0, 0, 0)] * 5, [[-1, 1]] * 5)
        with pytest.raises(ValueError):
            RobotModel([(0, 0, 0)] * 6, [[1, -1]] * 6)
        with pytest.raises(ValueError):
            RobotModel([(0, 0, 0)] * 6, [[-1, 1]] * 6, [1], [[0, 0, 0]], [0.0])
        with pytest.raises(ValueError):
            DHRow(np.nan, 0, 0)

    def test_bundled_spheres_per_link(self, robot):
        counts = np.bincount(robot.sphere_links, minlength=7)[1:]
        assert np.all((counts >= 3) & (counts <= 6))
