import numpy as np
import pytest

from graspsort.exceptions import ConfigError
from graspsort.scene import (SceneObject, SceneSpec, bundled_scene_spec, footprints_overlap,
                             generate_synthetic_scene, look_at)


def cylinder_spec():
    return SceneSpec((SceneObject("cup", "cylinder", (0.035, 0.09), (0.45, 0.0)),))


def base_points(scene):
    return scene.camera_pose.apply(scene.cloud.points)


class TestScene:
    def test_single_cylinder(self):
        sc = generate_synthetic_scene(cylinder_spec(), 20000, 0.0, 1)
        P = base_points(sc)
        assert len(sc.detections) == 1 and sc.detections[0].class_name == "cup"
        table = P[sc.labels == -1]
        np.testing.assert_allclose(table[:, 2], 0.0, atol=1e-12)
        obj = P[sc.labels == 0]
        r = np.linalg.norm(obj[:, :2] - [0.45, 0.0], axis=1)
        side = obj[:, 2] < 0.09 - 1e-9
        np.testing.assert_allclose(r[side], 0.035, atol=1e-9)
        assert np.all(r[~side] <= 0.035 + 1e-9)
        assert np.all((obj[:, 2] >= -1e-12) & (obj[:, 2] <= 0.09 + 1e-12))

    def test_box_points_on_faces(self):
        spec = SceneSpec((SceneObject("lotion", "box", (0.04, 0.06, 0.15), (0.5, 0.1), yaw=0.3),))
        sc = generate_synthetic_scene(spec, 10000, 0.0, 2)
        P = base_points(sc)[sc.labels == 0]
        c, s = np.cos(0.3), np.sin(0.3)
        local = (P[:, :2] - [0.5, 0.1]) @ np.array([[c, -s], [s, c]])
        half = np.array([0.02, 0.03])
        on_side = np.abs(np.abs(local) - half).min(axis=1) < 1e-9
        on_top = np.abs(P[:, 2] - 0.15) < 1e-9
        assert np.all(on_side | on_top)
        assert np.all(np.abs(local) <= half + 1e-9)

    def test_bundled_four_disjoint(self):
        spec = bundled_scene_spec()
        sc = generate_synthetic_scene(spec, 20000, 0.0, 0)
        assert [d.class_name for d in sorted(sc.detections, key=lambda d: d.bbox[0])] == \
            ["lotion", "deodorant", "cup", "can"]
        boxes = [d.bbox for d in sc.detections]
        for i in range(4):
            for j in range(i + 1, 4):
                a, b = boxes[i], boxes[j]
                assert a[0] + a[2] <= b[0] or b[0] + b[2] <= a[0] or a[1] + a[3] <= b[1] or b[1] + b[3] <= a[1]

    def test_overlap_rejected(self):
        a = SceneObject("a", "cylinder", (0.05, 0.1), (0.5, 0.0))
        b = SceneObject("b", "box", (0.05, 0.05, 0.1), (0.56, 0.0))
        assert footprints_overlap(a, b)
        with pytest.raises(ConfigError):
            generate_synthetic_scene(SceneSpec((a, b)), 1000)

    def test_deterministic(self):
        a = generate_synthetic_scene(cylinder_spec(), 5000, 0.001, 7)
        b = generate_synthetic_scene(cylinder_spec(), 5000, 0.001, 7)
        assert np.array_equal(a.cloud.points, b.cloud.points)

    def test_point_count_and_frame(self):
        sc = generate_synthetic_scene(cylinder_spec(), 3000)
        assert len(sc.cloud) == 3000 and sc.cloud.frame_id == "camera"
        assert np.all(sc.cloud.points[:, 2] > 0)

    def test_look_at(self):
        T = look_at((1, 0, 0.6), (0.45, 0, 0))
        f = np.array([0.45 - 1, 0, -0.6])
        np.testing.assert_allclose(T.rotation[:, 2], f / np.linalg.norm(f))
        assert (T.from_frame, T.to_frame) == ("camera", "base")

    def test_spec_round_trip(self):
        spec = bundled_scene_spec()
        assert SceneSpec.from_dict(spec.to_dict()) == spec

    def test_bad_object(self):
        with pytest.raises(ConfigError):
            SceneObject("x", "sphere", (0.1,), (0, 0))
        with pytest.raises(ConfigError):
            SceneObject("x", "box", (0.1, 0.1), (0, 0))
