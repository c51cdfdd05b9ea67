import json

import numpy as np
import pytest

from graspsort.exceptions import ConfigError
from graspsort.geometry import RigidTransform
from graspsort.pipeline import (ARTIFACT_NAMES, STAGES, compose_hand_eye, export_artifacts, format_report,
                                parse_report, read_artifacts, run_pipeline, scenario_from_dict)
from graspsort.scene import bundled_scene_spec

from helpers import random_transform


def bundled_scenario(**extra):
    d = {"format": "scenario", "version": 1, "seed": 0,
         "cloud": {"synthetic": bundled_scene_spec().to_dict(), "n_points": 50000, "noise": 0.001},
         "priority": ["cup"]}
    d.update(extra)
    return scenario_from_dict(d)


@pytest.fixture(scope="module")
def bundled_run():
    return run_pipeline(bundled_scenario())


class TestHandEye:
    def test_identities(self):
        def I(a, b):
            return RigidTransform(np.eye(3), np.zeros(3), a, b)
        out = compose_hand_eye(I("ee", "base"), I("tag", "ee"), I("camera", "tag"))
        np.testing.assert_array_equal(out.matrix, np.eye(4))
        assert (out.from_frame, out.to_frame) == ("camera", "base")

    def test_translations(self):
        t = RigidTransform.from_translation
        out = compose_hand_eye(t([1, 0, 0], "ee", "base"), t([0, 1, 0], "tag", "ee"), t([0, 0, 1], "camera", "tag"))
        np.testing.assert_allclose(out.translation, [1, 1, 1])

    def test_random_matches_matrix_product(self, rng):
        a = random_transform(rng, "ee", "base")
        b = random_transform(rng, "tag", "ee")
        c = random_transform(rng, "camera", "tag")
        ref = np.linalg.multi_dot([a.matrix, b.matrix, c.matrix])
        assert np.abs(compose_hand_eye(a, b, c).matrix - ref).max() < 1e-12


class TestBundledRun:
    def test_result(self, bundled_run):
        r = bundled_run
        assert r.ok, r.error
        assert r.n_clusters == 4
        assert r.association["class_name"] == "cup"
        assert r.plan["status"] == "feasible"
        assert r.plan["validation"]["min_clearance"] >= 0.02
        assert r.exit_code == 0

    def test_deterministic(self, bundled_run):
        again = run_pipeline(bundled_scenario())
        a = json.dumps(bundled_run.to_dict(wall_clock=False), sort_keys=True)
        b = json.dumps(again.to_dict(wall_clock=False), sort_keys=True)
        assert a == b

    def test_stage_timings(self, bundled_run):
        total = sum(v["seconds"] for v in bundled_run.stages.values())
        assert abs(total - bundled_run.total_seconds) <= 0.1 * bundled_run.total_seconds
        assert all(bundled_run.stages[s]["status"] == "ok" for s in STAGES if s != "replay")

    def test_exports_round_trip(self, bundled_run, tmp_path):
        written = export_artifacts(bundled_run, tmp_path)
        assert set(written) == set(ARTIFACT_NAMES)
        back = read_artifacts(tmp_path)
        assert back["trajectory"] == bundled_run.artifacts["trajectory"]
        assert back["candidates"] == bundled_run.artifacts["candidates"]
        assert back["grasp"]["candidate"] == bundled_run.artifacts["grasp"]["candidate"]
        assert back["report"].to_dict() == bundled_run.to_dict()
        cloud, fields = back["clusters"]
        assert len(cloud) == len(bundled_run.artifacts["scene_cloud"])
        np.testing.assert_array_equal(fields["label"], bundled_run.artifacts["labels"])


class TestFailures:
    def test_no_target(self, tmp_path):
        r = run_pipeline(bundled_scenario(priority=["banana"]))
        assert r.status == "failed" and r.failed_stage == "associate" and r.exit_code == 2
        written = export_artifacts(r, tmp_path)
        assert "clusters" in written and "trajectory" not in written
        assert read_artifacts(tmp_path)["report"].exit_code == 2

    def test_start_outside_limits(self):
        r = run_pipeline(bundled_scenario(start_joints=[9, 0, 0, 0, 0, 0]))
        assert r.failed_stage == "load" and r.exit_code == 1

    def test_bad_scenario(self):
        with pytest.raises(ConfigError):
            scenario_from_dict({"format": "scenario", "version": 2})
        with pytest.raises(ConfigError):
            bundled_scenario(grasp={"n_samplez": 3})
        with pytest.raises(ConfigError):
            scenario_from_dict({"format": "scenario", "version": 1, "cloud": "missing.pcd"})


class TestReport:
    def test_text_round_trip(self, bundled_run):
        assert parse_report(format_report(bundled_run)).to_dict() == bundled_run.to_dict()

    def test_rejects_other_text(self):
        with pytest.raises(ConfigError):
            parse_report("hello\n")
