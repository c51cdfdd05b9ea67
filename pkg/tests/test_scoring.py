import numpy as np
import pytest
from hypothesis import given, strategies as st

from graspsort.exceptions import NoGraspError
from graspsort.geometry import RigidTransform, rotation_about
from graspsort.grasping import GraspCandidate
from graspsort.scoring import (GraspScorer, ScoreWeights, ScoringContext, rank_candidates, score_grasp,
                               score_terms, select_best)

import oracles
from helpers import random_rotation


def frame_from_approach(a, up=(0, 0, 1)):
    a = np.asarray(a, float) / np.linalg.norm(a)
    ref = np.asarray(up, float)
    if abs(a @ ref) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    y = np.cross(ref, a)
    y /= np.linalg.norm(y)
    return np.column_stack([a, y, np.cross(a, y)])


def cand(R, t, depth=0.0):
    return GraspCandidate(RigidTransform(R, t, "gripper", "base"), 0.085, depth)


def ctx(R_current, top=0.2, bottom=0.0, base=(0, 0, 0)):
    return ScoringContext(top, bottom, RigidTransform(R_current, [0, 0, 0.5], "gripper", "base"), np.array(base))


class TestScore:
    def test_all_terms_max(self):
        t = np.array([0.5, 0.0, 0.2])
        R = frame_from_approach(-t)
        assert score_grasp(cand(R, t), ctx(R)) == pytest.approx(1.0)

    def test_all_terms_min(self):
        t = np.array([0.5, 0.0, 0.0])
        R = frame_from_approach(t)
        R_cur = R @ rotation_about([0, 0, 1], np.pi)
        assert score_grasp(cand(R, t), ctx(R_cur)) == pytest.approx(0.0, abs=1e-12)

    def test_top_beats_middle(self):
        R = frame_from_approach([0, 0, -1])
        top = cand(R, [0.5, 0, 0.2])
        mid = cand(R, [0.5, 0, 0.1])
        c = ctx(R)
        assert score_grasp(top, c) > score_grasp(mid, c)

    def test_flat_object_height_one(self):
        R = frame_from_approach([0, 0, -1])
        c = ScoringContext(0.1, 0.1, RigidTransform(R, [0, 0, 0], "gripper", "base"))
        assert score_terms(cand(R, [0.5, 0, 0.0]), c).height == 1.0

    def test_context_invariant(self):
        with pytest.raises(ValueError):
            ScoringContext(0.0, 0.1, RigidTransform.identity())

    def test_weights_checked(self):
        with pytest.raises(ValueError):
            ScoreWeights(0.5, 0.5, 0.5)
        with pytest.raises(ValueError):
            ScoreWeights(1.2, -0.1, -0.1)
        assert ScoreWeights.normalized(2, 1, 1) == ScoreWeights(0.5, 0.25, 0.25)

    @given(st.integers(0, 2**31 - 1))
    def test_bounded(self, seed):
        rng = np.random.default_rng(seed)
        c = cand(random_rotation(rng), rng.normal(0, 0.5, 3))
        terms = score_terms(c, ctx(random_rotation(rng)))
        for v in terms:
            assert 0.0 <= v <= 1.0


def eight_pose_candidates():
    """Eight poses around an upright object: four heights, two orientations."""
    R_down = frame_from_approach([0, 0, -1])
    R_side = frame_from_approach([1, 0, 0])
    out = []
    for z in (0.2, 0.15, 0.1, 0.05):
        out.append(cand(R_side, [0.35, 0, z]))
        out.append(cand(R_down, [0.45, 0, z]))
    return out, R_down


class TestSelect:
    def test_top_aligned_wins_among_eight(self):
        cands, R_down = eight_pose_candidates()
        c = ctx(R_down)
        best = select_best(cands, c)
        assert best.pose == cands[1].pose
        scores = oracles.exhaustive_scores(cands, 0.2, 0.0, R_down, [0, 0, 0], (0.5, 0.25, 0.25))
        assert int(np.argmax(scores)) == 1
        assert best.score == pytest.approx(max(scores))

    def test_single(self):
        c = cand(np.eye(3), [5, 5, -1])
        assert select_best([c], ctx(np.eye(3))).pose == c.pose

    def test_identical_first_wins(self):
        R = np.eye(3)
        a, b = cand(R, [0.5, 0, 0.1]), cand(R, [0.5, 0, 0.1])
        assert rank_candidates([a, b], ctx(R))[0] == 0

    def test_tie_prefers_deeper_contact(self):
        R = np.eye(3)
        a, b = cand(R, [0.5, 0, 0.1], 0.001), cand(R, [0.5, 0, 0.1], 0.02)
        assert rank_candidates([a, b], ctx(R))[0] == 1

    def test_empty(self):
        with pytest.raises(NoGraspError):
            select_best([], ctx(np.eye(3)))

    @given(st.integers(0, 2**31 - 1), st.floats(0.1, 10))
    def test_argmax_invariant_to_weight_scale(self, seed, k):
        rng = np.random.default_rng(seed)
        cands = [cand(random_rotation(rng), rng.uniform(-0.5, 0.5, 3)) for _ in range(10)]
        c = ctx(random_rotation(rng))
        w = rng.uniform(0.1, 1, 3)
        a = select_best(cands, c, ScoreWeights.normalized(*w))
        b = select_best(cands, c, ScoreWeights.normalized(*(k * w)))
        assert a.pose == b.pose

    @given(st.integers(0, 2**31 - 1))
    def test_matches_exhaustive(self, seed):
        rng = np.random.default_rng(seed)
        cands = [cand(random_rotation(rng), rng.uniform(-0.5, 0.5, 3)) for _ in range(12)]
        R_cur = random_rotation(rng)
        got = select_best(cands, ctx(R_cur, 0.3, -0.3))
        scores = oracles.exhaustive_scores(cands, 0.3, -0.3, R_cur, [0, 0, 0], (0.5, 0.25, 0.25))
        assert got.pose == cands[int(np.argmax(scores))].pose

    def test_estimator(self):
        cands, R_down = eight_pose_candidates()
        sc = GraspScorer(2, 1, 1).fit(ctx(R_down))
        assert sc.select(cands).pose == cands[1].pose
        assert sc.score_samples(cands).shape == (8,)


def random_pair_monotonicity(rng, n):
    """Yield (context, better, worse) with one term improved and the rest fixed."""
    for i in range(n):
        R_cur = random_rotation(rng)
        c = ctx(R_cur, 0.3, 0.0)
        R = random_rotation(rng)
        t = rng.uniform([-0.5, -0.5, 0.0], [0.5, 0.5, 0.3])
        kind = i % 3
        if kind == 0:
            hi = t.copy()
            hi[2] = rng.uniform(t[2], 0.4)
            yield c, cand(R, hi), cand(R, t), kind
        elif kind == 1:
            # rotate toward the current orientation along the geodesic
            from graspsort.geometry import rotation_log
            w = rotation_log(R_cur.T @ R)
            s = rng.uniform(0, 1)
            R_closer = R_cur @ rotation_about(w, s * np.linalg.norm(w)) if np.linalg.norm(w) > 0 else R
            yield c, cand(R_closer, t), cand(R, t), kind
        else:
            # turn the approach axis toward the base about the common normal
            to_base = -t / np.linalg.norm(t)
            a = R[:, 0]
            axis = np.cross(a, to_base)
            if np.linalg.norm(axis) < 1e-9:
                continue
            ang = np.arccos(np.clip(a @ to_base, -1, 1))
            R_closer = rotation_about(axis, rng.uniform(0, 1) * ang) @ R
            # keep height fixed: rotation changes only the frame, not the origin
            yield c, cand(R_closer, t), cand(R, t), kind


def test_monotonicity_terms(rng):
    for c, better, worse, kind in random_pair_monotonicity(rng, 300):
        tb, tw = score_terms(better, c), score_terms(worse, c)
        assert tb[kind] >= tw[kind] - 1e-12
