"""Heuristic grasp scoring and selection.

Each candidate gets three terms in [0, 1]:

* height      ``clamp((z - bottom) / (top - bottom))`` of the gripper origin,
* similarity  ``(1 + cos θ) / 2`` for the geodesic angle θ between the
  candidate and the current gripper orientation,
* approach    ``(1 + cos φ) / 2`` for the angle φ between the approach axis
  and the direction from the gripper origin to the robot base,

combined with non-negative weights that sum to one.
"""

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import NoGraspError
from .geometry import RigidTransform, rotation_angle


@dataclass(frozen=True)
class ScoreWeights:
    w_height: float = 0.5
    w_similarity: float = 0.25
    w_approach: float = 0.25

    def __post_init__(self):
        w = (self.w_height, self.w_similarity, self.w_approach)
        if min(w) < 0:
            raise ValueError("score weights must be non-negative")
        if abs(sum(w) - 1.0) > 1e-9:
            raise ValueError(f"score weights must sum to 1, got {sum(w)}")

    @classmethod
    def normalized(cls, w_height, w_similarity, w_approach):
        total = w_height + w_similarity + w_approach
        if not total > 0:
            raise ValueError("at least one weight must be positive")
        return cls(w_height / total, w_similarity / total, w_approach / total)


@dataclass(frozen=True, eq=False)
class ScoringContext:
    object_top_z: float
    object_bottom_z: float
    current_gripper_pose: RigidTransform
    robot_base_position: np.ndarray = None

    def __post_init__(self):
        if self.object_top_z < self.object_bottom_z:
            raise ValueError("object_top_z must not be below object_bottom_z")
        base = np.zeros(3) if self.robot_base_position is None else np.asarray(self.robot_base_position, float)
        object.__setattr__(self, "robot_base_position", base)


class ScoreTerms(NamedTuple):
    height: float
    similarity: float
    approach: float
    total: float


def score_terms(candidate, ctx, weights=ScoreWeights()):
    z = candidate.position[2]
    extent = ctx.object_top_z - ctx.object_bottom_z
    h = 1.0 if extent <= 0 else float(np.clip((z - ctx.object_bottom_z) / extent, 0.0, 1.0))

    theta = rotation_angle(ctx.current_gripper_pose.rotation.T @ candidate.pose.rotation)
    s = (1.0 + np.cos(theta)) / 2.0

    to_base = ctx.robot_base_position - candidate.position
    dist = np.linalg.norm(to_base)
    if dist == 0:
        a = 1.0
    else:
        c = np.clip(candidate.approach @ to_base / dist, -1.0, 1.0)
        a = (1.0 + c) / 2.0
    total = weights.w_height * h + weights.w_similarity * s + weights.w_approach * a
    return ScoreTerms(h, float(s), float(a), float(np.clip(total, 0.0, 1.0)))


def score_grasp(candidate, ctx, weights=ScoreWeights()):
    """Weighted score in [0, 1]; the candidate pose must be in the base frame."""
    return score_terms(candidate, ctx, weights).total


def rank_candidates(candidates, ctx, weights=ScoreWeights()):
    """Candidate indices from best to worst.

    Order: score (desc), contact depth (desc), list position (asc).
    """
    scores = [score_grasp(c, ctx, weights) for c in candidates]
    return sorted(range(len(candidates)), key=lambda i: (-scores[i], -candidates[i].contact_depth, i))


def select_best(candidates, ctx, weights=ScoreWeights()):
    if not candidates:
        raise NoGraspError("no grasp candidates to select from")
    i = rank_candidates(candidates, ctx, weights)[0]
    return replace(candidates[i], score=score_grasp(candidates[i], ctx, weights))


class GraspScorer(BaseEstimator):
    """Scores and ranks candidates; weights are renormalized to sum to one."""

    def __init__(self, w_height=0.5, w_similarity=0.25, w_approach=0.25):
        self.w_height = w_height
        self.w_similarity = w_similarity
        self.w_approach = w_approach

    @property
    def weights(self):
        return ScoreWeights.normalized(self.w_height, self.w_similarity, self.w_approach)

    def fit(self, context):
        self.context_ = context
        return self

    def score_samples(self, candidates):
        return np.array([score_grasp(c, self.context_, self.weights) for c in candidates])

    def select(self, candidates):
        return select_best(candidates, self.context_, self.weights)
