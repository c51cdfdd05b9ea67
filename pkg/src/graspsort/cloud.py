"""Point-cloud conditioning and object extraction.

The functional API (``statistical_outlier_filter``, ``voxel_downsample``,
``workspace_crop``, ``segment_plane_ransac``, ``euclidean_cluster``) works on
:class:`~graspsort.geometry.PointCloud`. Each stage also has a scikit-learn
estimator so the conditioning chain can be expressed as a ``Pipeline``::

    from sklearn.pipeline import make_pipeline
    prep = make_pipeline(StatisticalOutlierFilter(k=50), VoxelDownsampler(0.005),
                         WorkspaceCrop(box))
    clean = prep.fit_transform(cloud)

The transformers accept a ``PointCloud`` (and return one) or a plain
(n, 3) array.
"""

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_points, check_positive, check_vector
from .exceptions import DegenerateError, SparseCloudWarning
from .geometry import PointCloud

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class WorkspaceBox:
    """Closed axis-aligned box ``[min, max]`` in ``frame``."""

    min: np.ndarray
    max: np.ndarray
    frame: str = "base"

    def __post_init__(self):
        lo = check_vector(self.min, 3, "min")
        hi = check_vector(self.max, 3, "max")
        if not np.all(lo < hi):
            raise ValueError("workspace box needs min < max on every axis")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    def contains(self, points):
        P = check_points(points)
        return np.all((P >= self.min) & (P <= self.max), axis=1)


@dataclass(frozen=True, eq=False)
class Plane:
    """Plane ``normal . p + d = 0`` with a unit normal."""

    normal: np.ndarray
    d: float

    def __post_init__(self):
        n = check_vector(self.normal, 3, "normal")
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("plane normal must be unit length")
        object.__setattr__(self, "normal", n)

    def distance(self, points):
        """Unsigned point-plane distances."""
        return np.abs(check_points(points) @ self.normal + self.d)


@dataclass(frozen=True, eq=False)
class Cluster:
    indices: np.ndarray
    centroid: np.ndarray

    def __len__(self):
        return len(self.indices)


def _as_points(X):
    if isinstance(X, PointCloud):
        return X.points
    return check_points(X)


def _rewrap(X, points):
    if isinstance(X, PointCloud):
        return X.with_points(points)
    return points


# -- statistical outlier removal ---------------------------------------------

def mean_knn_distances(points, k):
    """Mean distance from every point to its ``k`` nearest other points."""
    tree = cKDTree(points)
    dist, _ = tree.query(points, k=k + 1)
    return dist[:, 1:].mean(axis=1)


def statistical_outlier_mask(points, k=50, stddev_mult=1.0):
    """Boolean keep-mask, or ``None`` when the cloud has fewer than ``k + 1`` points."""
    if k < 1:
        raise ValueError("k must be >= 1")
    check_positive(stddev_mult, "stddev_mult")
    if len(points) < k + 1:
        return None
    mean_d = mean_knn_distances(points, k)
    thresh = mean_d.mean() + stddev_mult * mean_d.std()
    return mean_d <= thresh


def statistical_outlier_filter(cloud, k=50, stddev_mult=1.0):
    """Drop points whose mean k-NN distance exceeds ``mean + stddev_mult * std``.

    Clouds with fewer than ``k + 1`` points are returned unchanged and a
    :class:`SparseCloudWarning` is issued.
    """
    mask = statistical_outlier_mask(cloud.points, k, stddev_mult)
    if mask is None:
        warnings.warn(f"statistical filter skipped: {len(cloud)} points < k+1={k + 1}",
                      SparseCloudWarning, stacklevel=2)
        return cloud
    return cloud.select(mask)


class StatisticalOutlierFilter(TransformerMixin, BaseEstimator):
    """Estimator form of :func:`statistical_outlier_filter`.

    After ``transform``, ``support_`` holds the keep mask of the last call
    and ``skipped_`` tells whether the cloud was too small to filter.
    """

    def __init__(self, k=50, stddev_mult=1.0):
        self.k = k
        self.stddev_mult = stddev_mult

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        P = _as_points(X)
        mask = statistical_outlier_mask(P, self.k, self.stddev_mult)
        self.skipped_ = mask is None
        if mask is None:
            warnings.warn(f"statistical filter skipped: {len(P)} points < k+1={self.k + 1}",
                          SparseCloudWarning, stacklevel=2)
            mask = np.ones(len(P), dtype=bool)
        self.support_ = mask
        return _rewrap(X, P[mask])


# -- voxel grid -----------------------------------------------------------------

def voxel_indices(points, leaf):
    return np.floor(points / leaf).astype(np.int64)


def voxel_centroids(points, leaf):
    """Centroid of each occupied voxel, ordered by voxel index (lexicographic)."""
    check_positive(leaf, "leaf")
    if len(points) == 0:
        return np.zeros((0, 3))
    keys = voxel_indices(points, leaf)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((counts.size, 3))
    np.add.at(sums, inverse, points)
    return sums / counts[:, None]


def voxel_downsample(cloud, leaf=0.005):
    """Replace the points of every occupied voxel by their centroid."""
    return cloud.with_points(voxel_centroids(cloud.points, leaf))


class VoxelDownsampler(TransformerMixin, BaseEstimator):
    def __init__(self, leaf=0.005):
        self.leaf = leaf

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return _rewrap(X, voxel_centroids(_as_points(X), self.leaf))


# -- workspace crop -------------------------------------------------------------

def workspace_crop(cloud, box):
    """Keep exactly the points inside the closed box."""
    return cloud.select(box.contains(cloud.points))


class WorkspaceCrop(TransformerMixin, BaseEstimator):
    def __init__(self, box=None):
        self.box = box

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        P = _as_points(X)
        if self.box is None:
            self.support_ = np.ones(len(P), dtype=bool)
        else:
            if isinstance(X, PointCloud) and X.frame_id != self.box.frame:
                raise ValueError(f"box is in frame {self.box.frame!r}, cloud in {X.frame_id!r}")
            self.support_ = self.box.contains(P)
        return _rewrap(X, P[self.support_])


# -- RANSAC plane -----------------------------------------------------------------

def _plane_through(p0, p1, p2):
    n = np.cross(p1 - p0, p2 - p0)
    norm = np.linalg.norm(n)
    if norm < 1e-12:
        return None
    n = n / norm
    return n, -float(n @ p0)


def _lstsq_plane(P):
    c = P.mean(axis=0)
    _, s, Vt = np.linalg.svd(P - c, full_matrices=False)
    n = Vt[-1]
    return n, -float(n @ c), s


def _check_non_collinear(P):
    if len(P) < 3:
        raise DegenerateError(f"plane fit needs >= 3 points, got {len(P)}")
    s = np.linalg.svd(P - P.mean(axis=0), compute_uv=False)
    if s[1] <= 1e-12 * max(s[0], 1.0):
        raise DegenerateError("points are collinear; plane is undefined")


def segment_plane_ransac(cloud, dist_thresh=0.005, iterations=200, seed=0):
    """Dominant plane by RANSAC followed by a least-squares refit on its inliers.

    Hypotheses are triples drawn from ``numpy.random.default_rng(seed)``; the
    first hypothesis with the highest inlier count wins. The refit plane is
    kept only if it has at least as many inliers. The normal is oriented
    toward the cloud's sensor origin.

    Returns
    -------
    plane : Plane
    inliers : ndarray of int
        Indices with point-plane distance <= ``dist_thresh`` under ``plane``.
    """
    P = cloud.points
    check_positive(dist_thresh, "dist_thresh")
    _check_non_collinear(P)
    rng = np.random.default_rng(seed)
    n_pts = len(P)
    best = None
    best_count = -1
    samples = np.array([rng.choice(n_pts, 3, replace=False) for _ in range(int(iterations))])
    for i, j, k in samples:
        hyp = _plane_through(P[i], P[j], P[k])
        if hyp is None:
            continue
        n, d = hyp
        count = int(np.count_nonzero(np.abs(P @ n + d) <= dist_thresh))
        if count > best_count:
            best, best_count = hyp, count
    if best is None:
        raise DegenerateError("every sampled triple was collinear")

    n, d = best
    inliers = np.abs(P @ n + d) <= dist_thresh
    if np.count_nonzero(inliers) >= 3:
        rn, rd, s = _lstsq_plane(P[inliers])
        if s[1] > 0:
            refit = np.abs(P @ rn + rd) <= dist_thresh
            if np.count_nonzero(refit) >= np.count_nonzero(inliers):
                n, d, inliers = rn, rd, refit
    if n @ cloud.sensor_origin + d < 0:
        n, d = -n, -d
    n = n / np.linalg.norm(n)
    return Plane(n, d), np.flatnonzero(inliers)


class PlaneSegmenter(BaseEstimator):
    """RANSAC plane estimator; ``predict`` marks inliers with 1, others 0."""

    def __init__(self, dist_thresh=0.005, iterations=200, seed=0):
        self.dist_thresh = dist_thresh
        self.iterations = iterations
        self.seed = seed

    def fit(self, X, y=None):
        cloud = X if isinstance(X, PointCloud) else PointCloud(check_points(X))
        self.plane_, self.inliers_ = segment_plane_ransac(cloud, self.dist_thresh, self.iterations, self.seed)
        self.inlier_mask_ = np.zeros(len(cloud), dtype=bool)
        self.inlier_mask_[self.inliers_] = True
        return self

    def predict(self, X):
        check_is_fitted(self, "plane_")
        return (self.plane_.distance(_as_points(X)) <= self.dist_thresh).astype(int)

    def fit_predict(self, X, y=None):
        return self.fit(X).inlier_mask_.astype(int)

    def transform(self, X):
        """Remove the inliers of the fitted plane."""
        keep = self.predict(X) == 0
        return _rewrap(X, _as_points(X)[keep])


# -- Euclidean clustering ---------------------------------------------------------

def connected_labels(points, tol):
    """Component label for every point of the graph joining points within ``tol``."""
    n = len(points)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    pairs = cKDTree(points).query_pairs(tol, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs), dtype=np.int8), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    return labels


def euclidean_cluster(cloud, tol=0.02, min_size=100, max_size=25000):
    """Connected components within ``tol``, size-filtered, sorted by centroid (x, then y)."""
    check_positive(tol, "tol")
    if min_size > max_size:
        raise ValueError("min_size must be <= max_size")
    P = cloud.points
    labels = connected_labels(P, tol)
    clusters = []
    if len(P):
        order = np.argsort(labels, kind="stable")
        bounds = np.flatnonzero(np.diff(labels[order])) + 1
        for members in np.split(order, bounds):
            if min_size <= len(members) <= max_size:
                members = np.sort(members)
                clusters.append(Cluster(members, P[members].mean(axis=0)))
    clusters.sort(key=lambda c: (c.centroid[0], c.centroid[1]))
    return clusters


def compute_centroid(cloud, cluster):
    if len(cluster.indices) == 0:
        raise ValueError("cluster is empty")
    return cloud.points[cluster.indices].mean(axis=0)


class EuclideanClusterer(ClusterMixin, BaseEstimator):
    """Estimator form of :func:`euclidean_cluster`.

    ``labels_`` gives each point its cluster's position in ``clusters_``
    (sorted by centroid), or -1 for points in size-rejected components.
    """

    def __init__(self, tol=0.02, min_size=100, max_size=25000):
        self.tol = tol
        self.min_size = min_size
        self.max_size = max_size

    def fit(self, X, y=None):
        cloud = X if isinstance(X, PointCloud) else PointCloud(check_points(X))
        self.clusters_ = euclidean_cluster(cloud, self.tol, self.min_size, self.max_size)
        self.labels_ = np.full(len(cloud), -1, dtype=np.int64)
        for i, c in enumerate(self.clusters_):
            self.labels_[c.indices] = i
        return self


# -- the fixed conditioning chain -----------------------------------------------

@dataclass
class PipelineParams:
    k: int = 50
    stddev_mult: float = 1.0
    leaf: float = 0.005
    workspace: WorkspaceBox = None
    plane_thresh: float = 0.005
    plane_iterations: int = 200
    cluster_tol: float = 0.02
    min_size: int = 100
    max_size: int = 25000

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        ws = d.pop("workspace", None)
        if isinstance(ws, dict):
            ws = WorkspaceBox(ws["min"], ws["max"], ws.get("frame", "base"))
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown pipeline parameters: {sorted(unknown)}")
        return cls(workspace=ws, **d)


def log_count(stage, n):
    logger.info("%s: %d points", stage, n)
