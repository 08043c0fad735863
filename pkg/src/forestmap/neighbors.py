"""Nearest-neighbour queries, voxel downsampling and PCA normal estimation."""

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_points, check_positive
from .exceptions import InsufficientPointsError, ValidationError
from .geometry import PointCloud

_NORMAL_CHUNK = 50_000


def voxel_keys(points, cell_edge):
    """Integer cell coordinates of each point on a grid anchored at the origin."""
    return np.floor(np.asarray(points) / cell_edge).astype(np.int64)


def _linear_keys(cells):
    lo = cells.min(axis=0)
    span = cells.max(axis=0) - lo + 1
    shifted = cells - lo
    return (shifted[:, 0] * span[1] + shifted[:, 1]) * span[2] + shifted[:, 2]


def voxel_downsample(cloud: PointCloud, cell_edge: float) -> PointCloud:
    """Keep at most one point per cubic cell of side ``cell_edge``.

    The kept point is the one nearest to the mean of the points falling in
    its cell (ties go to the lower index). Surviving points keep their input
    order and their normals.
    """
    check_positive(cell_edge, "cell_edge")
    n = len(cloud)
    if n == 0:
        return cloud
    pts = cloud.points
    keys = _linear_keys(voxel_keys(pts, cell_edge))
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    starts = np.flatnonzero(np.r_[True, sorted_keys[1:] != sorted_keys[:-1]])
    counts = np.diff(np.r_[starts, n])
    group = np.repeat(np.arange(starts.size), counts)

    sums = np.add.reduceat(pts[order], starts, axis=0)
    means = sums / counts[:, None]
    d2 = np.sum((pts[order] - means[group]) ** 2, axis=1)
    # within each group: smallest distance, then smallest original index
    pick = np.lexsort((order, d2, group))
    first = np.r_[True, group[pick][1:] != group[pick][:-1]]
    keep = np.sort(order[pick[first]])
    return cloud.subset(keep)


class VoxelDownsampler(TransformerMixin, BaseEstimator):
    """Transformer wrapper around :func:`voxel_downsample`.

    Parameters
    ----------
    cell_edge : float, default=0.02
        Cell side in meters. 2 cm gives one point per 8 cm^3.
    """

    def __init__(self, cell_edge=0.02):
        self.cell_edge = cell_edge

    def fit(self, X, y=None):
        check_positive(self.cell_edge, "cell_edge")
        return self

    def transform(self, X):
        cloud = X if isinstance(X, PointCloud) else PointCloud(X)
        out = voxel_downsample(cloud, self.cell_edge)
        return out if isinstance(X, PointCloud) else out.points.copy()


def knn(cloud: PointCloud, query, k: int, tree=None):
    """Indices of the ``k`` nearest points to ``query``, nearest first.

    Exact search. Equal distances are ordered by ascending index.
    """
    check_positive(k, "k", integer=True)
    n = len(cloud)
    if k > n:
        raise InsufficientPointsError(f"k={k} exceeds point count {n}")
    q = np.asarray(query, dtype=np.float64).reshape(3)
    tree = cKDTree(cloud.points) if tree is None else tree
    dist, _ = tree.query(q, k=k)
    radius = float(np.atleast_1d(dist)[-1])
    # widen to every point tied with the k-th distance, then order exactly
    cand = np.asarray(tree.query_ball_point(q, radius * (1 + 1e-12) + 1e-300), dtype=np.intp)
    d2 = np.sum((cloud.points[cand] - q) ** 2, axis=1)
    order = np.lexsort((cand, d2))
    return cand[order[:k]].tolist()


def estimate_normals(cloud: PointCloud, q: int = 15, viewpoint=(0.0, 0.0, 0.0),
                     return_valid=False, tree=None):
    """PCA normals from the ``q`` nearest neighbours of every point.

    Each normal is the eigenvector of the neighbourhood covariance with the
    smallest eigenvalue, flipped to face ``viewpoint``. Neighbourhoods of
    rank < 2 (collinear or coincident points) are flagged invalid; their
    normal is still a unit vector but carries no surface information.

    Returns the cloud with normals, plus the validity mask when
    ``return_valid`` is true.
    """
    check_positive(q, "q", integer=True)
    n = len(cloud)
    if q < 3:
        raise InsufficientPointsError(f"q must be at least 3, got {q}")
    if n < q:
        raise InsufficientPointsError(f"cloud has {n} points, fewer than q={q}")
    pts = cloud.points
    vp = np.asarray(viewpoint, dtype=np.float64).reshape(3)
    tree = cKDTree(pts) if tree is None else tree
    normals = np.empty((n, 3))
    valid = np.empty(n, dtype=bool)
    for start in range(0, n, _NORMAL_CHUNK):
        stop = min(start + _NORMAL_CHUNK, n)
        _, idx = tree.query(pts[start:stop], k=q)
        nb = pts[idx]
        nb = nb - nb.mean(axis=1, keepdims=True)
        cov = np.einsum("nki,nkj->nij", nb, nb) / q
        evals, evecs = np.linalg.eigh(cov)
        normals[start:stop] = evecs[:, :, 0]
        scale = np.maximum(evals[:, 2], 1e-300)
        valid[start:stop] = evals[:, 1] > 1e-10 * scale
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    flip = np.einsum("ij,ij->i", normals, vp - pts) < 0
    normals[flip] *= -1
    out = cloud.with_normals(normals)
    return (out, valid) if return_valid else out


class NormalEstimator(TransformerMixin, BaseEstimator):
    """Transformer attaching PCA normals to a point cloud.

    ``transform`` accepts a :class:`PointCloud` (returns one with normals)
    or an (n, 3) array (returns the (n, 3) normal array).
    """

    def __init__(self, q=15, viewpoint=(0.0, 0.0, 0.0)):
        self.q = q
        self.viewpoint = viewpoint

    def fit(self, X, y=None):
        check_positive(self.q, "q", integer=True)
        if self.q < 3:
            raise ValidationError("q must be at least 3")
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        cloud = X if isinstance(X, PointCloud) else PointCloud(check_points(X))
        out = estimate_normals(cloud, self.q, self.viewpoint)
        return out if isinstance(X, PointCloud) else out.normals.copy()
