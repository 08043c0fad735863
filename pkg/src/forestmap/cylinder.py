"""Cylinder fitting: normal-based axis, plane projection, non-linear
refinement and RANSAC.

A cylinder is ``(a, c, r)`` with unit axis ``a``, axis point ``c`` and
radius ``r``. The point-to-cylinder distance is
``d(p) = |(p - c) x a| - r``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_normals, check_points, check_positive, check_unit_vector
from .circle import hyper_circle_batch, hyper_circle_fit
from .exceptions import (
    DegenerateFitError,
    DivergenceError,
    FitFailure,
    ValidationError,
)
from .geometry import PointCloud

AXIS_MODES = ("lls", "vertical")
REFINE_MODES = ("none", "nls", "nlsn")

MIN_RADIUS = 1e-3
MAX_RADIUS = 2.0


@dataclass(frozen=True, eq=False)
class Cylinder:
    """Infinite cylinder in canonical form: a.c = 0 and a_z >= 0."""

    axis: np.ndarray
    point: np.ndarray
    radius: float

    def __post_init__(self):
        a = check_unit_vector(self.axis)
        if a[2] < 0 or (a[2] == 0 and (a[0] < 0 or (a[0] == 0 and a[1] < 0))):
            a = -a
        c = np.asarray(self.point, dtype=np.float64).reshape(3)
        c = c - np.dot(c, a) * a
        r = float(self.radius)
        if not (np.isfinite(r) and r > 0) or not np.all(np.isfinite(c)):
            raise ValidationError(f"invalid cylinder radius {r} or point {c}")
        object.__setattr__(self, "axis", a)
        object.__setattr__(self, "point", c)
        object.__setattr__(self, "radius", r)

    @property
    def diameter(self):
        return 2.0 * self.radius

    def distance(self, points):
        """Signed point-to-surface distance (positive outside)."""
        return _axis_distance(np.asarray(points, dtype=np.float64), self.axis, self.point) \
            - self.radius


def _axis_distance(P, axis, point):
    rel = P - point
    along = rel @ axis
    return np.sqrt(np.maximum(np.einsum("ij,ij->i", rel, rel) - along * along, 0.0))


def rotation_to_z(axis):
    """Smallest rotation matrix R with ``R @ axis = (0, 0, 1)``."""
    return _frames(check_unit_vector(axis)[None])[0]


def _frames(axes):
    # closed form of I + [v]x + [v]x^2 / (1 + c) with v = a x z, c = a_z
    a0, a1, c = axes[:, 0], axes[:, 1], axes[:, 2]
    flipped = c < -1 + 1e-12
    k = 1.0 / np.where(flipped, 1.0, 1.0 + c)
    R = np.empty((axes.shape[0], 3, 3))
    R[:, 0, 0] = 1 - a0 * a0 * k
    R[:, 0, 1] = R[:, 1, 0] = -a0 * a1 * k
    R[:, 0, 2] = -a0
    R[:, 1, 1] = 1 - a1 * a1 * k
    R[:, 1, 2] = -a1
    R[:, 2] = axes
    R[flipped] = np.diag([1.0, -1.0, -1.0])
    return R


def project_to_plane(points, axis):
    """2D coordinates of ``points`` in a plane perpendicular to ``axis``.

    The in-plane basis is the first two rows of :func:`rotation_to_z`, so a
    vertical axis maps (x, y, z) to (x, y).
    """
    P = points.points if isinstance(points, PointCloud) else check_points(points)
    R = rotation_to_z(axis)
    return P @ R[:2].T


def lift_circle(center2d, axis):
    """Axis point in 3D for a circle centre found by :func:`project_to_plane`."""
    R = rotation_to_z(axis)
    return R[:2].T @ np.asarray(center2d, dtype=np.float64)


def axis_lls(normals):
    """Axis minimising |N^T a| for the given surface normals.

    On a perfect cylinder every normal is orthogonal to the axis, so the axis
    is the singular direction of smallest singular value. Returned with
    a_z >= 0.
    """
    N = check_points(normals, min_points=3, name="normals")
    _, s, vt = np.linalg.svd(N, full_matrices=False)
    if s[1] <= 1e-9 * s[0]:
        raise DegenerateFitError("normals are all parallel; axis is undetermined")
    a = vt[2]
    return -a if a[2] < 0 else a


def circle_cylinder(points, axis):
    """Fit a cylinder with a fixed axis by Hyper-fitting the projected points."""
    circle = hyper_circle_fit(project_to_plane(points, axis))
    return Cylinder(axis, lift_circle(circle.center, axis), circle.radius)


def cylinder_objective(points, cyl, normals=None, weight=0.0):
    d = cyl.distance(points)
    obj = float(d @ d)
    if normals is not None and weight > 0:
        obj += weight * float(np.sum((normals @ cyl.axis) ** 2))
    return obj


def _rx(t):
    c, s = np.cos(t), np.sin(t)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _ry(t):
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


@dataclass
class NlsInfo:
    converged: bool
    n_iter: int
    initial_cost: float
    final_cost: float
    history: list = field(default_factory=list)


def _nls_residuals(P, N, frame, cx, cy, r, sw):
    # points in the cylinder frame: axis is local z, axis passes (cx, cy)
    Q = P @ frame.T
    dx, dy = Q[:, 0] - cx, Q[:, 1] - cy
    rho = np.maximum(np.hypot(dx, dy), 1e-15)
    res = rho - r
    ux, uy = dx / rho, dy / rho
    n = P.shape[0]
    J = np.empty((n, 5))
    J[:, 0] = uy * Q[:, 2]
    J[:, 1] = -ux * Q[:, 2]
    J[:, 2] = -ux
    J[:, 3] = -uy
    J[:, 4] = -1.0
    if N is not None:
        M = N @ frame.T
        res = np.concatenate([res, sw * M[:, 2]])
        Jn = np.zeros((N.shape[0], 5))
        Jn[:, 0] = -sw * M[:, 1]
        Jn[:, 1] = sw * M[:, 0]
        J = np.vstack([J, Jn])
    return res, J


def cylinder_nls(points, init: Cylinder, weight=1.0, use_normals=False, normals=None,
                 max_iter=100, tol=1e-10, return_info=False):
    """Refine a cylinder by damped non-linear least squares.

    Minimises ``sum d(p_i)^2`` and, when ``use_normals`` is set, adds
    ``weight * sum (n_i . a)^2`` so the axis also agrees with the surface
    normals. The five free parameters are two axis rotation angles, the two
    in-plane coordinates of the axis point and the radius; the local frame is
    re-centred after every accepted step so the angles stay near zero.

    Returns the refined :class:`Cylinder` (and an :class:`NlsInfo` when
    ``return_info``). If the iteration budget runs out the best iterate is
    returned with ``info.converged = False``.

    Raises
    ------
    DivergenceError
        If the radius leaves [1 mm, 2 m].
    """
    if isinstance(points, PointCloud):
        if normals is None:
            normals = points.normals
        points = points.points
    P = check_points(points, min_points=5)
    if use_normals:
        if normals is None:
            raise ValidationError("normals penalty requested but no normals given")
        N = check_normals(normals, P.shape[0])
        check_positive(weight, "weight", allow_zero=True)
    else:
        N = None
    sw = np.sqrt(weight) if use_normals else 0.0

    frame = rotation_to_z(init.axis)
    cx, cy, _ = frame @ init.point
    r = init.radius
    res, J = _nls_residuals(P, N, frame, cx, cy, r, sw)
    cost = float(res @ res)
    info = NlsInfo(False, 0, cost, cost, [cost])
    lam = 1e-3
    for it in range(1, max_iter + 1):
        info.n_iter = it
        g = J.T @ res
        H = J.T @ J
        diag = np.maximum(np.diag(H), 1e-12)
        improved = small = False
        for _ in range(30):
            try:
                step = np.linalg.solve(H + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            if np.max(np.abs(step)) < tol:
                small = True
                break
            new_frame = _rx(step[0]).T @ _ry(step[1]).T @ frame
            ncx, ncy, nr = cx + step[2], cy + step[3], r + step[4]
            nres, nJ = _nls_residuals(P, N, new_frame, ncx, ncy, nr, sw)
            ncost = float(nres @ nres)
            if ncost <= cost:
                improved = True
                break
            lam *= 4
        if small or not improved:
            # parameter update below tolerance, or no descent left: stationary
            info.converged = True
            break
        frame, cx, cy, r, res, J = new_frame, ncx, ncy, nr, nres, nJ
        rel = cost - ncost
        cost = ncost
        info.history.append(cost)
        lam = max(lam / 3, 1e-12)
        if not (MIN_RADIUS <= abs(r) <= MAX_RADIUS):
            raise DivergenceError(f"radius diverged to {r:.4g} m")
        if np.max(np.abs(step)) < tol or rel <= 1e-12 * cost:
            info.converged = True
            break
    if not (MIN_RADIUS <= abs(r) <= MAX_RADIUS):
        raise DivergenceError(f"radius diverged to {r:.4g} m")
    axis = frame[2]
    point = frame[0] * cx + frame[1] * cy
    cyl = Cylinder(axis, point, abs(r))
    info.final_cost = cost
    return (cyl, info) if return_info else cyl


@dataclass(frozen=True)
class RansacSettings:
    """Knobs for :func:`ransac_cylinder`."""

    axis_mode: str = "vertical"
    refine: str = "none"
    epsilon: float = 0.02
    normals_weight: float = 1.0
    max_iterations: int = 200
    min_points: int = 20
    confidence: float = 0.99

    def __post_init__(self):
        if self.axis_mode not in AXIS_MODES:
            raise ValidationError(f"axis_mode must be one of {AXIS_MODES}")
        if self.refine not in REFINE_MODES:
            raise ValidationError(f"refine must be one of {REFINE_MODES}")
        check_positive(self.epsilon, "epsilon")
        check_positive(self.normals_weight, "normals_weight", allow_zero=True)
        check_positive(self.max_iterations, "max_iterations", integer=True)
        check_positive(self.min_points, "min_points", integer=True)
        if self.min_points < 5:
            raise ValidationError("min_points must be at least 5 for cylinder fits")

    @property
    def sample_size(self):
        return 9 if self.axis_mode == "lls" else 3

    @property
    def needs_normals(self):
        return self.axis_mode == "lls" or self.refine == "nlsn"


def _fit_chain(P, N, settings, refine=True):
    if settings.axis_mode == "lls":
        axis = axis_lls(N)
    else:
        axis = np.array([0.0, 0.0, 1.0])
    cyl = circle_cylinder(P, axis)
    if refine and settings.refine != "none":
        cyl = cylinder_nls(
            P, cyl, weight=settings.normals_weight,
            use_normals=settings.refine == "nlsn", normals=N,
        )
    return cyl


def _required_iterations(inlier_ratio, sample_size, confidence):
    w = inlier_ratio ** sample_size
    if w >= 1.0:
        return 1
    if w <= 0.0:
        return np.inf
    return np.ceil(np.log(1 - confidence) / np.log(1 - w))


def _candidates(P, N, samples, axis_mode):
    """Axis, axis point and radius of one candidate per row of ``samples``."""
    B = samples.shape[0]
    ok = np.ones(B, dtype=bool)
    if axis_mode == "lls":
        _, sv, vt = np.linalg.svd(N[samples], full_matrices=False)
        ok &= sv[:, 1] > 1e-9 * sv[:, 0]
        axes = vt[:, 2, :]
        axes = np.where(axes[:, 2:] < 0, -axes, axes)
    else:
        # vertical axis: the plane frame is the identity on x, y
        axes = np.tile([0.0, 0.0, 1.0], (B, 1))
        centers, radii, good = hyper_circle_batch(P[samples][..., :2])
        ok &= good & (radii >= MIN_RADIUS) & (radii <= MAX_RADIUS)
        points = np.column_stack([np.nan_to_num(centers), np.zeros(B)])
        return axes, points, radii, ok
    R = _frames(axes)
    plane = R[:, :2, :]
    P2 = np.einsum("bij,bkj->bki", plane, P[samples])
    centers, radii, good = hyper_circle_batch(P2)
    ok &= good & (radii >= MIN_RADIUS) & (radii <= MAX_RADIUS)
    points = np.einsum("bij,bi->bj", plane, np.nan_to_num(centers))
    return axes, points, radii, ok


def ransac_cylinder(points, settings: RansacSettings = RansacSettings(), random_state=None,
                    normals=None, chunk=16):
    """Robust cylinder fit.

    Each iteration draws a minimal sample (3 points with a vertical axis, 9
    points when the axis comes from normals), builds a candidate by axis
    estimation, projection and Hyper circle fit, and counts the points within
    ``settings.epsilon`` of its surface. The best candidate is refit on its
    inliers with the full method chain, including the optional non-linear
    refinement. Sampling stops once the usual inlier-ratio bound says enough
    samples were drawn (checked every ``chunk`` samples) or after
    ``settings.max_iterations``.

    Returns ``(cylinder, inlier_indices)``.

    Raises
    ------
    FitFailure
        Fewer than ``settings.min_points`` points or inliers.
    """
    if isinstance(points, PointCloud):
        if normals is None:
            normals = points.normals
        points = points.points
    P = check_points(points)
    n = P.shape[0]
    if n < settings.min_points:
        raise FitFailure(f"not enough points: {n} < {settings.min_points}")
    N = None
    if settings.needs_normals:
        if normals is None:
            raise ValidationError(f"{settings.axis_mode}/{settings.refine} chain needs normals")
        N = check_normals(normals, n)
    rng = np.random.default_rng(random_state)
    k = settings.sample_size
    if n < k:
        raise FitFailure(f"not enough points for a {k}-point sample: {n}")

    best_count, best_mask = -1, None
    budget = settings.max_iterations
    drawn = 0
    while drawn < budget:
        B = int(min(chunk, budget - drawn))
        drawn += B
        samples = np.argpartition(rng.random((B, n)), k - 1, axis=1)[:, :k]
        axes, pts, radii, ok = _candidates(P, N, samples, settings.axis_mode)
        if not ok.any():
            continue
        axes, pts, radii = axes[ok], pts[ok], radii[ok]
        rel = P[None, :, :] - pts[:, None, :]
        along = np.einsum("bnj,bj->bn", rel, axes)
        dist = np.sqrt(np.maximum(np.einsum("bnj,bnj->bn", rel, rel) - along**2, 0.0))
        inside = np.abs(dist - radii[:, None]) <= settings.epsilon
        counts = inside.sum(axis=1)
        j = int(np.argmax(counts))
        if counts[j] > best_count:
            best_count, best_mask = int(counts[j]), inside[j]
            needed = _required_iterations(best_count / n, k, settings.confidence)
            budget = int(min(settings.max_iterations, max(needed, drawn)))

    if best_mask is None or best_count < settings.min_points:
        raise FitFailure(f"best candidate has {max(best_count, 0)} inliers < {settings.min_points}")
    idx = np.flatnonzero(best_mask)
    try:
        cyl = _fit_chain(P[idx], None if N is None else N[idx], settings)
    except DegenerateFitError as exc:
        raise FitFailure(f"refit on inliers failed: {exc}") from exc
    except DivergenceError as exc:
        raise FitFailure(f"non-linear refinement diverged: {exc}") from exc
    inliers = np.flatnonzero(np.abs(cyl.distance(P)) <= settings.epsilon)
    if inliers.size < settings.min_points:
        raise FitFailure(f"refit model keeps {inliers.size} inliers < {settings.min_points}")
    return cyl, inliers


class CylinderFitter(RegressorMixin, BaseEstimator):
    """RANSAC cylinder estimator.

    Parameters
    ----------
    axis_mode : {"vertical", "lls"}
        Assume a vertical stem, or estimate the axis from surface normals.
    refine : {"none", "nls", "nlsn"}
        Optional non-linear refinement, with or without the normals penalty.
    epsilon : float
        RANSAC inlier tolerance (m).
    normals_weight : float
        Weight of the normals penalty for ``refine="nlsn"``.
    max_iterations, min_points : int
        RANSAC budget and minimum inlier count.
    random_state : int or None
        Seed for the sample draws.

    ``fit(X, normals=None)`` fits the model; ``predict(X)`` returns signed
    point-to-surface distances.
    """

    def __init__(self, axis_mode="vertical", refine="none", epsilon=0.02, normals_weight=1.0,
                 max_iterations=200, min_points=20, random_state=None):
        self.axis_mode = axis_mode
        self.refine = refine
        self.epsilon = epsilon
        self.normals_weight = normals_weight
        self.max_iterations = max_iterations
        self.min_points = min_points
        self.random_state = random_state

    def _settings(self):
        return RansacSettings(self.axis_mode, self.refine, self.epsilon, self.normals_weight,
                              self.max_iterations, self.min_points)

    def fit(self, X, y=None, normals=None):
        if isinstance(X, PointCloud):
            normals = X.normals if normals is None else normals
            X = X.points
        X = check_points(X)
        cyl, inliers = ransac_cylinder(X, self._settings(), self.random_state, normals=normals)
        self.cylinder_ = cyl
        self.inlier_mask_ = np.zeros(X.shape[0], dtype=bool)
        self.inlier_mask_[inliers] = True
        self.n_features_in_ = 3
        return self

    @property
    def radius_(self):
        check_is_fitted(self, "cylinder_")
        return self.cylinder_.radius

    @property
    def axis_(self):
        check_is_fitted(self, "cylinder_")
        return self.cylinder_.axis

    def predict(self, X):
        check_is_fitted(self, "cylinder_")
        return self.cylinder_.distance(check_points(X))

    def score(self, X, y=None):
        return -float(np.sqrt(np.mean(self.predict(X) ** 2)))


__all__ = [
    "Cylinder", "CylinderFitter", "RansacSettings", "NlsInfo", "axis_lls", "circle_cylinder",
    "cylinder_nls", "cylinder_objective", "lift_circle", "project_to_plane", "ransac_cylinder",
    "rotation_to_z",
]
