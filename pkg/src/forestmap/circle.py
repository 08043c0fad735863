"""Algebraic "Hyper" circle fit.

The circle ``A (x^2 + y^2) + B x + C y + D = 0`` is found by minimising the
mean squared algebraic residual subject to the hyperaccurate normalisation
``A^T N A = 1`` with (for centred data)::

    N = [[8 z_mean, 0, 0, 2],
         [0,        1, 0, 0],
         [0,        0, 1, 0],
         [2,        0, 0, 0]]

which removes the essential bias of the plain algebraic fit on short arcs.
The solution is the generalized eigenvector ``M A = eta N A`` with the
smallest non-negative ``eta``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_points
from .exceptions import DegenerateFitError


@dataclass(frozen=True)
class Circle2D:
    center: np.ndarray
    radius: float

    def residuals(self, points2d):
        """Signed distance of each point to the circle."""
        return np.linalg.norm(np.asarray(points2d) - self.center, axis=1) - self.radius


def hyper_circle_batch(points2d):
    """Vectorised Hyper fit of B independent point sets of equal size.

    ``points2d`` has shape (B, k, 2) with k >= 3. Returns ``(centers (B, 2),
    radii (B,), ok (B,))``; rows with ``ok = False`` are degenerate (collinear
    or coincident points, non-positive radicand) and hold NaN.
    """
    P = np.asarray(points2d, dtype=np.float64)
    B, k, _ = P.shape
    if k == 3:
        return _circumcircle_batch(P)
    centroid = P.mean(axis=1)
    x = P[..., 0] - centroid[:, :1]
    y = P[..., 1] - centroid[:, 1:]
    z = x * x + y * y
    spread = np.sqrt(z.mean(axis=1))
    ok = spread > 0
    spread = np.where(ok, spread, 1.0)
    # scale to unit spread so the tolerances below are dimensionless
    x, y = x / spread[:, None], y / spread[:, None]
    z = z / (spread**2)[:, None]
    design = np.stack([z, x, y, np.ones_like(x)], axis=2)
    _, s, vt = np.linalg.svd(design, full_matrices=k < 4)

    if k < 4:
        exact = np.ones(B, dtype=bool)
    else:
        exact = s[:, 3] < 1e-12 * s[:, 0]
    coef = vt[:, 3, :].copy()
    noisy = ~exact
    if noisy.any():
        sv, vv = s[noisy], vt[noisy]
        # Y = V S V^T is the square root of the moment matrix M
        Y = np.einsum("bji,bj,bjk->bik", vv, sv, vv)
        n_inv = np.zeros((noisy.sum(), 4, 4))
        n_inv[:, 0, 3] = n_inv[:, 3, 0] = 0.5
        n_inv[:, 1, 1] = n_inv[:, 2, 2] = 1.0
        n_inv[:, 3, 3] = -2.0 * z[noisy].mean(axis=1)
        evals, evecs = np.linalg.eigh(Y @ n_inv @ Y)
        # N^{-1} has exactly one negative eigenvalue, so the spectrum has one
        # negative entry; the smallest non-negative one is the second
        second = np.argsort(evals, axis=1)[:, 1]
        vec = np.take_along_axis(evecs, second[:, None, None], axis=2)
        coef[noisy] = np.linalg.solve(Y, vec)[..., 0]

    a, b, c, d = coef.T
    ok &= np.abs(a) >= 1e-12 * np.hypot(b, c)
    radicand = b * b + c * c - 4.0 * a * d
    ok &= radicand > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        centers = np.column_stack([-b / (2 * a), -c / (2 * a)]) * spread[:, None] + centroid
        radii = np.sqrt(radicand) / (2 * np.abs(a)) * spread
    centers[~ok] = np.nan
    radii[~ok] = np.nan
    return centers, radii, ok


def _circumcircle_batch(P):
    # three points determine the circle, which every algebraic fit returns
    a, b, c = P[:, 0], P[:, 1], P[:, 2]
    u, v = b - a, c - a
    d = 2.0 * (u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0])
    uu, vv = (u * u).sum(axis=1), (v * v).sum(axis=1)
    scale = np.maximum(uu, vv)
    ok = np.abs(d) > 1e-12 * np.where(scale > 0, scale, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ox = (v[:, 1] * uu - u[:, 1] * vv) / d
        oy = (u[:, 0] * vv - v[:, 0] * uu) / d
    centers = a + np.column_stack([ox, oy])
    radii = np.hypot(ox, oy)
    centers[~ok] = np.nan
    radii[~ok] = np.nan
    return centers, radii, ok


def hyper_circle_fit(points2d) -> Circle2D:
    """Fit a circle to 2D points with the Hyper algebraic method.

    Exact (to rounding) when the points lie on a circle. Raises
    :class:`DegenerateFitError` on collinear input or a non-positive radicand.
    """
    P = check_points(points2d, dim=2, min_points=3, name="points2d")
    centers, radii, ok = hyper_circle_batch(P[None])
    if not ok[0]:
        raise DegenerateFitError("points are collinear or coincide; no finite circle")
    return Circle2D(centers[0], float(radii[0]))


class HyperCircleFitter(RegressorMixin, BaseEstimator):
    """Estimator wrapper for :func:`hyper_circle_fit`.

    ``fit(X)`` takes an (n, 2) array. ``predict(X)`` returns each point's
    signed distance to the fitted circle, and ``score`` is the negative RMS
    of those distances.
    """

    def fit(self, X, y=None):
        circle = hyper_circle_fit(X)
        self.center_ = circle.center
        self.radius_ = circle.radius
        self.n_features_in_ = 2
        return self

    @property
    def circle_(self):
        check_is_fitted(self, "radius_")
        return Circle2D(self.center_, self.radius_)

    def predict(self, X):
        X = check_points(X, dim=2)
        return self.circle_.residuals(X)

    def score(self, X, y=None):
        return -float(np.sqrt(np.mean(self.predict(X) ** 2)))
