"""Raster digital terrain model."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_points, check_positive
from .exceptions import InsufficientPointsError, ValidationError
from .geometry import PointCloud
from .io import _atomic_open, write_json


@dataclass(frozen=True, eq=False)
class RasterDtm:
    """Ground heights on a regular xy grid.

    ``heights[iy, ix]`` is the ground height of the cell whose lower-left
    corner is ``origin + cell_size * (ix, iy)``. ``observed`` marks cells that
    held map points; the rest were filled from their nearest observed cell.
    """

    origin: np.ndarray
    cell_size: float
    heights: np.ndarray
    observed: np.ndarray

    def __post_init__(self):
        check_positive(self.cell_size, "cell_size")
        if self.heights.shape != self.observed.shape or self.heights.ndim != 2:
            raise ValidationError("heights and observed must be 2D arrays of the same shape")
        if not np.all(np.isfinite(self.heights)):
            raise ValidationError("DTM heights must be finite")
        for name in ("origin", "heights", "observed"):
            a = np.array(getattr(self, name), copy=True)
            a.flags.writeable = False
            object.__setattr__(self, name, a)

    @property
    def shape(self):
        return self.heights.shape

    def cell_index(self, x, y):
        ix = np.floor((np.asarray(x, dtype=np.float64) - self.origin[0]) / self.cell_size)
        iy = np.floor((np.asarray(y, dtype=np.float64) - self.origin[1]) / self.cell_size)
        ny, nx = self.shape
        return np.clip(iy, 0, ny - 1).astype(np.intp), np.clip(ix, 0, nx - 1).astype(np.intp)

    def cell_centers(self):
        ny, nx = self.shape
        xs = self.origin[0] + (np.arange(nx) + 0.5) * self.cell_size
        ys = self.origin[1] + (np.arange(ny) + 0.5) * self.cell_size
        return np.meshgrid(xs, ys)


def build_dtm(cloud, cell_size=0.5, percentile=5.0) -> RasterDtm:
    """Rasterize the ``percentile``-th z value of the points in each xy cell.

    Empty cells take the height of their nearest observed cell.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else check_points(cloud)
    check_positive(cell_size, "cell_size")
    if not 0 <= percentile <= 100:
        raise ValidationError(f"percentile must be in [0, 100], got {percentile}")
    if pts.shape[0] == 0:
        raise InsufficientPointsError("cannot build a DTM from an empty map")
    origin = pts[:, :2].min(axis=0)
    nx, ny = (np.floor((pts[:, :2].max(axis=0) - origin) / cell_size).astype(int) + 1)
    ix = np.minimum(np.floor((pts[:, 0] - origin[0]) / cell_size).astype(np.intp), nx - 1)
    iy = np.minimum(np.floor((pts[:, 1] - origin[1]) / cell_size).astype(np.intp), ny - 1)
    flat = iy * nx + ix
    z = pts[:, 2]

    order = np.lexsort((z, flat))
    sflat, sz = flat[order], z[order]
    starts = np.flatnonzero(np.r_[True, sflat[1:] != sflat[:-1]])
    counts = np.diff(np.r_[starts, sflat.size])
    # linear interpolation between order statistics, as numpy.percentile does
    pos = percentile / 100.0 * (counts - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, counts - 1)
    frac = pos - lo
    cell_z = sz[starts + lo] * (1 - frac) + sz[starts + hi] * frac

    heights = np.zeros(ny * nx)
    observed = np.zeros(ny * nx, dtype=bool)
    heights[sflat[starts]] = cell_z
    observed[sflat[starts]] = True
    heights = heights.reshape(ny, nx)
    observed = observed.reshape(ny, nx)
    if not observed.all():
        _, (jy, jx) = ndimage.distance_transform_edt(~observed, return_indices=True)
        heights = heights[jy, jx]
    return RasterDtm(origin, float(cell_size), heights, observed)


def ground_height(dtm: RasterDtm, x, y):
    """Height of the cell containing (x, y); queries off the grid are clamped."""
    iy, ix = dtm.cell_index(x, y)
    h = dtm.heights[iy, ix]
    return float(h) if np.ndim(h) == 0 else h


def save_dtm(dtm: RasterDtm, path):
    """Write "x_center, y_center, height" rows plus a JSON sidecar."""
    path = Path(path)
    xs, ys = dtm.cell_centers()
    with _atomic_open(path, "w") as fh:
        fh.write("x_center,y_center,height\n")
        np.savetxt(fh, np.column_stack([xs.ravel(), ys.ravel(), dtm.heights.ravel()]),
                   delimiter=",", fmt="%.17g")
    ny, nx = dtm.shape
    write_json({"origin": dtm.origin.tolist(), "cell_size": dtm.cell_size,
                "nx": int(nx), "ny": int(ny)}, path.with_suffix(".json"))


class TerrainModel(RegressorMixin, BaseEstimator):
    """Raster DTM estimator: ``fit`` on map points, ``predict`` ground height at xy.

    Parameters
    ----------
    cell_size : float, default=0.5
    percentile : float, default=5
        Low percentile of z used per cell; robust to a few sub-ground points.
    """

    def __init__(self, cell_size=0.5, percentile=5.0):
        self.cell_size = cell_size
        self.percentile = percentile

    def fit(self, X, y=None):
        self.dtm_ = build_dtm(X, self.cell_size, self.percentile)
        self.n_features_in_ = 3
        return self

    def predict(self, X):
        check_is_fitted(self, "dtm_")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] < 2:
            raise ValidationError("predict expects an (n, 2) or (n, 3) array of positions")
        return np.atleast_1d(ground_height(self.dtm_, X[:, 0], X[:, 1])).astype(np.float64)
