"""Diameter at breast height from a segmented tree.

The pipeline per tree: ground height from the DTM at the box centre, a slice
of thickness ``h`` centred 1.3 m above ground, optional PCA normals, a split
into ``n_cyls`` bands along the stem, one RANSAC cylinder per band and a
median (or mean) vote over the band diameters.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_positive
from .cylinder import AXIS_MODES, REFINE_MODES, RansacSettings, axis_lls, ransac_cylinder
from .dtm import RasterDtm, build_dtm, ground_height
from .exceptions import ConfigError, DegenerateFitError, FitFailure, InsufficientPointsError
from .geometry import BoundingBox, PointCloud
from .neighbors import estimate_normals

BREAST_HEIGHT = 1.3
VOTING_MODES = ("median", "mean")

# Method chains compared in the evaluation; the Hyper circle fit is part of all.
METHODS = {
    "A_LLS": ("lls", "none"),
    "A_N": ("vertical", "none"),
    "A_LLS+C_NLS": ("lls", "nls"),
    "A_N+C_NLS": ("vertical", "nls"),
    "A_LLS+C_NLSN": ("lls", "nlsn"),
    "A_N+C_NLSN": ("vertical", "nlsn"),
}


@dataclass(frozen=True)
class EstimationConfig:
    """Method selection and hyperparameters for DBH estimation."""

    axis_mode: str = "vertical"
    refine: str = "nls"
    voting: str = "median"
    q: int = 15
    n_cyls: int = 5
    h: float = 0.6
    epsilon: float = 0.02
    normals_weight: float = 1.0
    ransac_iterations: int = 200
    min_points: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.axis_mode not in AXIS_MODES:
            raise ConfigError(f"axis_mode must be one of {AXIS_MODES}, got {self.axis_mode!r}")
        if self.refine not in REFINE_MODES:
            raise ConfigError(f"refine must be one of {REFINE_MODES}, got {self.refine!r}")
        if self.voting not in VOTING_MODES:
            raise ConfigError(f"voting must be one of {VOTING_MODES}, got {self.voting!r}")
        check_positive(self.q, "q", integer=True)
        if self.q < 3:
            raise ConfigError("q must be at least 3")
        check_positive(self.n_cyls, "n_cyls", integer=True)
        check_positive(self.h, "h")
        check_positive(self.epsilon, "epsilon")
        check_positive(self.normals_weight, "normals_weight", allow_zero=True)
        check_positive(self.ransac_iterations, "ransac_iterations", integer=True)
        check_positive(self.min_points, "min_points", integer=True)
        if self.min_points < 5:
            raise ConfigError("min_points must be at least 5 for cylinder fits")
        if not isinstance(self.seed, (int, np.integer)) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")

    @classmethod
    def for_method(cls, method, **kwargs):
        try:
            axis_mode, refine = METHODS[method]
        except KeyError:
            raise ConfigError(f"unknown method {method!r}; choose from {list(METHODS)}") from None
        return cls(axis_mode=axis_mode, refine=refine, **kwargs)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        method = d.pop("method", None)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown estimation config keys: {sorted(unknown)}")
        if method is not None:
            explicit = (d.pop("axis_mode", None), d.pop("refine", None))
            cfg = cls.for_method(method, **d)
            for given, actual in zip(explicit, (cfg.axis_mode, cfg.refine)):
                if given is not None and given != actual:
                    raise ConfigError(f"method {method!r} conflicts with {given!r}")
            return cfg
        return cls(**d)

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @property
    def method(self):
        return next(k for k, v in METHODS.items() if v == (self.axis_mode, self.refine))

    @property
    def needs_normals(self):
        return self.axis_mode == "lls" or self.refine == "nlsn"

    def ransac_settings(self):
        return RansacSettings(self.axis_mode, self.refine, self.epsilon, self.normals_weight,
                              self.ransac_iterations, self.min_points)


@dataclass
class DbhEstimate:
    """Result for one slice. ``diameter`` is None when every band failed."""

    diameter: float | None
    band_diameters: list = field(default_factory=list)
    inlier_counts: list = field(default_factory=list)
    status: str = "ok"
    reason: str | None = None
    cylinders: list = field(default_factory=list, repr=False)

    @property
    def ok(self):
        return self.status == "ok"

    @classmethod
    def failed(cls, reason, n_bands=0):
        return cls(None, [None] * n_bands, [0] * n_bands, "failed", reason, [None] * n_bands)

    def to_dict(self, tree_id=None):
        d = {} if tree_id is None else {"id": tree_id}
        d.update(
            diameter_m=self.diameter,
            status=self.status,
            per_band_diameters=list(self.band_diameters),
            inlier_counts=[int(c) for c in self.inlier_counts],
        )
        if self.reason is not None:
            d["reason"] = self.reason
        return d


def slice_bounds(ground, h):
    return ground + BREAST_HEIGHT - h / 2.0, ground + BREAST_HEIGHT + h / 2.0


def extract_slice(cloud: PointCloud, box: BoundingBox, dtm: RasterDtm, h: float,
                  min_points: int = 0) -> PointCloud:
    """Points of ``cloud`` inside ``box`` within h/2 of breast height.

    Breast height is 1.3 m above the DTM value at the box centre. Branches
    and clutter inside the box are kept on purpose; the robust fit has to
    cope with them.

    Raises FitFailure ("empty-slice") when fewer than ``min_points`` remain.
    """
    check_positive(h, "h")
    cx, cy, _ = box.center
    lo, hi = slice_bounds(ground_height(dtm, cx, cy), h)
    pts = cloud.points
    mask = box.contains(pts) & (pts[:, 2] >= lo) & (pts[:, 2] <= hi)
    out = cloud.subset(mask)
    if len(out) < min_points:
        raise FitFailure(f"empty-slice: {len(out)} points < {min_points}")
    return out


def split_bands(slice_: PointCloud, n_cyls, axis_mode="vertical"):
    """Indices of each of ``n_cyls`` equal-thickness bands along the stem.

    Bands are cut along z, or along the normals-based axis in "lls" mode,
    between the extreme coordinates of the slice points.
    """
    pts = slice_.points
    if axis_mode == "lls":
        direction = axis_lls(slice_.normals)
    else:
        direction = np.array([0.0, 0.0, 1.0])
    t = pts @ direction
    if t.size == 0:
        return [np.empty(0, dtype=np.intp) for _ in range(n_cyls)]
    t0, t1 = t.min(), t.max()
    width = (t1 - t0) / n_cyls
    if width <= 0:
        band = np.zeros(t.size, dtype=np.intp)
    else:
        band = np.minimum(np.floor((t - t0) / width).astype(np.intp), n_cyls - 1)
    return [np.flatnonzero(band == b) for b in range(n_cyls)]


def estimate_dbh(slice_: PointCloud, config: EstimationConfig = EstimationConfig(),
                 random_state=None) -> DbhEstimate:
    """Vote a DBH from one RANSAC cylinder per band of the slice.

    Failed bands are left out of the vote; the estimate fails only when all
    bands fail. ``random_state`` (int or sequence of ints) seeds the band
    samplers; it defaults to ``config.seed``.
    """
    n = config.n_cyls
    if config.needs_normals and not slice_.has_normals:
        raise ConfigError(f"method {config.method} needs normals on the slice")
    if len(slice_) < config.min_points:
        return DbhEstimate.failed(f"empty-slice: {len(slice_)} points", n)
    try:
        bands = split_bands(slice_, n, config.axis_mode)
    except DegenerateFitError as exc:
        return DbhEstimate.failed(f"no-fit: {exc}", n)
    seed = config.seed if random_state is None else random_state
    seed = list(np.atleast_1d(seed).astype(np.int64))
    settings = config.ransac_settings()

    diameters, counts, cylinders = [], [], []
    for b, idx in enumerate(bands):
        try:
            rng = np.random.default_rng([*seed, b])
            cyl, inliers = ransac_cylinder(slice_.subset(idx), settings, rng)
        except (FitFailure, InsufficientPointsError):
            diameters.append(None)
            counts.append(0)
            cylinders.append(None)
            continue
        diameters.append(cyl.diameter)
        counts.append(int(inliers.size))
        cylinders.append(cyl)

    good = [d for d in diameters if d is not None]
    if not good:
        return DbhEstimate(None, diameters, counts, "failed", "no-fit", cylinders)
    vote = np.median(good) if config.voting == "median" else np.mean(good)
    return DbhEstimate(float(vote), diameters, counts, "ok", None, cylinders)


class DbhEstimator(BaseEstimator):
    """Estimator form of :func:`estimate_dbh`.

    ``fit(X, normals=None)`` takes one breast-height slice (array or
    PointCloud) and stores ``estimate_``, ``diameter_`` and
    ``band_cylinders_``. Parameters mirror :class:`EstimationConfig`;
    ``method`` (e.g. ``"A_N+C_NLS"``) overrides ``axis_mode`` and ``refine``.
    """

    def __init__(self, method=None, axis_mode="vertical", refine="nls", voting="median", q=15,
                 n_cyls=5, h=0.6, epsilon=0.02, normals_weight=1.0, ransac_iterations=200,
                 min_points=20, seed=0):
        self.method = method
        self.axis_mode = axis_mode
        self.refine = refine
        self.voting = voting
        self.q = q
        self.n_cyls = n_cyls
        self.h = h
        self.epsilon = epsilon
        self.normals_weight = normals_weight
        self.ransac_iterations = ransac_iterations
        self.min_points = min_points
        self.seed = seed

    def config(self):
        params = self.get_params()
        method = params.pop("method")
        if method is not None:
            params.pop("axis_mode")
            params.pop("refine")
            return EstimationConfig.for_method(method, **params)
        return EstimationConfig(**params)

    def fit(self, X, y=None, normals=None):
        cfg = self.config()
        cloud = X if isinstance(X, PointCloud) else PointCloud(X, normals)
        if cfg.needs_normals and not cloud.has_normals:
            cloud = estimate_normals(cloud, cfg.q, viewpoint=cloud.points.mean(axis=0))
        self.estimate_ = estimate_dbh(cloud, cfg)
        self.diameter_ = self.estimate_.diameter
        self.band_cylinders_ = self.estimate_.cylinders
        self.n_features_in_ = 3
        return self

    def predict(self, X=None):
        check_is_fitted(self, "estimate_")
        return self.diameter_


class TreeSlicer:
    """Caches the per-tree work shared by many configurations.

    Ground height, box membership and normals (per q) are computed once; a
    slice for any ``h`` is then a cheap mask. Normals are estimated on the
    box points within ``normal_reach`` of breast height so that the same
    normals serve every slice thickness up to ``2 * normal_reach - 0.2``.
    """

    def __init__(self, cloud: PointCloud, box: BoundingBox, dtm: RasterDtm, normal_reach=0.5):
        self.box = box
        cx, cy, _ = box.center
        self.ground = ground_height(dtm, cx, cy)
        self.normal_reach = normal_reach
        lo, hi = slice_bounds(self.ground, 2 * normal_reach)
        pts = cloud.points
        mask = box.contains(pts) & (pts[:, 2] >= lo) & (pts[:, 2] <= hi)
        self.region = cloud.subset(mask).without_normals()
        self._normals = lru_cache(maxsize=None)(self._compute_normals)

    def _compute_normals(self, q):
        if len(self.region) < q:
            return None
        viewpoint = np.r_[self.box.center[:2], self.ground + BREAST_HEIGHT]
        return estimate_normals(self.region, q, viewpoint=viewpoint).normals

    def slice(self, h, q=None):
        if h / 2 + 0.1 > self.normal_reach and q is not None:
            raise ConfigError(f"h={h} exceeds the normal estimation reach {self.normal_reach}")
        lo, hi = slice_bounds(self.ground, h)
        z = self.region.points[:, 2]
        mask = (z >= lo) & (z <= hi)
        if q is None:
            return self.region.subset(mask)
        normals = self._normals(q)
        if normals is None:
            return None
        return PointCloud(self.region.points[mask], normals[mask])

    def estimate(self, config: EstimationConfig, random_state=None):
        sl = self.slice(config.h, config.q if config.needs_normals else None)
        if sl is None:
            return DbhEstimate.failed(f"empty-slice: fewer than q={config.q} points",
                                      config.n_cyls)
        return estimate_dbh(sl, config, random_state)


def normal_reach_for(h):
    return max(0.5, h / 2 + 0.1)


def estimate_trees(cloud: PointCloud, trees, config: EstimationConfig = EstimationConfig(),
                   dtm: RasterDtm | None = None, dtm_cell_size=0.5):
    """Run the full pipeline on every tree record; failures never abort.

    Tree ``i`` uses the seed ``[config.seed, i]`` so results do not depend on
    which other trees are processed.
    """
    if dtm is None:
        dtm = build_dtm(cloud, dtm_cell_size)
    out = []
    for i, tree in enumerate(trees):
        slicer = TreeSlicer(cloud, tree.box, dtm, normal_reach_for(config.h))
        out.append(slicer.estimate(config, [config.seed, i]))
    return out
