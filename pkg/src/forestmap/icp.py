"""Sequential lidar mapping with point-to-plane ICP seeded by odometry."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_positive
from .exceptions import ConfigError, EmptyScanError, RegistrationError, ValidationError
from .geometry import PointCloud, RigidTransform
from .neighbors import estimate_normals, voxel_downsample

log = logging.getLogger(__name__)

MIN_CORRESPONDENCES = 10


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 40
    translation_tol: float = 1e-3
    rotation_tol: float = math.radians(0.05)
    trim_ratio: float = 0.85
    max_correspondence_distance: float = 1.0
    q: int = 15
    min_range: float = 0.5
    max_range: float = 100.0

    def __post_init__(self):
        check_positive(self.max_iterations, "max_iterations", integer=True)
        check_positive(self.translation_tol, "translation_tol")
        check_positive(self.rotation_tol, "rotation_tol")
        check_positive(self.trim_ratio, "trim_ratio")
        if self.trim_ratio > 1:
            raise ConfigError(f"trim_ratio must be in (0, 1], got {self.trim_ratio}")
        check_positive(self.max_correspondence_distance, "max_correspondence_distance")
        check_positive(self.q, "q", integer=True)
        check_positive(self.min_range, "min_range", allow_zero=True)
        check_positive(self.max_range, "max_range")
        if self.min_range >= self.max_range:
            raise ConfigError("min_range must be below max_range")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown ICP config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return dataclasses.asdict(self)


def _check_stamps(poses, timestamps, what):
    timestamps = np.asarray(timestamps, dtype=np.float64).reshape(-1)
    if len(poses) != timestamps.size:
        raise ValidationError(f"{what}: {len(poses)} poses but {timestamps.size} timestamps")
    if timestamps.size > 1 and np.any(np.diff(timestamps) <= 0):
        raise ValidationError(f"{what}: timestamps must be strictly increasing")
    return timestamps


@dataclass(frozen=True, eq=False)
class OdometrySequence:
    poses: list
    timestamps: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "poses", list(self.poses))
        object.__setattr__(self, "timestamps",
                           _check_stamps(self.poses, self.timestamps, "odometry"))

    def __len__(self):
        return len(self.poses)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Map-frame sensor poses with timestamps and a per-pose status
    ("ok", or "odometry-fallback" when ICP failed for that scan)."""

    poses: list
    timestamps: np.ndarray
    status: list = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "poses", list(self.poses))
        object.__setattr__(self, "timestamps",
                           _check_stamps(self.poses, self.timestamps, "trajectory"))
        status = ["ok"] * len(self.poses) if self.status is None else list(self.status)
        if len(status) != len(self.poses):
            raise ValidationError("status list length differs from pose count")
        object.__setattr__(self, "status", status)

    def __len__(self):
        return len(self.poses)

    @property
    def positions(self):
        return np.array([T.translation for T in self.poses]).reshape(-1, 3)


def input_filters(scan: PointCloud, q=15, range_limits=(0.5, 100.0), dynamic_filter=None):
    """Range-gate a sensor-frame scan and attach normals facing the sensor.

    ``dynamic_filter`` is an optional callable returning a keep-mask; no
    dynamic-object removal happens by default.
    """
    if len(scan) == 0:
        raise EmptyScanError("scan is empty")
    lo, hi = range_limits
    rng = np.linalg.norm(scan.points, axis=1)
    keep = (rng >= lo) & (rng <= hi)
    if dynamic_filter is not None:
        keep &= np.asarray(dynamic_filter(scan), dtype=bool)
    out = scan.subset(keep)
    if len(out) == 0:
        raise EmptyScanError(f"all {len(scan)} points removed by range limits {range_limits}")
    return estimate_normals(out.without_normals(), q, viewpoint=(0.0, 0.0, 0.0))


@dataclass
class IcpInfo:
    n_iter: int
    converged: bool
    residuals: list
    n_matches: int


def _skew_exp(omega):
    return RigidTransform.from_rotvec(omega).rotation


def icp_register(reading: PointCloud, reference: PointCloud, initial: RigidTransform = None,
                 config: IcpConfig = IcpConfig(), tree=None, return_info=False):
    """Pose of ``reading`` in the frame of ``reference`` by point-to-plane ICP.

    Each iteration matches every transformed reading point to its nearest
    reference point within ``max_correspondence_distance``, keeps the
    ``trim_ratio`` closest matches, and solves the linearised problem
    ``min sum(((T p - m) . n_m)^2)``. Stops when the update is below both
    tolerances or after ``max_iterations``. An iteration whose trimmed
    objective is larger than the previous one is rolled back and ends the
    loop, so accepted residuals never increase.

    Raises
    ------
    RegistrationError
        Fewer than 10 usable correspondences; ``exc.initial`` holds the seed.
    """
    initial = RigidTransform.identity() if initial is None else initial
    if len(reading) == 0 or len(reference) == 0:
        raise RegistrationError("reading and reference must be non-empty", initial)
    if not reference.has_normals:
        raise ValidationError("reference cloud needs normals for point-to-plane ICP")
    tree = cKDTree(reference.points) if tree is None else tree
    src = reading.points
    ref_pts, ref_nrm = reference.points, reference.normals

    T = initial
    prev_T, prev_obj = None, np.inf
    history = []
    converged = False
    n_matches = 0
    it = 0
    for it in range(1, config.max_iterations + 1):
        P = T.apply(src)
        dist, idx = tree.query(P, distance_upper_bound=config.max_correspondence_distance)
        ok = np.isfinite(dist)
        if ok.sum() < MIN_CORRESPONDENCES:
            raise RegistrationError(
                f"only {int(ok.sum())} correspondences within "
                f"{config.max_correspondence_distance} m", initial)
        sel = np.flatnonzero(ok)
        n_keep = max(int(math.ceil(config.trim_ratio * sel.size)), MIN_CORRESPONDENCES)
        if n_keep < sel.size:
            sel = sel[np.argsort(dist[sel], kind="stable")[:n_keep]]
        p = P[sel]
        m = ref_pts[idx[sel]]
        n = ref_nrm[idx[sel]]
        r = np.einsum("ij,ij->i", p - m, n)
        obj = float(np.mean(r * r))
        if prev_T is not None and obj > prev_obj * (1 + 1e-9) + 1e-18:
            T = prev_T
            break
        history.append(obj)
        n_matches = sel.size
        A = np.hstack([np.cross(p, n), n])
        x, *_ = np.linalg.lstsq(A, -r, rcond=None)
        omega, v = x[:3], x[3:]
        step = RigidTransform(_skew_exp(omega), v)
        prev_T, prev_obj = T, obj
        T = step @ T
        if np.linalg.norm(v) < config.translation_tol and np.linalg.norm(omega) < config.rotation_tol:
            converged = True
            break
    info = IcpInfo(it, converged, history, n_matches)
    return (T, info) if return_info else T


def odometry_seed(previous: RigidTransform, odo_prev: RigidTransform, odo_cur: RigidTransform):
    """Initial pose: the odometry increment applied in the previous pose's frame."""
    return previous @ (odo_prev.inverse() @ odo_cur)


def build_map(scans, odometry: OdometrySequence, config: IcpConfig = IcpConfig(),
              cell_edge=0.02, on_failure="fallback", dynamic_filter=None):
    """Register scans one by one against a growing map.

    The first pose is the identity and the map starts as the filtered first
    scan. Each later scan is seeded with the odometry increment, refined by
    ICP against the current map, merged into it and the map is thinned to
    one point per ``cell_edge`` voxel.

    ``on_failure="fallback"`` keeps the odometry seed for a scan whose
    registration fails and marks it in ``trajectory.status``;
    ``on_failure="abort"`` re-raises.

    Returns ``(map_cloud, trajectory)``.
    """
    scans = list(scans)
    if len(scans) == 0:
        raise ValidationError("need at least one scan")
    if len(scans) != len(odometry):
        raise ValidationError(
            f"scan count {len(scans)} does not match odometry pose count {len(odometry)}")
    if on_failure not in ("fallback", "abort"):
        raise ConfigError("on_failure must be 'fallback' or 'abort'")
    limits = (config.min_range, config.max_range)

    poses = [RigidTransform.identity()]
    status = ["ok"]
    first = input_filters(scans[0], config.q, limits, dynamic_filter)
    world_map = voxel_downsample(first, cell_edge)
    for i in range(1, len(scans)):
        seed = odometry_seed(poses[-1], odometry.poses[i - 1], odometry.poses[i])
        try:
            reading = input_filters(scans[i], config.q, limits, dynamic_filter)
            T = icp_register(reading, world_map, seed, config)
            state = "ok"
        except (RegistrationError, EmptyScanError) as exc:
            if on_failure == "abort":
                raise
            log.warning("scan %d: %s; keeping odometry pose", i, exc)
            poses.append(seed)
            status.append("odometry-fallback")
            continue
        poses.append(T)
        status.append(state)
        world_map = voxel_downsample(
            PointCloud.concatenate([world_map, reading.transformed(T)]), cell_edge)
    return world_map, Trajectory(poses, odometry.timestamps, status)


class IcpRegistration(TransformerMixin, BaseEstimator):
    """Estimator form of :func:`icp_register`.

    ``fit(reading, reference, initial=None)`` stores ``transform_``,
    ``n_iter_`` and ``residuals_``; ``transform(X)`` maps points with the
    recovered pose.
    """

    def __init__(self, max_iterations=40, translation_tol=1e-3,
                 rotation_tol=math.radians(0.05), trim_ratio=0.85,
                 max_correspondence_distance=1.0):
        self.max_iterations = max_iterations
        self.translation_tol = translation_tol
        self.rotation_tol = rotation_tol
        self.trim_ratio = trim_ratio
        self.max_correspondence_distance = max_correspondence_distance

    def fit(self, X, y, initial=None):
        cfg = IcpConfig(**self.get_params())
        T, info = icp_register(X, y, initial, cfg, return_info=True)
        self.transform_ = T
        self.n_iter_ = info.n_iter
        self.converged_ = info.converged
        self.residuals_ = info.residuals
        return self

    def transform(self, X):
        check_is_fitted(self, "transform_")
        if isinstance(X, PointCloud):
            return X.transformed(self.transform_)
        return self.transform_.apply(X)


class IcpMapper(BaseEstimator):
    """Estimator form of :func:`build_map`.

    ``fit(scans, odometry)`` stores ``map_`` and ``trajectory_``.
    """

    def __init__(self, max_iterations=40, translation_tol=1e-3,
                 rotation_tol=math.radians(0.05), trim_ratio=0.85,
                 max_correspondence_distance=1.0, q=15, min_range=0.5, max_range=100.0,
                 cell_edge=0.02, on_failure="fallback"):
        self.max_iterations = max_iterations
        self.translation_tol = translation_tol
        self.rotation_tol = rotation_tol
        self.trim_ratio = trim_ratio
        self.max_correspondence_distance = max_correspondence_distance
        self.q = q
        self.min_range = min_range
        self.max_range = max_range
        self.cell_edge = cell_edge
        self.on_failure = on_failure

    def fit(self, X, y):
        params = self.get_params()
        cell_edge = params.pop("cell_edge")
        on_failure = params.pop("on_failure")
        self.map_, self.trajectory_ = build_map(X, y, IcpConfig(**params), cell_edge, on_failure)
        return self
