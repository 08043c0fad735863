"""Synthetic stands with known ground truth, and a simple lidar simulator.

Every random draw comes from a per-entity stream seeded by
``[scene seed, entity kind, entity index]``, so a stem's points do not
depend on how many other stems the scene holds or the order they are built.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_positive
from .cylinder import Cylinder, rotation_to_z
from .dbh import BREAST_HEIGHT
from .exceptions import ConfigError, ValidationError
from .geometry import BoundingBox, PointCloud, RigidTransform
from .icp import OdometrySequence, Trajectory
from .io import TreeRecord

_GROUND, _STEM, _CLUTTER, _WALL, _SCAN, _ODOM = range(6)


@dataclass(frozen=True)
class StemSpec:
    """One tree stem.

    ``taper`` is the radius loss per metre of height; ``tilt`` leans the
    axis away from vertical toward ``tilt_azimuth``; only the arc of
    ``visible_arc`` degrees centred on ``arc_center`` (degrees, azimuth of
    the surface normal) is sampled.
    """

    base: tuple = (0.0, 0.0, 0.0)
    dbh: float = 0.30
    tilt: float = 0.0
    tilt_azimuth: float = 0.0
    taper: float = 0.0
    height: float = 3.0
    bark_sigma: float = 0.0
    visible_arc: float = 360.0
    arc_center: float = 0.0
    density: float | None = None

    def __post_init__(self):
        check_positive(self.dbh, "dbh")
        if not 0 <= self.visible_arc <= 360:
            raise ConfigError("visible_arc must be within [0, 360] degrees")
        check_positive(self.bark_sigma, "bark_sigma", allow_zero=True)
        if self.height <= BREAST_HEIGHT + 0.3:
            raise ConfigError("stem height must exceed breast height plus the slice reach")
        if abs(self.tilt) >= math.pi / 2:
            raise ConfigError("tilt must be below 90 degrees")
        if self.dbh / 2 - self.taper * (self.height - BREAST_HEIGHT) <= 0:
            raise ConfigError("taper makes the radius non-positive below the stem top")

    @property
    def axis(self):
        st = math.sin(self.tilt)
        return np.array([st * math.cos(self.tilt_azimuth), st * math.sin(self.tilt_azimuth),
                         math.cos(self.tilt)])

    def radius_at(self, z_above_base):
        return self.dbh / 2 - self.taper * (np.asarray(z_above_base) - BREAST_HEIGHT)

    def truth_cylinder(self):
        return Cylinder(self.axis, np.asarray(self.base, dtype=np.float64), self.dbh / 2)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "base" in d:
            d["base"] = tuple(d["base"])
        return cls(**d)


@dataclass(frozen=True)
class WallSpec:
    """A vertical planar wall from ``start`` to ``end`` (xy) rising ``height`` m."""

    start: tuple
    end: tuple
    height: float = 3.0


@dataclass(frozen=True)
class SceneSpec:
    """Stems on a (possibly sloped and rough) ground plane, plus clutter.

    ``clutter_ratio`` adds, per stem, that fraction of its point count as
    uniform random points inside the stem's box above 1 m (branches, noise).
    """

    stems: tuple = ()
    ground_slope: tuple = (0.0, 0.0)
    ground_roughness: float = 0.0
    clutter_ratio: float = 0.0
    seed: int = 0
    stem_density: float = 2500.0
    ground_density: float = 400.0
    walls: tuple = ()
    wall_density: float = 400.0
    extent: tuple | None = None
    box_margin: float = 0.1

    def __post_init__(self):
        if len(self.stems) == 0:
            raise ConfigError("a scene needs at least one stem")
        object.__setattr__(self, "stems", tuple(
            s if isinstance(s, StemSpec) else StemSpec.from_dict(s) for s in self.stems))
        object.__setattr__(self, "walls", tuple(
            w if isinstance(w, WallSpec) else WallSpec(**w) for w in self.walls))
        check_positive(self.ground_roughness, "ground_roughness", allow_zero=True)
        check_positive(self.clutter_ratio, "clutter_ratio", allow_zero=True)
        check_positive(self.stem_density, "stem_density")
        check_positive(self.ground_density, "ground_density", allow_zero=True)

    def ground_z(self, x, y):
        return self.ground_slope[0] * np.asarray(x) + self.ground_slope[1] * np.asarray(y)

    def bounds(self):
        if self.extent is not None:
            return tuple(float(v) for v in self.extent)
        xy = np.array([s.base[:2] for s in self.stems])
        lo, hi = xy.min(axis=0) - 3.0, xy.max(axis=0) + 3.0
        return (lo[0], hi[0], lo[1], hi[1])

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["stems"] = [dataclasses.asdict(s) for s in self.stems]
        d["walls"] = [dataclasses.asdict(w) for w in self.walls]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["stems"] = tuple(StemSpec.from_dict(s) for s in d.get("stems", ()))
        d["walls"] = tuple(WallSpec(**w) for w in d.get("walls", ()))
        for key in ("ground_slope", "extent"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


def _rng(*key):
    return np.random.default_rng([int(k) for k in key])


def generate_stem_cloud(spec: StemSpec, density=2500.0, seed=0):
    """Sample the visible surface of a stem.

    Returns ``(cloud, truth)`` where ``truth`` is the cylinder through the
    stem axis with the breast-height radius. Normals are the analytic
    outward surface normals of the untapered stem.
    """
    check_positive(density, "density")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    a = spec.axis
    R = rotation_to_z(a)
    u, v = R[0], R[1]
    length = spec.height / a[2]
    arc = math.radians(spec.visible_arc)
    area = arc * spec.dbh / 2 * length
    n = max(int(round(density * area)), 0)
    s = rng.uniform(0.0, length, n)
    center = math.radians(spec.arc_center)
    theta = center + rng.uniform(-arc / 2, arc / 2, n) if arc < 2 * math.pi else \
        rng.uniform(0.0, 2 * math.pi, n)
    radius = spec.radius_at(s * a[2])
    if spec.bark_sigma > 0:
        radius = radius + rng.normal(0.0, spec.bark_sigma, n)
    radial = np.outer(np.cos(theta), u) + np.outer(np.sin(theta), v)
    base = np.asarray(spec.base, dtype=np.float64)
    pts = base + np.outer(s, a) + radius[:, None] * radial
    return PointCloud(pts, radial / np.linalg.norm(radial, axis=1, keepdims=True)), \
        spec.truth_cylinder()


def stem_box(spec: StemSpec, margin=0.1):
    """Axis-aligned box around the stem's xy footprint, from below ground to its top."""
    a = spec.axis
    base = np.asarray(spec.base, dtype=np.float64)
    top = base + a * spec.height / a[2]
    r = spec.dbh / 2 + max(spec.taper, 0) * BREAST_HEIGHT + margin
    lo = np.minimum(base, top) - [r, r, 0]
    hi = np.maximum(base, top) + [r, r, 0]
    lo[2] = base[2] - 0.5
    hi[2] = top[2]
    return BoundingBox(lo, hi)


def _ground_points(spec: SceneSpec):
    x0, x1, y0, y1 = spec.bounds()
    n = int(round(spec.ground_density * (x1 - x0) * (y1 - y0)))
    rng = _rng(spec.seed, _GROUND)
    x = rng.uniform(x0, x1, n)
    y = rng.uniform(y0, y1, n)
    z = spec.ground_z(x, y)
    if spec.ground_roughness > 0:
        z = z + rng.normal(0.0, spec.ground_roughness, n)
    return np.column_stack([x, y, z])


def _wall_points(spec: SceneSpec, j, wall: WallSpec):
    p0 = np.asarray(wall.start, dtype=np.float64)
    p1 = np.asarray(wall.end, dtype=np.float64)
    length = float(np.linalg.norm(p1 - p0))
    n = int(round(spec.wall_density * length * wall.height))
    rng = _rng(spec.seed, _WALL, j)
    t = rng.uniform(0, 1, n)
    xy = p0 + np.outer(t, p1 - p0)
    z = spec.ground_z(xy[:, 0], xy[:, 1]) + rng.uniform(0, wall.height, n)
    return np.column_stack([xy, z])


def generate_scene(spec: SceneSpec):
    """Materialize a scene.

    Returns ``(cloud, trees, ground_fn)``: the union of ground, wall, stem
    and clutter points; one :class:`TreeRecord` per stem with its truth DBH
    and a box fitted to the stem; and the analytic ground height function.
    """
    parts = [_ground_points(spec)]
    parts += [_wall_points(spec, j, w) for j, w in enumerate(spec.walls)]
    trees = []
    for i, stem in enumerate(spec.stems):
        base = np.array(stem.base, dtype=np.float64)
        base[2] = float(spec.ground_z(base[0], base[1]))
        stem = dataclasses.replace(stem, base=tuple(base))
        density = stem.density or spec.stem_density
        cloud, _ = generate_stem_cloud(stem, density, _rng(spec.seed, _STEM, i))
        parts.append(cloud.points)
        box = stem_box(stem, spec.box_margin)
        n_clutter = int(round(spec.clutter_ratio * len(cloud)))
        if n_clutter:
            rng = _rng(spec.seed, _CLUTTER, i)
            lo = box.min_corner.copy()
            lo[2] = base[2] + 1.0
            parts.append(rng.uniform(lo, box.max_corner, (n_clutter, 3)))
        trees.append(TreeRecord(f"tree_{i:03d}", box, float(stem.dbh)))
    cloud = PointCloud(np.vstack(parts))
    return cloud, trees, spec.ground_z


def stand_grid(n_side=5, spacing=4.0, dbh_range=(0.15, 0.45), bark_sigma=0.01, tilt_max=0.0,
               seed=0, **scene_kwargs):
    """A square grid stand of ``n_side**2`` stems with random DBH (and tilt)."""
    rng = _rng(seed, 99)
    stems = []
    for k in range(n_side * n_side):
        ix, iy = divmod(k, n_side)
        jitter = rng.uniform(-0.5, 0.5, 2)
        tilt = rng.uniform(0, tilt_max) if tilt_max > 0 else 0.0
        stems.append(StemSpec(
            base=(ix * spacing + jitter[0], iy * spacing + jitter[1], 0.0),
            dbh=float(rng.uniform(*dbh_range)),
            tilt=float(tilt),
            tilt_azimuth=float(rng.uniform(0, 2 * math.pi)),
            bark_sigma=bark_sigma,
        ))
    return SceneSpec(stems=tuple(stems), seed=seed, **scene_kwargs)


@dataclass
class SimulatedScans:
    scans: list
    odometry: OdometrySequence
    noisy_odometry: OdometrySequence
    empty: list = field(default_factory=list)


def scan_from_pose(cloud: PointCloud, pose: RigidTransform, angular_resolution=math.radians(0.2),
                   max_range=30.0, min_range=0.3, vertical_fov=(-30.0, 30.0),
                   range_noise=0.0, rng=None):
    """Sensor-frame points visible from ``pose``: nearest return per angular bin."""
    local = pose.inverse().apply(cloud.points)
    r = np.linalg.norm(local, axis=1)
    el = np.arcsin(np.clip(local[:, 2] / np.maximum(r, 1e-12), -1, 1))
    keep = (r <= max_range) & (r >= min_range) & \
        (el >= math.radians(vertical_fov[0])) & (el <= math.radians(vertical_fov[1]))
    local, r, el = local[keep], r[keep], el[keep]
    if local.shape[0] == 0:
        return PointCloud(np.empty((0, 3)))
    az = np.arctan2(local[:, 1], local[:, 0])
    ia = np.floor((az + math.pi) / angular_resolution).astype(np.int64)
    ie = np.floor((el + math.pi / 2) / angular_resolution).astype(np.int64)
    key = ia * (int(math.pi / angular_resolution) + 2) + ie
    order = np.lexsort((r, key))
    first = np.r_[True, key[order][1:] != key[order][:-1]]
    pick = np.sort(order[first])
    pts = local[pick]
    if range_noise > 0:
        rng = np.random.default_rng(rng)
        rr = r[pick]
        noisy = rr + rng.normal(0.0, range_noise, rr.size)
        pts = pts * (noisy / rr)[:, None]
    return PointCloud(pts)


def simulate_scans(cloud: PointCloud, path, angular_resolution=math.radians(0.2), max_range=30.0,
                   range_noise=0.0, seed=0, drift_sigma=(0.0, 0.0), drift_bias=(0.0, 0.0),
                   min_range=0.3, vertical_fov=(-30.0, 30.0)):
    """Simulate one scan per pose of ``path`` (a Trajectory or list of poses).

    Returns :class:`SimulatedScans` with the sensor-frame scans, the exact
    odometry (the path itself) and a drifting copy whose every increment is
    perturbed by ``drift_bias`` + Gaussian ``drift_sigma`` in
    (body-frame translation m, yaw rad).
    """
    poses = list(getattr(path, "poses", path))
    if not poses:
        raise ValidationError("sensor path is empty")
    stamps = getattr(path, "timestamps", None)
    stamps = np.arange(len(poses), dtype=np.float64) if stamps is None else np.asarray(stamps)
    scans, empty = [], []
    for i, pose in enumerate(poses):
        scan = scan_from_pose(cloud, pose, angular_resolution, max_range, min_range,
                              vertical_fov, range_noise, _rng(seed, _SCAN, i))
        if len(scan) == 0:
            empty.append(i)
        scans.append(scan)
    noisy = [poses[0]]
    rng = _rng(seed, _ODOM)
    for i in range(1, len(poses)):
        inc = poses[i - 1].inverse() @ poses[i]
        dt = rng.normal(0.0, drift_sigma[0], 2) + [drift_bias[0], 0.0]
        dyaw = rng.normal(0.0, drift_sigma[1]) + drift_bias[1]
        noise = RigidTransform.from_xyz_yaw(dt[0], dt[1], 0.0, dyaw)
        noisy.append(noisy[-1] @ inc @ noise)
    return SimulatedScans(scans, OdometrySequence(poses, stamps),
                          OdometrySequence(noisy, stamps), empty)


def straight_path(start, end, n, height=1.0, ground_fn=None):
    """``n`` poses along a straight line, heading along the line."""
    start, end = np.asarray(start, dtype=np.float64), np.asarray(end, dtype=np.float64)
    yaw = math.atan2(end[1] - start[1], end[0] - start[0])
    poses = []
    for t in np.linspace(0, 1, n):
        x, y = start + t * (end - start)
        z = height + (0.0 if ground_fn is None else float(ground_fn(x, y)))
        poses.append(RigidTransform.from_xyz_yaw(x, y, z, yaw))
    return Trajectory(poses, np.arange(n, dtype=np.float64))


def waypoint_path(waypoints, step, height=1.0, ground_fn=None):
    """Poses every ``step`` metres along a polyline, heading along each segment."""
    wps = np.asarray(waypoints, dtype=np.float64)
    poses = []
    for p0, p1 in zip(wps[:-1], wps[1:]):
        seg = p1 - p0
        length = float(np.linalg.norm(seg))
        yaw = math.atan2(seg[1], seg[0])
        for t in np.arange(0, length, step):
            x, y = p0 + seg * t / length
            z = height + (0.0 if ground_fn is None else float(ground_fn(x, y)))
            poses.append(RigidTransform.from_xyz_yaw(x, y, z, yaw))
    x, y = wps[-1]
    z = height + (0.0 if ground_fn is None else float(ground_fn(x, y)))
    poses.append(RigidTransform.from_xyz_yaw(x, y, z, poses[-1].yaw if poses else 0.0))
    return Trajectory(poses, np.arange(len(poses), dtype=np.float64))


def trees_in_frame(trees, pose: RigidTransform):
    """Tree records re-expressed in the frame whose world pose is ``pose``.

    A map built from simulated scans is anchored at the first sensor pose, so
    world-frame truth boxes must be moved into that frame before estimation.
    Each box becomes the axis-aligned hull of its moved corners, which is
    exact for yaw multiples of 90 degrees and larger otherwise.
    """
    inv = pose.inverse()
    out = []
    for t in trees:
        lo, hi = t.box.min_corner, t.box.max_corner
        corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1])
                            for z in (lo[2], hi[2])])
        moved = inv.apply(corners)
        out.append(dataclasses.replace(t, box=BoundingBox(moved.min(axis=0), moved.max(axis=0))))
    return out
