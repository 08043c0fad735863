"""Independent reference implementations used only by the tests.

These are written to be obviously correct rather than fast, and share no
code with the package.
"""

import math

import numpy as np


def voxel_census(points, edge):
    """Number of occupied cubic cells, by a plain dict hash grid."""
    cells = set()
    for x, y, z in points:
        cells.add((math.floor(x / edge), math.floor(y / edge), math.floor(z / edge)))
    return len(cells)


def voxel_members(points, edge):
    groups = {}
    for i, (x, y, z) in enumerate(points):
        groups.setdefault((math.floor(x / edge), math.floor(y / edge), math.floor(z / edge)),
                          []).append(i)
    return groups


def exhaustive_knn(points, query, k):
    """k nearest indices by a full scan, ties broken by lower index."""
    d = [(float(np.sum((p - query) ** 2)), i) for i, p in enumerate(points)]
    d.sort()
    return [i for _, i in d[:k]]


def kasa_circle(xy):
    """Plain algebraic least-squares circle: min sum (x^2+y^2 + D x + E y + F)^2."""
    x, y = xy[:, 0], xy[:, 1]
    A = np.column_stack([x, y, np.ones_like(x)])
    b = -(x * x + y * y)
    (D, E, F), *_ = np.linalg.lstsq(A, b, rcond=None)
    cx, cy = -D / 2, -E / 2
    return np.array([cx, cy]), math.sqrt(cx * cx + cy * cy - F)


def geometric_circle(xy, center, radius, iters=50):
    """Gauss-Newton geometric circle fit from a starting guess."""
    c = np.array(center, dtype=float)
    r = float(radius)
    for _ in range(iters):
        d = xy - c
        rho = np.hypot(d[:, 0], d[:, 1])
        res = rho - r
        J = np.column_stack([-d[:, 0] / rho, -d[:, 1] / rho, -np.ones_like(rho)])
        step, *_ = np.linalg.lstsq(J, -res, rcond=None)
        c += step[:2]
        r += step[2]
        if np.abs(step).max() < 1e-14:
            break
    return c, r


def point_line_distance(points, axis, point):
    """Distance of each point to the line through ``point`` along ``axis``."""
    a = np.asarray(axis, float) / np.linalg.norm(axis)
    d = np.asarray(points) - point
    return np.linalg.norm(np.cross(d, a), axis=1)


def cylinder_points(radius, axis=(0, 0, 1), center=(0, 0, 0), n=500, z_range=(0.0, 1.0),
                    arc_deg=360.0, arc_center_deg=0.0, noise=0.0, rng=None):
    """Points on a finite cylinder with analytic outward normals."""
    rng = np.random.default_rng(rng)
    a = np.asarray(axis, float)
    a = a / np.linalg.norm(a)
    u = np.cross(a, [1.0, 0, 0]) if abs(a[0]) < 0.9 else np.cross(a, [0, 1.0, 0])
    u /= np.linalg.norm(u)
    v = np.cross(a, u)
    half = math.radians(arc_deg) / 2
    th = math.radians(arc_center_deg) + rng.uniform(-half, half, n)
    t = rng.uniform(z_range[0], z_range[1], n)
    radial = np.outer(np.cos(th), u) + np.outer(np.sin(th), v)
    r = radius + (rng.normal(0, noise, n) if noise > 0 else 0.0)
    pts = np.asarray(center, float) + np.outer(t, a) + radial * np.reshape(r, (-1, 1))
    return pts, radial


def brute_metrics(errors_m, failed, threshold=0.20):
    """RMSE and bias in cm over non-failed, within-threshold errors."""
    keep = [e for e, f in zip(errors_m, failed) if not f and abs(e) <= threshold]
    n_fail = len(errors_m) - len(keep)
    if not keep:
        return float("nan"), float("nan"), n_fail / len(errors_m)
    e = np.array(keep) * 100
    return float(np.sqrt(np.mean(e * e))), float(np.mean(e)), n_fail / len(errors_m)
