"""Acceptance criteria, each run at its stated tolerance.

Every test records one PASS/FAIL line, printed in the terminal summary.
"""

import dataclasses
import functools
import itertools
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from forestmap.circle import hyper_circle_fit
from forestmap.dbh import METHODS, EstimationConfig, estimate_dbh, estimate_trees
from forestmap.geometry import PointCloud, RigidTransform
from forestmap.icp import build_map, icp_register
from forestmap.metrics import (SweepDataset, TreeObservation, compute_metrics, distance_profile,
                               expand_grid, min_observation_distance, sweep)
from forestmap.neighbors import estimate_normals
from forestmap.synth import (SceneSpec, StemSpec, WallSpec, generate_scene, generate_stem_cloud,
                             simulate_scans, stand_grid, straight_path, trees_in_frame,
                             waypoint_path)
from oracles import geometric_circle, kasa_circle


def record(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def benchmark_stand():
    """25-stem stand with 1 cm bark noise and 20% clutter."""
    return stand_grid(5, 4.0, bark_sigma=0.01, clutter_ratio=0.2, seed=1)


# --- 1. exactness -----------------------------------------------------------

def test_exactness_suite():
    start = time.perf_counter()
    misses = []
    n = 0
    for r, tilt, arc in itertools.product((0.05, 0.15, 0.30), (0.0, 10.0), (360.0, 180.0)):
        spec = StemSpec(base=(0, 0, 0), dbh=2 * r, tilt=math.radians(tilt), visible_arc=arc,
                        bark_sigma=0.0)
        cloud, _ = generate_stem_cloud(spec, seed=0)
        keep = np.abs(cloud.points[:, 2] - 1.3) <= 0.3
        sl = PointCloud(cloud.points[keep], cloud.normals[keep])
        for method in METHODS:
            n += 1
            est = estimate_dbh(sl, EstimationConfig.for_method(method, n_cyls=5, h=0.6))
            err = math.inf if not est.ok else abs(est.diameter / 2 - r)
            if not err <= 1e-4:
                misses.append(f"{method} r={r} tilt={tilt:g} arc={arc:g} err={err:.1e} m")
    elapsed = time.perf_counter() - start
    ok = not misses and elapsed < 10
    detail = f"{n - len(misses)}/{n} cells within 1e-4 m, {elapsed:.1f} s"
    if misses:
        detail += "; misses: " + ", ".join(misses)
    record("exactness suite", ok, detail)
    assert not misses, detail
    assert elapsed < 10


# --- 2. Hyper vs Kasa --------------------------------------------------------

@functools.lru_cache(maxsize=None)
def hyper_kasa_monte_carlo(trials=1000, n=200, radius=0.15, sigma=0.01, seed=2024):
    """Radius errors of Hyper and Kasa on identical 90 degree arc samples."""
    rng = np.random.default_rng(seed)
    h_err, k_err = np.empty(trials), np.empty(trials)
    for i in range(trials):
        t = np.radians(rng.uniform(0, 360) + rng.uniform(0, 90, n))
        r = radius + rng.normal(0, sigma, n)
        pts = np.column_stack([r * np.cos(t), r * np.sin(t)])
        h_err[i] = hyper_circle_fit(pts).radius - radius
        k_err[i] = kasa_circle(pts)[1] - radius
    return h_err, k_err


def test_hyper_less_biased_than_kasa():
    start = time.perf_counter()
    h_err, k_err = hyper_kasa_monte_carlo()
    elapsed = time.perf_counter() - start
    hb, kb = abs(h_err.mean()), abs(k_err.mean())
    ok = hb < kb and elapsed < 30
    record("Hyper low bias", ok, f"|mean err| Hyper {hb * 100:.3f} cm < Kasa {kb * 100:.3f} cm "
                                 f"over 1000 trials, {elapsed:.1f} s")
    assert hb < kb
    assert elapsed < 30


# --- 3. median voting --------------------------------------------------------

def branch_corrupted_slice(seed):
    """Noisy stem slice where one of five bands holds a dense branch."""
    rng = np.random.default_rng(seed)
    r = rng.uniform(0.1, 0.25)
    n = 1500
    th = rng.uniform(0, 2 * math.pi, n)
    rr = r + rng.normal(0, 0.01, n)
    stem = np.column_stack([rr * np.cos(th), rr * np.sin(th), rng.uniform(1.0, 1.6, n)])
    lo = 1.0 + 0.12 * rng.integers(5)
    az, up = rng.uniform(0, 2 * math.pi), math.radians(rng.uniform(20, 60))
    d = np.array([math.cos(up) * math.cos(az), math.cos(up) * math.sin(az), math.sin(up)])
    u = np.cross(d, [0, 0, 1.0])
    u /= np.linalg.norm(u)
    v = np.cross(d, u)
    m = 8000
    s, ang = rng.uniform(r, r + 0.5, m), rng.uniform(0, 2 * math.pi, m)
    branch = np.array([0, 0, lo + 0.06]) + np.outer(s, d) \
        + 0.06 * (np.outer(np.cos(ang), u) + np.outer(np.sin(ang), v))
    branch = branch[(branch[:, 2] >= lo) & (branch[:, 2] < lo + 0.12)]
    return PointCloud(np.vstack([stem, branch])), 2 * r


def test_median_beats_mean_voting():
    med, mean = [], []
    for seed in range(200):
        sl, truth = branch_corrupted_slice(seed)
        for voting, errs in (("median", med), ("mean", mean)):
            est = estimate_dbh(sl, EstimationConfig(n_cyls=5, h=0.6, voting=voting),
                               random_state=seed)
            errs.append(est.diameter - truth)
    rm, rn = (float(np.sqrt(np.mean(np.square(e)))) * 100 for e in (med, mean))
    ok = rm < rn
    record("median voting robustness", ok,
           f"RMSE median {rm:.3f} cm < mean {rn:.3f} cm over 200 seeds")
    assert ok


# --- 4. ICP ------------------------------------------------------------------

def corridor_spec(seed=0):
    stems = tuple(StemSpec(base=(x, y, 0), dbh=0.3) for x in (1, 3, 5, 7) for y in (-2, 2))
    walls = (WallSpec((-2, -4), (9, -4)), WallSpec((9, -4), (9, 4)))
    return SceneSpec(stems=stems, walls=walls, seed=seed, stem_density=1500,
                     ground_density=200, wall_density=200, extent=(-2, 9, -4, 4))


def test_icp_recovery_and_drift():
    start = time.perf_counter()
    spec = corridor_spec()
    reference = estimate_normals(generate_scene(spec)[0], 15, viewpoint=(3, 0, 1.5))
    # an independent resample of the same scene, so the match is not trivial
    reading = generate_scene(dataclasses.replace(spec, seed=1))[0]
    rng = np.random.default_rng(0)
    worst_t = worst_r = 0.0
    for k in range(6):
        if k == 0:
            dx = dy = 0.1 / math.sqrt(2)
            yaw = math.radians(5)
        else:
            a, d = rng.uniform(0, 2 * math.pi), rng.uniform(0, 0.1)
            dx, dy, yaw = d * math.cos(a), d * math.sin(a), math.radians(rng.uniform(-5, 5))
        T_star = RigidTransform.from_xyz_yaw(dx, dy, 0.0, yaw)
        T = icp_register(reading.transformed(T_star), reference)
        dt, dr = T.distance_to(T_star.inverse())
        worst_t, worst_r = max(worst_t, dt), max(worst_r, dr)

    path = straight_path((0, 0), (5, 0), 10, height=1.0)
    sim = simulate_scans(generate_scene(spec)[0], path, math.radians(0.4), 15.0, seed=1,
                         drift_sigma=(0.01, math.radians(0.2)),
                         drift_bias=(0.05, math.radians(0.3)))
    _, traj = build_map(sim.scans, sim.noisy_odometry)
    base = path.poses[0].inverse()
    truth = base @ path.poses[-1]
    icp_err = traj.poses[-1].distance_to(truth)[0]
    raw_err = (base @ sim.noisy_odometry.poses[-1]).distance_to(truth)[0]
    elapsed = time.perf_counter() - start
    recovered = worst_t < 0.01 and worst_r < math.radians(0.2)
    ok = recovered and icp_err < raw_err and elapsed < 60
    record("ICP recovery", ok,
           f"worst {worst_t * 100:.3f} cm / {math.degrees(worst_r):.4f} deg on 6 perturbations; "
           f"final pose {icp_err * 100:.2f} cm vs raw odometry {raw_err * 100:.2f} cm, "
           f"{elapsed:.1f} s")
    assert recovered
    assert icp_err < raw_err
    assert elapsed < 60


# --- 5. end to end -----------------------------------------------------------

def oracle_bound_cm(spec):
    """Bound from direct fits on truth-segmented noiseless bands plus a noise floor.

    The noise floor is the diameter RMSE of the Hyper fit in the 90 degree
    arc Monte-Carlo; the result is capped at the 1 cm target envelope.
    """
    errs = []
    for stem in spec.stems:
        cloud, _ = generate_stem_cloud(dataclasses.replace(stem, bark_sigma=0.0), seed=0)
        band = cloud.points[np.abs(cloud.points[:, 2] - 1.3) <= 0.3]
        c0 = band[:, :2].mean(axis=0)
        _, r = geometric_circle(band[:, :2], c0, np.linalg.norm(band[0, :2] - c0))
        errs.append(2 * r - stem.dbh)
    oracle = float(np.sqrt(np.mean(np.square(errs)))) * 100
    h_err, _ = hyper_kasa_monte_carlo()
    floor = 2 * float(np.sqrt(np.mean(h_err**2))) * 100
    return min(1.0, oracle + floor), oracle, floor


def lawnmower(lines=(-2.0, 6.0, 14.0), x=(-2.0, 18.0), step=3.0):
    wps = []
    for k, y in enumerate(lines):
        xs = x if k % 2 == 0 else x[::-1]
        wps += [(xs[0], y), (xs[1], y)]
    return waypoint_path(wps, step, height=1.0)


def test_end_to_end_benchmark():
    start = time.perf_counter()
    spec = benchmark_stand()
    bound, oracle, floor = oracle_bound_cm(spec)
    cloud, trees, _ = generate_scene(spec)
    path = lawnmower()
    sim = simulate_scans(cloud, path, math.radians(0.2), max_range=15.0, seed=1)
    world, traj = build_map(sim.scans, sim.odometry)
    map_trees = trees_in_frame(trees, path.poses[0])
    cfg = EstimationConfig.for_method("A_N+C_NLS", n_cyls=5, h=0.6, epsilon=0.02)
    est = estimate_trees(world, map_trees, cfg)
    obs = [TreeObservation(t.id, e.diameter, t.truth_dbh, min_observation_distance(traj, t.box))
           for e, t in zip(est, map_trees)]
    report = compute_metrics(obs)
    elapsed = time.perf_counter() - start
    max_d = max(o.distance for o in obs)
    ok = report.rmse_cm <= bound and max_d < 6 and elapsed < 300
    record("end-to-end benchmark", ok,
           f"RMSE {report.rmse_cm:.3f} cm <= bound {bound:.3f} cm (oracle {oracle:.4f} cm, "
           f"noise floor {floor:.2f} cm), fail rate {report.fail_rate:.2f}, "
           f"max min-distance {max_d:.2f} m, {elapsed:.0f} s")
    assert report.rmse_cm <= bound
    assert max_d < 6
    assert elapsed < 300


# --- 6. distance trend -------------------------------------------------------

def test_distance_degradation_trend():
    rng = np.random.default_rng(0)
    stems = []
    for j, d in enumerate((1, 3, 5, 7, 9)):
        for i in range(10):
            # staggered columns so near stems do not hide the far ones
            stems.append(StemSpec(base=(2 * i + 0.4 * j + 1, d + rng.uniform(-0.3, 0.3), 0),
                                  dbh=float(rng.uniform(0.2, 0.4)), bark_sigma=0.01))
    spec = SceneSpec(stems=tuple(stems), extent=(-2, 24, -2, 12), seed=0)
    cloud, trees, _ = generate_scene(spec)
    path = straight_path((0, 0), (22, 0), 12, height=1.0)
    sim = simulate_scans(cloud, path, math.radians(0.2), max_range=30.0, range_noise=0.01,
                         seed=0)
    # exact poses isolate the effect of point density from registration error
    world = PointCloud(np.vstack([T.apply(s.points) for T, s in zip(path.poses, sim.scans)]))
    cfg = EstimationConfig.for_method("A_N+C_NLS", n_cyls=5, h=0.6, epsilon=0.02)
    est = estimate_trees(world, trees, cfg)
    obs = [TreeObservation(t.id, e.diameter, t.truth_dbh, min_observation_distance(path, t.box))
           for e, t in zip(est, trees)]
    bins = distance_profile(obs, 2.0, 10.0)
    rmse = [b.rmse_cm for b in bins]
    ok = len(bins) == 5 and all(b.n > 0 for b in bins) and bool(np.all(np.diff(rmse) >= 0))
    record("distance degradation trend", ok,
           "per-bin RMSE " + ", ".join(f"[{b.lo:g},{b.hi:g}) {b.rmse_cm:.2f} cm" for b in bins))
    assert ok


# --- 7. protocol -------------------------------------------------------------

def test_protocol_fidelity():
    a = compute_metrics([TreeObservation("a", 0.33, 0.30), TreeObservation("b", 0.26, 0.30)])
    b = compute_metrics([TreeObservation("a", 0.31, 0.30), TreeObservation("b", 0.55, 0.30),
                         TreeObservation("c", None, 0.30)])
    checks = [
        a.rmse_cm == pytest.approx(math.sqrt(12.5), abs=1e-9),
        a.bias_cm == pytest.approx(-0.5, abs=1e-9),
        a.fail_rate == 0.0,
        b.fail_rate == pytest.approx(2 / 3, abs=1e-12),
        b.rmse_cm == pytest.approx(1.0, abs=1e-9),
        b.bias_cm == pytest.approx(1.0, abs=1e-9),
        b.n_failed == 2,
    ]
    ok = all(checks)
    record("protocol fidelity", ok,
           f"{{+3,-4}} cm -> RMSE {a.rmse_cm:.3f}, bias {a.bias_cm:.3f}; "
           f"{{+1,+25,failed}} -> fail rate {b.fail_rate:.3f}, RMSE {b.rmse_cm:.3f}")
    assert ok


# --- 8. sweep scale ----------------------------------------------------------

def test_full_grid_sweep():
    spec = benchmark_stand()
    cloud, trees, _ = generate_scene(spec)
    ds = SweepDataset(cloud, trees)
    start = time.perf_counter()
    result = sweep(ds)
    elapsed = time.perf_counter() - start
    n_cells = len(expand_grid(None))
    complete = len(result.rows) == n_cells * len(METHODS) and len(result.best) == len(METHODS)
    # each cell is a pure function of its config and seed: rerun a sample in a fresh sweep
    rng = np.random.default_rng(0)
    picks = [result.rows[i] for i in rng.choice(len(result.rows), 12, replace=False)]
    repeat = []
    for row in picks:
        grid = {"q": [row.q], "n_cyls": [row.n_cyls], "h": [row.h], "epsilon": [row.epsilon]}
        repeat.append(sweep(ds, [row.method], grid).rows[0])
    deterministic = all(a.to_dict() == b.to_dict() for a, b in zip(picks, repeat))
    ok = complete and deterministic and elapsed < 900
    best = result.best["A_N+C_NLS"]
    record("full grid sweep", ok,
           f"{len(result.rows)} rows ({n_cells} cells x {len(METHODS)} methods) in "
           f"{elapsed:.0f} s; 12 re-run cells identical: {deterministic}; best A_N+C_NLS "
           f"q={best.q} n_cyls={best.n_cyls} h={best.h:g} eps={best.epsilon:g} "
           f"RMSE {best.report.rmse_cm:.3f} cm")
    assert complete
    assert deterministic
    assert elapsed < 900
