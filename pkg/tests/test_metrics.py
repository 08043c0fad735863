import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forestmap.exceptions import ConfigError, EmptyReportError, ValidationError
from forestmap.geometry import BoundingBox, RigidTransform
from forestmap.icp import Trajectory
from forestmap.metrics import (MetricsReport, SweepRow, TreeObservation, best_cells,
                               compute_metrics, distance_profile, expand_grid,
                               min_observation_distance)
from oracles import brute_metrics


def obs(err_cm, truth=0.30, distance=0.0, tid="t"):
    est = None if err_cm is None else truth + err_cm / 100.0
    return TreeObservation(tid, est, truth, distance)


class TestComputeMetrics:
    def test_zero_errors(self):
        r = compute_metrics([obs(0), obs(0)])
        assert (r.rmse_cm, r.bias_cm, r.fail_rate) == (0, 0, 0)

    def test_worked_example(self):
        r = compute_metrics([obs(3), obs(-4)])
        assert r.rmse_cm == pytest.approx(math.sqrt(12.5), abs=1e-9)
        assert round(r.rmse_cm, 3) == 3.536
        assert r.bias_cm == pytest.approx(-0.5, abs=1e-9)

    def test_twenty_cm_rule(self):
        r = compute_metrics([obs(1), obs(25), obs(None)])
        assert r.fail_rate == pytest.approx(2 / 3)
        assert r.rmse_cm == pytest.approx(1.0) and r.bias_cm == pytest.approx(1.0)
        assert (r.n_total, r.n_failed, r.n_excluded) == (3, 2, 0)

    def test_distance_exclusion(self):
        r = compute_metrics([obs(1), obs(5, distance=12)])
        assert r.n_excluded == 1 and r.n_total == 1 and r.rmse_cm == pytest.approx(1)

    def test_all_excluded(self):
        with pytest.raises(EmptyReportError):
            compute_metrics([obs(1, distance=11)])

    def test_empty(self):
        with pytest.raises(ValidationError):
            compute_metrics([])

    def test_all_failed_gives_nan(self):
        r = compute_metrics([obs(None)])
        assert r.fail_rate == 1 and math.isnan(r.rmse_cm)
        assert r.to_dict()["rmse_cm"] is None

    def test_bad_truth(self):
        with pytest.raises(ValidationError):
            TreeObservation("x", 0.3, 0.0)

    @given(st.lists(st.one_of(st.none(), st.floats(-40, 40)), min_size=1, max_size=30),
           st.randoms())
    @settings(max_examples=100, deadline=None)
    def test_against_oracle_and_invariants(self, errs, rnd):
        observations = [obs(e) for e in errs]
        r = compute_metrics(observations)
        err_m = [0.0 if e is None else o.error for e, o in zip(errs, observations)]
        rmse, bias, fail = brute_metrics(err_m, [e is None for e in errs])
        assert r.fail_rate == pytest.approx(fail)
        if math.isnan(rmse):
            assert math.isnan(r.rmse_cm)
        else:
            assert r.rmse_cm == pytest.approx(rmse, abs=1e-9)
            assert r.bias_cm == pytest.approx(bias, abs=1e-9)
            assert r.rmse_cm >= abs(r.bias_cm) - 1e-12
        shuffled = list(observations)
        rnd.shuffle(shuffled)
        s = compute_metrics(shuffled)
        assert s.fail_rate == r.fail_rate
        assert (math.isnan(s.rmse_cm) and math.isnan(r.rmse_cm)) or \
            s.rmse_cm == pytest.approx(r.rmse_cm, rel=1e-12)

    def test_removing_failure(self):
        full = compute_metrics([obs(1), obs(-2), obs(None)])
        less = compute_metrics([obs(1), obs(-2)])
        assert less.rmse_cm == full.rmse_cm and less.bias_cm == full.bias_cm
        assert less.fail_rate < full.fail_rate


class TestDistance:
    def test_through_centre(self):
        box = BoundingBox([-1, -1, 0], [1, 1, 3])
        traj = Trajectory([RigidTransform.identity()], [0.0])
        assert min_observation_distance(traj, box) == 0.0

    def test_constant_offset(self):
        box = BoundingBox([-1, -1, 0], [1, 1, 3])
        poses = [RigidTransform.from_xyz_yaw(x, 4.0, 1.0, 0) for x in np.linspace(-5, 5, 11)]
        assert min_observation_distance(Trajectory(poses, np.arange(11.0)), box) == 4.0

    def test_loop_matches_exhaustive(self, rng):
        t = np.linspace(0, 2 * np.pi, 50, endpoint=False)
        poses = [RigidTransform.from_xyz_yaw(8 * np.cos(a), 8 * np.sin(a), 1, a) for a in t]
        traj = Trajectory(poses, np.arange(50.0))
        for c in rng.uniform(-10, 10, (20, 2)):
            box = BoundingBox([c[0] - 0.2, c[1] - 0.2, 0], [c[0] + 0.2, c[1] + 0.2, 3])
            brute = min(math.hypot(p.translation[0] - c[0], p.translation[1] - c[1])
                        for p in poses)
            assert min_observation_distance(traj, box) == pytest.approx(brute, abs=1e-12)


class TestProfile:
    def test_single_bin(self):
        bins = distance_profile([obs(1, distance=3), obs(2, distance=3)], 2.0)
        occupied = [b for b in bins if b.n]
        assert len(occupied) == 1 and (occupied[0].lo, occupied[0].hi) == (2.0, 4.0)

    def test_empty_bins_reported(self):
        bins = distance_profile([obs(1, distance=9)], 2.0, max_distance=10)
        assert len(bins) == 5 and [b.n for b in bins] == [0, 0, 0, 0, 1]
        assert math.isnan(bins[0].rmse_cm)

    def test_identical_bins(self):
        errs = [1, -2, 3]
        bins = distance_profile([obs(e, distance=1) for e in errs]
                                + [obs(e, distance=5) for e in errs], 2.0)
        a, b = bins[0], bins[2]
        assert (a.median_cm, a.iqr_cm, a.rmse_cm) == (b.median_cm, b.iqr_cm, b.rmse_cm)

    def test_bad_width(self):
        with pytest.raises(ConfigError):
            distance_profile([obs(1)], 0)


def _row(method, rmse, **kw):
    rep = MetricsReport(rmse, 0.0, 0.0, 1, 0, 0)
    return SweepRow(method, kw.get("q", 15), kw.get("n_cyls", 1), kw.get("h", 0.2),
                    kw.get("epsilon", 0.01), rep)


class TestSweepHelpers:
    def test_best_cell(self):
        rows = [_row("A_N", 2.0, q=15), _row("A_N", 1.0, q=20), _row("A_N", 1.5, q=25)]
        assert best_cells(rows)["A_N"].q == 20

    def test_best_is_minimum(self, rng):
        rows = [_row("A_N", float(v)) for v in rng.uniform(0, 5, 30)]
        best = best_cells(rows)["A_N"]
        assert all(best.report.rmse_cm <= r.report.rmse_cm for r in rows)

    def test_grid_validation(self):
        with pytest.raises(ConfigError):
            expand_grid({"epsilon": (0.01, 0.0)})
        with pytest.raises(ConfigError):
            expand_grid({"bogus": (1,)})
        assert len(expand_grid(None)) == 225


@pytest.fixture(scope="module")
def small_stand():
    from forestmap.metrics import SweepDataset
    from forestmap.synth import generate_scene, stand_grid
    spec = stand_grid(2, 3.0, bark_sigma=0.005, clutter_ratio=0.1, seed=3, stem_density=1500)
    cloud, trees, _ = generate_scene(spec)
    return SweepDataset(cloud, trees)


class TestSweep:
    def test_single_cell_equals_compute_metrics(self, small_stand):
        from forestmap.dbh import EstimationConfig, estimate_trees
        from forestmap.metrics import sweep
        grid = {"q": (15,), "n_cyls": (3,), "h": (0.4,), "epsilon": (0.02,)}
        res = sweep(small_stand, ["A_N+C_NLS"], grid)
        assert len(res.rows) == 1
        cfg = EstimationConfig.for_method("A_N+C_NLS", n_cyls=3, h=0.4, epsilon=0.02)
        ests = estimate_trees(small_stand.cloud, small_stand.trees, cfg, small_stand.dtm)
        direct = compute_metrics([TreeObservation(t.id, e.diameter, t.truth_dbh, 0.0)
                                  for t, e in zip(small_stand.trees, ests)])
        assert res.rows[0].report == direct

    def test_parallel_matches_serial(self, small_stand):
        from forestmap.metrics import sweep
        grid = {"q": (15, 20), "n_cyls": (1, 2), "h": (0.3,), "epsilon": (0.02,)}
        methods = ["A_N", "A_LLS+C_NLSN"]
        a = sweep(small_stand, methods, grid)
        b = sweep(small_stand, methods, grid, n_jobs=2)
        assert [r.to_dict() for r in a.rows] == [r.to_dict() for r in b.rows]
        assert len(a.rows) == 8

    def test_cell_failures_recorded(self, small_stand):
        from forestmap.metrics import sweep
        res = sweep(small_stand, ["A_N"], {"q": (15,), "n_cyls": (1,), "h": (0.3,),
                                           "epsilon": (0.02,)}, max_distance=-1.0)
        assert res.rows[0].report is None and "EmptyReportError" in res.rows[0].error
