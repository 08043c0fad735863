"""Evaluation protocol: RMSE, bias and fail rate; observation distance;
hyperparameter sweep."""

from __future__ import annotations

import csv
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .dbh import METHODS, EstimationConfig, TreeSlicer, normal_reach_for
from .dtm import RasterDtm, build_dtm
from .exceptions import ConfigError, EmptyReportError, ValidationError
from .geometry import BoundingBox, PointCloud
from .io import _atomic_open, write_json

FAIL_THRESHOLD = 0.20
MAX_DISTANCE = 10.0

DEFAULT_GRID = {
    "q": (15, 20, 25),
    "n_cyls": (1, 2, 3, 4, 5),
    "h": (0.20, 0.30, 0.40, 0.50, 0.60),
    "epsilon": (0.01, 0.02, 0.03),
}


@dataclass(frozen=True)
class TreeObservation:
    """One tree seen from one trajectory. ``estimate`` is None for a failed fit."""

    tree_id: str
    estimate: float | None
    truth: float
    distance: float = 0.0
    species: str | None = None
    trajectory_id: str | None = None

    def __post_init__(self):
        if not (math.isfinite(self.truth) and self.truth > 0):
            raise ValidationError(f"truth DBH must be positive, got {self.truth}")
        if not self.distance >= 0:
            raise ValidationError(f"distance must be >= 0, got {self.distance}")

    @property
    def error(self):
        return None if self.estimate is None else self.estimate - self.truth


@dataclass(frozen=True)
class MetricsReport:
    """Aggregate errors in centimetres; failures are excluded from RMSE and bias."""

    rmse_cm: float
    bias_cm: float
    fail_rate: float
    n_total: int
    n_failed: int
    n_excluded: int

    def to_dict(self):
        d = asdict(self)
        for k in ("rmse_cm", "bias_cm"):
            if not math.isfinite(d[k]):
                d[k] = None
        return d


def min_observation_distance(trajectory, box: BoundingBox):
    """Closest horizontal approach of the trajectory to the box centre (m)."""
    xy = _trajectory_xy(trajectory)
    if xy.shape[0] == 0:
        raise ValidationError("trajectory is empty")
    return float(np.min(np.linalg.norm(xy - box.center[:2], axis=1)))


def _trajectory_xy(trajectory):
    poses = getattr(trajectory, "poses", trajectory)
    if isinstance(poses, np.ndarray):
        return np.asarray(poses, dtype=np.float64)[:, :2]
    return np.array([T.translation[:2] for T in poses]).reshape(-1, 2)


def _is_failure(obs, threshold):
    return obs.estimate is None or abs(obs.error) > threshold


def compute_metrics(observations, fail_threshold=FAIL_THRESHOLD, max_distance=MAX_DISTANCE):
    """RMSE / bias / fail rate over the observations closer than ``max_distance``.

    An observation fails when its fit failed or its absolute error exceeds
    ``fail_threshold``; failures count toward the fail rate only.
    """
    observations = list(observations)
    if not observations:
        raise ValidationError("no observations given")
    kept = [o for o in observations if o.distance <= max_distance]
    if not kept:
        raise EmptyReportError(f"all {len(observations)} observations are beyond {max_distance} m")
    ok = [o.error for o in kept if not _is_failure(o, fail_threshold)]
    n_failed = len(kept) - len(ok)
    if ok:
        err = np.asarray(ok) * 100.0
        rmse = float(np.sqrt(np.mean(err**2)))
        bias = float(np.mean(err))
    else:
        rmse = bias = float("nan")
    return MetricsReport(rmse, bias, n_failed / len(kept), len(kept), n_failed,
                         len(observations) - len(kept))


@dataclass(frozen=True)
class DistanceBin:
    lo: float
    hi: float
    n: int
    n_failed: int
    median_cm: float
    iqr_cm: float
    rmse_cm: float


def distance_profile(observations, bin_width=2.0, max_distance=None,
                     fail_threshold=FAIL_THRESHOLD):
    """Error statistics of observations bucketed by observation distance.

    Bins are ``[k w, (k+1) w)``; empty bins are reported with ``n = 0`` and
    NaN statistics. Failed observations are counted but not in the stats.
    """
    observations = list(observations)
    if not observations:
        raise ValidationError("no observations given")
    if not bin_width > 0:
        raise ConfigError("bin_width must be positive")
    dists = np.array([o.distance for o in observations])
    if max_distance is None:
        n_bins = int(np.floor(dists.max() / bin_width)) + 1
    else:
        # observations at or beyond max_distance fall outside every bin
        n_bins = max(int(np.ceil(max_distance / bin_width - 1e-9)), 1)
    bins = []
    for k in range(n_bins):
        lo, hi = k * bin_width, (k + 1) * bin_width
        members = [o for o, d in zip(observations, dists) if lo <= d < hi]
        errs = np.array([o.error for o in members if not _is_failure(o, fail_threshold)]) * 100
        n_failed = len(members) - errs.size
        if errs.size:
            q1, med, q3 = np.percentile(errs, [25, 50, 75])
            rmse = float(np.sqrt(np.mean(errs**2)))
        else:
            q1 = med = q3 = rmse = float("nan")
        bins.append(DistanceBin(lo, hi, len(members), n_failed, float(med), float(q3 - q1), rmse))
    return bins


def save_distance_profile(bins, path):
    with _atomic_open(path, "w") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo_m", "bin_hi_m", "n", "n_failed", "median_cm", "iqr_cm", "rmse_cm"])
        for b in bins:
            w.writerow([b.lo, b.hi, b.n, b.n_failed, _fmt(b.median_cm), _fmt(b.iqr_cm),
                        _fmt(b.rmse_cm)])


def _fmt(v):
    return "" if v is None or not math.isfinite(v) else repr(float(v))


# --- sweep -------------------------------------------------------------------

@dataclass
class SweepDataset:
    """Map, trees with ground truth, and each tree's observation distance."""

    cloud: PointCloud
    trees: list
    distances: list | None = None
    dtm: RasterDtm | None = None
    trajectory_id: str | None = None
    dtm_cell_size: float = 0.5

    def __post_init__(self):
        if any(t.truth_dbh is None for t in self.trees):
            raise ValidationError("every tree in a sweep dataset needs truth_dbh")
        if self.distances is None:
            self.distances = [0.0] * len(self.trees)
        if len(self.distances) != len(self.trees):
            raise ValidationError("distances and trees differ in length")
        if self.dtm is None:
            self.dtm = build_dtm(self.cloud, self.dtm_cell_size)


@dataclass
class SweepRow:
    method: str
    q: int
    n_cyls: int
    h: float
    epsilon: float
    report: MetricsReport | None
    error: str | None = None

    def to_dict(self):
        d = {"method": self.method, "q": self.q, "n_cyls": self.n_cyls, "h": self.h,
             "epsilon": self.epsilon}
        if self.report is not None:
            d.update(self.report.to_dict())
        else:
            d.update(rmse_cm=None, bias_cm=None, fail_rate=None, n_total=0, n_failed=0,
                     n_excluded=0)
        d["error"] = self.error
        return d


@dataclass
class SweepResult:
    rows: list
    best: dict = field(default_factory=dict)

    def to_dict(self):
        return {"rows": [r.to_dict() for r in self.rows],
                "best": {m: r.to_dict() for m, r in self.best.items()}}


def expand_grid(grid):
    """Validate a grid dict and return its cells as (q, n_cyls, h, epsilon) tuples."""
    grid = {**DEFAULT_GRID, **(grid or {})}
    unknown = set(grid) - set(DEFAULT_GRID)
    if unknown:
        raise ConfigError(f"unknown grid keys {sorted(unknown)}")
    for key, values in grid.items():
        if len(values) == 0:
            raise ConfigError(f"grid entry {key!r} is empty")
        for v in values:
            # EstimationConfig performs the per-value range checks
            EstimationConfig(**{key: v})
    return list(itertools.product(grid["q"], grid["n_cyls"], grid["h"], grid["epsilon"]))


def _effective_key(method, q, n_cyls, h, eps):
    # q only matters for chains that consume normals
    axis_mode, refine = METHODS[method]
    uses_q = axis_mode == "lls" or refine == "nlsn"
    return (method, q if uses_q else None, n_cyls, h, eps)


class _SweepRunner:
    def __init__(self, dataset: SweepDataset, base: EstimationConfig, fail_threshold,
                 max_distance, reach):
        self.dataset = dataset
        self.base = base
        self.fail_threshold = fail_threshold
        self.max_distance = max_distance
        self.slicers = [TreeSlicer(dataset.cloud, t.box, dataset.dtm, reach)
                        for t in dataset.trees]
        self.cache = {}

    def run_cell(self, method, q, n_cyls, h, eps):
        key = _effective_key(method, q, n_cyls, h, eps)
        if key not in self.cache:
            self.cache[key] = self._evaluate(method, q, n_cyls, h, eps)
        report, err = self.cache[key]
        return SweepRow(method, q, n_cyls, h, eps, report, err)

    def _evaluate(self, method, q, n_cyls, h, eps):
        ds = self.dataset
        try:
            axis_mode, refine = METHODS[method]
            cfg = self.base.replace(axis_mode=axis_mode, refine=refine, q=q, n_cyls=n_cyls,
                                    h=h, epsilon=eps)
            obs = []
            for i, (tree, slicer, dist) in enumerate(zip(ds.trees, self.slicers, ds.distances)):
                est = slicer.estimate(cfg, [cfg.seed, i])
                obs.append(TreeObservation(tree.id, est.diameter, tree.truth_dbh, dist,
                                           tree.species, ds.trajectory_id))
            return compute_metrics(obs, self.fail_threshold, self.max_distance), None
        except Exception as exc:  # per-cell failures are recorded, never fatal
            return None, f"{type(exc).__name__}: {exc}"


def _run_chunk(args):
    dataset, base, fail_threshold, max_distance, reach, cells = args
    runner = _SweepRunner(dataset, base, fail_threshold, max_distance, reach)
    return [runner.run_cell(*c) for c in cells]


def sweep(dataset: SweepDataset, methods=None, grid=None, base=EstimationConfig(),
          fail_threshold=FAIL_THRESHOLD, max_distance=MAX_DISTANCE, n_jobs=1):
    """Evaluate every (method, q, n_cyls, h, epsilon) cell and pick the best per method.

    Rows come back in grid order whatever ``n_jobs`` is, and every tree uses
    the seed ``[base.seed, tree_index]``, so parallel and serial runs agree
    bit for bit. Failing cells are recorded with their error message.
    """
    methods = list(METHODS) if methods is None else list(methods)
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}")
    cells = expand_grid(grid)
    reach = normal_reach_for(max(c[2] for c in cells))
    jobs = [(m, *c) for m in methods for c in cells]

    if n_jobs is None or n_jobs <= 1:
        runner = _SweepRunner(dataset, base, fail_threshold, max_distance, reach)
        rows = [runner.run_cell(*j) for j in jobs]
    else:
        # one chunk per method keeps each worker's slice/normal caches useful
        chunks = [[j for j in jobs if j[0] == m] for m in methods]
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            parts = pool.map(_run_chunk, [(dataset, base, fail_threshold, max_distance, reach, ch)
                                          for ch in chunks])
            rows = [r for part in parts for r in part]
    return SweepResult(rows, best_cells(rows))


def best_cells(rows):
    """Per method, the row with the lowest finite RMSE (first one on ties)."""
    best = {}
    for row in rows:
        if row.report is None or not math.isfinite(row.report.rmse_cm):
            continue
        cur = best.get(row.method)
        if cur is None or row.report.rmse_cm < cur.report.rmse_cm:
            best[row.method] = row
    return best


SWEEP_COLUMNS = ["method", "q", "n_cyls", "h", "epsilon", "rmse_cm", "bias_cm", "fail_rate",
                 "n_total", "n_failed", "n_excluded", "error"]


def save_sweep(result: SweepResult, csv_path, json_path=None):
    with _atomic_open(csv_path, "w") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        for row in result.rows:
            d = row.to_dict()
            w.writerow({k: ("" if d.get(k) is None else d.get(k)) for k in SWEEP_COLUMNS})
    if json_path is not None:
        write_json(result.to_dict(), json_path)
