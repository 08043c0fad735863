"""Command-line front end: map, dtm, estimate, sweep, report, synth, simulate.

Every command writes its outputs plus ``manifest.json`` into ``--out``.
``forestmap replay manifest.json`` re-runs the recorded command line.

Exit codes: 0 success, 2 configuration error, 3 I/O or parse error,
4 processing failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .dbh import METHODS, EstimationConfig, estimate_trees
from .dtm import build_dtm, save_dtm
from .exceptions import ConfigError, ForestMapError, ParseError, ValidationError
from .icp import IcpConfig, OdometrySequence, Trajectory, build_map
from .io import (load_cloud, load_poses, load_trees, read_json, save_cloud, save_poses,
                 save_trees, write_json)
from .metrics import (FAIL_THRESHOLD, MAX_DISTANCE, SweepDataset, TreeObservation,
                      compute_metrics, distance_profile, expand_grid, min_observation_distance,
                      save_distance_profile, save_sweep, sweep)
from .synth import (SceneSpec, generate_scene, simulate_scans, stand_grid, straight_path,
                    trees_in_frame)

log = logging.getLogger("forestmap")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_PROCESSING = 0, 2, 3, 4

_EST_KEYS = {f.name for f in dataclasses.fields(EstimationConfig)} | {"method"}
_ICP_KEYS = {f.name for f in dataclasses.fields(IcpConfig)}


# --- config handling --------------------------------------------------------

def _load_config(path):
    if path is None:
        return {}
    cfg = read_json(path)
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return cfg


def _split(cfg, allowed, command):
    unknown = set(cfg) - allowed
    if unknown:
        raise ConfigError(f"{command}: unknown config keys {sorted(unknown)}")
    return dict(cfg)


def _overlay(base, **flags):
    """Flags that were given on the command line win over file values."""
    out = dict(base)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _estimation_config(args, cfg):
    est = {k: v for k, v in cfg.items() if k in _EST_KEYS}
    est = _overlay(est, method=args.method, q=args.q, n_cyls=args.n_cyls, h=args.h,
                   epsilon=args.epsilon, voting=args.voting, seed=args.seed)
    return EstimationConfig.from_dict(est)


# --- commands -----------------------------------------------------------------

def _scan_paths(source):
    """Scan files from a directory (sorted PLYs) or a manifest JSON."""
    source = Path(source)
    if source.is_dir():
        paths = sorted(p for p in source.iterdir() if p.suffix.lower() in (".ply", ".csv"))
        return paths, None
    data = read_json(source)
    try:
        paths = [source.parent / p for p in data["scans"]]
        rows = data.get("odometry_rows")
    except (TypeError, KeyError) as exc:
        raise ParseError(f"{source}: scan manifest needs a 'scans' list ({exc})") from None
    return paths, rows


def cmd_map(args, cfg, out):
    cfg = _split(cfg, _ICP_KEYS | {"cell_edge", "on_failure"}, "map")
    cell_edge = float(_overlay(cfg, cell_edge=args.cell_edge).get("cell_edge", 0.02))
    on_failure = _overlay(cfg, on_failure=args.on_failure).get("on_failure", "fallback")
    icp = IcpConfig.from_dict({k: v for k, v in cfg.items() if k in _ICP_KEYS})
    paths, rows = _scan_paths(args.scans)
    stamps, poses = load_poses(args.odometry)
    if rows is not None:
        stamps, poses = stamps[rows], [poses[i] for i in rows]
    if len(paths) != len(poses):
        raise ValidationError(
            f"scan count {len(paths)} does not match odometry row count {len(poses)}")
    scans = [load_cloud(p) for p in paths]
    world, traj = build_map(scans, OdometrySequence(poses, stamps), icp, cell_edge, on_failure)
    map_path, traj_path = out / "map.ply", out / "trajectory.csv"
    save_cloud(world, map_path)
    save_poses(traj.timestamps, traj.poses, traj_path)
    write_json([{"index": i, "status": s} for i, s in enumerate(traj.status)],
               out / "trajectory_status.json")
    n_fb = sum(s != "ok" for s in traj.status)
    log.info("map: %d scans, %d points, %d odometry fallbacks", len(scans), len(world), n_fb)
    return {"inputs": [str(args.scans), str(args.odometry)],
            "outputs": [str(map_path), str(traj_path)],
            "config": {**icp.to_dict(), "cell_edge": cell_edge, "on_failure": on_failure}}


def cmd_dtm(args, cfg, out):
    cfg = _split(cfg, {"cell_size", "percentile"}, "dtm")
    cfg = _overlay(cfg, cell_size=args.cell_size, percentile=args.percentile)
    cloud = load_cloud(args.map)
    dtm = build_dtm(cloud, cfg.get("cell_size", 0.5), cfg.get("percentile", 5.0))
    path = out / "dtm.csv"
    save_dtm(dtm, path)
    return {"inputs": [str(args.map)], "outputs": [str(path), str(path.with_suffix(".json"))],
            "config": cfg}


def cmd_estimate(args, cfg, out):
    cfg = _split(cfg, _EST_KEYS | {"dtm_cell_size"}, "estimate")
    config = _estimation_config(args, cfg)
    cloud = load_cloud(args.map)
    trees = load_trees(args.trees)
    if not trees:
        raise ForestMapError(f"{args.trees}: no tree records to estimate")
    dtm_cell = float(_overlay(cfg, dtm_cell_size=args.dtm_cell_size).get("dtm_cell_size", 0.5))
    estimates = estimate_trees(cloud, trees, config, dtm_cell_size=dtm_cell)
    path = out / "estimates.json"
    write_json([e.to_dict(t.id) for e, t in zip(estimates, trees)], path)
    n_ok = sum(e.ok for e in estimates)
    log.info("estimate: %d/%d trees ok (%s)", n_ok, len(trees), config.method)
    return {"inputs": [str(args.map), str(args.trees)], "outputs": [str(path)],
            "config": {**config.to_dict(), "method": config.method,
                       "dtm_cell_size": dtm_cell}}


def _distances(trees, trajectory_path):
    if trajectory_path is None:
        return None
    stamps, poses = load_poses(trajectory_path)
    traj = Trajectory(poses, stamps)
    return [min_observation_distance(traj, t.box) for t in trees]


def cmd_sweep(args, cfg, out):
    cfg = _split(cfg, _EST_KEYS | {"grid", "methods", "dtm_cell_size", "fail_threshold",
                                   "max_distance"}, "sweep")
    grid = cfg.pop("grid", None)
    methods = args.methods or cfg.pop("methods", None)
    cfg.pop("methods", None)
    fail = float(_overlay(cfg, fail_threshold=args.fail_threshold).pop("fail_threshold",
                                                                      FAIL_THRESHOLD))
    max_d = float(_overlay(cfg, max_distance=args.max_distance).pop("max_distance",
                                                                   MAX_DISTANCE))
    cfg.pop("fail_threshold", None)
    cfg.pop("max_distance", None)
    dtm_cell = float(cfg.pop("dtm_cell_size", 0.5))
    base = _estimation_config(args, cfg)
    if grid is not None and not isinstance(grid, dict):
        raise ConfigError("grid must be an object of lists")
    if methods is not None:
        unknown = [m for m in methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown methods {unknown}; choose from {list(METHODS)}")
    # validate the grid before loading any data
    expand_grid(grid)
    cloud = load_cloud(args.map)
    trees = load_trees(args.trees)
    if not trees:
        raise ForestMapError(f"{args.trees}: no tree records")
    ds = SweepDataset(cloud, trees, _distances(trees, args.trajectory),
                      dtm_cell_size=dtm_cell)
    result = sweep(ds, methods, grid, base, fail, max_d, n_jobs=args.threads)
    csv_path, json_path = out / "sweep.csv", out / "sweep.json"
    save_sweep(result, csv_path, json_path)
    for m, row in result.best.items():
        r = row.report
        log.info("best %-14s q=%d n_cyls=%d h=%.2f eps=%.2f  RMSE %.2f cm  bias %.2f cm  "
                 "fail %.1f%%", m, row.q, row.n_cyls, row.h, row.epsilon, r.rmse_cm,
                 r.bias_cm, 100 * r.fail_rate)
    return {"inputs": [str(args.map), str(args.trees)]
            + ([str(args.trajectory)] if args.trajectory else []),
            "outputs": [str(csv_path), str(json_path)],
            "config": {"base": base.to_dict(), "grid": grid, "methods": methods,
                       "fail_threshold": fail, "max_distance": max_d}}


def cmd_report(args, cfg, out):
    cfg = _split(cfg, {"fail_threshold", "max_distance", "bin_width"}, "report")
    cfg = _overlay(cfg, fail_threshold=args.fail_threshold, max_distance=args.max_distance,
                   bin_width=args.bin_width)
    fail = float(cfg.get("fail_threshold", FAIL_THRESHOLD))
    max_d = float(cfg.get("max_distance", MAX_DISTANCE))
    trees = {t.id: t for t in load_trees(args.trees)}
    estimates = read_json(args.estimates)
    if not isinstance(estimates, list):
        raise ParseError(f"{args.estimates}: expected a JSON array of estimates")
    tree_list = []
    for e in estimates:
        if e.get("id") not in trees:
            raise ParseError(f"{args.estimates}: estimate for unknown tree {e.get('id')!r}")
        tree_list.append(trees[e["id"]])
    missing = [t.id for t in tree_list if t.truth_dbh is None]
    if missing:
        raise ConfigError(f"trees without truth_dbh_m: {missing}")
    distances = _distances(tree_list, args.trajectory) or [0.0] * len(tree_list)
    obs = [TreeObservation(t.id, e["diameter_m"] if e.get("status") == "ok" else None,
                           t.truth_dbh, d, t.species, args.trajectory_id)
           for e, t, d in zip(estimates, tree_list, distances)]
    report = compute_metrics(obs, fail, max_d)
    path = out / "report.json"
    write_json(report.to_dict(), path)
    outputs = [str(path)]
    if args.trajectory:
        prof = out / "distance_profile.csv"
        save_distance_profile(distance_profile(obs, float(cfg.get("bin_width", 2.0)),
                                               max_d, fail), prof)
        outputs.append(str(prof))
    log.info("RMSE %.3f cm  bias %.3f cm  fail rate %.1f%%  (n=%d, excluded %d)",
             report.rmse_cm, report.bias_cm, 100 * report.fail_rate, report.n_total,
             report.n_excluded)
    return {"inputs": [str(args.estimates), str(args.trees)], "outputs": outputs,
            "config": {"fail_threshold": fail, "max_distance": max_d}}


def _scene_spec(args, cfg):
    if args.scene is not None:
        d = read_json(args.scene)
        if args.seed is not None:
            d["seed"] = args.seed
        try:
            return SceneSpec.from_dict(d)
        except TypeError as exc:
            raise ConfigError(f"{args.scene}: {exc}") from None
    stand = _overlay(cfg, seed=args.seed, n_side=args.stand)
    try:
        return stand_grid(**stand)
    except TypeError as exc:
        raise ConfigError(f"synth config: {exc}") from None


def cmd_synth(args, cfg, out):
    spec = _scene_spec(args, cfg)
    cloud, trees, _ = generate_scene(spec)
    cloud_path, trees_path, spec_path = out / "scene.ply", out / "trees.json", out / "scene.json"
    save_cloud(cloud, cloud_path)
    save_trees(trees, trees_path)
    write_json(spec.to_dict(), spec_path)
    log.info("synth: %d stems, %d points", len(trees), len(cloud))
    return {"inputs": [str(args.scene)] if args.scene else [],
            "outputs": [str(cloud_path), str(trees_path), str(spec_path)],
            "config": spec.to_dict()}


def cmd_simulate(args, cfg, out):
    cfg = _split(cfg, {"start", "end", "n_poses", "height", "angular_resolution_deg",
                       "max_range", "range_noise", "drift_sigma", "drift_bias"}, "simulate")
    cfg = _overlay(cfg, start=args.start, end=args.end, n_poses=args.n_poses,
                   height=args.height, max_range=args.max_range, range_noise=args.range_noise,
                   drift_sigma=args.drift_sigma, drift_bias=args.drift_bias)
    for key in ("start", "end"):
        if key not in cfg:
            raise ConfigError(f"simulate needs --{key} (or '{key}' in the config file)")
    seed = 0 if args.seed is None else args.seed
    cloud = load_cloud(args.cloud)
    ground = None
    if args.scene is not None:
        ground = SceneSpec.from_dict(read_json(args.scene)).ground_z
    path = straight_path(cfg["start"], cfg["end"], int(cfg.get("n_poses", 10)),
                         float(cfg.get("height", 1.0)), ground)
    sim = simulate_scans(cloud, path, math.radians(float(cfg.get("angular_resolution_deg", 0.2))),
                         float(cfg.get("max_range", 30.0)), float(cfg.get("range_noise", 0.0)),
                         seed, tuple(cfg.get("drift_sigma", (0.0, 0.0))),
                         tuple(cfg.get("drift_bias", (0.0, 0.0))))
    scan_dir = out / "scans"
    scan_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for i, scan in enumerate(sim.scans):
        p = scan_dir / f"scan_{i:04d}.ply"
        save_cloud(scan, p)
        outputs.append(str(p))
    odo, exact = out / "odometry.csv", out / "odometry_exact.csv"
    save_poses(sim.noisy_odometry.timestamps, sim.noisy_odometry.poses, odo)
    save_poses(sim.odometry.timestamps, sim.odometry.poses, exact)
    inputs = [str(args.cloud)]
    if args.trees is not None:
        # the map from these scans is anchored at the first pose
        trees_path = out / "trees_map.json"
        save_trees(trees_in_frame(load_trees(args.trees), sim.odometry.poses[0]), trees_path)
        outputs.append(str(trees_path))
        inputs.append(str(args.trees))
    if sim.empty:
        log.warning("simulate: poses with no visible points: %s", sim.empty)
    return {"inputs": inputs, "outputs": outputs + [str(odo), str(exact)],
            "config": {**cfg, "seed": seed}}


COMMANDS = {"map": cmd_map, "dtm": cmd_dtm, "estimate": cmd_estimate, "sweep": cmd_sweep,
            "report": cmd_report, "synth": cmd_synth, "simulate": cmd_simulate}


# --- parser -------------------------------------------------------------------

def _common(p):
    p.add_argument("--config", type=Path, help="JSON config; flags override its values")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--threads", type=int, default=1, help="worker processes (sweep only)")
    p.add_argument("--quiet", action="store_true", help="only print warnings and errors")


def _estimation_flags(p):
    p.add_argument("--method", choices=list(METHODS))
    p.add_argument("--q", type=int)
    p.add_argument("--n-cyls", dest="n_cyls", type=int)
    p.add_argument("--h", type=float, help="slice thickness (m)")
    p.add_argument("--epsilon", type=float, help="RANSAC tolerance (m)")
    p.add_argument("--voting", choices=["median", "mean"])


def build_parser():
    parser = argparse.ArgumentParser(prog="forestmap", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"forestmap {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("map", help="register scans into a map with ICP")
    p.add_argument("--scans", type=Path, required=True, help="scan directory or manifest JSON")
    p.add_argument("--odometry", type=Path, required=True, help="odometry CSV")
    p.add_argument("--cell-edge", dest="cell_edge", type=float)
    p.add_argument("--on-failure", dest="on_failure", choices=["fallback", "abort"])
    _common(p)

    p = sub.add_parser("dtm", help="build a raster terrain model")
    p.add_argument("--map", type=Path, required=True)
    p.add_argument("--cell-size", dest="cell_size", type=float)
    p.add_argument("--percentile", type=float)
    _common(p)

    p = sub.add_parser("estimate", help="estimate DBH for every tree box")
    p.add_argument("--map", type=Path, required=True)
    p.add_argument("--trees", type=Path, required=True)
    p.add_argument("--dtm-cell-size", dest="dtm_cell_size", type=float)
    _estimation_flags(p)
    _common(p)

    p = sub.add_parser("sweep", help="evaluate the hyperparameter grid")
    p.add_argument("--map", type=Path, required=True)
    p.add_argument("--trees", type=Path, required=True, help="trees with truth_dbh_m")
    p.add_argument("--trajectory", type=Path, help="trajectory CSV for observation distances")
    p.add_argument("--methods", nargs="+")
    p.add_argument("--fail-threshold", dest="fail_threshold", type=float)
    p.add_argument("--max-distance", dest="max_distance", type=float)
    _estimation_flags(p)
    _common(p)

    p = sub.add_parser("report", help="metrics from estimates and ground truth")
    p.add_argument("--estimates", type=Path, required=True)
    p.add_argument("--trees", type=Path, required=True)
    p.add_argument("--trajectory", type=Path)
    p.add_argument("--trajectory-id", dest="trajectory_id")
    p.add_argument("--fail-threshold", dest="fail_threshold", type=float)
    p.add_argument("--max-distance", dest="max_distance", type=float)
    p.add_argument("--bin-width", dest="bin_width", type=float)
    _common(p)

    p = sub.add_parser("synth", help="generate a synthetic stand")
    p.add_argument("--scene", type=Path, help="SceneSpec JSON (default: grid stand)")
    p.add_argument("--stand", type=int, help="stems per side of the default grid stand")
    _common(p)

    p = sub.add_parser("simulate", help="simulate scans along a straight path")
    p.add_argument("--cloud", type=Path, required=True)
    p.add_argument("--scene", type=Path, help="SceneSpec JSON, for ground-following height")
    p.add_argument("--trees", type=Path,
                   help="world-frame trees; written to trees_map.json in the map frame")
    p.add_argument("--start", type=float, nargs=2)
    p.add_argument("--end", type=float, nargs=2)
    p.add_argument("--n-poses", dest="n_poses", type=int)
    p.add_argument("--height", type=float)
    p.add_argument("--max-range", dest="max_range", type=float)
    p.add_argument("--range-noise", dest="range_noise", type=float)
    p.add_argument("--drift-sigma", dest="drift_sigma", type=float, nargs=2,
                   metavar=("TRANS", "YAW"))
    p.add_argument("--drift-bias", dest="drift_bias", type=float, nargs=2,
                   metavar=("TRANS", "YAW"))
    _common(p)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, help="write to this directory instead")
    p.add_argument("--quiet", action="store_true")
    return parser


# --- entry point --------------------------------------------------------------

def _replay_argv(manifest_path, out):
    m = read_json(manifest_path)
    try:
        argv, cwd = list(m["argv"]), m["cwd"]
    except (TypeError, KeyError) as exc:
        raise ParseError(f"{manifest_path}: not a run manifest ({exc})") from None
    if out is not None:
        out = str(Path(out).resolve())
        if "--out" in argv:
            argv[argv.index("--out") + 1] = out
        else:
            argv += ["--out", out]
    return argv, cwd


def run(argv):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", force=True)
    if args.command == "replay":
        new_argv, cwd = _replay_argv(args.manifest, args.out)
        prev = os.getcwd()
        os.chdir(cwd)
        try:
            return run(new_argv)
        finally:
            os.chdir(prev)
    if args.threads is not None and args.threads < 1:
        raise ConfigError("--threads must be at least 1")
    start = time.perf_counter()
    cfg = _load_config(args.config)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    info = COMMANDS[args.command](args, cfg, out)
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "cwd": os.getcwd(),
        "config_path": None if args.config is None else str(args.config),
        "config": info.get("config"),
        "inputs": info.get("inputs", []),
        "outputs": info.get("outputs", []),
        "seed": args.seed,
        "version": __version__,
        "duration_s": time.perf_counter() - start,
    }
    write_json(_jsonable(manifest), out / "manifest.json")
    return EXIT_OK


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    return obj


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        return run(argv)
    except ConfigError as exc:
        print(f"forestmap: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, OSError) as exc:
        print(f"forestmap: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ForestMapError as exc:
        print(f"forestmap: processing failed: {exc}", file=sys.stderr)
        return EXIT_PROCESSING


if __name__ == "__main__":
    sys.exit(main())
