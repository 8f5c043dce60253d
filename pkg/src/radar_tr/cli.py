"""Command-line entry point: ``radar-tr {simulate,teach,repeat,eval}``.

Exit codes: 0 success, 2 usage error, 3 input or data error, 4 flagged
frames under ``--strict``. ``RADAR_TR_LOG_LEVEL`` sets the log level
(default WARNING).

Outputs per command (all inside ``--out``):

* simulate: ``scan_NNNN.rscan`` (or ``.csv``), ``gt.csv``, ``manifest.json``
* teach: ``map.rtrm`` (or ``--map``), ``trajectory.csv``, ``manifest.json``
* repeat: ``records.csv``, ``errors.csv``, ``rmse.csv``, ``histogram.csv``,
  ``trajectory.csv``, ``manifest.json``

When the teach scan directory holds a ``gt.csv``, the map metadata keeps the
first ground-truth pose (``gt_origin``) and the ground-truth pose of every
node (``node_gt``). Repeat uses them to start from the pose and twist in its
own ``gt.csv`` and to score each frame against ground truth; without them
``errors.csv`` holds the estimated offsets from the closest node.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import subprocess
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import FIELD_NAMES, ConfigError, PipelineConfig, _field_kind, coerce_value, load_config
from .geometry import Pose2, Velocity
from .localization import relative_error, run_repeat
from .map_store import MapError, TeachGraph, load_map, save_map
from .metrics import (MetricsInputError, drift_csv, error_histogram, errors_csv, format_drift, format_rmse,
                      histogram_csv, kitti_drift, localization_rmse, read_errors_csv, read_trajectory_csv,
                      rmse_csv)
from .odometry import run_teach, trajectory_csv
from .preprocessing import detect
from .scan_io import ScanFormatError, list_scan_files, read_scan, write_scan, write_scan_csv
from .scenarios import shipped_corridor_paths
from .sim import SimConfig, Trajectory, World, simulate_sequence

log = logging.getLogger("radar_tr")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_DIVERGED = 0, 2, 3, 4
LATENCY_SOFT_MS, LATENCY_HARD_MS = 35.0, 100.0
ABLATIONS = {"no-doppler": "doppler", "no-range-offset": "range_offset",
             "no-encoder": "encoder", "no-motion-comp": "motion_comp"}


class InputError(Exception):
    """Unreadable or inconsistent input data (exit 3)."""


class UsageError(Exception):
    """Invalid combination of arguments (exit 2)."""


# -- helpers -----------------------------------------------------------------

def build_id() -> str:
    """``git describe`` of the source tree, or the package version outside a checkout."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        out = None
    if out is not None and out.returncode == 0 and out.stdout.strip():
        return out.stdout.strip()
    return f"radar_tr-{__version__}"


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def timing_stats(durations: list[float]) -> dict:
    if not durations:
        return {"n_scans": 0, "mean_ms": None, "p95_ms": None, "max_ms": None}
    ms = 1000.0 * np.asarray(durations)
    return {"n_scans": len(ms), "mean_ms": float(np.mean(ms)), "p95_ms": float(np.percentile(ms, 95)),
            "max_ms": float(np.max(ms))}


def latency_status(mean_ms: float | None) -> str:
    if mean_ms is None:
        return "n/a"
    if mean_ms < LATENCY_SOFT_MS:
        return "pass"
    return "soft-fail" if mean_ms <= LATENCY_HARD_MS else "fail"


def write_manifest(out_dir: Path, command: str, cfg: PipelineConfig | None, inputs: dict, outputs: dict,
                   seed, wall_clock: float, durations: list[float] | None = None, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "config": cfg.to_dict() if cfg is not None else None,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "seed": seed,
        "build": build_id(),
        "wall_clock_s": wall_clock,
    }
    if durations is not None:
        stats = timing_stats(durations)
        stats["soft_target_ms"], stats["hard_limit_ms"] = LATENCY_SOFT_MS, LATENCY_HARD_MS
        stats["status"] = latency_status(stats["mean_ms"])
        manifest["timing"] = stats
    manifest.update(extra or {})
    write_atomic(out_dir / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _parse_pose(text: str) -> Pose2:
    try:
        x, y, th = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x,y,theta, got {text!r}") from None
    return Pose2(x, y, th)


def _parse_velocity(text: str) -> Velocity:
    try:
        vx, vy, omega = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected vx,vy,omega, got {text!r}") from None
    return Velocity(vx, vy, omega)


def _config_flag_type(name: str):
    def parse(raw: str):
        try:
            value = coerce_value(name, raw)
        except ConfigError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
        if name == "s_m" and (value < 1 or value % 2 == 0):
            raise argparse.ArgumentTypeError(f"s_m must be an odd number >= 1, got {value}")
        return value
    parse.__name__ = _field_kind(name)
    return parse


def _add_pipeline_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key=value configuration file; flags override it")
    g = p.add_argument_group("pipeline configuration (mirrors the config file keys)")
    for name in FIELD_NAMES:
        g.add_argument(f"--{name}", dest=f"cfg_{name}", type=_config_flag_type(name), metavar="VALUE")
    p.add_argument("--ablate", action="append", default=[], choices=sorted(ABLATIONS),
                   help="disable a preprocessing stage (repeatable)")
    p.add_argument("--jobs", type=int, default=1,
                   help="threads for peak extraction ahead of the pipeline; results do not change")
    p.add_argument("--strict", action="store_true", help="exit 4 if any frame was flagged")


def _pipeline_config(args) -> PipelineConfig:
    base = PipelineConfig()
    if args.config is not None:
        try:
            base = load_config(args.config)
        except OSError as exc:
            raise InputError(f"cannot read config {args.config}: {exc.strerror or exc}") from None
        except ConfigError as exc:
            raise InputError(str(exc)) from None
    changes = {name: getattr(args, f"cfg_{name}") for name in FIELD_NAMES
               if getattr(args, f"cfg_{name}") is not None}
    for ab in args.ablate:
        changes[ABLATIONS[ab]] = False
    try:
        return base.replace(**changes)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def _load_scans(scan_dir: Path):
    if not scan_dir.is_dir():
        raise InputError(f"scan directory {scan_dir} does not exist")
    files = list_scan_files(scan_dir)
    if not files:
        raise InputError(f"no scan files in {scan_dir}")
    scans = []
    for f in files:
        try:
            scans.append(read_scan(f))
        except OSError as exc:
            raise InputError(f"cannot read {f}: {exc.strerror or exc}") from None
        except (ScanFormatError, ValueError) as exc:
            raise InputError(str(exc)) from None
    times = [s.scan_time for s in scans]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise InputError(f"{scan_dir}: scan times are not strictly increasing in file order")
    return files, scans


def _detections(scans, cfg: PipelineConfig, jobs: int):
    if jobs <= 1:
        return None
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda s: detect(s, cfg), scans))


def _load_trajectory(path: Path) -> Trajectory:
    try:
        return Trajectory.load(path)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}") from None
    except ValueError as exc:
        raise InputError(str(exc)) from None


# -- commands ----------------------------------------------------------------

def cmd_simulate(args) -> int:
    t_start = time.perf_counter()
    shipped = shipped_corridor_paths()
    world_path = args.world or shipped["world"]
    traj_path = args.trajectory or shipped["trajectory"]
    sim_path = args.sim or shipped["sim"]
    try:
        world = World.load(world_path)
        sim = SimConfig.load(sim_path)
    except OSError as exc:
        raise InputError(f"cannot read {exc.filename}: {exc.strerror}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise InputError(f"malformed simulation input: {exc}") from None
    traj = _load_trajectory(traj_path)
    if args.seed is not None:
        world = World(world.segments, world.segment_reflectivity, world.scatterers, args.seed)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    scans, gt = simulate_sequence(world, traj, sim)
    width = max(4, len(str(len(scans) - 1)))
    for i, scan in enumerate(scans):
        if args.format == "csv":
            write_scan_csv(scan, out / f"scan_{i:0{width}d}.csv")
        else:
            write_scan(scan, out / f"scan_{i:0{width}d}.rscan")
    write_atomic(out / "gt.csv", gt.to_csv())
    write_manifest(out, "simulate", None, {"world": world_path, "trajectory": traj_path, "sim": sim_path},
                   {"scans": out, "ground_truth": out / "gt.csv"}, int(world.rng_seed),
                   time.perf_counter() - t_start, extra={"n_scans": len(scans)})
    print(f"wrote {len(scans)} scans and gt.csv to {out}")
    return EXIT_OK


def cmd_teach(args) -> int:
    t_start = time.perf_counter()
    cfg = _pipeline_config(args)
    files, scans = _load_scans(args.scan_dir)
    dets = _detections(scans, cfg, args.jobs)
    durations: list[float] = []
    run = run_teach(scans, cfg, durations.append, dets)
    nodes = run.state.nodes
    if not nodes:
        raise InputError("teach run produced no keyframes (no usable surface points)")

    meta = {"n_scans": len(scans), "first_scan_time": scans[0].scan_time, "last_scan_time": scans[-1].scan_time,
            "config": cfg.to_dict()}
    gt_path = args.scan_dir / "gt.csv"
    if gt_path.exists():
        gt = _load_trajectory(gt_path)
        meta["gt_origin"] = list(gt(scans[0].scan_time).as_tuple())
        meta["node_gt"] = [list(gt(kf.timestamp).as_tuple()) for kf in nodes]
    graph = TeachGraph(nodes, meta)

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    map_path = args.map or out / "map.rtrm"
    save_map(graph, map_path)
    write_atomic(out / "trajectory.csv", trajectory_csv(run.times, run.poses))
    flagged = [d.frame for d in run.state.diagnostics]
    write_manifest(out, "teach", cfg, {"scans": args.scan_dir}, {"map": map_path, "trajectory": out / "trajectory.csv"},
                   None, time.perf_counter() - t_start, durations,
                   {"n_keyframes": len(nodes), "flagged_frames": flagged})
    print(f"{len(scans)} scans, {len(nodes)} keyframes, {len(flagged)} flagged; map written to {map_path}")
    if args.strict and flagged:
        return EXIT_DIVERGED
    return EXIT_OK


def _repeat_init(args, graph: TeachGraph, scans, gt: Trajectory | None) -> tuple[Pose2, Velocity]:
    """Initial pose and body twist: flags first, then the first ground-truth row."""
    t0 = scans[0].scan_time
    velocity = args.init_velocity
    if velocity is None:
        velocity = Velocity(*gt.velocities_at(t0)[0]) if gt is not None and args.init_pose is None else Velocity()
    if args.init_pose is not None:
        return args.init_pose, velocity
    if gt is None:
        raise InputError("no initial pose: pass --init-pose or provide gt.csv next to the scans")
    first = gt(t0)
    origin = graph.meta.get("gt_origin")
    if origin is None:
        log.warning("map has no ground-truth origin; taking the repeat ground truth as map coordinates")
        return first, velocity
    return Pose2(*origin).inverse().compose(first), velocity


def cmd_repeat(args) -> int:
    t_start = time.perf_counter()
    cfg = _pipeline_config(args)
    try:
        graph = load_map(args.map)
    except OSError as exc:
        raise InputError(str(exc)) from None
    files, scans = _load_scans(args.scan_dir)
    gt_path = args.gt or args.scan_dir / "gt.csv"
    gt = _load_trajectory(gt_path) if gt_path.exists() else None
    if args.gt is not None and gt is None:
        raise InputError(f"ground truth {args.gt} does not exist")
    init, init_velocity = _repeat_init(args, graph, scans, gt)

    dets = _detections(scans, cfg, args.jobs)
    durations: list[float] = []
    run = run_repeat(graph, scans, init, cfg, durations.append, dets, init_velocity)

    node_gt = graph.meta.get("node_gt")
    if gt is not None and node_gt is not None and len(node_gt) == len(graph):
        reference = "ground_truth"
        errors = np.array([relative_error(Pose2(*p), graph[n].pose, gt(t), Pose2(*node_gt[n]))
                           for t, p, n in zip(run.times, run.poses, run.nodes)]).reshape(-1, 3)
    else:
        reference = "closest_node"
        errors = run.errors

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    write_atomic(out / "records.csv", records_csv(run))
    write_atomic(out / "errors.csv", errors_csv(run.times, run.nodes, errors))
    report = localization_rmse(errors)
    write_atomic(out / "rmse.csv", rmse_csv(report))
    write_atomic(out / "histogram.csv", histogram_csv(error_histogram(errors, args.bin_width)))
    write_atomic(out / "trajectory.csv", trajectory_csv(run.times, run.poses))
    flagged = [d.frame for d in run.state.diagnostics]
    write_manifest(out, "repeat", cfg, {"scans": args.scan_dir, "map": args.map, "ground_truth": gt_path if gt else ""},
                   {name: out / name for name in ("records.csv", "errors.csv", "rmse.csv", "histogram.csv",
                                                   "trajectory.csv")},
                   None, time.perf_counter() - t_start, durations,
                   {"error_reference": reference, "flagged_frames": flagged,
                    "init_pose": list(init.as_tuple()), "init_velocity": list(init_velocity.as_tuple()),
                    "rmse": {"longitudinal": report.longitudinal_rmse, "lateral": report.lateral_rmse,
                             "heading_deg": report.heading_rmse, "overall": report.overall}})
    print(f"errors relative to {reference.replace('_', ' ')}")
    print(format_rmse(report))
    if args.strict and flagged:
        return EXIT_DIVERGED
    return EXIT_OK


def records_csv(run) -> str:
    """Per-frame records; the offsets are the estimate relative to its closest node."""
    lines = ["time,x,y,theta,node,longitudinal,lateral,heading_deg,n_correspondences,iterations,converged"]
    for t, p, n, e, r in zip(run.times, run.poses, run.nodes, run.errors, run.reports):
        vals = [repr(float(v)) for v in (t, *p)] + [str(int(n))]
        vals += [repr(float(e[0])), repr(float(e[1])), repr(math.degrees(float(e[2])))]
        vals += [str(r.n_correspondences), str(r.iterations), "1" if r.converged else "0"]
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


def _read_text(path: Path) -> str:
    try:
        return path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}") from None


def cmd_eval(args) -> int:
    mode = args.mode or ("drift" if args.est is not None else "rmse")
    try:
        if mode == "drift":
            if args.est is None or args.gt is None:
                raise UsageError("drift mode needs --est and --gt")
            et, est = read_trajectory_csv(_read_text(args.est), str(args.est))
            gt_t, gt = read_trajectory_csv(_read_text(args.gt), str(args.gt))
            report = kitti_drift(est, gt, et, gt_t)
            print(format_drift(report))
            text = drift_csv(report)
        else:
            if args.errors is None:
                raise UsageError("rmse mode needs --errors")
            errors = read_errors_csv(_read_text(args.errors), str(args.errors))
            report = localization_rmse(errors)
            print(format_rmse(report))
            text = rmse_csv(report)
            if args.histogram is not None:
                write_atomic(args.histogram, histogram_csv(error_histogram(errors, args.bin_width)))
    except MetricsInputError as exc:
        raise InputError(str(exc)) from None
    if args.out is not None:
        write_atomic(args.out, text)
    return EXIT_OK


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="radar-tr", description="Radar-only teach and repeat.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render scans and ground truth (defaults: the shipped corridor)")
    p.add_argument("--world", type=Path)
    p.add_argument("--trajectory", type=Path)
    p.add_argument("--sim", type=Path, help="simulator config JSON")
    p.add_argument("--seed", type=int, help="override the world's noise seed")
    p.add_argument("--format", choices=("rscan", "csv"), default="rscan")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("teach", help="build a map from a scan directory")
    p.add_argument("scan_dir", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--map", type=Path, help="map file (default OUT/map.rtrm)")
    _add_pipeline_options(p)
    p.set_defaults(func=cmd_teach)

    p = sub.add_parser("repeat", help="localize a scan directory against a map")
    p.add_argument("scan_dir", type=Path)
    p.add_argument("--map", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--init-pose", type=_parse_pose, help="x,y,theta in map coordinates")
    p.add_argument("--init-velocity", type=_parse_velocity,
                   help="vx,vy,omega body twist at the first scan (default: from ground truth with no "
                        "--init-pose, else at rest)")
    p.add_argument("--gt", type=Path, help="ground truth CSV (default SCAN_DIR/gt.csv if present)")
    p.add_argument("--bin-width", type=float, default=0.02, help="histogram bin width (m, and deg for heading)")
    _add_pipeline_options(p)
    p.set_defaults(func=cmd_repeat)

    p = sub.add_parser("eval", help="drift of a trajectory or RMSE of localization errors")
    p.add_argument("--mode", choices=("drift", "rmse"))
    p.add_argument("--est", type=Path, help="estimated trajectory CSV (drift)")
    p.add_argument("--gt", type=Path, help="ground-truth trajectory CSV (drift)")
    p.add_argument("--errors", type=Path, help="localization error CSV (rmse)")
    p.add_argument("--out", type=Path, help="write the report as CSV")
    p.add_argument("--histogram", type=Path, help="also write an error histogram CSV (rmse)")
    p.add_argument("--bin-width", type=float, default=0.02)
    p.set_defaults(func=cmd_eval)
    return parser


def _configure_logging() -> None:
    name = os.environ.get("RADAR_TR_LOG_LEVEL", "WARNING").upper()
    level = logging.getLevelName(name)
    logging.basicConfig(level=level if isinstance(level, int) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if not isinstance(level, int):
        log.warning("unknown RADAR_TR_LOG_LEVEL %r, using WARNING", name)


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    if getattr(args, "bin_width", 1.0) <= 0:
        print("radar-tr: error: --bin-width must be > 0", file=sys.stderr)
        return EXIT_USAGE
    if getattr(args, "jobs", 1) < 1:
        print("radar-tr: error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"radar-tr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, MapError) as exc:
        print(f"radar-tr: {exc}", file=sys.stderr)
        return EXIT_INPUT
