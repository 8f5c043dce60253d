"""Teach-pass odometry: scan-to-submap registration with keyframe creation."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .config import PipelineConfig
from .geometry import Pose2, Velocity, integrate_twist, pose_log_delta, twist_between
from .preprocessing import Detections, PolarScan, detect, detections_to_cloud
from .registration import RegistrationError, RegistrationResult, register
from .surface_points import SurfacePointSet, compute_surface_points, transform_surface_points

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Keyframe:
    """A map node: sensor pose in the map frame plus surface points in the sensor frame."""

    id: int
    pose: Pose2
    surface_points: SurfacePointSet
    timestamp: float

    @cached_property
    def map_points(self) -> SurfacePointSet:
        """Surface points moved into the map frame by the node pose."""
        return transform_surface_points(self.surface_points, self.pose)

    def with_pose(self, pose: Pose2) -> Keyframe:
        return Keyframe(self.id, pose, self.surface_points, self.timestamp)


@dataclass(frozen=True)
class FrameDiagnostic:
    frame: int
    time: float
    message: str


@dataclass(frozen=True)
class StepReport:
    """What happened to one scan: the registration outcome, if any, and whether it was flagged."""

    n_surface_points: int
    result: RegistrationResult | None = None
    flagged: bool = False
    new_keyframe: bool = False

    @property
    def n_correspondences(self) -> int:
        return self.result.n_correspondences if self.result else 0

    @property
    def iterations(self) -> int:
        return self.result.iterations if self.result else 0

    @property
    def converged(self) -> bool:
        return bool(self.result and self.result.converged)


@dataclass(frozen=True)
class OdometryState:
    last_pose: Pose2 = field(default_factory=Pose2.identity)
    last_time: float | None = None
    velocity: Velocity = field(default_factory=Velocity)
    keyframes: tuple[Keyframe, ...] = ()  # the submap, oldest first
    nodes: tuple[Keyframe, ...] = ()  # every keyframe ever created
    frame_count: int = 0
    diagnostics: tuple[FrameDiagnostic, ...] = ()
    last_report: StepReport | None = None
    # scan and detections of the first keyframe until the second scan has
    # supplied a velocity to preprocess it with
    first_scan: tuple[PolarScan, Detections] | None = None
    history: tuple[tuple[float, Pose2], ...] = ()  # recent (time, pose), newest last


BOOTSTRAP_PASSES = 4
BOOTSTRAP_TOL = 1e-3  # m/s and rad/s


def predict_pose(state, t: float) -> Pose2:
    """Constant-velocity extrapolation of ``state.last_pose`` to time ``t``."""
    if state.last_time is None:
        return state.last_pose
    dt = t - state.last_time
    if dt < 0:
        raise ValueError(f"prediction time {t} precedes the last update {state.last_time}")
    if state.velocity.is_zero() or dt == 0.0:
        return state.last_pose
    return state.last_pose.compose(integrate_twist(state.velocity, dt))


def push_history(history: tuple, t: float, pose: Pose2, cfg: PipelineConfig) -> tuple:
    """Append (t, pose), replacing an entry with the same time, and keep ``velocity_window`` entries."""
    if history and history[-1][0] == t:
        history = history[:-1]
    return (history + ((t, pose),))[-cfg.velocity_window:]


def estimate_velocity(state, t: float, pose: Pose2, cfg: PipelineConfig) -> Velocity:
    """Constant twist from the oldest pose in the history window to ``pose`` at ``t``."""
    history = state.history or ((state.last_time, state.last_pose),)
    t_ref, p_ref = history[0]
    return twist_between(p_ref, pose, t - t_ref)


def keyframe_trigger(current: Pose2, last_kf: Pose2, cfg: PipelineConfig) -> bool:
    d_trans, d_rot = pose_log_delta(last_kf, current)
    return d_trans > cfg.kf_dist or d_rot > cfg.kf_rot


def scan_surface_points(scan: PolarScan, v: Velocity, cfg: PipelineConfig,
                        detections: Detections | None = None) -> SurfacePointSet:
    """Preprocess ``scan`` with velocity ``v`` and extract its surface points.

    Pass ``detections`` (from :func:`detect`) to skip peak extraction when the
    same scan is processed again with another velocity.
    """
    dets = detect(scan, cfg) if detections is None else detections
    cloud = detections_to_cloud(dets, v, scan.scan_time, cfg)
    return compute_surface_points(cloud, cfg.grid_res, cfg.min_points)


def estimate_pose(live: SurfacePointSet, targets: Sequence[SurfacePointSet], init: Pose2,
                  cfg: PipelineConfig) -> tuple[Pose2, RegistrationResult | None, str | None]:
    """Register and fall back to ``init`` when registration fails; the third item is the failure reason."""
    try:
        res = register(live, targets, init, cfg)
    except RegistrationError as exc:
        return init, None, f"{type(exc).__name__}: {exc}"
    return res.pose, res, None


def track(state, scan: PolarScan, targets: Sequence[SurfacePointSet], cfg: PipelineConfig,
          detections: Detections | None = None):
    """Register ``scan`` from the constant-velocity prediction, then refine the velocity.

    The first pass preprocesses with the previous velocity. Each refinement
    pass re-preprocesses the scan with the twist implied by the new pose and
    registers again from that pose. Feeding the estimate back this way damps
    the pose/velocity oscillation that a one-pass update develops when the
    scene constrains one direction only weakly.

    Returns (pose, velocity, live surface points, registration result, failure reason).
    """
    t = scan.scan_time
    dets = detect(scan, cfg) if detections is None else detections
    live = scan_surface_points(scan, state.velocity, cfg, dets)
    init = predict_pose(state, t)
    pose, res, failure = estimate_pose(live, targets, init, cfg)
    if failure is not None:
        return init, state.velocity, live, None, failure
    dt = t - state.last_time if state.last_time is not None else 0.0
    if dt <= 0:
        return pose, state.velocity, live, res, None
    velocity = estimate_velocity(state, t, pose, cfg)
    for _ in range(cfg.velocity_passes):
        refined_live = scan_surface_points(scan, velocity, cfg, dets)
        refined, refined_res, failure = estimate_pose(refined_live, targets, pose, cfg)
        if failure is not None:
            break
        live, pose, res = refined_live, refined, refined_res
        velocity = estimate_velocity(state, t, pose, cfg)
    return pose, velocity, live, res, None


def _bootstrap(state: OdometryState, scan: PolarScan, cfg: PipelineConfig, dets: Detections):
    """Track the second scan while rebuilding the first keyframe with the estimated velocity.

    The first keyframe was preprocessed without any velocity, so a vehicle
    that is already moving smears it and biases the second registration.
    Each pass re-preprocesses the first scan with the current constant
    velocity estimate and tracks the second scan again against it.
    """
    first_scan, first_dets = state.first_scan
    kf0 = state.keyframes[0]
    result = track(state, scan, [kf0.map_points], cfg, dets)
    for _ in range(BOOTSTRAP_PASSES):
        pose, velocity, live, res, failure = result
        if failure is not None:
            break
        sp0 = scan_surface_points(first_scan, velocity, cfg, first_dets)
        if len(sp0) == 0:
            break
        kf0 = Keyframe(kf0.id, kf0.pose, sp0, kf0.timestamp)
        result = track(replace(state, velocity=velocity), scan, [kf0.map_points], cfg, dets)
        if result[4] is None and np.max(np.abs(np.subtract(result[1].as_tuple(), velocity.as_tuple()))) < BOOTSTRAP_TOL:
            break
    return kf0, result


def odometry_step(state: OdometryState, scan: PolarScan, cfg: PipelineConfig,
                  detections: Detections | None = None) -> tuple[Pose2, OdometryState]:
    """Estimate the pose of ``scan`` (its sweep-start sensor pose) and advance the state.

    ``detections``, if given, must be ``detect(scan, cfg)``.
    """
    t = scan.scan_time
    frame = state.frame_count

    if not state.keyframes:
        dets = detect(scan, cfg) if detections is None else detections
        live = scan_surface_points(scan, state.velocity, cfg, dets)
        pose = predict_pose(state, t)
        if len(live) == 0:
            diag = FrameDiagnostic(frame, t, "no surface points for the first keyframe")
            log.warning("frame %d: %s", frame, diag.message)
            return pose, replace(state, last_pose=pose, last_time=t, frame_count=frame + 1,
                                 history=push_history(state.history, t, pose, cfg),
                                 diagnostics=state.diagnostics + (diag,),
                                 last_report=StepReport(0, flagged=True))
        kf = Keyframe(len(state.nodes), pose, live, t)
        first = (scan, dets) if state.velocity.is_zero() else None
        return pose, replace(state, last_pose=pose, last_time=t, keyframes=(kf,), nodes=state.nodes + (kf,),
                             frame_count=frame + 1, last_report=StepReport(len(live), new_keyframe=True),
                             first_scan=first, history=push_history(state.history, t, pose, cfg))

    if state.first_scan is not None and t > state.last_time:
        dets = detect(scan, cfg) if detections is None else detections
        kf0, (pose, velocity, live, res, failure) = _bootstrap(state, scan, cfg, dets)
        state = replace(state, keyframes=(kf0,), nodes=state.nodes[:-1] + (kf0,))
    else:
        targets = [kf.map_points for kf in state.keyframes]
        pose, velocity, live, res, failure = track(state, scan, targets, cfg, detections)
    diagnostics = state.diagnostics
    if failure is not None:
        log.warning("frame %d: registration failed (%s); keeping the prediction", frame, failure)
        diagnostics += (FrameDiagnostic(frame, t, failure),)

    keyframes, nodes = state.keyframes, state.nodes
    new_kf = len(live) > 0 and keyframe_trigger(pose, keyframes[-1].pose, cfg)
    if new_kf:
        kf = Keyframe(len(nodes), pose, live, t)
        nodes = nodes + (kf,)
        keyframes = (keyframes + (kf,))[-cfg.s_o:]
    report = StepReport(len(live), res, failure is not None, new_kf)
    return pose, OdometryState(pose, t, velocity, keyframes, nodes, frame + 1, diagnostics, report,
                               history=push_history(state.history, t, pose, cfg))


@dataclass
class TeachRun:
    times: np.ndarray
    poses: np.ndarray  # (N, 3) x, y, theta
    state: OdometryState
    reports: list[StepReport]


def run_teach(scans: Iterable[PolarScan], cfg: PipelineConfig, timer=None,
              detections: Iterable[Detections] | None = None) -> TeachRun:
    """Run odometry over ``scans`` in order.

    ``timer``, if given, is called with each step's duration. ``detections``
    may supply precomputed ``detect`` output per scan.
    """
    state = OdometryState()
    times, poses, reports = [], [], []
    dets = iter(detections) if detections is not None else None
    for scan in scans:
        d = next(dets) if dets is not None else None
        t0 = time.perf_counter()
        pose, state = odometry_step(state, scan, cfg, d)
        if timer is not None:
            timer(time.perf_counter() - t0)
        times.append(scan.scan_time)
        poses.append(pose.as_tuple())
        reports.append(state.last_report)
    return TeachRun(np.array(times), np.array(poses).reshape(-1, 3), state, reports)


def trajectory_csv(times: np.ndarray, poses: np.ndarray) -> str:
    """Trajectory stream with columns time, x, y, theta."""
    lines = ["time,x,y,theta"]
    for t, (x, y, th) in zip(times, poses):
        lines.append(f"{float(t)!r},{float(x)!r},{float(y)!r},{float(th)!r}")
    return "\n".join(lines) + "\n"
