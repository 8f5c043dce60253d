"""Repeat-pass localization against a teach map.

Each scan is registered jointly against the map keyframes around the closest
teach node and a short window of recent live keyframes. The map keeps the
estimate anchored; the live frames help where the scene has changed since the
teach pass.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, NamedTuple

import numpy as np

from .config import PipelineConfig
from .geometry import Pose2, Velocity
from .map_store import TeachGraph
from .odometry import (FrameDiagnostic, Keyframe, StepReport, keyframe_trigger, predict_pose,
                       push_history, track)
from .preprocessing import Detections, PolarScan

log = logging.getLogger(__name__)


class LocalizationError(NamedTuple):
    """Live pose relative to a teach node, in the node's frame."""

    longitudinal: float
    lateral: float
    heading: float  # radians


class LiveWindowWarning(UserWarning):
    pass


@dataclass(frozen=True)
class LocalizationState:
    graph: TeachGraph
    current_node: int
    pose: Pose2
    velocity: Velocity = field(default_factory=Velocity)
    last_time: float | None = None
    live_frames: tuple[Keyframe, ...] = ()  # oldest first
    frame_count: int = 0
    diagnostics: tuple[FrameDiagnostic, ...] = ()
    last_report: StepReport | None = None
    history: tuple[tuple[float, Pose2], ...] = ()  # recent (time, pose), newest last

    @property
    def last_pose(self) -> Pose2:
        return self.pose


def closest_node(graph: TeachGraph, pose: Pose2) -> int:
    """Id of the node nearest to ``pose`` by position; the lower id wins a tie."""
    if len(graph) == 0:
        raise ValueError("graph has no nodes")
    d = graph.positions - np.array([pose.x, pose.y])
    return int(np.argmin(np.einsum("ij,ij->i", d, d)))


def select_map_frames(graph: TeachGraph, center: int, s_m: int) -> list[Keyframe]:
    """``center`` and up to (s_m - 1) / 2 neighbours on either side, clipped at the graph ends."""
    if s_m < 1 or s_m % 2 == 0:
        raise ValueError(f"s_m must be odd and >= 1, got {s_m}")
    half = s_m // 2
    lo, hi = max(0, center - half), min(len(graph) - 1, center + half)
    return list(graph.nodes[lo:hi + 1])


def initialize(graph: TeachGraph, first_pose: Pose2, t: float | None = None,
               cfg: PipelineConfig | None = None, velocity: Velocity | None = None) -> LocalizationState:
    """Start localizing at ``first_pose``; ``velocity`` is the body twist at that time if known."""
    if len(graph) == 0:
        raise ValueError("cannot localize against an empty graph")
    if cfg is not None and cfg.s_l > cfg.s_m:
        warnings.warn(f"s_l={cfg.s_l} exceeds s_m={cfg.s_m}: the estimate may lean on drifting live frames",
                      LiveWindowWarning, stacklevel=2)
    history = ((t, first_pose),) if t is not None else ()
    return LocalizationState(graph, closest_node(graph, first_pose), first_pose, velocity or Velocity(), t,
                             history=history)


def localization_error(est: Pose2, node: Keyframe | Pose2) -> LocalizationError:
    node_pose = node.pose if isinstance(node, Keyframe) else node
    r = node_pose.inverse().compose(est)
    return LocalizationError(r.x, r.y, r.theta)


def relative_error(est: Pose2, node_est: Pose2, live_gt: Pose2, node_gt: Pose2) -> LocalizationError:
    """Error of the estimated node-to-live transform against its ground-truth counterpart."""
    r_est = node_est.inverse().compose(est)
    r_gt = node_gt.inverse().compose(live_gt)
    e = r_gt.inverse().compose(r_est)
    return LocalizationError(e.x, e.y, e.theta)


def localize_step(state: LocalizationState, scan: PolarScan, cfg: PipelineConfig,
                  detections: Detections | None = None) -> tuple[Pose2, LocalizationState]:
    t = scan.scan_time
    frame = state.frame_count
    center = closest_node(state.graph, predict_pose(state, t))
    targets = [kf.map_points for kf in select_map_frames(state.graph, center, cfg.s_m)]
    targets += [kf.map_points for kf in state.live_frames]
    pose, velocity, live, res, failure = track(state, scan, targets, cfg, detections)

    diagnostics = state.diagnostics
    if failure is not None:
        log.warning("frame %d: registration failed (%s); keeping the prediction", frame, failure)
        diagnostics += (FrameDiagnostic(frame, t, failure),)

    live_frames = state.live_frames
    new_kf = False
    if cfg.s_l > 0 and len(live) > 0 and failure is None:
        if not live_frames or keyframe_trigger(pose, live_frames[-1].pose, cfg):
            live_frames = (live_frames + (Keyframe(frame, pose, live, t),))[-cfg.s_l:]
            new_kf = True

    report = StepReport(len(live), res, failure is not None, new_kf)
    return pose, replace(state, current_node=closest_node(state.graph, pose), pose=pose, velocity=velocity,
                         last_time=t, live_frames=live_frames, frame_count=frame + 1,
                         diagnostics=diagnostics, last_report=report,
                         history=push_history(state.history, t, pose, cfg))


@dataclass
class RepeatRun:
    times: np.ndarray
    poses: np.ndarray  # (N, 3) estimates in the map frame
    nodes: np.ndarray  # closest node per frame
    errors: np.ndarray  # (N, 3) longitudinal, lateral, heading relative to that node
    reports: list[StepReport]
    state: LocalizationState


def run_repeat(graph: TeachGraph, scans: Iterable[PolarScan], first_pose: Pose2, cfg: PipelineConfig,
               timer=None, detections: Iterable[Detections] | None = None,
               first_velocity: Velocity | None = None) -> RepeatRun:
    """Localize every scan in order, starting from ``first_pose`` at the first scan's time.

    Without ``first_velocity`` the vehicle is assumed to start at rest.

    ``errors`` holds each estimate relative to its closest node.
    """
    state = None
    times, poses, nodes, errors, reports = [], [], [], [], []
    dets = iter(detections) if detections is not None else None
    for scan in scans:
        d = next(dets) if dets is not None else None
        if state is None:
            state = initialize(graph, first_pose, scan.scan_time, cfg, first_velocity)
        t0 = time.perf_counter()
        pose, state = localize_step(state, scan, cfg, d)
        if timer is not None:
            timer(time.perf_counter() - t0)
        times.append(scan.scan_time)
        poses.append(pose.as_tuple())
        nodes.append(state.current_node)
        errors.append(tuple(localization_error(pose, graph[state.current_node])))
        reports.append(state.last_report)
    return RepeatRun(np.array(times), np.array(poses).reshape(-1, 3), np.array(nodes, dtype=np.int64),
                     np.array(errors).reshape(-1, 3), reports, state)
