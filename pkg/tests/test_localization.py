import math
import warnings

import numpy as np
import pytest

from radar_tr.config import PipelineConfig
from radar_tr.geometry import Pose2
from radar_tr.localization import (LiveWindowWarning, closest_node, initialize, localization_error,
                                   relative_error, run_repeat, select_map_frames)
from radar_tr.map_store import TeachGraph
from radar_tr.metrics import localization_rmse
from radar_tr.odometry import Keyframe
from radar_tr.sim import change_world, ground_truth_velocity, simulate_sequence
from radar_tr.surface_points import SurfacePointSet

CFG = PipelineConfig()


def line_graph(n: int, spacing: float = 1.5) -> TeachGraph:
    return TeachGraph(tuple(Keyframe(i, Pose2(i * spacing, 0.0, 0.0), SurfacePointSet.empty(), float(i))
                            for i in range(n)))


def test_closest_node_examples():
    g = line_graph(20)
    assert closest_node(g, Pose2(7 * 1.5, 0.0, 1.0)) == 7
    assert closest_node(g, Pose2(3.5 * 1.5, 0.0, 0.0)) == 3


def test_closest_node_matches_linear_scan():
    rng = np.random.default_rng(14)
    pts = np.cumsum(rng.normal(0.0, 1.5, (500, 2)), axis=0)
    g = TeachGraph(tuple(Keyframe(i, Pose2(*p, 0.0), SurfacePointSet.empty(), float(i)) for i, p in enumerate(pts)))
    for _ in range(200):
        q = Pose2(*rng.uniform(pts.min(0), pts.max(0)), 0.0)
        dists = [math.hypot(q.x - p[0], q.y - p[1]) for p in pts]
        assert closest_node(g, q) == int(np.argmin(dists))


def test_select_map_frames_examples():
    g = line_graph(500)
    assert [kf.id for kf in select_map_frames(g, 10, 1)] == [10]
    assert [kf.id for kf in select_map_frames(g, 10, 5)] == [8, 9, 10, 11, 12]
    assert [kf.id for kf in select_map_frames(g, 0, 5)] == [0, 1, 2]
    assert [kf.id for kf in select_map_frames(g, 499, 5)] == [497, 498, 499]
    with pytest.raises(ValueError):
        select_map_frames(g, 10, 4)


def test_initialize_examples():
    g = line_graph(10)
    assert initialize(g, g[0].pose).current_node == 0
    offset = Pose2(-1.0, 0.3, 0.1)
    state = initialize(g, offset)
    assert state.current_node == 0 and state.pose == offset
    assert initialize(g, Pose2(100.0, 0.0, 0.0)).current_node == 9
    with pytest.raises(ValueError):
        initialize(TeachGraph(()), Pose2())
    with pytest.warns(LiveWindowWarning):
        initialize(g, Pose2(), cfg=CFG.replace(s_m=1))


def test_localization_error_examples():
    node = Pose2(5.0, -3.0, 0.8)
    assert localization_error(node, node) == pytest.approx((0.0, 0.0, 0.0), abs=1e-15)
    ahead = node.compose(Pose2(0.1, 0.0, 0.0))
    assert tuple(localization_error(ahead, node)) == pytest.approx((0.1, 0.0, 0.0), abs=1e-15)
    rng = np.random.default_rng(15)
    for _ in range(20):
        a, b = Pose2(*rng.normal(size=3)), Pose2(*rng.normal(size=3))
        m = np.linalg.inv(b.matrix()) @ a.matrix()
        expected = (m[0, 2], m[1, 2], math.atan2(m[1, 0], m[0, 0]))
        assert tuple(localization_error(a, b)) == pytest.approx(expected, abs=1e-12)


def test_relative_error_is_zero_for_perfect_estimates():
    g = Pose2(3.0, 4.0, 1.0)
    node, live = Pose2(1.0, 2.0, 0.3), Pose2(1.5, 2.2, 0.35)
    # estimates in a frame rotated and shifted by g still agree with ground truth
    e = relative_error(g.compose(live), g.compose(node), live, node)
    assert tuple(e) == pytest.approx((0.0, 0.0, 0.0), abs=1e-12)


def corridor_repeat(corridor, graph, scans, cfg=CFG):
    _, traj, _ = corridor
    run = run_repeat(graph, scans, traj.pose(0), cfg, first_velocity=ground_truth_velocity(traj, 0))
    errors = np.array([relative_error(Pose2(*run.poses[i]), graph[n].pose, traj.pose(i), traj(graph[n].timestamp))
                       for i, n in enumerate(run.nodes)])
    return run, errors


def self_localization_errors(corridor, corridor_teach, corridor_scans):
    _, graph = corridor_teach
    run, errors = corridor_repeat(corridor, graph, corridor_scans)
    assert np.array_equal(run.nodes, np.arange(len(graph)))
    return np.abs(errors)


TOL = np.array([0.02, 0.02, math.radians(0.2)])


def test_self_localization_after_first_frame(corridor, corridor_teach, corridor_scans):
    errors = self_localization_errors(corridor, corridor_teach, corridor_scans)
    assert np.all(errors[1:] < TOL)


@pytest.mark.xfail(strict=True, reason="frame 0 registers against nodes 0-2 only, and the teach map's first"
                                       " increment (two single scans) carries a 4.7 cm along-track error;"
                                       " frame 0 lands 2.3 cm off (see decisions ledger)")
def test_self_localization_every_frame(corridor, corridor_teach, corridor_scans):
    errors = self_localization_errors(corridor, corridor_teach, corridor_scans)
    assert np.all(errors < TOL)


def test_changed_corridor_lateral_rmse(corridor, corridor_teach):
    world, traj, sim = corridor
    changed = change_world(world, 0.3, 10, seed=11, keep_clear=traj.poses, clearance=3.0)
    scans, _ = simulate_sequence(changed, traj, sim)
    _, errors = corridor_repeat(corridor, corridor_teach[1], scans)
    assert localization_rmse(errors).lateral_rmse < 0.10


def test_map_only_mode_keeps_no_live_frames(corridor, corridor_teach, corridor_scans):
    run, _ = corridor_repeat(corridor, corridor_teach[1], corridor_scans[:8], CFG.replace(s_l=0))
    assert run.state.live_frames == ()
    run, _ = corridor_repeat(corridor, corridor_teach[1], corridor_scans[:8])
    assert 0 < len(run.state.live_frames) <= CFG.s_l


def test_repeat_errors_are_node_offsets(corridor, corridor_teach, corridor_scans):
    _, graph = corridor_teach
    run, _ = corridor_repeat(corridor, graph, corridor_scans[:5])
    for pose, node, err in zip(run.poses, run.nodes, run.errors):
        assert tuple(err) == pytest.approx(tuple(localization_error(Pose2(*pose), graph[node])), abs=1e-15)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        initialize(graph, Pose2(), cfg=CFG)
