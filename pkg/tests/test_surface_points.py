import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radar_tr.config import PipelineConfig
from radar_tr.geometry import Pose2, Velocity
from radar_tr.odometry import scan_surface_points
from radar_tr.preprocessing import PointCloud
from radar_tr.sim import SimConfig, World, render_scan
from radar_tr.surface_points import compute_surface_points, transform_surface_points
from support import random_surface_points


def cloud(points) -> PointCloud:
    points = np.asarray(points, dtype=float)
    return PointCloud(points, np.zeros(len(points)), np.ones(len(points)))


def test_collinear_points_give_vertical_normal():
    xs = np.linspace(10.0, 10.9, 20)
    sps = compute_surface_points(cloud(np.column_stack([xs, np.full(20, 5.2)])), 1.0, 6)
    assert len(sps) == 1
    assert abs(sps.normals[0, 0]) < 1e-9 and abs(abs(sps.normals[0, 1]) - 1.0) < 1e-9
    assert np.linalg.eigvalsh(sps.covs[0])[0] == pytest.approx(0.0, abs=1e-5)


def test_ring_normals_point_inward():
    ang = np.linspace(0, 2 * np.pi, 2000, endpoint=False)
    sps = compute_surface_points(cloud(10.0 * np.column_stack([np.cos(ang), np.sin(ang)])), 3.0, 6)
    assert len(sps) > 10
    inward = -sps.means / np.linalg.norm(sps.means, axis=1, keepdims=True)
    cosines = np.einsum("ij,ij->i", sps.normals, inward)
    assert np.all(cosines > math.cos(math.radians(10.0)))


def test_sparse_cloud_gives_empty_set():
    pts = [[i * 5.0 + d, 0.0] for i in range(10) for d in (0.0, 0.1)]
    assert len(compute_surface_points(cloud(pts), 1.0, 6)) == 0


def test_invariants_on_random_clouds():
    rng = np.random.default_rng(12)
    for _ in range(20):
        pts = rng.normal(0.0, 8.0, (400, 2)) + 20.0
        sps = compute_surface_points(cloud(pts), 1.5, 6)
        occupied = len({tuple(c) for c in np.floor(pts / 1.5).astype(int)})
        assert len(sps) <= occupied
        assert np.allclose(np.linalg.norm(sps.normals, axis=1), 1.0, atol=1e-9)
        assert np.allclose(sps.covs, np.transpose(sps.covs, (0, 2, 1)))
        assert np.all(np.linalg.eigvalsh(sps.covs) >= 0.0)
        assert np.all(sps.n_samples >= 6)
        # normals face the sensor at the origin
        assert np.all(np.einsum("ij,ij->i", sps.normals, -sps.means) >= 0.0)


def test_straight_wall_normals():
    world = World(segments=[[-40.0, 8.0, 40.0, 8.0]])
    scan = render_scan(world, lambda t: Pose2(), 0.0, SimConfig(inject_range_bias=0.31))
    sps = scan_surface_points(scan, Velocity(), PipelineConfig())
    assert len(sps) > 10
    cosines = np.abs(sps.normals @ np.array([0.0, 1.0]))
    assert np.mean(cosines > math.cos(math.radians(5.0))) > 0.95


def test_transform_examples_and_matrix_oracle():
    rng = np.random.default_rng(13)
    s = random_surface_points(rng, 30)
    assert transform_surface_points(s, Pose2()) is s
    one = random_surface_points(rng, 1)
    one = type(one)([[1.0, 0.0]], [[1.0, 0.0]], one.covs, one.n_samples)
    assert transform_surface_points(one, Pose2(0, 0, math.pi / 2)).normals[0] == pytest.approx([0.0, 1.0], abs=1e-15)
    pose = Pose2(3.0, -4.0, 0.9)
    moved = transform_surface_points(s, pose)
    H = pose.matrix()
    expected = (H @ np.column_stack([s.means, np.ones(len(s))]).T).T[:, :2]
    assert np.allclose(moved.means, expected, atol=1e-12)
    assert moved.origin_pose.as_tuple() == pose.as_tuple()


@settings(max_examples=200)
@given(st.floats(-math.pi, math.pi), st.floats(-100, 100), st.floats(-100, 100), st.integers(0, 2**32 - 1))
def test_transform_preserves_covariance_eigenvalues(theta, x, y, seed):
    s = random_surface_points(np.random.default_rng(seed), 5)
    moved = transform_surface_points(s, Pose2(x, y, theta))
    assert np.allclose(np.linalg.eigvalsh(moved.covs), np.linalg.eigvalsh(s.covs), rtol=1e-9, atol=1e-15)
    assert np.allclose(np.linalg.norm(moved.normals, axis=1), 1.0)


def test_rejects_bad_parameters():
    with pytest.raises(ValueError):
        compute_surface_points(cloud([[0.0, 0.0]] * 10), 0.0, 6)
    with pytest.raises(ValueError):
        compute_surface_points(cloud([[0.0, 0.0]] * 10), 1.0, 2)
