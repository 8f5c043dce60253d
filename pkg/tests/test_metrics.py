import math

import numpy as np
import pytest

from radar_tr.metrics import (MetricsInputError, error_histogram, errors_csv, histogram_csv, kitti_drift,
                              localization_rmse, read_errors_csv, read_trajectory_csv)


def winding_path(n: int = 600, step: float = 1.0, seed: int = 30) -> np.ndarray:
    rng = np.random.default_rng(seed)
    th = np.cumsum(rng.normal(0.0, 0.03, n))
    xy = np.cumsum(step * np.column_stack([np.cos(th), np.sin(th)]), axis=0)
    return np.column_stack([xy, np.angle(np.exp(1j * th))])


def test_identical_trajectories_have_zero_drift():
    gt = winding_path()
    r = kitti_drift(gt, gt)
    assert (r.translation_drift, r.rotation_drift) == (0.0, 0.0)
    assert [d.length for d in r.per_length] == [100.0 * k for k in range(1, 6)]


def test_rigidly_rotated_estimate_has_zero_drift():
    gt = winding_path()
    c, s = math.cos(0.3), math.sin(0.3)
    est = np.column_stack([c * gt[:, 0] - s * gt[:, 1] + 4.0, s * gt[:, 0] + c * gt[:, 1] - 2.0,
                           np.angle(np.exp(1j * (gt[:, 2] + 0.3)))])
    r = kitti_drift(est, gt)
    assert r.translation_drift == pytest.approx(0.0, abs=1e-10)
    assert r.rotation_drift == pytest.approx(0.0, abs=1e-10)


def test_short_path_gives_empty_report():
    gt = winding_path(50)
    r = kitti_drift(gt, gt)
    assert r.per_length == () and r.translation_drift == 0.0


def test_drift_input_checks():
    gt = winding_path(10)
    with pytest.raises(MetricsInputError, match="length"):
        kitti_drift(gt[:-1], gt)
    t = np.arange(10) * 0.25
    with pytest.raises(MetricsInputError, match="frame 3"):
        kitti_drift(gt, gt, t, np.where(np.arange(10) == 3, t + 0.1, t))


def test_rmse_examples():
    r = localization_rmse(np.zeros((5, 3)))
    assert (r.longitudinal_rmse, r.lateral_rmse, r.heading_rmse, r.overall, r.n_frames) == (0, 0, 0, 0, 5)
    assert localization_rmse([(0.3, 0.4, 0.0)]).overall == pytest.approx(0.5)
    with pytest.raises(MetricsInputError):
        localization_rmse(np.zeros((0, 3)))


def test_rmse_hand_oracle():
    # long: sqrt(0.18 / 3), lat: sqrt(0.32 / 3), heading: sqrt(2 / 3) deg, overall: sqrt(0.5 / 3)
    errors = [(0.3, 0.4, math.radians(1.0)), (-0.3, -0.4, math.radians(-1.0)), (0.0, 0.0, 0.0)]
    r = localization_rmse(errors)
    assert r.longitudinal_rmse == pytest.approx(0.2449, abs=5e-5)
    assert r.lateral_rmse == pytest.approx(0.3266, abs=5e-5)
    assert r.heading_rmse == pytest.approx(0.8165, abs=5e-5)
    assert r.overall == pytest.approx(0.4082, abs=5e-5)


def test_rmse_matches_one_line_oracle_and_is_permutation_invariant():
    rng = np.random.default_rng(31)
    e = rng.normal(0, [0.05, 0.02, 0.01], (300, 3))
    r = localization_rmse(e)
    assert r.longitudinal_rmse == pytest.approx(math.sqrt(sum(v * v for v in e[:, 0]) / 300), rel=1e-12)
    assert r.heading_rmse == pytest.approx(math.degrees(math.sqrt(sum(v * v for v in e[:, 2]) / 300)), rel=1e-12)
    assert r.overall >= max(r.longitudinal_rmse, r.lateral_rmse)
    p = localization_rmse(e[rng.permutation(300)])
    assert p.overall == pytest.approx(r.overall, rel=1e-12)


def test_histogram_examples():
    h = error_histogram([(0.03, -0.01, math.radians(0.2))], 0.05)
    assert all(list(c) == [1] for c in h.counts.values())
    assert h.lows["longitudinal"][0] == 0.0 and h.lows["lateral"][0] == -0.05
    sym = np.array([(0.12, 0.07, 0.0), (-0.12, -0.07, 0.0)])
    h = error_histogram(sym, 0.05)
    assert list(h.counts["longitudinal"]) == list(h.counts["longitudinal"][::-1])
    with pytest.raises(ValueError):
        error_histogram(sym, 0.0)


def test_histogram_mean_of_gaussian_errors():
    rng = np.random.default_rng(32)
    sigma, n, w = 0.05, 5000, 0.01
    e = np.column_stack([rng.normal(0.02, sigma, n), np.zeros(n), np.zeros(n)])
    h = error_histogram(e, w)
    centers = h.lows["longitudinal"] + w / 2
    mean = float(np.sum(centers * h.counts["longitudinal"]) / n)
    # binning moves each sample by at most w / 2, on average by far less
    assert abs(mean - e[:, 0].mean()) < 3 * sigma / math.sqrt(n)
    rows = histogram_csv(h).splitlines()
    assert rows[0] == "component,bin_low,bin_high,count"
    assert sum(int(r.split(",")[3]) for r in rows[1:] if r.startswith("longitudinal")) == n


def test_csv_readers():
    e = np.array([(0.1, -0.2, math.radians(0.5)), (0.0, 0.3, -0.01)])
    back = read_errors_csv(errors_csv([0.0, 0.25], [0, 1], e))
    assert np.allclose(back, e, rtol=1e-14, atol=1e-15)
    with pytest.raises(MetricsInputError, match=":3:"):
        read_errors_csv("longitudinal,lateral,heading_deg\n0.1,0.2,0.3\n0.1,abc,0.3\n")
    with pytest.raises(MetricsInputError, match=":2:"):
        read_errors_csv("longitudinal,lateral,heading_deg\n0.1,0.2\n")
    with pytest.raises(MetricsInputError, match="heading"):
        read_errors_csv("longitudinal,lateral\n0.1,0.2\n")
    t, poses = read_trajectory_csv("# gt\ntime,x,y,theta,extra\n0,1,2,0.1,x\n0.25,2,2,0.2,y\n")
    assert list(t) == [0.0, 0.25] and poses[1].tolist() == [2.0, 2.0, 0.2]
    with pytest.raises(MetricsInputError, match="theta"):
        read_trajectory_csv("time,x,y\n0,0,0\n")
    with pytest.raises(MetricsInputError, match="empty"):
        read_trajectory_csv("")
