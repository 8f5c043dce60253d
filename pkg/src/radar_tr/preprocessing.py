"""Polar radar sweep to deskewed Cartesian point cloud.

Stages: per-azimuth k-strongest peak extraction, Doppler and static range
correction during the polar-to-Cartesian mapping, and constant-velocity
motion compensation to the scan reference time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .config import PipelineConfig
from .geometry import Velocity, se2_exp_many


@dataclass(frozen=True, eq=False)
class PolarScan:
    """One radar revolution.

    ``intensities`` is an (n_azimuth, n_range) float32 matrix; ``encoder_angles``
    holds the measured antenna angle of every azimuth row and ``azimuth_times``
    the acquisition time of that row. ``scan_time`` is the reference timestamp
    (the sweep start).
    """

    intensities: np.ndarray
    encoder_angles: np.ndarray
    azimuth_times: np.ndarray
    scan_time: float
    gamma: float = 0.0596

    def __post_init__(self):
        z = np.ascontiguousarray(self.intensities, dtype=np.float32)
        if z.ndim != 2:
            raise ValueError("intensities must be a 2-D matrix")
        angles = np.ascontiguousarray(self.encoder_angles, dtype=np.float64)
        times = np.ascontiguousarray(self.azimuth_times, dtype=np.float64)
        if angles.shape != (z.shape[0],) or times.shape != (z.shape[0],):
            raise ValueError("encoder_angles and azimuth_times need one entry per azimuth row")
        object.__setattr__(self, "intensities", z)
        object.__setattr__(self, "encoder_angles", angles)
        object.__setattr__(self, "azimuth_times", times)
        object.__setattr__(self, "scan_time", float(self.scan_time))
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_azimuth(self) -> int:
        return self.intensities.shape[0]

    @property
    def n_range(self) -> int:
        return self.intensities.shape[1]

    def uniform_angles(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.n_azimuth) / self.n_azimuth

    def same_as(self, other: PolarScan) -> bool:
        return (
            self.scan_time == other.scan_time
            and self.gamma == other.gamma
            and np.array_equal(self.encoder_angles, other.encoder_angles)
            and np.array_equal(self.azimuth_times, other.azimuth_times)
            and np.array_equal(self.intensities, other.intensities)
        )


class PolarDetection(NamedTuple):
    azimuth_index: int
    range_index: int
    intensity: float
    theta_a: float
    time: float


@dataclass(frozen=True, eq=False)
class Detections:
    """Column-wise container of :class:`PolarDetection` records, sorted by (azimuth, range)."""

    azimuth_index: np.ndarray
    range_index: np.ndarray
    intensity: np.ndarray
    theta_a: np.ndarray
    time: np.ndarray

    def __len__(self) -> int:
        return len(self.range_index)

    def __getitem__(self, i: int) -> PolarDetection:
        return PolarDetection(
            int(self.azimuth_index[i]),
            int(self.range_index[i]),
            float(self.intensity[i]),
            float(self.theta_a[i]),
            float(self.time[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def with_angles(self, theta_a: np.ndarray) -> Detections:
        return Detections(self.azimuth_index, self.range_index, self.intensity, theta_a, self.time)


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray  # (N, 2)
    times: np.ndarray
    intensities: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 2)
        times = np.asarray(self.times, dtype=float).reshape(-1)
        inten = np.asarray(self.intensities, dtype=float).reshape(-1)
        if not (len(pts) == len(times) == len(inten)):
            raise ValueError("points, times and intensities must have equal length")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "intensities", inten)

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls) -> PointCloud:
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros(0))


def k_strongest_filter(scan: PolarScan, k: int, z_min: float) -> Detections:
    """Keep, per azimuth, the ``k`` highest returns whose intensity exceeds ``z_min``.

    Equal intensities are resolved in favour of the smaller range index.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    z = scan.intensities
    az, rg = np.nonzero(z > z_min)
    counts = np.bincount(az, minlength=scan.n_azimuth)
    if np.any(counts > k):
        # rank candidates within their azimuth by intensity, then by range index
        val = z[az, rg]
        order = np.lexsort((rg, -val, az))
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        rank = np.arange(len(order)) - starts[az[order]]
        keep = np.sort(order[rank < k])
        az, rg = az[keep], rg[keep]
    return Detections(
        azimuth_index=az,
        range_index=rg,
        intensity=z[az, rg].astype(np.float64),
        theta_a=scan.encoder_angles[az],
        time=scan.azimuth_times[az],
    )


def doppler_offset(v: Velocity, theta_a, beta: float):
    """Velocity-dependent range offset ``beta * (vx cos(theta) + vy sin(theta))``."""
    return beta * (v.vx * np.cos(theta_a) + v.vy * np.sin(theta_a))


def polar_to_cartesian(detections: Detections, v: Velocity, cfg: PipelineConfig) -> PointCloud:
    """Map detections to Cartesian points with Doppler and static range correction.

    Detections whose corrected range is not positive are dropped.
    """
    if cfg.gamma <= 0:
        raise ValueError("gamma must be > 0")
    theta = np.asarray(detections.theta_a, dtype=float)
    rng = detections.range_index * cfg.gamma
    if cfg.doppler and cfg.beta != 0.0:
        rng = rng + doppler_offset(v, theta, cfg.beta)
    if cfg.range_offset:
        rng = rng + cfg.dr_r
    ok = rng > 0.0
    rng, theta = rng[ok], theta[ok]
    pts = np.column_stack([rng * np.cos(theta), rng * np.sin(theta)])
    return PointCloud(pts, np.asarray(detections.time)[ok], np.asarray(detections.intensity)[ok])


def motion_compensate(cloud: PointCloud, v: Velocity, ref_time: float) -> PointCloud:
    """Re-express every point in the sensor frame at ``ref_time`` assuming constant twist ``v``."""
    if v.is_zero() or len(cloud) == 0:
        return cloud
    dt = cloud.times - ref_time
    incr = se2_exp_many(v.vx * dt, v.vy * dt, v.omega * dt)
    c, s = np.cos(incr[:, 2]), np.sin(incr[:, 2])
    px, py = cloud.points[:, 0], cloud.points[:, 1]
    pts = np.column_stack([c * px - s * py + incr[:, 0], s * px + c * py + incr[:, 1]])
    return PointCloud(pts, cloud.times, cloud.intensities)


def detect(scan: PolarScan, cfg: PipelineConfig) -> Detections:
    """The velocity-independent part of preprocessing: peak extraction and angle choice.

    ``cfg.encoder = False`` replaces the measured antenna angles with uniform
    spacing ``2*pi*a/N_a``.
    """
    dets = k_strongest_filter(scan, cfg.k, cfg.z_min)
    if not cfg.encoder:
        dets = dets.with_angles(scan.uniform_angles()[dets.azimuth_index])
    return dets


def detections_to_cloud(dets: Detections, v: Velocity, scan_time: float, cfg: PipelineConfig) -> PointCloud:
    cloud = polar_to_cartesian(dets, v, cfg)
    if cfg.motion_comp:
        cloud = motion_compensate(cloud, v, scan_time)
    return cloud


def preprocess(scan: PolarScan, v: Velocity, cfg: PipelineConfig) -> PointCloud:
    """Full chain: k-strongest, polar-to-Cartesian, motion compensation.

    The ``doppler``, ``range_offset``, ``encoder`` and ``motion_comp`` switches
    of ``cfg`` drop the matching correction.
    """
    return detections_to_cloud(detect(scan, cfg), v, scan.scan_time, cfg)
