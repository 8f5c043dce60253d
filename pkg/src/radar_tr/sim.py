"""Deterministic spinning-radar simulator.

Worlds are 2-D: wall segments plus circular scatterers (poles, trees, parked
objects; radius 0 gives a point reflector). Each azimuth casts one ray from
the sensor pose at that azimuth's acquisition time and records the first hit.

Distortion conventions, chosen so that the preprocessing corrections cancel
them exactly:

* range bias: a hit at true range ``r`` is reported at ``r + inject_range_bias``
  (undone by ``dr_r = -inject_range_bias``);
* Doppler: the reported range is reduced by ``inject_beta * (vx cos a + vy sin a)``
  using the true body velocity (undone by ``beta = inject_beta``);
* encoder: the antenna angle of azimuth ``a`` deviates from uniform spacing by
  ``encoder_jitter * sin(2 pi a / N_a + phase)`` with a per-scan random phase.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .geometry import Pose2, Velocity, se2_exp_many, se2_log, wrap_angles
from .preprocessing import PolarScan


@dataclass
class World:
    segments: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))  # x0, y0, x1, y1
    segment_reflectivity: np.ndarray = field(default_factory=lambda: np.zeros(0))
    scatterers: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))  # x, y, radius, reflectivity
    rng_seed: int = 0

    def __post_init__(self):
        self.segments = np.asarray(self.segments, dtype=float).reshape(-1, 4)
        refl = np.asarray(self.segment_reflectivity, dtype=float).reshape(-1)
        if refl.size == 0 and len(self.segments):
            refl = np.ones(len(self.segments))
        self.segment_reflectivity = refl
        self.scatterers = np.asarray(self.scatterers, dtype=float).reshape(-1, 4)
        self.rng_seed = int(self.rng_seed)
        if len(self.segment_reflectivity) != len(self.segments):
            raise ValueError("one reflectivity per segment required")
        if not (np.all(np.isfinite(self.segments)) and np.all(np.isfinite(self.scatterers))):
            raise ValueError("world geometry must be finite")
        if np.any(self.scatterers[:, 2] < 0):
            raise ValueError("scatterer radius must be >= 0")

    def to_json(self) -> str:
        return json.dumps({
            "segments": self.segments.tolist(),
            "segment_reflectivity": self.segment_reflectivity.tolist(),
            "scatterers": self.scatterers.tolist(),
            "rng_seed": self.rng_seed,
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> World:
        d = json.loads(text)
        return cls(d.get("segments", []), d.get("segment_reflectivity", []),
                   d.get("scatterers", []), d.get("rng_seed", 0))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> World:
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class SimConfig:
    n_azimuth: int = 400
    n_range: int = 3360
    gamma: float = 0.0596
    rotation_rate: float = 4.0  # Hz
    beam_width: float = 2.0 * math.pi / 400
    inject_beta: float = 0.0
    inject_range_bias: float = 0.0
    speckle_rate: float = 0.0
    noise_floor: float = 0.0
    encoder_jitter: float = 0.0
    hit_intensity: float = 100.0
    z_min: float = 60.0  # speckle intensities are drawn from [0.5 z_min, 2 z_min]

    def __post_init__(self):
        if self.rotation_rate <= 0:
            raise ValueError("rotation_rate must be > 0")
        if self.n_azimuth < 1 or self.n_range < 1:
            raise ValueError("scan dimensions must be positive")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if not 0.0 <= self.speckle_rate <= 1.0:
            raise ValueError("speckle_rate is a probability")
        # the sinusoidal deviation keeps angles increasing only below 1 rad
        if abs(self.encoder_jitter) >= 1.0:
            raise ValueError("encoder_jitter too large for monotone encoder angles")

    @property
    def sweep_duration(self) -> float:
        return 1.0 / self.rotation_rate

    @classmethod
    def from_dict(cls, d: dict) -> SimConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown SimConfig keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> SimConfig:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)


class Trajectory:
    """Timed SE(2) poses, interpolated with a constant body twist between samples."""

    def __init__(self, times, poses):
        self.times = np.asarray(times, dtype=float).reshape(-1)
        self.poses = np.asarray(poses, dtype=float).reshape(-1, 3)
        if len(self.times) != len(self.poses) or len(self.times) == 0:
            raise ValueError("times and poses must be non-empty and of equal length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")
        n = len(self.times)
        self._twists = np.zeros((max(n - 1, 1), 3))  # per-second body twist of each segment
        for i in range(n - 1):
            a, b = Pose2(*self.poses[i]), Pose2(*self.poses[i + 1])
            self._twists[i] = np.array(se2_log(a.inverse() @ b)) / (self.times[i + 1] - self.times[i])

    def __len__(self) -> int:
        return len(self.times)

    def pose(self, i: int) -> Pose2:
        return Pose2(*self.poses[i])

    def _segment(self, t: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self.times, t, side="right") - 1
        return np.clip(idx, 0, max(len(self.times) - 2, 0))

    def poses_at(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        seg = self._segment(t)
        dt = t - self.times[seg]
        tw = self._twists[seg] if len(self.times) > 1 else np.zeros((len(t), 3))
        inc = se2_exp_many(tw[:, 0] * dt, tw[:, 1] * dt, tw[:, 2] * dt)
        base = self.poses[seg]
        c, s = np.cos(base[:, 2]), np.sin(base[:, 2])
        return np.column_stack([
            base[:, 0] + c * inc[:, 0] - s * inc[:, 1],
            base[:, 1] + s * inc[:, 0] + c * inc[:, 1],
            wrap_angles(base[:, 2] + inc[:, 2]),
        ])

    def velocities_at(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if len(self.times) == 1:
            return np.zeros((len(t), 3))
        return self._twists[self._segment(t)]

    def __call__(self, t: float) -> Pose2:
        return Pose2(*self.poses_at(t)[0])

    def path_length(self) -> float:
        return float(np.sum(np.hypot(np.diff(self.poses[:, 0]), np.diff(self.poses[:, 1]))))

    def to_csv(self) -> str:
        rows = ["time,x,y,theta"] + [",".join(repr(float(v)) for v in (t, *p)) for t, p in zip(self.times, self.poses)]
        return "\n".join(rows) + "\n"

    @classmethod
    def from_csv_text(cls, text: str, source: str = "<csv>") -> Trajectory:
        times, poses = [], []
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError(f"{source}: empty trajectory")
        header = [h.strip() for h in lines[0].split(",")]
        try:
            cols = [header.index(c) for c in ("time", "x", "y", "theta")]
        except ValueError:
            raise ValueError(f"{source}:1: expected columns time,x,y,theta") from None
        for lineno, line in enumerate(lines[1:], start=2):
            toks = line.split(",")
            try:
                vals = [float(toks[c]) for c in cols]
            except (ValueError, IndexError):
                raise ValueError(f"{source}:{lineno}: malformed row") from None
            times.append(vals[0])
            poses.append(vals[1:])
        return cls(times, poses)

    @classmethod
    def load(cls, path: str | Path) -> Trajectory:
        return cls.from_csv_text(Path(path).read_text(encoding="utf-8"), source=str(path))


PoseSource = Callable[[float], Pose2] | Trajectory


def _sample_poses(pose_at: PoseSource, times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sensor poses and true body velocities at ``times``."""
    if isinstance(pose_at, Trajectory):
        return pose_at.poses_at(times), pose_at.velocities_at(times)
    poses = np.array([pose_at(float(t)).as_tuple() for t in times])
    h = 1e-4
    vel = np.empty_like(poses)
    for i, t in enumerate(times):
        a, b = pose_at(float(t) - h), pose_at(float(t) + h)
        vel[i] = np.array(se2_log(a.inverse() @ b)) / (2 * h)
    return poses, vel


def cast_rays(world: World, origins: np.ndarray, angles: np.ndarray, beam_width: float):
    """First-hit range and reflectivity per ray (``inf`` / 0 where nothing is hit)."""
    n = len(angles)
    d = np.column_stack([np.cos(angles), np.sin(angles)])
    best = np.full(n, np.inf)
    refl = np.zeros(n)
    if len(world.segments):
        p = world.segments[:, :2]
        e = world.segments[:, 2:] - p
        w = p[None, :, :] - origins[:, None, :]  # (n, m, 2)
        denom = d[:, None, 0] * e[None, :, 1] - d[:, None, 1] * e[None, :, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            r = (w[..., 0] * e[None, :, 1] - w[..., 1] * e[None, :, 0]) / denom
            u = (w[..., 0] * d[:, None, 1] - w[..., 1] * d[:, None, 0]) / denom
        ok = (denom != 0) & (r > 0) & (u >= 0) & (u <= 1)
        r = np.where(ok, r, np.inf)
        j = np.argmin(r, axis=1)
        rr = r[np.arange(n), j]
        hit = rr < best
        best[hit] = rr[hit]
        refl[hit] = world.segment_reflectivity[j[hit]]
    if len(world.scatterers):
        c = world.scatterers[:, :2]
        rad = world.scatterers[:, 2]
        w = c[None, :, :] - origins[:, None, :]
        tau = w[..., 0] * d[:, None, 0] + w[..., 1] * d[:, None, 1]
        h = np.abs(d[:, None, 0] * w[..., 1] - d[:, None, 1] * w[..., 0])
        reach = rad[None, :] + np.maximum(tau, 0.0) * math.tan(0.5 * beam_width)
        ok = (tau > 0) & (h < reach)
        r = tau - np.sqrt(np.maximum(rad[None, :] ** 2 - h * h, 0.0))
        r = np.where(ok & (r > 0), r, np.inf)
        j = np.argmin(r, axis=1)
        rr = r[np.arange(n), j]
        hit = rr < best
        best[hit] = rr[hit]
        refl[hit] = world.scatterers[j[hit], 3]
    return best, refl


@dataclass
class ScanTruth:
    """Per-azimuth ground truth of a rendered scan (for oracles)."""

    true_range: np.ndarray  # first-hit range, inf when nothing hit
    reported_range: np.ndarray  # after injected bias and Doppler, before quantisation
    sensor_poses: np.ndarray  # (N_a, 3) at each azimuth time
    velocities: np.ndarray  # (N_a, 3) true body twist


def encoder_angles_for(cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    uniform = 2.0 * np.pi * np.arange(cfg.n_azimuth) / cfg.n_azimuth
    if cfg.encoder_jitter == 0.0:
        return uniform
    phase = rng.uniform(0.0, 2.0 * np.pi)
    return uniform + cfg.encoder_jitter * np.sin(uniform + phase)


def render_scan(world: World, pose_at: PoseSource, t0: float, cfg: SimConfig,
                rng: np.random.Generator | None = None, return_truth: bool = False):
    rng = rng if rng is not None else np.random.default_rng(world.rng_seed)
    n_a, n_r = cfg.n_azimuth, cfg.n_range
    angles = encoder_angles_for(cfg, rng)
    times = t0 + np.arange(n_a) / (n_a * cfg.rotation_rate)
    poses, vel = _sample_poses(pose_at, times)

    true_r, refl = cast_rays(world, poses[:, :2], poses[:, 2] + angles, cfg.beam_width)
    doppler = cfg.inject_beta * (vel[:, 0] * np.cos(angles) + vel[:, 1] * np.sin(angles))
    reported = true_r + cfg.inject_range_bias - doppler

    if cfg.noise_floor > 0:
        z = rng.uniform(0.0, cfg.noise_floor, size=(n_a, n_r)).astype(np.float32)
    else:
        z = np.zeros((n_a, n_r), dtype=np.float32)
    if cfg.speckle_rate > 0:
        n_speckle = rng.binomial(n_a * n_r, cfg.speckle_rate)
        flat = rng.integers(0, n_a * n_r, size=n_speckle)
        vals = rng.uniform(0.5 * cfg.z_min, 2.0 * cfg.z_min, size=n_speckle).astype(np.float32)
        np.maximum.at(z.reshape(-1), flat, vals)

    finite = np.isfinite(reported)
    bins = np.full(n_a, -1, dtype=np.int64)
    bins[finite] = np.rint(reported[finite] / cfg.gamma).astype(np.int64)
    ok = (bins >= 0) & (bins < n_r)
    rows = np.flatnonzero(ok)
    z[rows, bins[rows]] = np.maximum(z[rows, bins[rows]], (cfg.hit_intensity * refl[rows]).astype(np.float32))

    scan = PolarScan(z, angles, times, t0, cfg.gamma)
    if return_truth:
        return scan, ScanTruth(true_r, reported, poses, vel)
    return scan


def scan_rng(world: World, index: int) -> np.random.Generator:
    return np.random.default_rng([world.rng_seed, index])


def simulate_sequence(world: World, trajectory: Trajectory, cfg: SimConfig):
    """One scan per trajectory sample; returns (scans, ground_truth)."""
    scans = [render_scan(world, trajectory, float(t), cfg, rng=scan_rng(world, i))
             for i, t in enumerate(trajectory.times)]
    return scans, trajectory


def change_world(world: World, remove_fraction: float, n_add: int, seed: int,
                 keep_clear: np.ndarray | None = None, clearance: float = 3.0,
                 radius_range: tuple[float, float] = (0.3, 1.0)) -> World:
    """Remove exactly floor(f * N) scatterers and add ``n_add`` new ones.

    New scatterers are dropped near randomly chosen existing ones and kept at
    least ``clearance`` away from the ``keep_clear`` points (e.g. the driven path).
    """
    if not 0.0 <= remove_fraction <= 1.0:
        raise ValueError("remove_fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    n = len(world.scatterers)
    n_remove = int(math.floor(remove_fraction * n))
    removed = rng.choice(n, size=n_remove, replace=False) if n_remove else np.zeros(0, dtype=int)
    keep = np.setdiff1d(np.arange(n), removed)
    kept = world.scatterers[keep]
    added = []
    anchors = world.scatterers if n else np.zeros((1, 4))
    attempts = 0
    while len(added) < n_add:
        attempts += 1
        if attempts > 1000 * max(n_add, 1):
            raise RuntimeError("could not place new scatterers")
        a = anchors[rng.integers(len(anchors))]
        pos = a[:2] + rng.uniform(-4.0, 4.0, size=2)
        if keep_clear is not None and len(keep_clear):
            if np.min(np.hypot(*(np.asarray(keep_clear)[:, :2] - pos).T)) < clearance:
                continue
        added.append([pos[0], pos[1], rng.uniform(*radius_range), rng.uniform(0.8, 1.2)])
    scat = np.vstack([kept, np.array(added).reshape(-1, 4)]) if added else kept
    return World(world.segments.copy(), world.segment_reflectivity.copy(), scat, world.rng_seed)


def ground_truth_velocity(trajectory: Trajectory, i: int) -> Velocity:
    return Velocity(*trajectory.velocities_at(trajectory.times[i])[0])
