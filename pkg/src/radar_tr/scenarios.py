"""Procedural street worlds and drives for the simulator.

Two layouts are provided: a straight 100 m corridor (also shipped as JSON/CSV
files next to this module) and a 200 m stadium-shaped loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .sim import SimConfig, Trajectory, World


class StraightPath:
    def __init__(self, start=(0.0, 0.0), heading: float = 0.0, length: float = 100.0):
        self.start = np.asarray(start, dtype=float)
        self.heading = float(heading)
        self.length = float(length)
        self.closed = False

    def frame(self, s):
        s = np.asarray(s, dtype=float)
        d = np.array([math.cos(self.heading), math.sin(self.heading)])
        pts = self.start + s[..., None] * d
        return pts, np.full(s.shape, self.heading)


class StadiumPath:
    """Closed counter-clockwise loop: two straights joined by 180 degree turns.

    Each turn eases in and out over ``transition`` metres of linearly ramped
    curvature (clothoids), so a vehicle following the path never sees a step
    in yaw rate. ``transition = 0`` gives plain half circles.
    """

    def __init__(self, straight: float = 30.0, total: float = 200.0, transition: float = 15.0,
                 step: float = 0.01):
        turn = 0.5 * total - straight
        if turn <= 2.0 * transition:
            raise ValueError("turns too short for the requested transition length")
        self.straight = float(straight)
        self.transition = float(transition)
        self.length = float(total)
        self.closed = True
        arc = turn - 2.0 * transition
        self.kappa = math.pi / (arc + transition)
        self.radius = 1.0 / self.kappa
        # dense table of the path, integrated from the curvature profile
        n = int(round(self.length / step))
        self._s = np.linspace(0.0, self.length, n + 1)
        heading = self._heading(self._s)
        ds = np.diff(self._s)
        c, sn = np.cos(heading), np.sin(heading)
        x = np.concatenate([[0.0], np.cumsum(0.5 * (c[1:] + c[:-1]) * ds)])
        y = np.concatenate([[0.0], np.cumsum(0.5 * (sn[1:] + sn[:-1]) * ds)])
        # centre the loop on the origin
        self._xy = np.column_stack([x, y]) - np.array([self.straight / 2, 0.5 * (y.max() + y.min())])

    def _turn_heading(self, u):
        """Heading gained ``u`` metres into a turn."""
        T, k = self.transition, self.kappa
        turn = 0.5 * self.length - self.straight
        out = np.empty_like(u)
        ramp_in = u < T
        out[ramp_in] = 0.5 * k * u[ramp_in] ** 2 / T if T > 0 else 0.0
        ramp_out = u >= turn - T
        w = turn - u[ramp_out]
        out[ramp_out] = math.pi - (0.5 * k * w ** 2 / T if T > 0 else 0.0)
        arc = ~(ramp_in | ramp_out)
        out[arc] = 0.5 * k * T + k * (u[arc] - T)
        return out

    def _heading(self, s):
        s = np.asarray(s, dtype=float)
        turn = 0.5 * self.length - self.straight
        half = 0.5 * self.length
        lap = np.mod(s, self.length)
        second = lap >= half
        u = np.where(second, lap - half, lap)
        h = np.zeros_like(u)
        in_turn = u >= self.straight
        h[in_turn] = self._turn_heading(u[in_turn] - self.straight)
        h = np.where(u >= self.straight + turn, math.pi, h)
        return h + np.where(second, math.pi, 0.0)

    def frame(self, s):
        s = np.mod(np.asarray(s, dtype=float), self.length)
        x = np.interp(s, self._s, self._xy[:, 0])
        y = np.interp(s, self._s, self._xy[:, 1])
        pts = np.stack([x, y], axis=-1)
        return pts, self._heading(s)


def _rect(center_pt, tangent, normal, length, near, depth):
    """Four wall segments of a building whose near face lies ``near`` metres along ``normal``."""
    a = center_pt + normal * near - tangent * length / 2
    b = center_pt + normal * near + tangent * length / 2
    c = b + normal * depth
    d = a + normal * depth
    return [[*a, *b], [*b, *c], [*c, *d], [*d, *a]]


def street_world(path, seed: int, s_range: tuple[float, float] | None = None,
                 building_offset=(8.0, 11.0), building_length=(5.0, 14.0), gap=(2.0, 6.0),
                 depth=(4.0, 7.0), scatter_spacing=(3.0, 8.0), scatter_offset=(4.5, 6.5),
                 scatter_radius=(0.2, 0.8)) -> World:
    """Buildings on both sides of ``path`` plus roadside scatterers."""
    rng = np.random.default_rng(seed)
    lo, hi = s_range if s_range is not None else (0.0, path.length)
    segs = []
    for side in (1.0, -1.0):
        s = lo + rng.uniform(0.0, gap[1])
        while True:
            length = rng.uniform(*building_length)
            if s + length > hi:
                break
            center = s + length / 2
            p, h = path.frame(np.array([center]))
            t = np.array([math.cos(h[0]), math.sin(h[0])])
            n = side * np.array([-t[1], t[0]])
            segs += _rect(p[0], t, n, length, rng.uniform(*building_offset), rng.uniform(*depth))
            s += length + rng.uniform(*gap)
    scat = []
    s = lo + rng.uniform(0.0, scatter_spacing[1])
    while s < hi:
        p, h = path.frame(np.array([s]))
        side = rng.choice([-1.0, 1.0])
        n = side * np.array([-math.sin(h[0]), math.cos(h[0])])
        pos = p[0] + n * rng.uniform(*scatter_offset)
        scat.append([pos[0], pos[1], rng.uniform(*scatter_radius), rng.uniform(0.8, 1.2)])
        s += rng.uniform(*scatter_spacing)
    segs = np.array(segs)
    return World(segs, np.ones(len(segs)), np.array(scat), seed)


def drive(path, speed: float, rate: float = 4.0, ramp_time: float | None = 8.0, distance: float | None = None,
          lateral: float = 0.0, weave: float = 0.0, weave_length: float = 60.0, s0: float = 0.0,
          t0: float = 0.0) -> Trajectory:
    """Sample a drive along ``path`` at ``rate`` Hz.

    The vehicle starts at rest and reaches ``speed`` after ``ramp_time``
    seconds on a half-cosine speed profile, so acceleration has no jumps
    (``ramp_time=None`` starts at full speed). ``lateral`` and ``weave``
    offset the vehicle sideways from the path centre line.
    """
    distance = path.length if distance is None else distance
    dt = 1.0 / rate
    svals = []
    k = 0
    while True:
        t = k * dt
        if ramp_time is None:
            s = speed * t
        elif t <= ramp_time:
            s = 0.5 * speed * (t - ramp_time / math.pi * math.sin(math.pi * t / ramp_time))
        else:
            s = 0.5 * speed * ramp_time + speed * (t - ramp_time)
        if s > distance + 1e-9:
            break
        svals.append(s)
        k += 1
    svals = np.array(svals)
    pts, hdg = path.frame(s0 + svals)
    lat = lateral + weave * np.sin(2 * math.pi * svals / weave_length)
    dlat = weave * 2 * math.pi / weave_length * np.cos(2 * math.pi * svals / weave_length)
    normal = np.column_stack([-np.sin(hdg), np.cos(hdg)])
    xy = pts + normal * lat[:, None]
    theta = hdg + np.arctan(dlat)
    times = t0 + dt * np.arange(len(svals))
    return Trajectory(times, np.column_stack([xy, theta]))


@dataclass
class LoopScenario:
    teach_world: World
    repeat_world: World
    teach: Trajectory
    repeat: Trajectory
    sim: SimConfig


DISTORTED_SIM = SimConfig(inject_beta=0.05, inject_range_bias=0.31, encoder_jitter=math.radians(0.3),
                          speckle_rate=0.002, noise_floor=40.0)


def loop_scenario(seed: int = 7, change_fraction: float = 0.2, n_new: int = 10,
                  teach_speed: float = 5.0, repeat_speed: float = 6.0, sim: SimConfig | None = None) -> LoopScenario:
    """200 m loop: teach drive on the centre line, repeat drive faster, offset and weaving, in a changed world."""
    from .sim import change_world

    path = StadiumPath()
    world = street_world(path, seed)
    teach = drive(path, teach_speed)
    repeat = drive(path, repeat_speed, lateral=0.4, weave=0.5, t0=1000.0)
    changed = change_world(world, change_fraction, n_new, seed + 1,
                           keep_clear=np.vstack([teach.poses, repeat.poses]), clearance=3.0)
    return LoopScenario(world, changed, teach, repeat, sim or DISTORTED_SIM)


def corridor_world(seed: int = 3) -> World:
    return street_world(StraightPath((-30.0, 0.0), 0.0, 160.0), seed)


def corridor_trajectory() -> Trajectory:
    """100 m straight drive at 10 m/s sampled at 4 Hz: 40 poses 2.5 m apart."""
    n = 40
    times = np.arange(n) * 0.25
    return Trajectory(times, np.column_stack([2.5 * np.arange(n), np.zeros(n), np.zeros(n)]))


CORRIDOR_SIM = SimConfig(inject_range_bias=0.31, speckle_rate=0.001, noise_floor=30.0)


def shipped_corridor_paths() -> dict[str, Path]:
    base = resources.files("radar_tr") / "data"
    return {
        "world": Path(str(base / "corridor_world.json")),
        "trajectory": Path(str(base / "corridor_trajectory.csv")),
        "sim": Path(str(base / "corridor_sim.json")),
    }


def load_corridor() -> tuple[World, Trajectory, SimConfig]:
    paths = shipped_corridor_paths()
    return World.load(paths["world"]), Trajectory.load(paths["trajectory"]), SimConfig.load(paths["sim"])


def write_corridor_scenario(directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    corridor_world().save(directory / "corridor_world.json")
    (directory / "corridor_trajectory.csv").write_text(corridor_trajectory().to_csv(), encoding="utf-8")
    (directory / "corridor_sim.json").write_text(CORRIDOR_SIM.to_json(), encoding="utf-8")
