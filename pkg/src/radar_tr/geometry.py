"""Planar rigid-body primitives: SE(2) poses and body-frame velocities."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_SMALL_ANGLE = 1e-9


def wrap_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]. Angles already in range are returned unchanged."""
    if -math.pi < a <= math.pi:
        return a
    return math.pi - (math.pi - a) % (2.0 * math.pi)


def wrap_angles(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    inside = (a > -np.pi) & (a <= np.pi)
    return np.where(inside, a, np.pi - np.mod(np.pi - a, 2.0 * np.pi))


def rot2(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True, slots=True)
class Pose2:
    """SE(2) pose. ``theta`` is kept wrapped into (-pi, pi]."""

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @classmethod
    def identity(cls) -> Pose2:
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> Pose2:
        return cls(m[0, 2], m[1, 2], math.atan2(m[1, 0], m[0, 0]))

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def rotation(self) -> np.ndarray:
        return rot2(self.theta)

    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s, self.x], [s, c, self.y], [0.0, 0.0, 1.0]])

    def compose(self, other: Pose2) -> Pose2:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )

    __matmul__ = compose

    def inverse(self) -> Pose2:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(-c * self.x - s * self.y, s * self.x - c * self.y, -self.theta)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N, 2) array of points from this pose's frame to the parent frame."""
        points = np.asarray(points, dtype=float)
        c, s = math.cos(self.theta), math.sin(self.theta)
        out = np.empty_like(points)
        out[..., 0] = c * points[..., 0] - s * points[..., 1] + self.x
        out[..., 1] = s * points[..., 0] + c * points[..., 1] + self.y
        return out

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.theta)


@dataclass(frozen=True, slots=True)
class Velocity:
    """Body-frame twist: longitudinal ``vx``, lateral ``vy`` (m/s) and yaw rate ``omega`` (rad/s)."""

    vx: float = 0.0
    vy: float = 0.0
    omega: float = 0.0

    def __post_init__(self):
        for name in ("vx", "vy", "omega"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"velocity component {name} is not finite: {value}")
            object.__setattr__(self, name, value)

    def is_zero(self) -> bool:
        return self.vx == 0.0 and self.vy == 0.0 and self.omega == 0.0

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.vx, self.vy, self.omega)


def pose_compose(a: Pose2, b: Pose2) -> Pose2:
    return a.compose(b)


def pose_inverse(a: Pose2) -> Pose2:
    return a.inverse()


def pose_log_delta(a: Pose2, b: Pose2) -> tuple[float, float]:
    """Translation norm and absolute wrapped angle of the relative pose ``a^-1 * b``."""
    rel = a.inverse().compose(b)
    return math.hypot(rel.x, rel.y), abs(rel.theta)


def _exp_coeffs(theta):
    """Return (sin(t)/t, (1 - cos(t))/t), series-expanded near zero. Works on scalars and arrays."""
    theta = np.asarray(theta, dtype=float)
    small = np.abs(theta) < 1e-4
    safe = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(safe) / safe)
    b = np.where(small, theta / 2.0 - theta * t2 / 24.0, (1.0 - np.cos(safe)) / safe)
    return a, b


def se2_exp(vx: float, vy: float, omega: float) -> Pose2:
    """Exponential map of the twist increment (vx, vy, omega), all already multiplied by dt."""
    a, b = _exp_coeffs(omega)
    a, b = float(a), float(b)
    return Pose2(a * vx - b * vy, b * vx + a * vy, omega)


def se2_exp_many(vx: np.ndarray, vy: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """Vectorised :func:`se2_exp`; returns an (N, 3) array of (x, y, theta)."""
    a, b = _exp_coeffs(omega)
    return np.stack([a * vx - b * vy, b * vx + a * vy, omega], axis=-1)


def se2_log(p: Pose2) -> tuple[float, float, float]:
    """Inverse of :func:`se2_exp`."""
    theta = p.theta
    a, b = _exp_coeffs(theta)
    a, b = float(a), float(b)
    det = a * a + b * b
    # V^-1 = [[a, b], [-b, a]] / det
    return ((a * p.x + b * p.y) / det, (-b * p.x + a * p.y) / det, theta)


def twist_between(a: Pose2, b: Pose2, dt: float) -> Velocity:
    """Constant body twist that carries ``a`` to ``b`` in ``dt`` seconds."""
    if dt <= 0.0:
        return Velocity()
    vx, vy, w = se2_log(a.inverse().compose(b))
    return Velocity(vx / dt, vy / dt, w / dt)


def integrate_twist(v: Velocity, dt: float) -> Pose2:
    return se2_exp(v.vx * dt, v.vy * dt, v.omega * dt)
