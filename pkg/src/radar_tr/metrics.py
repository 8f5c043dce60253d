"""Evaluation quantities: KITTI-style odometry drift and localization RMSE.

CSV layouts (fixed column order):

* trajectory: ``time,x,y,theta`` (theta in radians)
* localization errors: ``time,node,longitudinal,lateral,heading_deg``;
  readers also accept a ``heading`` column in radians instead of ``heading_deg``
* drift report: ``length,segments,translation_pct,rotation_deg_per_100m``,
  with a final ``all`` row holding the segment-weighted averages
* RMSE report: ``n_frames,longitudinal_rmse,lateral_rmse,heading_rmse_deg,overall``
* histogram: ``component,bin_low,bin_high,count``
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import wrap_angles

SEGMENT_LENGTHS = tuple(range(100, 801, 100))
TIME_MATCH_TOL = 1e-6


class MetricsInputError(ValueError):
    pass


@dataclass(frozen=True)
class LengthDrift:
    length: float
    segments: int
    translation_pct: float
    rotation_deg_per_100m: float


@dataclass(frozen=True)
class DriftReport:
    translation_drift: float  # percent
    rotation_drift: float  # degrees per 100 m
    per_length: tuple[LengthDrift, ...] = ()

    @property
    def n_segments(self) -> int:
        return sum(r.segments for r in self.per_length)


@dataclass(frozen=True)
class RmseReport:
    longitudinal_rmse: float
    lateral_rmse: float
    heading_rmse: float  # degrees
    overall: float  # hypot of the longitudinal and lateral RMSEs
    n_frames: int


@dataclass(frozen=True)
class Histogram:
    bin_width: float
    lows: dict[str, np.ndarray] = field(default_factory=dict)  # left bin edges per component
    counts: dict[str, np.ndarray] = field(default_factory=dict)


def _relative(poses: np.ndarray, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    """Pose of frame j expressed in frame i, for index arrays ``i`` and ``j``."""
    a, b = poses[i], poses[j]
    c, s = np.cos(a[:, 2]), np.sin(a[:, 2])
    dx, dy = b[:, 0] - a[:, 0], b[:, 1] - a[:, 1]
    return np.column_stack([c * dx + s * dy, -s * dx + c * dy, wrap_angles(b[:, 2] - a[:, 2])])


def _check_trajectories(est_times, est, gt_times, gt):
    est, gt = np.asarray(est, dtype=float).reshape(-1, 3), np.asarray(gt, dtype=float).reshape(-1, 3)
    if len(est) != len(gt):
        raise MetricsInputError(f"trajectories differ in length ({len(est)} vs {len(gt)})")
    if est_times is not None and gt_times is not None:
        et, gt_t = np.asarray(est_times, dtype=float), np.asarray(gt_times, dtype=float)
        if len(et) != len(est) or len(gt_t) != len(gt):
            raise MetricsInputError("times and poses differ in length")
        bad = np.flatnonzero(np.abs(et - gt_t) > TIME_MATCH_TOL)
        if len(bad):
            raise MetricsInputError(f"timestamps differ at frame {bad[0]} ({et[bad[0]]!r} vs {gt_t[bad[0]]!r})")
    return est, gt


def kitti_drift(est, gt, est_times=None, gt_times=None,
                lengths: Sequence[float] = SEGMENT_LENGTHS) -> DriftReport:
    """Average relative-pose drift over segments of the given lengths.

    Every frame starts a segment of each length; the segment ends at the
    first frame whose ground-truth arc length from the start reaches the
    length. Translation drift is the mean of |translation error| / length in
    percent, rotation drift the mean of |heading error| / length in degrees per
    100 m. The overall figures average every segment, so lengths with more
    segments weigh more. Lengths that no segment reaches are left out.
    """
    est, gt = _check_trajectories(est_times, est, gt_times, gt)
    n = len(gt)
    if n < 2:
        return DriftReport(0.0, 0.0, ())
    dist = np.concatenate([[0.0], np.cumsum(np.hypot(np.diff(gt[:, 0]), np.diff(gt[:, 1])))])
    rows, t_all, r_all = [], [], []
    starts = np.arange(n)
    # arc lengths that reach L up to rounding count as reaching it, so a rigid
    # transform of both trajectories cannot move segment ends
    tol = 1e-9 * max(1.0, float(dist[-1]))
    for L in lengths:
        ends = np.searchsorted(dist, dist + L - tol, side="left")
        ok = ends < n
        i, j = starts[ok], ends[ok]
        if len(i) == 0:
            continue
        rg, re = _relative(gt, i, j), _relative(est, i, j)
        # error transform (gt_ij)^-1 (est_ij)
        c, s = np.cos(rg[:, 2]), np.sin(rg[:, 2])
        dx, dy = re[:, 0] - rg[:, 0], re[:, 1] - rg[:, 1]
        ex, ey = c * dx + s * dy, -s * dx + c * dy
        eth = wrap_angles(re[:, 2] - rg[:, 2])
        t_err = np.hypot(ex, ey) / L
        r_err = np.abs(eth) / L
        rows.append(LengthDrift(float(L), len(i), 100.0 * float(np.mean(t_err)),
                                100.0 * math.degrees(float(np.mean(r_err)))))
        t_all.append(t_err)
        r_all.append(r_err)
    if not rows:
        return DriftReport(0.0, 0.0, ())
    t_all, r_all = np.concatenate(t_all), np.concatenate(r_all)
    return DriftReport(100.0 * float(np.mean(t_all)), 100.0 * math.degrees(float(np.mean(r_all))), tuple(rows))


def localization_rmse(errors) -> RmseReport:
    """Component-wise RMSE of (longitudinal, lateral, heading in radians) rows."""
    e = np.asarray(errors, dtype=float).reshape(-1, 3)
    if len(e) == 0:
        raise MetricsInputError("no localization errors to summarise")
    rm = np.sqrt(np.mean(e * e, axis=0))
    return RmseReport(float(rm[0]), float(rm[1]), math.degrees(float(rm[2])), float(math.hypot(rm[0], rm[1])), len(e))


ERROR_COMPONENTS = ("longitudinal", "lateral", "heading_deg")


def error_histogram(errors, bin_width: float) -> Histogram:
    """Counts per component in bins [k w, (k + 1) w); heading is binned in degrees.

    Only bins between the lowest and highest occupied one are listed.
    """
    if not bin_width > 0:
        raise ValueError("bin_width must be > 0")
    e = np.asarray(errors, dtype=float).reshape(-1, 3)
    cols = {"longitudinal": e[:, 0], "lateral": e[:, 1], "heading_deg": np.degrees(e[:, 2])}
    lows, counts = {}, {}
    for name, v in cols.items():
        if len(v) == 0:
            lows[name], counts[name] = np.zeros(0), np.zeros(0, dtype=np.int64)
            continue
        k = np.floor(v / bin_width).astype(np.int64)
        lo = int(k.min())
        counts[name] = np.bincount(k - lo)
        lows[name] = (lo + np.arange(len(counts[name]))) * bin_width
    return Histogram(float(bin_width), lows, counts)


def histogram_csv(h: Histogram) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["component", "bin_low", "bin_high", "count"])
    for name in ERROR_COMPONENTS:
        for lo, n in zip(h.lows.get(name, ()), h.counts.get(name, ())):
            w.writerow([name, repr(float(lo)), repr(float(lo + h.bin_width)), int(n)])
    return out.getvalue()


def drift_csv(report: DriftReport) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["length", "segments", "translation_pct", "rotation_deg_per_100m"])
    for r in report.per_length:
        w.writerow([repr(r.length), r.segments, repr(r.translation_pct), repr(r.rotation_deg_per_100m)])
    w.writerow(["all", report.n_segments, repr(report.translation_drift), repr(report.rotation_drift)])
    return out.getvalue()


def rmse_csv(report: RmseReport) -> str:
    return ("n_frames,longitudinal_rmse,lateral_rmse,heading_rmse_deg,overall\n"
            f"{report.n_frames},{report.longitudinal_rmse!r},{report.lateral_rmse!r},"
            f"{report.heading_rmse!r},{report.overall!r}\n")


def format_drift(report: DriftReport) -> str:
    lines = [f"{'length [m]':>10}  {'segments':>8}  {'t_err [%]':>10}  {'r_err [deg/100m]':>16}"]
    for r in report.per_length:
        lines.append(f"{r.length:>10.0f}  {r.segments:>8d}  {r.translation_pct:>10.4f}  {r.rotation_deg_per_100m:>16.4f}")
    lines.append(f"{'all':>10}  {report.n_segments:>8d}  {report.translation_drift:>10.4f}  {report.rotation_drift:>16.4f}")
    return "\n".join(lines)


def format_rmse(report: RmseReport) -> str:
    return "\n".join([
        f"frames            {report.n_frames}",
        f"longitudinal [m]  {report.longitudinal_rmse:.4f}",
        f"lateral [m]       {report.lateral_rmse:.4f}",
        f"heading [deg]     {report.heading_rmse:.4f}",
        f"overall [m]       {report.overall:.4f}",
    ])


def errors_csv(times, nodes, errors) -> str:
    """Localization errors with heading written in degrees."""
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["time", "node", *("longitudinal", "lateral", "heading_deg")])
    for t, n, (lo, la, h) in zip(times, nodes, np.asarray(errors, dtype=float).reshape(-1, 3)):
        w.writerow([repr(float(t)), int(n), repr(float(lo)), repr(float(la)), repr(math.degrees(h))])
    return out.getvalue()


def _rows(text: str, source: str):
    reader = csv.reader(io.StringIO(text))
    header = None
    for lineno, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row) or row[0].lstrip().startswith("#"):
            continue
        if header is None:
            header = [c.strip() for c in row]
            continue
        if len(row) != len(header):
            raise MetricsInputError(f"{source}:{lineno}: expected {len(header)} columns, found {len(row)}")
        yield lineno, header, row
    if header is None:
        raise MetricsInputError(f"{source}: empty file")


def read_errors_csv(text: str, source: str = "<csv>") -> np.ndarray:
    """(N, 3) errors (longitudinal, lateral, heading in radians) from any CSV with the error columns."""
    out = []
    cols = None
    for lineno, header, row in _rows(text, source):
        if cols is None:
            if "heading_deg" in header:
                hcol, scale = header.index("heading_deg"), math.pi / 180.0
            elif "heading" in header:
                hcol, scale = header.index("heading"), 1.0
            else:
                raise MetricsInputError(f"{source}: no heading_deg or heading column")
            try:
                cols = (header.index("longitudinal"), header.index("lateral"), hcol)
            except ValueError:
                raise MetricsInputError(f"{source}: missing longitudinal or lateral column") from None
        try:
            vals = [float(row[c]) for c in cols]
        except ValueError:
            raise MetricsInputError(f"{source}:{lineno}: non-numeric value") from None
        out.append((vals[0], vals[1], vals[2] * scale))
    return np.array(out, dtype=float).reshape(-1, 3)


def read_trajectory_csv(text: str, source: str = "<csv>") -> tuple[np.ndarray, np.ndarray]:
    """(times, (N, 3) poses) from a ``time,x,y,theta`` CSV; extra columns are ignored."""
    times, poses = [], []
    cols = None
    for lineno, header, row in _rows(text, source):
        if cols is None:
            missing = [c for c in ("time", "x", "y", "theta") if c not in header]
            if missing:
                raise MetricsInputError(f"{source}: missing column(s) {', '.join(missing)}")
            cols = [header.index(c) for c in ("time", "x", "y", "theta")]
        try:
            t, x, y, th = (float(row[c]) for c in cols)
        except ValueError:
            raise MetricsInputError(f"{source}:{lineno}: non-numeric value") from None
        times.append(t)
        poses.append((x, y, th))
    return np.array(times, dtype=float), np.array(poses, dtype=float).reshape(-1, 3)
