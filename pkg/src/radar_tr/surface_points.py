"""Sparse oriented surface points: the scan representation used for registration."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose2
from .preprocessing import PointCloud

COV_REGULARIZATION = 1e-6


class SurfacePoint(NamedTuple):
    mean: np.ndarray
    normal: np.ndarray
    covariance: np.ndarray
    n_samples: int


@dataclass(frozen=True, eq=False)
class SurfacePointSet:
    """Surface points expressed in one frame.

    ``origin_pose`` is the pose of the observing sensor in that same frame: the
    identity for a freshly extracted set, the keyframe pose once the set has
    been moved into the map frame.
    """

    means: np.ndarray
    normals: np.ndarray
    covs: np.ndarray
    n_samples: np.ndarray
    origin_pose: Pose2 = field(default_factory=Pose2.identity)

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float).reshape(-1, 2)
        n = len(means)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "normals", np.asarray(self.normals, dtype=float).reshape(n, 2))
        object.__setattr__(self, "covs", np.asarray(self.covs, dtype=float).reshape(n, 2, 2))
        object.__setattr__(self, "n_samples", np.asarray(self.n_samples, dtype=np.int64).reshape(n))

    def __len__(self) -> int:
        return len(self.means)

    def __getitem__(self, i: int) -> SurfacePoint:
        return SurfacePoint(self.means[i], self.normals[i], self.covs[i], int(self.n_samples[i]))

    @classmethod
    def empty(cls, origin_pose: Pose2 | None = None) -> SurfacePointSet:
        return cls(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros(0, dtype=np.int64),
                   origin_pose or Pose2.identity())

    @classmethod
    def from_points(cls, points: list[SurfacePoint], origin_pose: Pose2 | None = None) -> SurfacePointSet:
        if not points:
            return cls.empty(origin_pose)
        return cls(
            np.array([p.mean for p in points]),
            np.array([p.normal for p in points]),
            np.array([p.covariance for p in points]),
            np.array([p.n_samples for p in points]),
            origin_pose or Pose2.identity(),
        )

    def subset(self, index) -> SurfacePointSet:
        return SurfacePointSet(self.means[index], self.normals[index], self.covs[index],
                               self.n_samples[index], self.origin_pose)

    def concat(self, other: SurfacePointSet) -> SurfacePointSet:
        return SurfacePointSet(
            np.vstack([self.means, other.means]),
            np.vstack([self.normals, other.normals]),
            np.concatenate([self.covs, other.covs]),
            np.concatenate([self.n_samples, other.n_samples]),
            self.origin_pose,
        )


def _minor_axis(sxx: np.ndarray, sxy: np.ndarray, syy: np.ndarray) -> np.ndarray:
    """Unit eigenvector of the smallest eigenvalue of [[sxx, sxy], [sxy, syy]]."""
    phi = 0.5 * np.arctan2(2.0 * sxy, sxx - syy)
    return np.column_stack([-np.sin(phi), np.cos(phi)])


def compute_surface_points(cloud: PointCloud, grid_res: float, min_points: int = 6) -> SurfacePointSet:
    """Grid-downsample ``cloud`` into oriented surface points.

    Every occupied ``grid_res`` cell contributes at most one point, built from
    all cloud points within ``grid_res`` of the cell's centroid. Normals are the
    minor axis of the neighbourhood covariance, flipped to face the sensor.
    """
    if grid_res <= 0:
        raise ValueError("grid_res must be > 0")
    if min_points < 3:
        raise ValueError("min_points must be >= 3")
    pts = cloud.points
    if len(pts) < min_points:
        return SurfacePointSet.empty()

    cells = np.floor(pts / grid_res).astype(np.int64)
    cells -= cells.min(axis=0)
    key = cells[:, 0] * (int(cells[:, 1].max()) + 1) + cells[:, 1]  # row-major cell id
    _, cell_of, cell_count = np.unique(key, return_inverse=True, return_counts=True)
    cell_of = cell_of.reshape(-1)
    n_cells = len(cell_count)
    centroids = np.column_stack([
        np.bincount(cell_of, weights=pts[:, 0], minlength=n_cells),
        np.bincount(cell_of, weights=pts[:, 1], minlength=n_cells),
    ]) / cell_count[:, None]

    # all (centroid, point) pairs within grid_res, grouped by centroid
    pairs = cKDTree(centroids).sparse_distance_matrix(cKDTree(pts), grid_res, output_type="ndarray")
    order = np.lexsort((pairs["j"], pairs["i"]))
    owner, idx = pairs["i"][order].astype(np.int64), pairs["j"][order].astype(np.int64)
    sizes_all = np.bincount(owner, minlength=n_cells)
    valid = np.flatnonzero(sizes_all >= min_points)
    if valid.size == 0:
        return SurfacePointSet.empty()
    keep = sizes_all[owner] >= min_points
    idx = idx[keep]
    sizes = sizes_all[valid]
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])

    sel = pts[idx]
    means = np.add.reduceat(sel, starts, axis=0) / sizes[:, None]
    d = sel - np.repeat(means, sizes, axis=0)
    denom = (sizes - 1).astype(float)
    sxx = np.add.reduceat(d[:, 0] * d[:, 0], starts) / denom + COV_REGULARIZATION
    syy = np.add.reduceat(d[:, 1] * d[:, 1], starts) / denom + COV_REGULARIZATION
    sxy = np.add.reduceat(d[:, 0] * d[:, 1], starts) / denom

    normals = _minor_axis(sxx, sxy, syy)
    # face the sensor at the origin of the cloud frame
    flip = np.einsum("ij,ij->i", normals, -means) < 0.0
    normals[flip] *= -1.0

    covs = np.empty((len(valid), 2, 2))
    covs[:, 0, 0] = sxx
    covs[:, 0, 1] = sxy
    covs[:, 1, 0] = sxy
    covs[:, 1, 1] = syy
    return SurfacePointSet(means, normals, covs, sizes)


def rotate_covs(covs: np.ndarray, theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    a, b, d = covs[:, 0, 0], covs[:, 0, 1], covs[:, 1, 1]
    out = np.empty_like(covs)
    out[:, 0, 0] = c * c * a - 2.0 * c * s * b + s * s * d
    out[:, 1, 1] = s * s * a + 2.0 * c * s * b + c * c * d
    off = c * s * (a - d) + (c * c - s * s) * b
    out[:, 0, 1] = off
    out[:, 1, 0] = off
    return out


def transform_surface_points(sps: SurfacePointSet, pose: Pose2) -> SurfacePointSet:
    """Rigidly move a set by ``pose``: means transformed, normals and covariances rotated."""
    if pose.x == 0.0 and pose.y == 0.0 and pose.theta == 0.0:
        return sps
    R = pose.rotation()
    return SurfacePointSet(
        pose.apply(sps.means),
        sps.normals @ R.T,
        rotate_covs(sps.covs, pose.theta),
        sps.n_samples,
        pose.compose(sps.origin_pose),
    )
