"""Robust point-to-distribution registration of surface-point sets.

The cost of aligning a live set against one target set at pose ``x`` is

    sum_{(i, j)} w_ij * L(g_ij(x)),   L(s) = c^2 log(1 + s / c^2)

with ``g_ij`` the squared Mahalanobis distance between the transformed live
mean and the target mean under the summed (rotated) covariances, and
``w_ij = (n_i' . n_j)^2`` the normal-similarity weight of the rotated live
normal. Multiple target sets simply add their costs. The minimiser is a
Levenberg-Marquardt loop with nearest-neighbour re-association after every
accepted step. It uses the Gauss-Newton Hessian until the steps get small,
then the exact Hessian (when positive definite) to finish quadratically.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence, TextIO

import numpy as np
from scipy.spatial import cKDTree

from .config import PipelineConfig
from .geometry import Pose2
from .surface_points import SurfacePoint, SurfacePointSet, transform_surface_points

log = logging.getLogger(__name__)

RESIDUAL_REGULARIZATION = 1e-6
MAX_CONDITION = 1e12
MIN_CORRESPONDENCES = 10
LAMBDA_INIT = 1e-4
DIVERGENCE_ESCALATIONS = 5
NEWTON_RADIUS = 1e-3  # Gauss-Newton step norm below which the exact Hessian is tried


class RegistrationError(RuntimeError):
    pass


class InsufficientCorrespondencesError(RegistrationError):
    pass


class DivergedError(RegistrationError):
    pass


class DegenerateCovarianceError(RegistrationError):
    pass


class Correspondence(NamedTuple):
    src_index: int
    dst_index: int
    dst_set: int
    weight: float


@dataclass
class RegistrationResult:
    pose: Pose2
    iterations: int
    final_cost: float
    converged: bool
    n_correspondences: int
    # fixed-association cost after each accepted step, preceded by the initial cost
    accepted_costs: list[float] = field(default_factory=list)


def normal_weight(n_live, n_target):
    """Squared cosine between two unit normals; broadcasts over leading axes."""
    dot = np.sum(np.asarray(n_live, dtype=float) * np.asarray(n_target, dtype=float), axis=-1)
    return dot * dot


def cauchy(s, c: float):
    c2 = c * c
    return c2 * np.log1p(np.asarray(s) / c2)


def _as_vec(pose) -> np.ndarray:
    if isinstance(pose, Pose2):
        return np.array([pose.x, pose.y, pose.theta])
    return np.asarray(pose, dtype=float)


def _check_conditioning(s00, s01, s11):
    half_tr = 0.5 * (s00 + s11)
    rad = np.sqrt(0.25 * (s00 - s11) ** 2 + s01 * s01)
    lo, hi = half_tr - rad, half_tr + rad
    bad = (lo <= 0.0) | (hi > MAX_CONDITION * np.maximum(lo, 1e-300))
    if np.any(bad):
        raise DegenerateCovarianceError(
            f"{int(np.count_nonzero(bad))} residual covariance(s) numerically singular")


def p2d_residual(target: SurfacePoint, live: SurfacePoint, pose: Pose2) -> float:
    """Squared Mahalanobis distance of the transformed live mean from the target distribution."""
    R = pose.rotation()
    e = R @ np.asarray(live.mean, dtype=float) + pose.translation - np.asarray(target.mean, dtype=float)
    S = np.asarray(target.covariance) + R @ np.asarray(live.covariance) @ R.T
    S = S + RESIDUAL_REGULARIZATION * np.eye(2)
    _check_conditioning(S[0, 0], S[0, 1], S[1, 1])
    return float(e @ np.linalg.solve(S, e))


class Association(NamedTuple):
    src: np.ndarray  # live index
    dst: np.ndarray  # index into the stacked target arrays
    dst_set: np.ndarray
    dst_local: np.ndarray  # index within its own target set

    def __len__(self) -> int:
        return len(self.src)


class RegistrationProblem:
    """Live set against one or more target sets, all targets in a common frame.

    The pose argument of every method maps live coordinates into that frame.
    """

    def __init__(self, live: SurfacePointSet, targets: Sequence[SurfacePointSet], cauchy_c: float, r_max: float):
        if r_max <= 0:
            raise ValueError("r_max must be > 0")
        self.live = live
        self.targets = list(targets)
        self.c = float(cauchy_c)
        self.r_max = float(r_max)
        sizes = [len(t) for t in self.targets]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        if self.targets:
            self.t_means = np.vstack([t.means for t in self.targets])
            self.t_normals = np.vstack([t.normals for t in self.targets])
            self.t_covs = np.concatenate([t.covs for t in self.targets])
        else:
            self.t_means = np.zeros((0, 2))
            self.t_normals = np.zeros((0, 2))
            self.t_covs = np.zeros((0, 2, 2))
        self.trees = [cKDTree(t.means) if len(t) else None for t in self.targets]

    def associate(self, pose) -> Association:
        p = _as_vec(pose)
        c, s = math.cos(p[2]), math.sin(p[2])
        m = self.live.means
        q = np.column_stack([c * m[:, 0] - s * m[:, 1] + p[0], s * m[:, 0] + c * m[:, 1] + p[1]])
        src, dst, sets, local = [], [], [], []
        for k, tree in enumerate(self.trees):
            if tree is None or len(q) == 0:
                continue
            d, j = tree.query(q, k=1, distance_upper_bound=self.r_max * (1.0 + 1e-12))
            hit = np.flatnonzero(d <= self.r_max)
            src.append(hit)
            local.append(j[hit])
            dst.append(j[hit] + self.offsets[k])
            sets.append(np.full(len(hit), k, dtype=np.int64))
        if not src:
            empty = np.zeros(0, dtype=np.int64)
            return Association(empty, empty, empty, empty)
        return Association(np.concatenate(src), np.concatenate(dst), np.concatenate(sets), np.concatenate(local))

    def correspondences(self, pose) -> list[Correspondence]:
        assoc = self.associate(pose)
        w = self._terms(_as_vec(pose), assoc, order=0)[1]
        return [Correspondence(int(i), int(j), int(k), float(wi))
                for i, j, k, wi in zip(assoc.src, assoc.dst_local, assoc.dst_set, w)]

    def _terms(self, p: np.ndarray, assoc: Association, order: int):
        """Per-correspondence quantities. order 0: (s, w); order 1 adds gradient pieces."""
        c, s = math.cos(p[2]), math.sin(p[2])
        ml = self.live.means[assoc.src]
        qx = c * ml[:, 0] - s * ml[:, 1]
        qy = s * ml[:, 0] + c * ml[:, 1]
        mt = self.t_means[assoc.dst]
        ex = qx + p[0] - mt[:, 0]
        ey = qy + p[1] - mt[:, 1]

        cl = self.live.covs[assoc.src]
        la, lb, ld = cl[:, 0, 0], cl[:, 0, 1], cl[:, 1, 1]
        ra = c * c * la - 2.0 * c * s * lb + s * s * ld
        rd = s * s * la + 2.0 * c * s * lb + c * c * ld
        rb = c * s * (la - ld) + (c * c - s * s) * lb
        ct = self.t_covs[assoc.dst]
        s00 = ct[:, 0, 0] + ra + RESIDUAL_REGULARIZATION
        s01 = ct[:, 0, 1] + rb
        s11 = ct[:, 1, 1] + rd + RESIDUAL_REGULARIZATION
        _check_conditioning(s00, s01, s11)
        det = s00 * s11 - s01 * s01
        i00, i01, i11 = s11 / det, -s01 / det, s00 / det
        u0 = i00 * ex + i01 * ey
        u1 = i01 * ex + i11 * ey
        g = ex * u0 + ey * u1

        nl = self.live.normals[assoc.src]
        nt = self.t_normals[assoc.dst]
        m0 = c * nl[:, 0] - s * nl[:, 1]
        m1 = s * nl[:, 0] + c * nl[:, 1]
        dot = m0 * nt[:, 0] + m1 * nt[:, 1]
        w = dot * dot
        if order == 0:
            return g, w
        # d/dtheta of R Sigma R^T is J A - A J = [[-2b, a-d], [a-d, 2b]]
        dg_dth = 2.0 * (-u0 * qy + u1 * qx) - (-2.0 * rb * u0 * u0 + 2.0 * (ra - rd) * u0 * u1 + 2.0 * rb * u1 * u1)
        dw_dth = 2.0 * dot * (-m1 * nt[:, 0] + m0 * nt[:, 1])
        return g, w, (u0, u1, dg_dth, dw_dth, qx, qy, i00, i01, i11, ra - rd, rb, dot, m0, m1, nt)

    def cost(self, pose, assoc: Association | None = None) -> float:
        p = _as_vec(pose)
        if assoc is None:
            assoc = self.associate(p)
        if len(assoc) == 0:
            return 0.0
        g, w = self._terms(p, assoc, order=0)
        return float(np.sum(w * cauchy(g, self.c)))

    def cost_grad_hessian(self, pose, assoc: Association, exact: bool = False):
        """Cost, exact gradient and Hessian with ``assoc`` held fixed.

        The Hessian is Gauss-Newton unless ``exact``, which returns a pair
        (Gauss-Newton, exact second derivative) instead.
        """
        p = _as_vec(pose)
        if len(assoc) == 0:
            H = np.zeros((3, 3))
            return 0.0, np.zeros(3), ((H, H.copy()) if exact else H)
        g, w, (u0, u1, dg_dth, dw_dth, qx, qy, i00, i01, i11, amd, rb, dot, m0, m1, nt) = self._terms(
            p, assoc, order=1)
        c2 = self.c * self.c
        loss = c2 * np.log1p(g / c2)
        dloss = 1.0 / (1.0 + g / c2)
        wl = w * dloss
        grad = np.array([
            np.sum(wl * 2.0 * u0),
            np.sum(wl * 2.0 * u1),
            np.sum(wl * dg_dth + loss * dw_dth),
        ])
        om = 2.0 * wl
        v0 = -i00 * qy + i01 * qx
        v1 = -i01 * qy + i11 * qx
        h00, h01, h11 = np.sum(om * i00), np.sum(om * i01), np.sum(om * i11)
        h02, h12 = np.sum(om * v0), np.sum(om * v1)
        h22 = np.sum(om * (-qy * v0 + qx * v1))
        H = np.array([[h00, h01, h02], [h01, h11, h12], [h02, h12, h22]])
        if exact:
            full = self._exact_hessian(g, w, loss, dloss, u0, u1, dg_dth, dw_dth, qx, qy,
                                       i00, i01, i11, amd, rb, dot, m0, m1, nt)
            return float(np.sum(w * loss)), grad, (H, full)
        return float(np.sum(w * loss)), grad, H


    def _exact_hessian(self, g, w, loss, dloss, u0, u1, dg_dth, dw_dth, qx, qy,
                       i00, i01, i11, amd, rb, dot, m0, m1, nt):
        """Exact second derivative of the fixed-association cost.

        On top of the Gauss-Newton terms it adds the loss curvature, the theta dependence of the rotated live
        covariance and the curvature of the normal weight.
        """
        c2 = self.c * self.c
        # dS/dtheta = [[-2b, a-d], [a-d, 2b]], d2S/dtheta2 = [[-2(a-d), -4b], [-4b, 2(a-d)]]
        sp00, sp01, sp11 = -2.0 * rb, amd, 2.0 * rb
        # du/dtheta = P (e' - S' u) with e' = (-qy, qx)
        r0 = -qy - (sp00 * u0 + sp01 * u1)
        r1 = qx - (sp01 * u0 + sp11 * u1)
        du0 = i00 * r0 + i01 * r1
        du1 = i01 * r0 + i11 * r1
        g_tt = 2.0 * (du0 * -qy + du1 * qx) - 2.0 * (u0 * qx + u1 * qy) \
            - 2.0 * (du0 * (sp00 * u0 + sp01 * u1) + du1 * (sp01 * u0 + sp11 * u1)) \
            - (-2.0 * amd * (u0 * u0 - u1 * u1) - 8.0 * rb * u0 * u1)
        g_xt, g_yt = 2.0 * du0, 2.0 * du1
        wl = w * dloss
        wc = w * (-dloss * dloss / c2)
        jg = np.stack([2.0 * u0, 2.0 * u1, dg_dth])
        H = (jg * wc) @ jg.T
        H[0, 0] += np.sum(wl * 2.0 * i00)
        H[0, 1] += np.sum(wl * 2.0 * i01)
        H[1, 1] += np.sum(wl * 2.0 * i11)
        H[0, 2] += np.sum(wl * g_xt)
        H[1, 2] += np.sum(wl * g_yt)
        H[2, 2] += np.sum(wl * g_tt)
        cross = jg @ (dloss * dw_dth)
        H[:, 2] += cross
        H[2, :] += cross
        ddot = -m1 * nt[:, 0] + m0 * nt[:, 1]
        H[2, 2] += np.sum(loss * 2.0 * (ddot * ddot - dot * dot))
        H[1, 0], H[2, 0], H[2, 1] = H[0, 1], H[0, 2], H[1, 2]
        return H


def find_correspondences(live: SurfacePointSet, target: SurfacePointSet, pose: Pose2,
                         r_max: float) -> list[Correspondence]:
    """Nearest target mean within ``r_max`` of every transformed live mean."""
    return RegistrationProblem(live, [target], 1.0, r_max).correspondences(pose)


def scan_to_keyframe_cost(target: SurfacePointSet, live: SurfacePointSet, pose: Pose2,
                          cfg: PipelineConfig) -> float:
    return RegistrationProblem(live, [target], cfg.cauchy_c, cfg.correspondence_radius).cost(pose)


def register(live: SurfacePointSet, targets: Sequence[SurfacePointSet], init: Pose2,
             cfg: PipelineConfig, trace: TextIO | None = None) -> RegistrationResult:
    """Minimise the summed robust cost of ``live`` against every target set.

    Targets share one frame; ``init`` is the initial guess of the live sensor
    pose in it. The problem is solved relative to ``init`` so results do not
    depend on where the common frame is anchored.

    Raises InsufficientCorrespondencesError with fewer than 10 correspondences
    at ``init`` and DivergedError when five consecutive damping escalations
    each produce a higher cost than the last.
    """
    if not targets:
        raise ValueError("register needs at least one target set")
    to_local = init.inverse()
    local = [transform_surface_points(t, to_local) for t in targets]
    prob = RegistrationProblem(live, local, cfg.cauchy_c, cfg.correspondence_radius)

    p = np.zeros(3)
    assoc = prob.associate(p)
    if len(assoc) < MIN_CORRESPONDENCES:
        raise InsufficientCorrespondencesError(
            f"only {len(assoc)} correspondences at the initial guess (need {MIN_CORRESPONDENCES})")
    cost, grad, (H, H_exact) = prob.cost_grad_hessian(p, assoc, exact=True)
    best_cost, best_p, best_n = cost, p.copy(), len(assoc)
    accepted = [cost]
    lam = LAMBDA_INIT
    rejected_costs: list[float] = []
    converged = False
    it = 0
    if trace is not None:
        trace.write("iteration,cost,candidate_cost,lambda,step_norm,accepted,n_correspondences\n")

    while it < cfg.max_iters:
        it += 1
        diag = np.maximum(np.diag(H), 1e-12 * max(float(np.max(np.diag(H))), 1.0))
        try:
            step = np.linalg.solve(H + lam * np.diag(diag), -grad)
        except np.linalg.LinAlgError:
            step = -grad / (lam * diag)
        if np.linalg.norm(step) < NEWTON_RADIUS:
            # close in: the exact Hessian turns the linear Gauss-Newton tail quadratic
            try:
                np.linalg.cholesky(H_exact)
                step = np.linalg.solve(H_exact + lam * np.diag(diag), -grad)
            except np.linalg.LinAlgError:
                pass
        step_norm = float(np.linalg.norm(step))
        if not np.isfinite(step_norm):
            raise DivergedError("non-finite LM step")
        if step_norm < cfg.conv_tol:
            converged = True
            if trace is not None:
                trace.write(f"{it},{cost!r},,{lam!r},{step_norm!r},0,{len(assoc)}\n")
            break
        cand = p + step
        cand_cost = prob.cost(cand, assoc)
        ok = cand_cost < cost
        if trace is not None:
            trace.write(f"{it},{cost!r},{cand_cost!r},{lam!r},{step_norm!r},{int(ok)},{len(assoc)}\n")
        if ok:
            accepted.append(cand_cost)
            p = cand
            lam = max(lam / 10.0, 1e-12)
            rejected_costs.clear()
            assoc = prob.associate(p)
            cost, grad, (H, H_exact) = prob.cost_grad_hessian(p, assoc, exact=True)
            if cost < best_cost:
                best_cost, best_p, best_n = cost, p.copy(), len(assoc)
            if len(assoc) == 0:
                break
        else:
            lam *= 10.0
            rejected_costs.append(cand_cost)
            tail = rejected_costs[-DIVERGENCE_ESCALATIONS:]
            if len(tail) == DIVERGENCE_ESCALATIONS and all(b > a for a, b in zip(tail, tail[1:])):
                raise DivergedError(f"cost rose over {DIVERGENCE_ESCALATIONS} consecutive damping escalations")

    # lowest cost seen at a (re-associated) iterate
    pose = init.compose(Pose2(*best_p))
    log.debug("register: %d iterations, cost %.6g, converged=%s", it, best_cost, converged)
    return RegistrationResult(pose, it, best_cost, converged, best_n, accepted)
