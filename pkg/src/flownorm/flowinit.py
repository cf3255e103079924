"""Initial pose from flow correspondences, and the queue of trial initialisations."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateSystemError, FlowNormError, InputError, TooFewPointsError
from .flow import query_flow_points
from .geometry import SE3Pose, point_jacobians, project_points, retract
from .residuals import MIN_POINTS
from .solver import SolverConfig, lm_step, solve_pose

log = logging.getLogger(__name__)

GEOMETRIC_HUBER_PX = 2.0
ACCEPT_COARSE_RMS = 6.0


def _geometric_terms(pixels, inv_d, targets, T, K, delta):
    uv, ok, X_t = project_points(pixels, T, inv_d, K, margin=-np.inf)
    r = uv - targets
    norm = np.hypot(r[:, 0], r[:, 1])
    w = np.where(norm <= delta, 1.0, delta / np.maximum(norm, 1e-300))
    cost = np.where(norm <= delta, norm * norm, delta * (2.0 * norm - delta))
    return r, w, ok, float(np.sum(np.where(ok, cost, 0.0))), X_t


def flow_init_pose(points, flow, K, huber_px=GEOMETRIC_HUBER_PX, max_iterations=100, tol=1e-10):
    """Minimise the Huberised reprojection gap to the flow positions, from identity.

    Falls back to the identity pose if the optimisation does not converge.
    """
    pixels = points.pixels_at(0)
    targets, ok = query_flow_points(flow, pixels, 0)
    if np.count_nonzero(ok) < MIN_POINTS:
        raise TooFewPointsError(
            f"only {np.count_nonzero(ok)} points have a valid flow position", kind="too-few-correspondences"
        )
    pixels, targets, inv_d = pixels[ok], targets[ok], points.inverse_depths[ok]
    T = SE3Pose.identity()
    lam = 1e-4
    r, w, valid, cost, X_t = _geometric_terms(pixels, inv_d, targets, T, K, huber_px)
    for _ in range(max_iterations):
        J = point_jacobians(X_t, K)  # (N, 2, 6)
        wv = np.where(valid, w, 0.0)
        H = np.einsum("n,nij,nik->jk", wv, J, J)
        g = np.einsum("n,nij,ni->j", wv, J, r)
        try:
            step = lm_step(H, g, lam)
        except DegenerateSystemError:
            break
        if np.linalg.norm(step) < tol:
            return T
        T_new = retract(T, step)
        r2, w2, valid2, cost2, X2 = _geometric_terms(pixels, inv_d, targets, T_new, K, huber_px)
        if cost2 < cost and np.count_nonzero(valid2) >= MIN_POINTS:
            T, r, w, valid, cost, X_t = T_new, r2, w2, valid2, cost2, X2
            lam = max(lam * 0.5, 1e-12)
            if cost < 1e-20:
                return T
        else:
            lam *= 10.0
            if lam > 1e12:
                return T
    log.warning("flow initialisation did not converge; falling back to identity")
    return SE3Pose.identity()


def geometric_cost(points, flow, K, T):
    """Sum of squared reprojection gaps (pixels^2) at pose ``T``."""
    pixels = points.pixels_at(0)
    targets, ok = query_flow_points(flow, pixels, 0)
    uv, _, _ = project_points(pixels[ok], T, points.inverse_depths[ok], K, margin=-np.inf)
    d = uv - targets[ok]
    return float(np.sum(d * d))


@dataclass
class InitCandidateQueue:
    poses: list
    labels: list = field(default_factory=list)

    def __post_init__(self):
        if not self.poses:
            raise InputError("candidate queue must not be empty")
        if not self.labels:
            self.labels = [f"candidate-{i}" for i in range(len(self.poses))]
        for p in self.poses:
            if not (np.all(np.isfinite(p.rotation)) and np.all(np.isfinite(p.translation))):
                raise InputError("candidate poses must be finite")

    def __len__(self):
        return len(self.poses)


def default_queue(previous_motion=None, flow_init=None):
    """Constant-velocity guess, then the flow initialisation, then identity."""
    poses, labels = [], []
    if previous_motion is not None:
        poses.append(previous_motion)
        labels.append("constant-velocity")
    if flow_init is not None:
        poses.append(flow_init)
        labels.append("flow-init")
    poses.append(SE3Pose.identity())
    labels.append("identity")
    return InitCandidateQueue(poses, labels)


def try_candidates(queue, I_s, I_t, points, K, flow=None, cfg=SolverConfig(), accept_rms=ACCEPT_COARSE_RMS):
    """Track from each candidate in order until one is good enough.

    A result is good enough when it converged and its RMS residual on the
    coarsest level is at most ``accept_rms``. The returned result is the
    lowest final-cost one among the candidates tried (earliest wins ties),
    with ``chosen`` set to its queue label. If no candidate is good enough,
    that result is reported with ``converged=False``.
    """
    tried = []
    errors = []
    accepted = False
    for label, T0 in zip(queue.labels, queue.poses):
        try:
            res = solve_pose(I_s, I_t, points, K, T0, flow, cfg)
        except FlowNormError as exc:
            errors.append(exc)
            continue
        res.chosen = label
        tried.append(res)
        coarse = max(res.rms)
        if res.converged and res.rms[coarse] <= accept_rms:
            accepted = True
            break
    if not tried:
        raise errors[-1]
    best = min(tried, key=lambda r: (r.final_cost if math.isfinite(r.final_cost) else math.inf))
    best.candidates_tried = len(tried)
    if not accepted:
        best.converged = False
    return best
