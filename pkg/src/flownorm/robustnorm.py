"""Huber and flow-norm weights for iteratively reweighted direct alignment.

The flow-norm factor compares, per correspondence, the local direction in
which the photometric residual decreases with the direction from the
current projection ``p'`` towards the flow position ``p°``:

* inside the activation disc ``||p° - p'|| <= a * sigma`` the factor is 1;
* otherwise the tangent cone from ``p'`` onto the circle of radius
  ``b * sigma`` around ``p°`` has half-angle ``theta0`` with
  ``cos(theta0) = sqrt(|v|^2 - r^2) / |v|``;
* descent directions inside the cone keep weight 1, others get
  ``(cos(theta) + 1) / (cos(theta0) + 1)`` floored at ``min_weight``.

``mode="paper-literal"`` evaluates the formula exactly as printed instead
(``v = p' - p°``, unsigned gradient, ratio applied when
``cos(theta0) < cos(theta)``); it can exceed 1 and is kept for comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError, NoConeError

HUBER_DELTA = 9.0
MODES = ("canonical", "paper-literal")


@dataclass(frozen=True)
class FlowNormParams:
    activation_radius_multiplier: float = 2.0
    tangent_radius_multiplier: float = 1.0
    min_weight: float = 0.01
    mode: str = "canonical"

    def __post_init__(self):
        if not (self.activation_radius_multiplier > 0 and self.tangent_radius_multiplier > 0):
            raise InputError("flow-norm radius multipliers must be positive")
        if not 0.0 <= self.min_weight <= 1.0:
            raise InputError("min_weight must lie in [0, 1]")
        if self.mode not in MODES:
            raise InputError(f"unknown flow-norm mode {self.mode!r}")


@dataclass(frozen=True)
class CorrespondenceGeometry:
    projected: np.ndarray  # p'
    flow_position: np.ndarray  # p°
    residual: float
    gradient: np.ndarray  # de/dp'
    sigma: float


def cos_theta0(v_norm, radius):
    """Cosine of the half-angle of the tangent cone onto a circle of ``radius``."""
    if not v_norm > radius:
        raise NoConeError(f"point at distance {v_norm} lies inside the circle of radius {radius}")
    return math.sqrt(v_norm * v_norm - radius * radius) / v_norm


def flow_norm_factors(projected, flow_position, residual, gradient, sigma, params=FlowNormParams()):
    """Vectorised flow-norm factor for (N, 2) positions and gradients."""
    projected = np.asarray(projected, dtype=float).reshape(-1, 2)
    flow_position = np.asarray(flow_position, dtype=float).reshape(-1, 2)
    residual = np.asarray(residual, dtype=float).reshape(-1)
    gradient = np.asarray(gradient, dtype=float).reshape(-1, 2)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), residual.shape)

    if params.mode == "canonical":
        u = flow_position - projected
        d = -np.sign(residual)[:, None] * gradient
    else:
        u = projected - flow_position
        d = gradient
    dist = np.hypot(u[:, 0], u[:, 1])
    dnorm = np.hypot(d[:, 0], d[:, 1])
    radius = params.tangent_radius_multiplier * sigma
    in_disc = dist <= params.activation_radius_multiplier * sigma
    degenerate = (dnorm == 0) | (dist == 0)
    if params.mode == "canonical":
        degenerate |= residual == 0
    # points inside the tangent circle itself have no cone; treat as near
    in_circle = dist <= radius
    safe = ~(in_disc | degenerate | in_circle)

    dist_s = np.where(safe, dist, 1.0)
    cos_t = np.where(safe, np.einsum("ij,ij->i", u, d) / (dist_s * np.where(safe, dnorm, 1.0)), 1.0)
    cos_t = np.clip(cos_t, -1.0, 1.0)
    r_s = np.where(safe, radius, 0.0)
    cos_t0 = np.sqrt(np.maximum(dist_s * dist_s - r_s * r_s, 0.0)) / dist_s
    ratio = (cos_t + 1.0) / (cos_t0 + 1.0)

    if params.mode == "canonical":
        s = np.where(cos_t >= cos_t0, 1.0, np.maximum(params.min_weight, ratio))
    else:
        s = np.where(cos_t <= cos_t0, 1.0, ratio)
    return np.where(safe, s, 1.0)


def flow_norm_factor(g, params=FlowNormParams()):
    if not g.sigma > 0:
        raise InputError("sigma must be positive")
    return float(
        flow_norm_factors(g.projected, g.flow_position, [g.residual], g.gradient, g.sigma, params)[0]
    )


def huber_weight(e, delta=HUBER_DELTA):
    """IRLS weight of the Huber norm: 1 inside ``delta``, ``delta/|e|`` outside."""
    a = np.abs(np.asarray(e, dtype=float))
    w = np.where(a <= delta, 1.0, delta / np.where(a > 0, a, 1.0))
    return w if w.ndim else float(w)


def huber_cost(e, delta=HUBER_DELTA):
    """``2 * rho(e)`` so that it equals ``e**2`` inside ``delta``."""
    a = np.abs(np.asarray(e, dtype=float))
    return np.where(a <= delta, a * a, delta * (2.0 * a - delta))


def compose_weights(system, flow, params=FlowNormParams(), huber_delta=HUBER_DELTA, level_uses_flownorm=True):
    """Diagonal S = Huber weight x flow-norm factor (masked rows stay 0).

    The flow-norm factor is evaluated once per correspondence from its
    central row and shared by all rows of a patch. Correspondences with an
    invalid flow query keep factor 1, as do all rows when ``flow`` is None
    or the level is not a flow-norm level.
    """
    h = huber_weight(system.residuals, huber_delta)
    factors = np.ones(len(system.residuals))
    if level_uses_flownorm and flow is not None:
        from .flow import query_flow_points

        c = system.center_rows
        src_centres = system.source_pixels[c]
        p_o, ok = query_flow_points(flow, src_centres, system.level)
        ok &= system.valid[c]
        sigma_l = flow.sigma / 2.0**system.level
        per_point = flow_norm_factors(
            system.projected[c], p_o, system.residuals[c], system.gradients[c], sigma_l, params
        )
        per_point = np.where(ok, per_point, 1.0)
        factors = per_point[system.point_index]
    valid = system.valid
    w = np.where(valid, h * factors, 0.0)
    return system.with_weights(w, np.where(valid, h, 0.0), np.where(valid, factors, 1.0))


def classify_1d(points):
    """Flag 1D correspondences whose gradient step moves ``t`` the right way.

    ``points`` is an iterable of ``(residual, slope, true_direction)``; a point
    contributes iff ``residual * slope`` has the opposite sign of the true
    direction. Zero residual or slope counts as contributing.
    """
    flags = []
    for e, slope, direction in points:
        g = e * slope
        flags.append(bool(g == 0 or np.sign(g) == -np.sign(direction)))
    return flags
