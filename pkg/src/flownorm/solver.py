"""Coarse-to-fine Levenberg-Marquardt pose tracking with flow-norm weighting."""

from __future__ import annotations

import csv
import math
from concurrent.futures import Future
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateSystemError, InputError, TooFewPointsError
from .flow import query_flow_points
from .geometry import retract
from .residuals import MIN_POINTS, PATTERN8, SINGLE_PIXEL, evaluate, update_inverse_depths
from .robustnorm import HUBER_DELTA, FlowNormParams, compose_weights, huber_cost

PATTERNS = {"single": SINGLE_PIXEL, "patch8": PATTERN8}
TRACE_COLUMNS = (
    "level", "iter", "lambda", "cost_before", "cost", "step_norm", "accepted", "downweighted_fraction", "mode",
)


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 50
    step_threshold: float = 1e-6
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.5
    lambda_max: float = 1e12
    levels: int = 4
    flownorm_levels: tuple = (3, 2)
    huber_delta: float = HUBER_DELTA
    flownorm: FlowNormParams = field(default_factory=FlowNormParams)
    joint_depth: bool = False
    joint_outer_iterations: int = 10
    pattern: str = "single"

    def __post_init__(self):
        if not (self.step_threshold > 0 and self.lambda_init > 0 and self.huber_delta > 0):
            raise InputError("solver thresholds must be positive")
        if self.max_iterations < 1 or self.levels < 1:
            raise InputError("iteration cap and level count must be positive")
        object.__setattr__(self, "flownorm_levels", tuple(sorted(set(self.flownorm_levels), reverse=True)))
        if any(not 0 <= lv < self.levels for lv in self.flownorm_levels):
            raise InputError(f"flow-norm levels {self.flownorm_levels} outside 0..{self.levels - 1}")
        if self.pattern not in PATTERNS:
            raise InputError(f"unknown residual pattern {self.pattern!r}")

    @property
    def pattern_offsets(self):
        return PATTERNS[self.pattern]


@dataclass
class AlignmentResult:
    pose: object
    converged: bool
    iterations: dict
    costs: dict
    rms: dict
    downweighted_fraction: dict
    flow_gap: float
    trace: list = field(default_factory=list)

    @property
    def final_cost(self):
        return self.costs.get(0, math.inf)

    def summary(self):
        return {
            "converged": self.converged,
            "pose": {
                "rotation": self.pose.rotation.tolist(),
                "translation": self.pose.translation.tolist(),
                "quaternion_xyzw": self.pose.quaternion().tolist(),
            },
            "iterations": {str(k): v for k, v in self.iterations.items()},
            "costs": {str(k): v for k, v in self.costs.items()},
            "rms": {str(k): v for k, v in self.rms.items()},
            "downweighted_fraction": {str(k): v for k, v in self.downweighted_fraction.items()},
            "flow_gap": self.flow_gap,
        }


def resolve_flow(flow):
    """Accept a FlowField, None, or a Future that may not have finished yet."""
    if isinstance(flow, Future):
        if not flow.done() or flow.cancelled() or flow.exception() is not None:
            return None
        return flow.result()
    return flow


def weighted_cost(system, huber_delta=HUBER_DELTA):
    """Sum over valid rows of flow factor x Huber cost (``e**2`` inside delta)."""
    return _cost(system, huber_delta)


def _cost(system, delta, factors=None, fallback=None):
    f = system.flow_factors if factors is None else factors
    terms = f * huber_cost(system.residuals, delta)
    if fallback is None:
        return float(np.sum(np.where(system.valid, terms, 0.0)))
    # rows that left the image keep their previous contribution
    prev_valid, prev_terms = fallback
    return float(np.sum(np.where(system.valid & prev_valid, terms, 0.0)) + np.sum(np.where(prev_valid & ~system.valid, prev_terms, 0.0)))


def normal_equations(J, w, e):
    JtW = (J * w[:, None]).T
    return JtW @ J, JtW @ e


def lm_step(H, g, lam):
    d = np.diag(H).copy()
    floor = 1e-12 * max(float(d.max()), 1e-12)
    A = H + lam * np.diag(np.maximum(d, floor))
    try:
        step = -np.linalg.solve(A, g)
    except np.linalg.LinAlgError as exc:
        raise DegenerateSystemError("normal equations are singular") from exc
    if not np.all(np.isfinite(step)):
        raise DegenerateSystemError("normal equations produced a non-finite step")
    return step


def _flow_gap(system, flow):
    if flow is None:
        return math.nan
    c = system.center_rows
    p_o, ok = query_flow_points(flow, system.source_pixels[c], system.level)
    ok &= system.valid[c]
    if not ok.any():
        return math.nan
    d = p_o[ok] - system.projected[c][ok]
    return float(np.mean(np.hypot(d[:, 0], d[:, 1])))


def solve_level(I_s, I_t, points, K, T, level, flow, cfg, trace=None, weight_hook=None):
    """LM iterations on one pyramid level; returns ``(T, stats)``."""
    use_fn = flow is not None and level in cfg.flownorm_levels
    pattern = cfg.pattern_offsets
    params = cfg.flownorm
    delta = cfg.huber_delta

    def weigh(system):
        s = compose_weights(system, flow, params, delta, use_fn)
        if weight_hook is not None:
            s = weight_hook(s, level, use_fn)
        return s

    system = weigh(evaluate(points, I_s, I_t, T, K, level, pattern))
    terms = system.flow_factors * huber_cost(system.residuals, delta)
    cost = _cost(system, delta)
    lam = cfg.lambda_init
    iterations = 0
    by_step = False
    while iterations < cfg.max_iterations:
        H, g = normal_equations(system.jacobian, system.weights, system.residuals)
        step = lm_step(H, g, lam)
        iterations += 1
        step_norm = float(np.linalg.norm(step))
        if step_norm < cfg.step_threshold:
            by_step = True
            _trace(trace, level, iterations, lam, cost, cost, step_norm, False, system, params)
            break
        T_new = retract(T, step)
        trial = evaluate(points, I_s, I_t, T_new, K, level, pattern, strict=False)
        new_cost = math.inf
        if trial.n_valid >= MIN_POINTS:
            new_cost = _cost(trial, delta, system.flow_factors, (system.valid, terms))
        accepted = new_cost < cost
        _trace(trace, level, iterations, lam, cost, new_cost, step_norm, accepted, system, params)
        if accepted:
            T = T_new
            lam = max(lam * cfg.lambda_down, 1e-12)
            system = weigh(trial)
            terms = system.flow_factors * huber_cost(system.residuals, delta)
            cost = _cost(system, delta)
        else:
            lam *= cfg.lambda_up
            if lam > cfg.lambda_max:
                break
    n = max(system.n_valid, 1)
    stats = {
        "iterations": iterations,
        "cost": cost,
        "rms": float(math.sqrt(np.sum(system.residuals[system.valid] ** 2) / n)),
        "downweighted": float(np.count_nonzero(system.valid & (system.flow_factors < 1.0)) / n),
        "by_step": by_step,
        "system": system,
    }
    return T, stats


def _trace(trace, level, it, lam, cost_before, cost, step_norm, accepted, system, params):
    if trace is None:
        return
    n = max(system.n_valid, 1)
    trace.append(
        {
            "level": level,
            "iter": it,
            "lambda": lam,
            "cost_before": cost_before,
            "cost": cost,
            "step_norm": step_norm,
            "accepted": int(accepted),
            "downweighted_fraction": float(np.count_nonzero(system.valid & (system.flow_factors < 1.0)) / n),
            "mode": params.mode,
        }
    )


def solve_pose(I_s, I_t, points, K, T_init, flow=None, cfg=SolverConfig(), trace=None, weight_hook=None):
    """Track the pose of ``I_t`` relative to ``I_s`` from coarse to fine.

    Flow-norm factors are used only on ``cfg.flownorm_levels`` and only when a
    flow field is available; otherwise the solver is a plain Huber IRLS/LM.
    ``weight_hook(system, level, uses_flownorm)`` may replace the composed
    weights (used for instrumentation).
    """
    if len(points) < MIN_POINTS:
        raise TooFewPointsError(f"{len(points)} points, need {MIN_POINTS}")
    flow = resolve_flow(flow)
    n_levels = min(cfg.levels, len(I_s.levels), len(I_t.levels))
    T = T_init
    res = AlignmentResult(T, False, {}, {}, {}, {}, math.nan, trace if trace is not None else [])
    last = None
    for level in range(n_levels - 1, -1, -1):
        T, st = solve_level(I_s, I_t, points, K, T, level, flow, cfg, res.trace, weight_hook)
        res.iterations[level] = st["iterations"]
        res.costs[level] = st["cost"]
        res.rms[level] = st["rms"]
        res.downweighted_fraction[level] = st["downweighted"]
        last = st
    res.pose = T
    res.converged = bool(last["by_step"] and math.isfinite(last["cost"]))
    res.flow_gap = _flow_gap(last["system"], flow)
    return res


def solve_joint(I_s, I_t, points, K, T_init, flow=None, cfg=SolverConfig(), trace=None, fix_pose=False):
    """Pose tracking followed by alternating pose / inverse-depth passes at level 0.

    Returns ``(AlignmentResult, PointSet)``. An outer iteration whose weighted
    cost does not decrease is rolled back and ends the alternation, so the
    cost sequence is non-increasing.
    """
    flow = resolve_flow(flow)
    pattern = cfg.pattern_offsets
    if fix_pose:
        res = AlignmentResult(T_init, True, {}, {}, {}, {}, math.nan, trace if trace is not None else [])
        T = T_init
    else:
        res = solve_pose(I_s, I_t, points, K, T_init, flow, cfg, trace)
        T = res.pose

    def level0_cost(pts, pose):
        s = compose_weights(
            evaluate(pts, I_s, I_t, pose, K, 0, pattern), flow, cfg.flownorm, cfg.huber_delta, 0 in cfg.flownorm_levels
        )
        return _cost(s, cfg.huber_delta), s

    cost, system = level0_cost(points, T)
    history = [cost]
    converged = res.converged
    for _ in range(cfg.joint_outer_iterations):
        new_points = update_inverse_depths(points, I_s, I_t, T, K, 0, pattern)
        new_T, st = T, None
        if not fix_pose:
            new_T, st = solve_level(I_s, I_t, new_points, K, T, 0, flow, cfg, res.trace)
        new_cost, new_system = level0_cost(new_points, new_T)
        if not new_cost < cost:
            break
        points, T, cost, system = new_points, new_T, new_cost, new_system
        history.append(cost)
        if st is not None:
            converged = bool(st["by_step"])
            res.iterations[0] = res.iterations.get(0, 0) + st["iterations"]
    res.pose = T
    res.converged = converged and math.isfinite(cost)
    res.costs[0] = cost
    n = max(system.n_valid, 1)
    res.rms[0] = float(math.sqrt(np.sum(system.residuals[system.valid] ** 2) / n))
    res.flow_gap = _flow_gap(system, flow)
    res.cost_history = history
    return res, points


def write_trace(path, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS, extrasaction="ignore", lineterminator="\n")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
