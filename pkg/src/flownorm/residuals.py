"""Point selection, photometric residuals and their Jacobians."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DegenerateSystemError, TooFewPointsError
from .geometry import (
    Landmark,
    from_level,
    inverse_depth_jacobians,
    point_jacobians,
    project_points,
    to_level,
)
from .imagedata import sample_points

MIN_POINTS = 6
GRID_CELL = 8
SELECTION_BORDER = 3

SINGLE_PIXEL = np.zeros((1, 2))
# DSO's 8-pixel residual pattern; (0, 0) is the centre used for flow-norm geometry
PATTERN8 = np.array(
    [[0, -2], [-1, -1], [1, -1], [-2, 0], [0, 0], [2, 0], [-1, 1], [0, 2]], dtype=float
)


@dataclass(frozen=True)
class PointSet:
    """Selected source pixels (in coordinates of pyramid ``level``) and inverse depths."""

    pixels: np.ndarray
    inverse_depths: np.ndarray
    level: int = 0

    def __post_init__(self):
        px = np.array(self.pixels, dtype=float).reshape(-1, 2)
        d = np.array(self.inverse_depths, dtype=float).reshape(-1)
        if len(px) != len(d):
            raise ValueError("pixels and inverse depths differ in length")
        if np.any(~(d > 0)):
            raise ValueError("inverse depths must be positive")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "inverse_depths", d)

    def __len__(self):
        return len(self.inverse_depths)

    @property
    def landmarks(self):
        return [Landmark(p, float(d)) for p, d in zip(self.pixels, self.inverse_depths)]

    def pixels_at(self, level):
        if level == self.level:
            return self.pixels
        return to_level(from_level(self.pixels, self.level), level)

    def with_inverse_depths(self, inverse_depths):
        return replace(self, inverse_depths=np.asarray(inverse_depths, dtype=float))


@dataclass(frozen=True)
class WeightedSystem:
    """Stacked residuals E, Jacobian J and diagonal weights S for one level.

    Rows are grouped per point (``point_index``); with a patch pattern each
    point owns several rows and ``center_rows`` indexes the (0, 0) member.
    """

    residuals: np.ndarray
    jacobian: np.ndarray
    weights: np.ndarray
    valid: np.ndarray
    projected: np.ndarray
    gradients: np.ndarray
    source_pixels: np.ndarray
    point_index: np.ndarray
    center_rows: np.ndarray
    level: int
    huber_factors: np.ndarray = None
    flow_factors: np.ndarray = None

    @property
    def n_valid(self):
        return int(np.count_nonzero(self.valid))

    def with_weights(self, weights, huber_factors=None, flow_factors=None):
        return replace(self, weights=weights, huber_factors=huber_factors, flow_factors=flow_factors)


def select_points(pyr, depth, level=0, target_count=800, cell=GRID_CELL):
    """Pick up to ``target_count`` well-textured pixels with valid depth.

    Pixels must exceed the median gradient magnitude of the level. Each
    ``cell`` x ``cell`` block contributes its strongest pixels first; the
    per-cell capacity grows only as far as needed to reach the target.
    """
    grad = pyr.gradients[level]
    h, w = grad.shape[:2]
    mag = np.hypot(grad[..., 0], grad[..., 1])
    threshold = float(np.median(mag))

    depth = np.asarray(depth, dtype=float)
    vv, uu = np.mgrid[0:h, 0:w]
    if level == 0:
        z = depth[:h, :w]
    else:
        full = np.rint(from_level(np.stack([uu, vv], axis=-1), level)).astype(np.intp)
        full[..., 0] = np.clip(full[..., 0], 0, depth.shape[1] - 1)
        full[..., 1] = np.clip(full[..., 1], 0, depth.shape[0] - 1)
        z = depth[full[..., 1], full[..., 0]]
    b = SELECTION_BORDER
    inner = (uu >= b) & (uu < w - b) & (vv >= b) & (vv < h - b)
    ok = inner & np.isfinite(z) & (z > 0) & (mag > threshold)

    idx = np.flatnonzero(ok.ravel())
    if len(idx) < MIN_POINTS:
        raise TooFewPointsError(f"only {len(idx)} selectable pixels (need {MIN_POINTS})")
    m = mag.ravel()[idx]
    cells_x = (w + cell - 1) // cell
    cell_id = (vv.ravel()[idx] // cell) * cells_x + uu.ravel()[idx] // cell
    # rank inside each cell by descending magnitude, raster order breaking ties
    order = np.lexsort((idx, -m, cell_id))
    sorted_cells = cell_id[order]
    starts = np.r_[0, np.flatnonzero(np.diff(sorted_cells)) + 1]
    run_start = np.repeat(starts, np.diff(np.r_[starts, len(order)]))
    rank = np.empty(len(idx), dtype=np.intp)
    rank[order] = np.arange(len(order)) - run_start

    pick = np.lexsort((idx, -m, rank))[: min(target_count, len(idx))]
    chosen = np.sort(idx[pick])
    u = (chosen % w).astype(float)
    v = (chosen // w).astype(float)
    return PointSet(np.stack([u, v], axis=1), 1.0 / z.ravel()[chosen], level)


def _source_samples(points, I_s, level, pattern):
    ps = points.pixels_at(level)
    m = len(pattern)
    src = (ps[:, None, :] + pattern[None, :, :]).reshape(-1, 2)
    vals, _, ok = sample_points(I_s.levels[level].data, src)
    return ps, src, vals, ok, m


def _center_index(pattern):
    hits = np.flatnonzero(np.all(pattern == 0.0, axis=1))
    if len(hits) == 0:
        raise ValueError("residual pattern must contain the (0, 0) offset")
    return int(hits[0])


def evaluate(points, I_s, I_t, T, K, level, pattern=SINGLE_PIXEL, strict=True):
    """Residuals and pose Jacobian of every point at pyramid ``level``.

    ``K`` is the full-resolution intrinsics; it is rescaled to the level here.
    Weights are initialised to 1 on valid rows and 0 elsewhere. With
    ``strict`` a system with fewer than six valid rows raises
    ``DegenerateSystemError``.
    """
    pattern = np.asarray(pattern, dtype=float).reshape(-1, 2)
    Kl = K.at_level(level)
    _, src, i_s, src_ok, m = _source_samples(points, I_s, level, pattern)
    inv_d = np.repeat(points.inverse_depths, m)
    uv, proj_ok, X_t = project_points(src, T, inv_d, Kl)
    i_t, grad, tgt_ok = sample_points(I_t.levels[level].data, uv)
    valid = src_ok & proj_ok & tgt_ok

    e = np.where(valid, i_t - i_s, 0.0)
    Jp = point_jacobians(np.where(valid[:, None], X_t, [0.0, 0.0, 1.0]), Kl)
    J = np.einsum("ni,nij->nj", grad, Jp)
    J[~valid] = 0.0
    grad = np.where(valid[:, None], grad, 0.0)

    n = len(points)
    system = WeightedSystem(
        residuals=e,
        jacobian=J,
        weights=valid.astype(float),
        valid=valid,
        projected=uv,
        gradients=grad,
        source_pixels=src,
        point_index=np.repeat(np.arange(n), m),
        center_rows=np.arange(n) * m + _center_index(pattern),
        level=level,
    )
    if strict and system.n_valid < MIN_POINTS:
        raise DegenerateSystemError(f"only {system.n_valid} valid residuals at level {level}")
    return system


def _depth_terms(points, inv_d, I_s, I_t, T, Kl, level, pattern):
    _, src, i_s, src_ok, m = _source_samples(points, I_s, level, pattern)
    d_rows = np.repeat(inv_d, m)
    uv, proj_ok, X_t = project_points(src, T, d_rows, Kl)
    i_t, grad, tgt_ok = sample_points(I_t.levels[level].data, uv)
    valid = src_ok & proj_ok & tgt_ok
    e = np.where(valid, i_t - i_s, 0.0)
    Jd = inverse_depth_jacobians(src, T, d_rows, np.where(valid[:, None], X_t, [0.0, 0.0, 1.0]), Kl)
    j = np.where(valid, np.einsum("ni,ni->n", grad, Jd), 0.0)
    n = len(points)
    sse = np.bincount(np.repeat(np.arange(n), m), weights=e * e, minlength=n)
    all_ok = np.bincount(np.repeat(np.arange(n), m), weights=~valid, minlength=n) == 0
    return e, j, sse, all_ok, m


def update_inverse_depths(points, I_s, I_t, T, K, level, pattern=SINGLE_PIXEL, max_halvings=8):
    """One independent scalar Gauss-Newton step on each point's inverse depth.

    A step is accepted only if it does not increase the point's squared
    residual; otherwise it is halved up to ``max_halvings`` times and the
    point is left unchanged if none of the trials improves.
    """
    pattern = np.asarray(pattern, dtype=float).reshape(-1, 2)
    Kl = K.at_level(level)
    d0 = points.inverse_depths
    n = len(points)
    e, j, sse0, ok0, m = _depth_terms(points, d0, I_s, I_t, T, Kl, level, pattern)
    rows = np.repeat(np.arange(n), m)
    g = np.bincount(rows, weights=j * e, minlength=n)
    H = np.bincount(rows, weights=j * j, minlength=n)
    active = ok0 & (H > 1e-12) & (sse0 > 0)
    step = np.where(active, -g / np.where(H > 0, H, 1.0), 0.0)

    new_d = d0.copy()
    pending = active.copy()
    scale = 1.0
    for _ in range(max_halvings + 1):
        if not pending.any():
            break
        # positivity clamp: never move below a tenth of the current value
        trial = np.where(pending, np.maximum(d0 + scale * step, 0.1 * d0), d0)
        _, _, sse, ok, _ = _depth_terms(points, trial, I_s, I_t, T, Kl, level, pattern)
        better = pending & ok & (sse <= sse0)
        new_d[better] = trial[better]
        pending &= ~better
        scale *= 0.5
    return points.with_inverse_depths(new_d)
