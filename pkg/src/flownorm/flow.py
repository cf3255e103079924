"""Coarse flow fields and the providers that stand in for a learned flow network.

A ``FlowField`` lives on a fixed grid (160x112 by default) laid over the
full-resolution image; node ``(i, j)`` sits at pixel
``((i + 0.5) * W / gw - 0.5, (j + 0.5) * H / gh - 0.5)``. Vectors are stored
in full-resolution pixels and rescaled by ``2**-level`` when queried.

The scalar ``sigma`` is the RMS of the 2-vector L2 error,
``sqrt(mean ||F_pred - F_gt||^2)``. For i.i.d. Gaussian noise of standard
deviation ``s`` per component this is ``sqrt(2) * s``.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import InputError
from .geometry import from_level, project_points
from .imagedata import build_pyramid

GRID_SIZE = (160, 112)
SIGMA_FLOOR = 1e-3
OCCLUSION_REL_DEPTH = 0.05
_FLW_MAGIC = b"FLW1"
_CELL_DTYPE = np.dtype([("fx", "<f4"), ("fy", "<f4"), ("valid", "u1")])


@dataclass(frozen=True)
class FlowField:
    vectors: np.ndarray  # (gh, gw, 2)
    valid: np.ndarray  # (gh, gw) bool
    sigma: float
    image_size: tuple = (320, 240)
    source_id: str = ""
    target_id: str = ""

    def __post_init__(self):
        vec = np.array(self.vectors, dtype=float)
        ok = np.array(self.valid, dtype=bool)
        if vec.ndim != 3 or vec.shape[2] != 2 or ok.shape != vec.shape[:2]:
            raise ValueError("flow vectors must be (gh, gw, 2) with a matching mask")
        if vec.shape[0] < 8 or vec.shape[1] < 8:
            raise ValueError("flow grid must be at least 8x8")
        ok &= np.all(np.isfinite(vec), axis=2)
        vec[~ok] = 0.0
        vec.setflags(write=False)
        ok.setflags(write=False)
        object.__setattr__(self, "vectors", vec)
        object.__setattr__(self, "valid", ok)
        object.__setattr__(self, "sigma", max(float(self.sigma), SIGMA_FLOOR))
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))

    @property
    def width(self):
        return self.vectors.shape[1]

    @property
    def height(self):
        return self.vectors.shape[0]

    def node_positions(self):
        """Full-resolution pixel position of every grid node, (gh, gw, 2)."""
        return grid_nodes((self.width, self.height), self.image_size)


def grid_nodes(grid=GRID_SIZE, image_size=(320, 240)):
    gw, gh = grid
    W, H = image_size
    x = (np.arange(gw) + 0.5) * (W / gw) - 0.5
    y = (np.arange(gh) + 0.5) * (H / gh) - 0.5
    xx, yy = np.meshgrid(x, y)
    return np.stack([xx, yy], axis=-1)


def query_flow_points(f, pixels, level=0):
    """Flow positions ``p + F(p) / 2**level`` for (N, 2) level pixels.

    A query is invalid if any grid node with non-zero interpolation weight is
    masked. Positions outside the node hull are clamped onto it.
    """
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    full = from_level(pixels, level)
    W, H = f.image_size
    gx = np.clip((full[:, 0] + 0.5) * (f.width / W) - 0.5, 0.0, f.width - 1.0)
    gy = np.clip((full[:, 1] + 0.5) * (f.height / H) - 0.5, 0.0, f.height - 1.0)
    x0 = np.minimum(np.floor(gx).astype(np.intp), f.width - 2)
    y0 = np.minimum(np.floor(gy).astype(np.intp), f.height - 2)
    fx = gx - x0
    fy = gy - y0
    w00 = (1 - fx) * (1 - fy)
    w10 = fx * (1 - fy)
    w01 = (1 - fx) * fy
    w11 = fx * fy
    V, M = f.vectors, f.valid
    vec = (
        w00[:, None] * V[y0, x0]
        + w10[:, None] * V[y0, x0 + 1]
        + w01[:, None] * V[y0 + 1, x0]
        + w11[:, None] * V[y0 + 1, x0 + 1]
    )
    ok = (
        ((w00 == 0) | M[y0, x0])
        & ((w10 == 0) | M[y0, x0 + 1])
        & ((w01 == 0) | M[y0 + 1, x0])
        & ((w11 == 0) | M[y0 + 1, x0 + 1])
    )
    return pixels + vec / 2.0**level, ok


def query_flow(f, p, level=0):
    pos, ok = query_flow_points(f, np.asarray(p, dtype=float)[None], level)
    return pos[0], bool(ok[0])


def _sample_inverse_depth(depth, pts, spread=OCCLUSION_REL_DEPTH):
    """Bilinear inverse depth at ``pts``; NaN where a neighbour is missing or
    the four neighbours straddle a depth discontinuity."""
    h, w = depth.shape
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where((depth > 0) & np.isfinite(depth), 1.0 / depth, np.nan)
    u, v = pts[:, 0], pts[:, 1]
    inside = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    u = np.clip(u, 0, w - 1)
    v = np.clip(v, 0, h - 1)
    u0 = np.minimum(np.floor(u).astype(np.intp), w - 2)
    v0 = np.minimum(np.floor(v).astype(np.intp), h - 2)
    fu, fv = u - u0, v - v0
    c = np.stack([inv[v0, u0], inv[v0, u0 + 1], inv[v0 + 1, u0], inv[v0 + 1, u0 + 1]], axis=1)
    wts = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], axis=1)
    used = wts > 0
    bad = np.any(used & np.isnan(c), axis=1)
    cz = np.where(used & ~np.isnan(c), c, 0.0)
    val = np.sum(cz * wts, axis=1)
    hi = np.max(np.where(used, np.nan_to_num(c, nan=-np.inf), -np.inf), axis=1)
    lo = np.min(np.where(used, np.nan_to_num(c, nan=np.inf), np.inf), axis=1)
    bad |= (hi - lo) > spread * np.maximum(lo, 1e-12)
    return np.where(inside & ~bad, val, np.nan)


def ground_truth_flow(depth_s, pose_gt, K, grid=GRID_SIZE, depth_t=None, source_id="", target_id=""):
    """Exact flow of each grid node under the ground-truth relative pose.

    Node depths are bilinear in inverse depth (exact on planes). Nodes are
    masked when their depth is missing or discontinuous, when the projection
    leaves the image, or, given ``depth_t``, when the projected depth differs
    from the target depth by more than 5% (occlusion).
    """
    if depth_s is None:
        raise InputError("ground-truth flow needs a source depth map", kind="missing-depth")
    depth_s = np.asarray(depth_s, dtype=float)
    if not np.any(depth_s > 0):
        raise InputError("source depth map has no valid pixels", kind="missing-depth")
    nodes = grid_nodes(grid, (K.width, K.height)).reshape(-1, 2)
    inv = _sample_inverse_depth(depth_s, nodes)
    has_depth = np.isfinite(inv) & (inv > 0)
    uv, ok, X_t = project_points(nodes, pose_gt, np.where(has_depth, inv, 1.0), K, margin=0.0)
    ok &= has_depth
    if depth_t is not None:
        depth_t = np.asarray(depth_t, dtype=float)
        h, w = depth_t.shape
        ui = np.clip(np.rint(uv[:, 0]).astype(np.intp), 0, w - 1)
        vi = np.clip(np.rint(uv[:, 1]).astype(np.intp), 0, h - 1)
        zt = depth_t[vi, ui]
        with np.errstate(invalid="ignore", divide="ignore"):
            consistent = (zt > 0) & (np.abs(X_t[:, 2] - zt) <= OCCLUSION_REL_DEPTH * zt)
        ok &= consistent
    vec = np.where(ok[:, None], uv - nodes, 0.0)
    gw, gh = grid
    return FlowField(
        vec.reshape(gh, gw, 2), ok.reshape(gh, gw), SIGMA_FLOOR, (K.width, K.height), source_id, target_id
    )


def noisy_oracle_flow(gt, noise_sigma, seed=0, bias=(0.0, 0.0)):
    """Ground truth plus seeded i.i.d. Gaussian noise and an optional constant bias.

    ``noise_sigma`` is the per-component standard deviation; the resulting
    field's ``sigma`` follows the module's L2-RMS convention,
    ``sqrt(2) * noise_sigma``. The bias is deliberately not folded into
    ``sigma``: it models an offset the flow provider is unaware of.
    """
    if noise_sigma < 0:
        raise InputError("noise sigma must be non-negative")
    bias = np.asarray(bias, dtype=float).reshape(2)
    if noise_sigma == 0 and not np.any(bias):
        return gt
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, 1.0, gt.vectors.shape) * noise_sigma
    vec = np.where(gt.valid[..., None], gt.vectors + noise + bias, 0.0)
    return replace(gt, vectors=vec, sigma=math.sqrt(2.0) * noise_sigma)


@dataclass(frozen=True)
class FlowProviderConfig:
    kind: str = "ground-truth"  # ground-truth | noisy-oracle | block-matching
    noise_sigma: float = 0.0
    bias: tuple = (0.0, 0.0)
    seed: int = 0
    patch_size: int = 7
    search_radius: tuple = (3, 3, 3, 3)  # per level, finest first
    match_threshold: float = 0.6
    assumed_sigma: float = 2.0
    grid: tuple = GRID_SIZE

    def __post_init__(self):
        if self.kind not in ("ground-truth", "noisy-oracle", "block-matching"):
            raise InputError(f"unknown flow provider {self.kind!r}")
        if self.noise_sigma < 0:
            raise InputError("noise sigma must be non-negative")
        if self.patch_size % 2 != 1 or self.patch_size < 3:
            raise InputError("patch size must be odd and at least 3")


def _gather(a, cu, cv, offs):
    h, w = a.shape
    uu = np.clip(cu[:, None] + offs[None, :, 0], 0, w - 1)
    vv = np.clip(cv[:, None] + offs[None, :, 1], 0, h - 1)
    return a[vv, uu]


def _zncc(src_zm, src_norm, tgt):
    t = tgt - tgt.mean(axis=1, keepdims=True)
    tn = np.sqrt(np.sum(t * t, axis=1))
    denom = src_norm * tn
    with np.errstate(invalid="ignore", divide="ignore"):
        score = np.sum(src_zm * t, axis=1) / denom
    return np.where(denom > 1e-9, score, -1.0)


def block_matching_flow(I_s, I_t, cfg=FlowProviderConfig(kind="block-matching"), source_id="", target_id=""):
    """Coarse-to-fine zero-normalised cross-correlation block matching.

    At every pyramid level each grid node searches a square window around
    the upsampled estimate of the coarser level. Nodes whose best score at
    the finest level is below ``cfg.match_threshold`` (textureless or
    mismatched) are masked. A parabola through the neighbouring scores gives
    sub-pixel precision at level 0.
    """
    if not hasattr(I_s, "levels"):
        I_s = build_pyramid(I_s)
    if not hasattr(I_t, "levels"):
        I_t = build_pyramid(I_t)
    W, H = I_s.levels[0].width, I_s.levels[0].height
    nodes = grid_nodes(cfg.grid, (W, H)).reshape(-1, 2)
    half = cfg.patch_size // 2
    py, px = np.mgrid[-half : half + 1, -half : half + 1]
    poffs = np.stack([px.ravel(), py.ravel()], axis=1)

    flow = np.zeros_like(nodes)  # in current-level pixels
    score = np.full(len(nodes), -1.0)
    n_levels = len(I_s.levels)
    radii = tuple(cfg.search_radius) + (cfg.search_radius[-1],) * n_levels
    for level in range(n_levels - 1, -1, -1):
        a_s = I_s.levels[level].data
        a_t = I_t.levels[level].data
        pl = (nodes + 0.5) / 2.0**level - 0.5
        cu = np.rint(pl[:, 0]).astype(np.intp)
        cv = np.rint(pl[:, 1]).astype(np.intp)
        src = _gather(a_s, cu, cv, poffs)
        src_zm = src - src.mean(axis=1, keepdims=True)
        src_norm = np.sqrt(np.sum(src_zm * src_zm, axis=1))
        base_u = cu + np.rint(flow[:, 0]).astype(np.intp)
        base_v = cv + np.rint(flow[:, 1]).astype(np.intp)
        r = int(radii[level])
        best = np.full(len(nodes), -np.inf)
        best_du = np.zeros(len(nodes), dtype=np.intp)
        best_dv = np.zeros(len(nodes), dtype=np.intp)
        scores = {}
        for dv in range(-r, r + 1):
            for du in range(-r, r + 1):
                s = _zncc(src_zm, src_norm, _gather(a_t, base_u + du, base_v + dv, poffs))
                scores[(du, dv)] = s
                better = s > best
                best = np.where(better, s, best)
                best_du = np.where(better, du, best_du)
                best_dv = np.where(better, dv, best_dv)
        fu = (base_u + best_du - cu).astype(float)
        fv = (base_v + best_dv - cv).astype(float)
        if level == 0:
            fu += _parabola(scores, best_du, best_dv, r, axis=0)
            fv += _parabola(scores, best_du, best_dv, r, axis=1)
        flow = np.stack([fu, fv], axis=1)
        score = best
        if level > 0:
            flow = flow * 2.0
    ok = score >= cfg.match_threshold
    gw, gh = cfg.grid
    return FlowField(
        np.where(ok[:, None], flow, 0.0).reshape(gh, gw, 2),
        ok.reshape(gh, gw),
        cfg.assumed_sigma,
        (W, H),
        source_id,
        target_id,
    )


def _parabola(scores, best_du, best_dv, r, axis):
    n = len(best_du)
    centre = np.empty(n)
    minus = np.full(n, np.nan)
    plus = np.full(n, np.nan)
    for (du, dv), s in scores.items():
        sel_c = (best_du == du) & (best_dv == dv)
        centre[sel_c] = s[sel_c]
        if axis == 0:
            sel_m = (best_du == du + 1) & (best_dv == dv)
            sel_p = (best_du == du - 1) & (best_dv == dv)
        else:
            sel_m = (best_du == du) & (best_dv == dv + 1)
            sel_p = (best_du == du) & (best_dv == dv - 1)
        minus[sel_m] = s[sel_m]
        plus[sel_p] = s[sel_p]
    denom = minus - 2.0 * centre + plus
    with np.errstate(invalid="ignore", divide="ignore"):
        off = 0.5 * (minus - plus) / denom
    # an exact integer match needs no sub-pixel correction
    exact = centre >= 1.0 - 1e-9
    return np.where(np.isfinite(off) & (denom < 0) & ~exact, np.clip(off, -0.5, 0.5), 0.0)


def estimate_sigma(provider, calibration_pairs):
    """RMS L2 flow error of ``provider`` over pairs of ``(inputs, gt_flow)``.

    ``provider(inputs)`` must return a FlowField on the same grid as the
    ground truth. Only cells valid in both fields count.
    """
    sq_sum = 0.0
    count = 0
    for inputs, gt in calibration_pairs:
        pred = provider(inputs)
        both = pred.valid & gt.valid
        d = pred.vectors[both] - gt.vectors[both]
        sq_sum += float(np.sum(d * d))
        count += int(np.count_nonzero(both))
    if count == 0:
        raise InputError("no calibration cells with ground-truth flow", kind="empty-calibration")
    return max(math.sqrt(sq_sum / count), SIGMA_FLOOR)


def make_flow(cfg, depth_s=None, pose_gt=None, K=None, depth_t=None, I_s=None, I_t=None, source_id="", target_id=""):
    """Dispatch to the provider named by ``cfg.kind``."""
    if cfg.kind == "block-matching":
        if I_s is None or I_t is None:
            raise InputError("block matching needs both images")
        return block_matching_flow(I_s, I_t, cfg, source_id, target_id)
    if pose_gt is None or K is None:
        raise InputError(f"{cfg.kind} flow needs a ground-truth pose and intrinsics")
    gt = ground_truth_flow(depth_s, pose_gt, K, cfg.grid, depth_t, source_id, target_id)
    if cfg.kind == "noisy-oracle":
        return noisy_oracle_flow(gt, cfg.noise_sigma, cfg.seed, cfg.bias)
    return gt


@dataclass
class FlowCache:
    """Flow fields keyed by ``(source id, target id)``.

    Mirrors keeping keyframe features around so each frame is processed once.
    """

    entries: dict = field(default_factory=dict)

    def get(self, source_id, target_id, compute):
        key = (source_id, target_id)
        if key not in self.entries:
            self.entries[key] = compute()
        return self.entries[key]

    def __len__(self):
        return len(self.entries)


def write_flow(path, f):
    header = _FLW_MAGIC + struct.pack("<IIf", f.width, f.height, f.sigma)
    cells = np.empty(f.width * f.height, dtype=_CELL_DTYPE)
    cells["fx"] = f.vectors[..., 0].ravel()
    cells["fy"] = f.vectors[..., 1].ravel()
    cells["valid"] = f.valid.ravel()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(cells.tobytes())


def read_flow(path, image_size=(320, 240)):
    path = Path(path)
    if not path.exists():
        raise InputError(f"flow file not found: {path}", kind="missing-file")
    raw = path.read_bytes()
    if raw[:4] != _FLW_MAGIC:
        raise InputError(f"{path}: not a FLW1 file", kind="malformed-line")
    w, h, sigma = struct.unpack("<IIf", raw[4:16])
    cells = np.frombuffer(raw[16:], dtype=_CELL_DTYPE)
    if len(cells) != w * h:
        raise InputError(f"{path}: expected {w * h} cells, found {len(cells)}", kind="malformed-line")
    vec = np.stack([cells["fx"], cells["fy"]], axis=1).astype(float).reshape(h, w, 2)
    return FlowField(vec, cells["valid"].astype(bool).reshape(h, w), float(sigma), image_size)


def write_flow_csv(path, f):
    nodes = f.node_positions()
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["i", "j", "x", "y", "fx", "fy", "valid"])
        for j in range(f.height):
            for i in range(f.width):
                wr.writerow(
                    [i, j, f"{nodes[j, i, 0]:.6f}", f"{nodes[j, i, 1]:.6f}",
                     f"{f.vectors[j, i, 0]:.6f}", f"{f.vectors[j, i, 1]:.6f}", int(f.valid[j, i])]
                )
