"""Perturbation-basin and frame-skip experiments, pose-error metrics and reports.

Success thresholds used throughout (they are choices of this harness, not
quantities taken from the literature):

* a trial succeeds when it converged with rotation error < 1 deg and
  translation error < 2 % of the median scene depth;
* tracking is lost on a pair whose cost is non-finite or whose relative
  pose error exceeds 10 deg or 20 % of the median scene depth.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .datasets import DEFAULT_INTRINSICS, OrbitSequenceSpec, SyntheticScene, downsample_sequence, relative_pose, render_orbit_sequence, render_pair
from .errors import FlowNormError, InputError
from .flow import FlowCache, FlowProviderConfig, make_flow
from .flowinit import InitCandidateQueue, flow_init_pose, try_candidates
from .geometry import SE3Pose, so3_exp
from .imagedata import GrayImage, build_pyramid
from .residuals import select_points
from .solver import SolverConfig, solve_pose

SUCCESS_ROT_DEG = 1.0
SUCCESS_TRANS_FRAC = 0.02
LOST_ROT_DEG = 10.0
LOST_TRANS_FRAC = 0.20
ALIGNERS = ("huber", "flownorm", "flowinit", "flowinit-standalone", "flowinit+flownorm")

RECORD_COLUMNS = (
    "config_id", "magnitude_index", "trial_id", "rotation_noise_deg", "translation_noise",
    "init_rotation_error_deg", "init_translation_error_m", "final_rotation_error_deg",
    "final_translation_error_m", "converged", "success", "iterations",
)
SKIP_COLUMNS = (
    "config_id", "skip", "run", "pairs", "lost", "max_pair_rotation_error_deg",
    "max_pair_translation_error_m", "ate_rmse_m", "error0_m", "acceptable",
)


# --- metrics --------------------------------------------------------------------


def pose_error(T_est, T_gt):
    """(geodesic rotation angle in degrees, translation distance in metres)."""
    R = T_est.rotation.T @ T_gt.rotation
    c = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    return math.degrees(math.acos(c)), float(np.linalg.norm(T_est.translation - T_gt.translation))


def _positions(traj):
    if len(traj) and isinstance(traj[0], SE3Pose):
        return np.array([p.translation for p in traj])
    return np.asarray(traj, dtype=float).reshape(-1, 3)


def align_rigid(est, gt):
    """Closed-form rotation + translation minimising ``sum ||R est + t - gt||^2``."""
    mu_e, mu_g = est.mean(axis=0), gt.mean(axis=0)
    H = (est - mu_e).T @ (gt - mu_g)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return R, mu_g - R @ mu_e


def ate_rmse(trajectory_est, trajectory_gt, align=True):
    """RMSE of position gaps after rigid alignment of the estimate onto ground truth."""
    est, gt = _positions(trajectory_est), _positions(trajectory_gt)
    if len(est) != len(gt):
        raise InputError("trajectories differ in length")
    if len(est) < 2:
        raise InputError("ATE needs at least two poses", kind="too-few-poses")
    if align:
        R, t = align_rigid(est, gt)
        est = est @ R.T + t
    d = est - gt
    return float(math.sqrt(np.mean(np.sum(d * d, axis=1))))


# --- specs and records ------------------------------------------------------------


@dataclass(frozen=True)
class AlignerConfig:
    name: str
    aligner: str = "huber"
    provider: FlowProviderConfig = None

    def __post_init__(self):
        if self.aligner not in ALIGNERS:
            raise InputError(f"unknown aligner {self.aligner!r}")
        if isinstance(self.provider, dict):
            object.__setattr__(self, "provider", FlowProviderConfig(**_tuples(self.provider)))
        if self.aligner != "huber" and self.provider is None:
            object.__setattr__(self, "provider", FlowProviderConfig())

    def as_dict(self):
        d = {"name": self.name, "aligner": self.aligner}
        if self.provider is not None:
            d["provider"] = asdict(self.provider)
        return d


def _tuples(d):
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


DEFAULT_CONFIGS = (
    AlignerConfig("huber", "huber"),
    AlignerConfig("flownorm-gt", "flownorm", FlowProviderConfig("ground-truth")),
)


@dataclass
class BasinTrialSpec:
    scene: SyntheticScene = field(default_factory=SyntheticScene)
    gt_motion: tuple = (0.05, 0.02, 0.03, 0.01, -0.02, 0.01)  # se(3) tangent of the true pose
    rotation_deg: tuple = (8.0,)
    translation_frac: tuple = None  # defaults to rotation_deg / 100
    trials: int = 20
    seed: int = 0
    configs: tuple = DEFAULT_CONFIGS
    vary_scene: bool = True
    points: int = 600
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if isinstance(self.scene, dict):
            self.scene = SyntheticScene(**_tuples(self.scene))
        self.rotation_deg = tuple(float(m) for m in np.atleast_1d(self.rotation_deg))
        if self.translation_frac is None:
            self.translation_frac = tuple(m / 100.0 for m in self.rotation_deg)
        self.translation_frac = tuple(float(m) for m in np.atleast_1d(self.translation_frac))
        if len(self.translation_frac) != len(self.rotation_deg):
            raise InputError("rotation and translation magnitude lists differ in length")
        if any(m < 0 for m in self.rotation_deg + self.translation_frac):
            raise InputError("perturbation magnitudes must be non-negative")
        if self.trials < 1:
            raise InputError("trial count must be at least 1")
        self.configs = tuple(c if isinstance(c, AlignerConfig) else AlignerConfig(**c) for c in self.configs)
        if isinstance(self.solver, dict):
            self.solver = solver_config_from_dict(self.solver)

    def as_dict(self):
        return {
            "scene": asdict(self.scene),
            "gt_motion": list(self.gt_motion),
            "rotation_deg": list(self.rotation_deg),
            "translation_frac": list(self.translation_frac),
            "trials": self.trials,
            "seed": self.seed,
            "configs": [c.as_dict() for c in self.configs],
            "vary_scene": self.vary_scene,
            "points": self.points,
            "solver": solver_config_to_dict(self.solver),
        }


def solver_config_from_dict(d):
    from .robustnorm import FlowNormParams

    d = dict(d)
    if isinstance(d.get("flownorm"), dict):
        d["flownorm"] = FlowNormParams(**d["flownorm"])
    if "flownorm_levels" in d:
        d["flownorm_levels"] = tuple(d["flownorm_levels"])
    return SolverConfig(**d)


def solver_config_to_dict(cfg):
    d = asdict(cfg)
    d["flownorm_levels"] = list(cfg.flownorm_levels)
    return d


@dataclass
class TrialRecord:
    config_id: str
    magnitude_index: int
    trial_id: int
    rotation_noise_deg: float
    translation_noise: float
    init_rotation_error_deg: float
    init_translation_error_m: float
    final_rotation_error_deg: float
    final_translation_error_m: float
    converged: bool
    success: bool
    iterations: int
    wall_time: float = 0.0


# --- basin experiment -------------------------------------------------------------


def random_perturbation(rng, rotation_deg, translation_m):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    return SE3Pose(so3_exp(axis * math.radians(rotation_deg)), direction * translation_m)


def _prepare_pair(spec, trial):
    scene = replace(spec.scene, seed=spec.scene.seed + trial) if spec.vary_scene else spec.scene
    T_gt = SE3Pose.exp(spec.gt_motion)
    src, tgt, _, _ = render_pair(scene, T_gt)
    Ps, Pt = build_pyramid(src.image, spec.solver.levels), build_pyramid(tgt.image, spec.solver.levels)
    pts = select_points(Ps, src.depth, 0, spec.points)
    depth = float(np.median(src.depth[src.depth > 0]))
    return scene, T_gt, src, tgt, Ps, Pt, pts, depth


def _flow_for(cfg, cache, scene, src, tgt, T_gt, Ps, Pt, trial):
    prov = cfg.provider
    if prov.kind == "noisy-oracle":
        prov = replace(prov, seed=prov.seed + 1000003 * trial)
    key = (f"{src.frame_id}-{trial}", f"{tgt.frame_id}-{asdict(prov)}")
    return cache.get(
        *key,
        lambda: make_flow(prov, src.depth, T_gt, scene.intrinsics, tgt.depth, Ps, Pt, src.frame_id, tgt.frame_id),
    )


def align_with(cfg, Ps, Pt, pts, K, T_init, flow, solver_cfg):
    """Run one configured aligner; returns ``(pose, converged, iterations)``."""
    if cfg.aligner == "huber":
        r = solve_pose(Ps, Pt, pts, K, T_init, None, solver_cfg)
        return r.pose, r.converged, sum(r.iterations.values())
    if cfg.aligner == "flownorm":
        r = solve_pose(Ps, Pt, pts, K, T_init, flow, solver_cfg)
        return r.pose, r.converged, sum(r.iterations.values())
    T0 = flow_init_pose(pts, flow, K)
    if cfg.aligner == "flowinit-standalone":
        return T0, True, 0
    if cfg.aligner == "flowinit":
        r = solve_pose(Ps, Pt, pts, K, T0, None, solver_cfg)
        return r.pose, r.converged, sum(r.iterations.values())
    # flowinit+flownorm: queue of the perturbed guess and the flow initialisation
    r = try_candidates(InitCandidateQueue([T_init, T0], ["perturbed", "flow-init"]), Ps, Pt, pts, K, flow, solver_cfg)
    return r.pose, r.converged, sum(r.iterations.values())


def _basin_trial(args):
    spec, trial = args
    scene, T_gt, src, tgt, Ps, Pt, pts, depth = _prepare_pair(spec, trial)
    K = scene.intrinsics
    cache = FlowCache()
    out = []
    for mi, (rot, tfrac) in enumerate(zip(spec.rotation_deg, spec.translation_frac)):
        rng = np.random.default_rng([spec.seed, mi, trial])
        T_init = random_perturbation(rng, rot, tfrac * depth) @ T_gt
        r0, t0 = pose_error(T_init, T_gt)
        for cfg in spec.configs:
            start = time.perf_counter()
            try:
                flow = None if cfg.aligner == "huber" else _flow_for(cfg, cache, scene, src, tgt, T_gt, Ps, Pt, trial)
                pose, conv, iters = align_with(cfg, Ps, Pt, pts, K, T_init, flow, spec.solver)
                r1, t1 = pose_error(pose, T_gt)
            except FlowNormError:
                conv, iters, r1, t1 = False, 0, math.inf, math.inf
            ok = bool(conv and r1 < SUCCESS_ROT_DEG and t1 < SUCCESS_TRANS_FRAC * depth)
            out.append(
                TrialRecord(cfg.name, mi, trial, rot, tfrac, r0, t0, r1, t1, bool(conv), ok, int(iters),
                            time.perf_counter() - start)
            )
    return out


def _map(fn, jobs, workers):
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, jobs))
    return [fn(j) for j in jobs]


def run_basin(spec, workers=1):
    """Run every configuration on every (magnitude, trial); returns ``(records, summary)``."""
    batches = _map(_basin_trial, [(spec, t) for t in range(spec.trials)], workers)
    order = {c.name: i for i, c in enumerate(spec.configs)}
    records = sorted((r for b in batches for r in b), key=lambda r: (order[r.config_id], r.magnitude_index, r.trial_id))
    return records, summarize_basin(spec, records)


def summarize_basin(spec, records):
    per = {}
    for c in spec.configs:
        rows = []
        for mi, (rot, tfrac) in enumerate(zip(spec.rotation_deg, spec.translation_frac)):
            sel = [r for r in records if r.config_id == c.name and r.magnitude_index == mi]
            n = len(sel)
            k = sum(r.success for r in sel)
            rows.append(
                {
                    "rotation_deg": rot,
                    "translation_frac": tfrac,
                    "trials": n,
                    "successes": k,
                    "success_rate": k / n if n else math.nan,
                    "failures": n - k,
                }
            )
        per[c.name] = rows
    flags = monotonicity_violations(per)
    return {
        "config": spec.as_dict(),
        "seed": spec.seed,
        "thresholds": {"rotation_deg": SUCCESS_ROT_DEG, "translation_frac_of_depth": SUCCESS_TRANS_FRAC},
        "per_config": per,
        "monotonicity_violations": flags,
        "wall_time_s": float(sum(r.wall_time for r in records)),
    }


def binomial_se(p, n):
    return math.sqrt(max(p * (1 - p), 0.25 / max(n, 1)) / max(n, 1))


def monotonicity_violations(per_config, z=2.0):
    """Flag consecutive magnitudes where the success rate rises by more than ``z`` standard errors."""
    flags = []
    for name, rows in per_config.items():
        for a, b in zip(rows, rows[1:]):
            if a["trials"] and b["trials"]:
                se = math.hypot(binomial_se(a["success_rate"], a["trials"]), binomial_se(b["success_rate"], b["trials"]))
                if b["success_rate"] - a["success_rate"] > z * se:
                    flags.append({"config": name, "from": a["rotation_deg"], "to": b["rotation_deg"]})
    return flags


def find_half_failure_magnitude(rates):
    """First magnitude whose success rate is below 50 %, from ``[(magnitude, rate)]``."""
    for m, r in rates:
        if r < 0.5:
            return m
    return None


# --- frame-skip experiment --------------------------------------------------------


@dataclass
class SkipTrialSpec:
    sequence: OrbitSequenceSpec = field(default_factory=OrbitSequenceSpec)
    skips: tuple = tuple(range(1, 14))
    runs: int = 2
    accuracy_multiplier: float = 3.0
    configs: tuple = DEFAULT_CONFIGS
    seed: int = 0
    image_noise: float = 0.5
    points: int = 600
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if isinstance(self.sequence, dict):
            self.sequence = OrbitSequenceSpec(**_tuples(self.sequence))
        self.skips = tuple(int(s) for s in self.skips)
        if any(s <= 0 for s in self.skips) or list(self.skips) != sorted(set(self.skips)):
            raise InputError("skips must be positive and strictly ascending")
        if self.runs < 1:
            raise InputError("runs must be at least 1")
        self.configs = tuple(c if isinstance(c, AlignerConfig) else AlignerConfig(**c) for c in self.configs)
        if isinstance(self.solver, dict):
            self.solver = solver_config_from_dict(self.solver)

    def as_dict(self):
        seq = asdict(self.sequence) if hasattr(self.sequence, "__dataclass_fields__") else "frames"
        return {
            "sequence": seq,
            "skips": list(self.skips),
            "runs": self.runs,
            "accuracy_multiplier": self.accuracy_multiplier,
            "configs": [c.as_dict() for c in self.configs],
            "seed": self.seed,
            "image_noise": self.image_noise,
            "points": self.points,
            "solver": solver_config_to_dict(self.solver),
        }


@dataclass
class SkipRecord:
    config_id: str
    skip: int
    run: int
    pairs: int
    lost: bool
    max_pair_rotation_error_deg: float
    max_pair_translation_error_m: float
    ate_rmse_m: float
    error0_m: float = math.nan
    acceptable: bool = False


def track_sequence(frames, cfg, solver_cfg, K=DEFAULT_INTRINSICS, n_points=600, noise=0.0, seed=0):
    """Frame-to-keyframe tracking where every frame becomes the next keyframe.

    Each pair starts from the identity motion. Returns
    ``(estimated world poses, per-pair errors, lost flag)``.
    """
    rng = np.random.default_rng(seed)
    est = [frames[0].pose]
    errs = []
    lost = False
    imgs = []
    for fr in frames:
        data = fr.image.data + (rng.normal(0.0, noise, fr.image.data.shape) if noise > 0 else 0.0)
        imgs.append(build_pyramid(GrayImage(np.clip(data, 0, 255)), solver_cfg.levels))
    cache = FlowCache()
    for a in range(len(frames) - 1):
        b = a + 1
        fs, ft = frames[a], frames[b]
        T_gt = relative_pose(fs, ft)
        depth = float(np.median(fs.depth[fs.depth > 0]))
        try:
            pts = select_points(imgs[a], fs.depth, 0, n_points)
            flow = None
            if cfg.aligner != "huber":
                flow = cache.get(
                    fs.frame_id, ft.frame_id,
                    lambda: make_flow(cfg.provider, fs.depth, T_gt, K, ft.depth, imgs[a], imgs[b], fs.frame_id, ft.frame_id),
                )
            T, conv, _ = align_with(cfg, imgs[a], imgs[b], pts, K, SE3Pose.identity(), flow, solver_cfg)
            r, t = pose_error(T, T_gt)
        except FlowNormError:
            T, r, t = SE3Pose.identity(), math.inf, math.inf
        errs.append((r, t))
        if not (r <= LOST_ROT_DEG and t <= LOST_TRANS_FRAC * depth):
            lost = True
        est.append(est[-1] @ T.inverse())
    return est, errs, lost


def _skip_job(args):
    spec, frames, cfg, skip, run, K = args
    sub = downsample_sequence(frames, skip)
    est, errs, lost = track_sequence(sub, cfg, spec.solver, K, spec.points, spec.image_noise, [spec.seed, run, skip])
    gt = [f.pose for f in sub]
    ate = ate_rmse(est, gt) if len(sub) >= 2 else 0.0
    rmax = max((e[0] for e in errs), default=0.0)
    tmax = max((e[1] for e in errs), default=0.0)
    return SkipRecord(cfg.name, skip, run, len(errs), bool(lost), rmax, tmax, ate)


def max_contiguous(skips, ok):
    best = 0
    for s in skips:
        if not ok.get(s, False):
            break
        best = s
    return best


def run_skip(spec, frames=None, workers=1):
    """Frame-skip tracking for every configuration; returns ``(records, summary)``.

    ``error0`` is each configuration's ATE on the full sequence (skip 0) for
    the same run; a run is acceptable when its ATE is at most
    ``accuracy_multiplier * error0``. The headline numbers are the largest
    skip up to which every tested skip was acceptable in all runs, and the
    largest skip up to which no run lost tracking.
    """
    if frames is None:
        frames = render_orbit_sequence(spec.sequence)
    K = getattr(spec.sequence, "intrinsics", DEFAULT_INTRINSICS)
    jobs = [(spec, frames, c, s, run, K) for c in spec.configs for s in (0,) + spec.skips for run in range(spec.runs)]
    results = _map(_skip_job, jobs, workers)
    ref = {(r.config_id, r.run): r.ate_rmse_m for r in results if r.skip == 0}
    records = []
    for r in results:
        if r.skip == 0:
            continue
        r.error0_m = ref[(r.config_id, r.run)]
        r.acceptable = bool(not r.lost and r.ate_rmse_m <= spec.accuracy_multiplier * r.error0_m)
        records.append(r)
    headline = {}
    for c in spec.configs:
        rows = [r for r in records if r.config_id == c.name]
        acc = {s: all(r.acceptable for r in rows if r.skip == s) for s in spec.skips}
        kept = {s: all(not r.lost for r in rows if r.skip == s) for s in spec.skips}
        headline[c.name] = {
            "max_skip_acceptable_accuracy": max_contiguous(spec.skips, acc),
            "max_skip_without_losing_tracking": max_contiguous(spec.skips, kept),
            "error0_m": [ref[(c.name, run)] for run in range(spec.runs)],
        }
    summary = {
        "config": spec.as_dict(),
        "seed": spec.seed,
        "thresholds": {
            "lost_rotation_deg": LOST_ROT_DEG,
            "lost_translation_frac_of_depth": LOST_TRANS_FRAC,
            "accuracy_multiplier": spec.accuracy_multiplier,
        },
        "headline": headline,
    }
    return records, summary


# --- report files ------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    return v


def records_csv(records, columns, config):
    """CSV text with a leading ``# config=`` comment line holding the resolved config."""
    buf = io.StringIO()
    buf.write("# config=" + json.dumps(config, sort_keys=True) + "\n")
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(columns)
    for r in records:
        d = asdict(r)
        wr.writerow([_fmt(d[c]) for c in columns])
    return buf.getvalue()


def _svg_figure(config):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "flownorm"
    fig, ax = plt.subplots(figsize=(6, 4))
    return plt, fig, ax


def _save_svg(plt, fig, path, config):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None, "Description": json.dumps(config, sort_keys=True)})
    plt.close(fig)


def plot_basin(summary, path):
    plt, fig, ax = _svg_figure(summary["config"])
    for name, rows in summary["per_config"].items():
        ax.plot([r["rotation_deg"] for r in rows], [r["success_rate"] for r in rows], marker="o", label=name)
    ax.set_xlabel("rotation perturbation (deg)")
    ax.set_ylabel("success rate")
    ax.set_ylim(-0.02, 1.02)
    ax.legend()
    _save_svg(plt, fig, path, summary["config"])


def plot_skip(records, summary, path_bars, path_curve):
    plt, fig, ax = _svg_figure(summary["config"])
    names = list(summary["headline"])
    x = np.arange(len(names))
    acc = [summary["headline"][n]["max_skip_acceptable_accuracy"] for n in names]
    kept = [summary["headline"][n]["max_skip_without_losing_tracking"] for n in names]
    ax.bar(x - 0.2, acc, 0.4, label="acceptable accuracy")
    ax.bar(x + 0.2, kept, 0.4, label="without losing tracking")
    ax.set_xticks(x)
    ax.set_xticklabels(names)
    ax.set_ylabel("max skip")
    ax.legend()
    _save_svg(plt, fig, path_bars, summary["config"])

    plt, fig, ax = _svg_figure(summary["config"])
    for n in names:
        errs = np.sort([r.ate_rmse_m for r in records if r.config_id == n and math.isfinite(r.ate_rmse_m)])
        if len(errs):
            ax.step(errs, np.arange(1, len(errs) + 1), where="post", label=n)
    ax.set_xlabel("ATE RMSE (m)")
    ax.set_ylabel("runs with error below")
    ax.legend()
    _save_svg(plt, fig, path_curve, summary["config"])
