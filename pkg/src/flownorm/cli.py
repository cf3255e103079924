"""Command-line entry point: ``flownorm {render,align,flow,basin,skip}``.

Exit codes: 0 success, 1 non-convergence, 2 input error, 3 internal error.
Errors are printed to stderr as ``{"error": kind, "message": ...}``.

Settings are layered: built-in defaults, then a JSON file given with
``--config``, then explicit flags. Every artifact embeds the resolved
settings, including the seed.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .bench import (
    RECORD_COLUMNS,
    SKIP_COLUMNS,
    AlignerConfig,
    BasinTrialSpec,
    SkipTrialSpec,
    plot_basin,
    plot_skip,
    pose_error,
    records_csv,
    run_basin,
    run_skip,
    solver_config_from_dict,
)
from .datasets import (
    DEFAULT_INTRINSICS,
    OrbitSequenceSpec,
    SyntheticScene,
    load_tum_sequence,
    relative_pose,
    render_orbit_sequence,
    render_pair,
    write_tum_sequence,
)
from .errors import INPUT_KINDS, FlowNormError, InputError
from .flow import FlowProviderConfig, estimate_sigma, ground_truth_flow, make_flow, write_flow, write_flow_csv
from .geometry import CameraIntrinsics, SE3Pose
from .imagedata import build_pyramid
from .residuals import select_points
from .robustnorm import FlowNormParams
from .solver import solve_joint, solve_pose, write_trace

EXIT_OK, EXIT_NOT_CONVERGED, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2, 3
CALIBRATION_FILE = "calibration.txt"

DEFAULTS = {
    "seed": 0,
    "provider": {"kind": "ground-truth", "noise_sigma": 0.0, "bias": [0.0, 0.0]},
    "norm": {
        "mode": "canonical",
        "activation_radius_multiplier": 2.0,
        "tangent_radius_multiplier": 1.0,
        "min_weight": 0.01,
    },
    "solver": {"flownorm_levels": [3, 2], "max_iterations": 50, "joint_depth": False, "pattern": "single"},
    "points": 800,
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(args):
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise InputError(f"config file not found: {path}", kind="missing-file")
        try:
            cfg = _merge(cfg, json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: {exc}", kind="invalid-config") from exc
    flags = {
        ("seed",): args.seed,
        ("provider", "kind"): getattr(args, "provider", None),
        ("provider", "noise_sigma"): getattr(args, "noise_sigma", None),
        ("provider", "bias"): getattr(args, "bias", None),
        ("norm", "mode"): args.norm_mode,
        ("norm", "activation_radius_multiplier"): args.sigma_multiplier_activation,
        ("norm", "tangent_radius_multiplier"): args.sigma_multiplier_tangent,
        ("solver", "flownorm_levels"): args.flownorm_levels,
        ("solver", "joint_depth"): getattr(args, "joint_depth", None) or None,
        ("points",): getattr(args, "points", None),
    }
    for keys, value in flags.items():
        if value is None:
            continue
        node = cfg
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = list(value) if isinstance(value, tuple) else value
    cfg["provider"].setdefault("seed", cfg["seed"])
    return cfg


def _provider(cfg):
    p = dict(cfg["provider"])
    if p.get("kind") in (None, "none"):
        return None
    return FlowProviderConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in p.items()})


def _solver(cfg):
    try:
        norm = FlowNormParams(**cfg["norm"])
        s = dict(cfg["solver"])
        s["flownorm"] = norm
        return solver_config_from_dict(s)
    except TypeError as exc:
        raise InputError(f"bad solver/norm settings: {exc}") from exc


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _finite(x):
    return x if isinstance(x, float) and math.isfinite(x) else None


def _intrinsics(directory, override):
    if override:
        return CameraIntrinsics.from_file(override)
    cal = Path(directory) / CALIBRATION_FILE
    return CameraIntrinsics.from_file(cal) if cal.exists() else DEFAULT_INTRINSICS


def _load_pair(args):
    frames = load_tum_sequence(args.pair)
    if len(frames) < 2:
        raise InputError(f"{args.pair}: a pair needs two frames, found {len(frames)}", kind="empty-association")
    fs, ft = frames[0], frames[1]
    if fs.depth is None:
        raise InputError("the source frame has no depth map", kind="missing-depth")
    K = _intrinsics(args.pair, args.intrinsics)
    T_gt = relative_pose(fs, ft) if fs.pose is not None and ft.pose is not None else None
    return fs, ft, K, T_gt


def _flow_for_pair(prov, fs, ft, K, T_gt, Ps, Pt):
    if prov is None:
        return None
    if prov.kind != "block-matching" and T_gt is None:
        raise InputError(f"the {prov.kind} provider needs ground-truth poses for the pair", kind="invalid-config")
    return make_flow(prov, fs.depth, T_gt, K, ft.depth, Ps, Pt, fs.frame_id, ft.frame_id)


# --- subcommands -----------------------------------------------------------------


def cmd_render(args):
    out = Path(args.out)
    if args.kind == "pair":
        scene = SyntheticScene(seed=args.seed or 0, depth_model=args.depth_model)
        T = SE3Pose.exp(args.motion)
        src, tgt, _, _ = render_pair(scene, T)
        write_tum_sequence([src, tgt], out)
        scene.intrinsics.to_file(out / CALIBRATION_FILE)
        _write_json(out / "scene.json", {"scene": asdict(scene), "motion": list(args.motion)})
    else:
        spec = OrbitSequenceSpec(seed=args.seed or 0, n_frames=args.frames)
        write_tum_sequence(render_orbit_sequence(spec), out)
        spec.intrinsics.to_file(out / CALIBRATION_FILE)
        _write_json(out / "scene.json", {"orbit": asdict(spec)})
    print(json.dumps({"written": str(out)}))
    return EXIT_OK


def cmd_align(args):
    cfg = resolve_config(args)
    cfg["pair"] = str(args.pair)
    fs, ft, K, T_gt = _load_pair(args)
    solver_cfg = _solver(cfg)
    Ps = build_pyramid(fs.image, solver_cfg.levels)
    Pt = build_pyramid(ft.image, solver_cfg.levels)
    pts = select_points(Ps, fs.depth, 0, cfg["points"])
    flow = _flow_for_pair(_provider(cfg), fs, ft, K, T_gt, Ps, Pt)
    T0 = SE3Pose.exp(args.init) if args.init else SE3Pose.identity()
    trace = []
    if solver_cfg.joint_depth:
        res, _ = solve_joint(Ps, Pt, pts, K, T0, flow, solver_cfg, trace)
    else:
        res = solve_pose(Ps, Pt, pts, K, T0, flow, solver_cfg, trace)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = res.summary()
    result["flow_gap"] = _finite(result["flow_gap"])
    if T_gt is not None:
        rot, trans = pose_error(res.pose, T_gt)
        result["rotation_error_deg"] = rot
        result["translation_error_m"] = trans
    result["config"] = cfg
    _write_json(out / "result.json", result)
    write_trace(out / "trace.csv", trace)
    print(json.dumps({k: result[k] for k in ("converged", "rotation_error_deg", "translation_error_m") if k in result}))
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def cmd_flow(args):
    cfg = resolve_config(args)
    cfg["pair"] = str(args.pair)
    prov = _provider(cfg)
    if prov is None:
        raise InputError("flow needs a provider", kind="invalid-config")
    fs, ft, K, T_gt = _load_pair(args)
    Ps, Pt = build_pyramid(fs.image), build_pyramid(ft.image)
    flow = _flow_for_pair(prov, fs, ft, K, T_gt, Ps, Pt)
    stats = {"provider": prov.kind, "valid_fraction": float(flow.valid.mean()), "sigma": flow.sigma}
    mags = np.hypot(flow.vectors[..., 0], flow.vectors[..., 1])[flow.valid]
    stats["median_magnitude"] = float(np.median(mags)) if mags.size else None
    if T_gt is not None:
        gt = ground_truth_flow(fs.depth, T_gt, K, prov.grid, ft.depth)
        stats["sigma_estimate"] = estimate_sigma(lambda f: f, [(flow, gt)])
    out = Path(args.out)
    write_flow(out, flow)
    if args.csv:
        write_flow_csv(args.csv, flow)
    stats["config"] = cfg
    _write_json(out.with_suffix(".json"), stats)
    print(json.dumps({k: v for k, v in stats.items() if k != "config"}))
    return EXIT_OK


def _configs_from(cfg, names):
    prov = _provider(cfg) or FlowProviderConfig()
    table = {
        "huber": AlignerConfig("huber", "huber"),
        "flownorm": AlignerConfig(f"flownorm-{prov.kind}", "flownorm", prov),
        "flowinit": AlignerConfig(f"flowinit-{prov.kind}", "flowinit", prov),
        "flowinit-standalone": AlignerConfig(f"flowinit-standalone-{prov.kind}", "flowinit-standalone", prov),
        "flowinit+flownorm": AlignerConfig(f"flowinit+flownorm-{prov.kind}", "flowinit+flownorm", prov),
    }
    try:
        return tuple(table[n] for n in names)
    except KeyError as exc:
        raise InputError(f"unknown aligner {exc.args[0]!r}") from exc


def _load_spec(path):
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise InputError(f"spec file not found: {p}", kind="missing-file")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{p}: {exc}") from exc


def cmd_basin(args):
    cfg = resolve_config(args)
    spec_d = _load_spec(args.spec)
    spec_d.setdefault("seed", cfg["seed"])
    if args.seed is not None:
        spec_d["seed"] = args.seed
    if args.magnitudes:
        spec_d["rotation_deg"] = args.magnitudes
        spec_d.pop("translation_frac", None)
    if args.trials:
        spec_d["trials"] = args.trials
    if "configs" not in spec_d:
        spec_d["configs"] = _configs_from(cfg, args.aligners)
    spec_d.setdefault("solver", _solver(cfg))
    spec_d.setdefault("points", cfg["points"])
    spec = BasinTrialSpec(**spec_d)
    records, summary = run_basin(spec, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "basin.csv").write_text(records_csv(records, RECORD_COLUMNS, spec.as_dict()))
    _write_json(out / "basin_summary.json", summary)
    plot_basin(summary, out / "basin.svg")
    print(json.dumps({n: [r["successes"] for r in rows] for n, rows in summary["per_config"].items()}))
    return EXIT_OK


def cmd_skip(args):
    cfg = resolve_config(args)
    spec_d = _load_spec(args.spec)
    spec_d.setdefault("seed", cfg["seed"])
    if args.seed is not None:
        spec_d["seed"] = args.seed
    if args.skips:
        spec_d["skips"] = args.skips
    if args.runs:
        spec_d["runs"] = args.runs
    if "configs" not in spec_d:
        spec_d["configs"] = _configs_from(cfg, args.aligners)
    spec_d.setdefault("solver", _solver(cfg))
    spec_d.setdefault("points", cfg["points"])
    frames = None
    if args.sequence:
        frames = load_tum_sequence(args.sequence)
        if any(f.depth is None or f.pose is None for f in frames):
            raise InputError("frame-skip tracking needs depth and ground truth for every frame", kind="missing-depth")
        spec_d["sequence"] = OrbitSequenceSpec(intrinsics=_intrinsics(args.sequence, args.intrinsics))
    spec = SkipTrialSpec(**spec_d)
    records, summary = run_skip(spec, frames, workers=args.workers)
    if args.sequence:
        summary["config"]["sequence"] = str(args.sequence)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "skip.csv").write_text(records_csv(records, SKIP_COLUMNS, summary["config"]))
    _write_json(out / "skip_summary.json", summary)
    plot_skip(records, summary, out / "skip_bars.svg", out / "skip_ate.svg")
    print(json.dumps(summary["headline"]))
    return EXIT_OK


# --- parser -----------------------------------------------------------------------


def _common(p):
    p.add_argument("--config", help="JSON settings file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--norm-mode", choices=("canonical", "paper-literal"))
    p.add_argument("--flownorm-levels", type=int, nargs="*", help="pyramid levels using the flow norm")
    p.add_argument("--sigma-multiplier-activation", type=float)
    p.add_argument("--sigma-multiplier-tangent", type=float)
    p.add_argument("--points", type=int, help="target number of selected points")
    p.add_argument("--intrinsics", help="calibration file: fx fy cx cy width height")


def _provider_flags(p):
    p.add_argument("--provider", choices=("none", "ground-truth", "noisy-oracle", "block-matching"))
    p.add_argument("--noise-sigma", type=float, help="per-component std of the noisy oracle (px)")
    p.add_argument("--bias", type=float, nargs=2, metavar=("BX", "BY"), help="constant flow offset (px)")


def build_parser():
    ap = argparse.ArgumentParser(prog="flownorm", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="write a synthetic pair or orbit sequence as a TUM directory")
    p.add_argument("kind", choices=("pair", "orbit"))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--depth-model", default="slanted", choices=("fronto-parallel", "slanted", "height-field"))
    p.add_argument("--motion", type=float, nargs=6, default=[0.05, 0.02, 0.03, 0.01, -0.02, 0.01],
                   help="se(3) tangent (translation, rotation) of the target-from-source pose")
    p.add_argument("--frames", type=int, default=40)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("align", help="track one pair")
    p.add_argument("pair", help="TUM-format directory holding the source and target frames")
    p.add_argument("--out", required=True)
    p.add_argument("--init", type=float, nargs=6, help="initial se(3) tangent; default identity")
    p.add_argument("--joint-depth", action="store_true", help="also refine inverse depths")
    _common(p)
    _provider_flags(p)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("flow", help="compute and save a flow field for a pair")
    p.add_argument("pair")
    p.add_argument("--out", required=True, help="FLW1 output path")
    p.add_argument("--csv", help="optional CSV dump of the grid")
    _common(p)
    _provider_flags(p)
    p.set_defaults(func=cmd_flow)

    for name, func in (("basin", cmd_basin), ("skip", cmd_skip)):
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--spec", help="JSON experiment spec")
        p.add_argument("--out", required=True)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--aligners", nargs="+", default=["huber", "flownorm"])
        _common(p)
        _provider_flags(p)
        if name == "basin":
            p.add_argument("--magnitudes", type=float, nargs="+", help="rotation perturbations (deg)")
            p.add_argument("--trials", type=int)
        else:
            p.add_argument("--sequence", help="TUM directory; default is the synthetic orbit")
            p.add_argument("--skips", type=int, nargs="+")
            p.add_argument("--runs", type=int)
        p.set_defaults(func=func)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except FlowNormError as exc:
        print(json.dumps({"error": exc.kind, "message": str(exc)}), file=sys.stderr)
        return EXIT_INPUT if exc.kind in INPUT_KINDS or isinstance(exc, InputError) else EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001
        print(json.dumps({"error": "internal", "message": f"{type(exc).__name__}: {exc}"}), file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
