"""TUM-format RGB-D sequences and seeded synthetic scenes with exact ground truth."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputError
from .geometry import DEPTH_FLOOR, CameraIntrinsics, SE3Pose, project_points
from .imagedata import GrayImage, read_image, write_image

DEPTH_SCALE = 5000.0
ASSOCIATION_WINDOW = 0.02
QUATERNION_TOLERANCE = 1e-3
DEPTH_RANGE = (0.5, 10.0)
DEFAULT_INTRINSICS = CameraIntrinsics(250.0, 250.0, 159.5, 119.5, 320, 240)


@dataclass
class Frame:
    timestamp: float
    image: GrayImage
    depth: np.ndarray = None
    pose: SE3Pose = None  # world-from-camera
    frame_id: str = ""
    pose_fields: tuple = None  # raw "tx ty tz qx qy qz qw" as read, for lossless rewrite


# --- TUM format -----------------------------------------------------------------


def _read_list(path, min_fields):
    """Return ``[(line_number, fields)]`` of a TUM text list, skipping comments."""
    out = []
    for no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.replace(",", " ").split()
        if len(parts) < min_fields:
            raise InputError(f"{path}:{no}: expected {min_fields} fields, got {len(parts)}", kind="malformed-line")
        try:
            float(parts[0])
        except ValueError as exc:
            raise InputError(f"{path}:{no}: bad timestamp {parts[0]!r}", kind="malformed-line") from exc
        out.append((no, parts))
    return out


def _nearest(stamps, t, window):
    if len(stamps) == 0:
        return None
    i = int(np.searchsorted(stamps, t))
    best = None
    for j in (i - 1, i):
        if 0 <= j < len(stamps):
            dt = abs(stamps[j] - t)
            if dt <= window + 1e-9 and (best is None or dt < best[0]):
                best = (dt, j)
    return None if best is None else best[1]


def parse_pose_fields(fields, where):
    try:
        tx, ty, tz, qx, qy, qz, qw = (float(v) for v in fields[:7])
    except ValueError as exc:
        raise InputError(f"{where}: non-numeric pose field", kind="malformed-line") from exc
    n = math.sqrt(qx * qx + qy * qy + qz * qz + qw * qw)
    if abs(n - 1.0) > QUATERNION_TOLERANCE:
        raise InputError(f"{where}: quaternion norm {n:.6f} is not unit", kind="malformed-line")
    return SE3Pose.from_quaternion((qx, qy, qz, qw), (tx, ty, tz))


def read_depth_png(path):
    with Image.open(path) as im:
        raw = np.asarray(im, dtype=np.float64)
    return raw / DEPTH_SCALE


def write_depth_png(path, depth):
    units = np.clip(np.rint(np.nan_to_num(depth) * DEPTH_SCALE), 0, 65535).astype(np.uint16)
    Image.fromarray(units).save(path)


def load_tum_sequence(directory):
    """Load rgb.txt (+ optional depth.txt, groundtruth.txt) from ``directory``.

    Depth and ground truth are associated to each image by nearest timestamp
    within 20 ms. Depth PNGs hold 16-bit values in units of 1/5000 m.
    """
    d = Path(directory)
    rgb_list = d / "rgb.txt"
    if not rgb_list.exists():
        raise InputError(f"{rgb_list} not found", kind="missing-file")
    rgb = _read_list(rgb_list, 2)
    if not rgb:
        raise InputError(f"{rgb_list} lists no images", kind="empty-association")

    depth_entries = _read_list(d / "depth.txt", 2) if (d / "depth.txt").exists() else []
    depth_stamps = np.array([float(f[0]) for _, f in depth_entries])

    gt_entries = []
    if (d / "groundtruth.txt").exists():
        for no, f in _read_list(d / "groundtruth.txt", 8):
            pose = parse_pose_fields(f[1:8], f"{d / 'groundtruth.txt'}:{no}")
            gt_entries.append((float(f[0]), pose, tuple(float(v) for v in f[1:8])))
    gt_stamps = np.array([e[0] for e in gt_entries])

    frames = []
    for no, f in rgb:
        t = float(f[0])
        img_path = d / f[1]
        if not img_path.exists():
            raise InputError(f"{rgb_list}:{no}: image {img_path} not found", kind="missing-file")
        depth = None
        j = _nearest(depth_stamps, t, ASSOCIATION_WINDOW)
        if j is not None:
            dp = d / depth_entries[j][1][1]
            if not dp.exists():
                raise InputError(f"depth image {dp} not found", kind="missing-file")
            depth = read_depth_png(dp)
        pose = fields = None
        k = _nearest(gt_stamps, t, ASSOCIATION_WINDOW)
        if k is not None:
            _, pose, fields = gt_entries[k]
        frames.append(Frame(t, read_image(img_path), depth, pose, Path(f[1]).stem, fields))
    return frames


def write_tum_sequence(frames, directory):
    d = Path(directory)
    (d / "rgb").mkdir(parents=True, exist_ok=True)
    rgb_lines = ["# timestamp filename"]
    depth_lines = ["# timestamp filename"]
    gt_lines = ["# timestamp tx ty tz qx qy qz qw"]
    for i, fr in enumerate(frames):
        name = fr.frame_id or f"{i:06d}"
        stamp = f"{fr.timestamp:.6f}"
        write_image(d / "rgb" / f"{name}.png", fr.image)
        rgb_lines.append(f"{stamp} rgb/{name}.png")
        if fr.depth is not None:
            (d / "depth").mkdir(exist_ok=True)
            write_depth_png(d / "depth" / f"{name}.png", fr.depth)
            depth_lines.append(f"{stamp} depth/{name}.png")
        if fr.pose is not None:
            vals = fr.pose_fields
            if vals is None or not np.array_equal(SE3Pose.from_quaternion(vals[3:], vals[:3]).matrix(), fr.pose.matrix()):
                vals = (*fr.pose.translation, *fr.pose.quaternion())
            gt_lines.append(stamp + " " + " ".join(repr(float(v)) for v in vals))
    (d / "rgb.txt").write_text("\n".join(rgb_lines) + "\n")
    if len(depth_lines) > 1:
        (d / "depth.txt").write_text("\n".join(depth_lines) + "\n")
    if len(gt_lines) > 1:
        (d / "groundtruth.txt").write_text("\n".join(gt_lines) + "\n")


def downsample_sequence(frames, skip):
    """Keep every ``(skip + 1)``-th frame."""
    if skip < 0:
        raise InputError("skip must be non-negative")
    return list(frames[:: skip + 1])


def relative_pose(frame_s, frame_t):
    """Pose mapping source-camera points into the target camera."""
    return frame_t.pose.inverse() @ frame_s.pose


# --- synthetic scenes ---------------------------------------------------------


def value_noise(shape, seed, cells=(24, 12, 6, 3), gains=(1.0, 0.8, 0.6, 0.45)):
    """Seeded multi-octave value noise scaled to [0, 255]."""
    rng = np.random.default_rng(seed)
    h, w = shape
    out = np.zeros(shape)
    vv, uu = np.mgrid[0:h, 0:w].astype(float)
    for c, g in zip(cells, gains):
        lattice = rng.random((h // c + 3, w // c + 3))
        x = uu / c
        y = vv / c
        x0 = np.floor(x).astype(np.intp)
        y0 = np.floor(y).astype(np.intp)
        fx = x - x0
        fy = y - y0
        sx = fx * fx * (3 - 2 * fx)
        sy = fy * fy * (3 - 2 * fy)
        a = lattice[y0, x0] + sx * (lattice[y0, x0 + 1] - lattice[y0, x0])
        b = lattice[y0 + 1, x0] + sx * (lattice[y0 + 1, x0 + 1] - lattice[y0 + 1, x0])
        out += g * (a + sy * (b - a))
    lo, hi = out.min(), out.max()
    return 10.0 + 235.0 * (out - lo) / max(hi - lo, 1e-12)


def _bilinear_full(a, uv):
    """Bilinear lookup valid on the closed image rectangle ``[0, W-1] x [0, H-1]``."""
    h, w = a.shape
    u = uv[..., 0]
    v = uv[..., 1]
    ok = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    uc = np.clip(np.where(ok, u, 0.0), 0, w - 1)
    vc = np.clip(np.where(ok, v, 0.0), 0, h - 1)
    u0 = np.minimum(np.floor(uc).astype(np.intp), w - 2)
    v0 = np.minimum(np.floor(vc).astype(np.intp), h - 2)
    fu = uc - u0
    fv = vc - v0
    top = a[v0, u0] + fu * (a[v0, u0 + 1] - a[v0, u0])
    bot = a[v0 + 1, u0] + fu * (a[v0 + 1, u0 + 1] - a[v0 + 1, u0])
    return top + fv * (bot - top), ok


@dataclass
class SyntheticScene:
    """A textured surface seen by the source camera.

    ``depth_model`` is one of ``fronto-parallel``, ``slanted`` or
    ``height-field``; depth is a smooth function of the source pixel.
    """

    seed: int = 0
    depth_model: str = "fronto-parallel"
    base_depth: float = 2.0
    slant_deg: float = 25.0
    height_amplitude: float = 0.15
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS
    texture_cells: tuple = (24, 12, 6, 3)
    texture_gains: tuple = (1.0, 0.8, 0.6, 0.45)

    def __post_init__(self):
        if isinstance(self.intrinsics, dict):
            self.intrinsics = CameraIntrinsics(**self.intrinsics)
        if self.depth_model not in ("fronto-parallel", "slanted", "height-field"):
            raise InputError(f"unknown depth model {self.depth_model!r}")
        self.texture_cells = tuple(self.texture_cells)
        self.texture_gains = tuple(self.texture_gains)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    def texture(self):
        K = self.intrinsics
        return value_noise((K.height, K.width), self.seed, self.texture_cells, self.texture_gains)

    def depth_at(self, pixels):
        """Source-frame depth at (..., 2) pixel positions."""
        K = self.intrinsics
        pixels = np.asarray(pixels, dtype=float)
        x = (pixels[..., 0] - K.cx) / K.fx
        y = (pixels[..., 1] - K.cy) / K.fy
        if self.depth_model == "fronto-parallel":
            z = np.full(x.shape, self.base_depth)
        elif self.depth_model == "slanted":
            a = math.radians(self.slant_deg)
            # plane through (0, 0, base_depth) with normal (sin a, 0, cos a)
            z = self.base_depth * math.cos(a) / (math.sin(a) * x + math.cos(a))
        else:
            rng = np.random.default_rng(self.seed + 7919)
            ph = rng.uniform(0, 2 * math.pi, 4)
            fr = rng.uniform(1.5, 3.5, 4)
            z = self.base_depth * (
                1.0
                + self.height_amplitude
                * 0.5
                * (np.sin(fr[0] * x + ph[0]) * np.cos(fr[1] * y + ph[1]) + np.sin(fr[2] * (x + y) + ph[2]))
            )
        return np.clip(z, *DEPTH_RANGE)

    def depth_map(self):
        K = self.intrinsics
        vv, uu = np.mgrid[0 : K.height, 0 : K.width].astype(float)
        return self.depth_at(np.stack([uu, vv], axis=-1))


def _splat_depth(scene, T, supersample=3):
    """Target z-buffer obtained by forward-splatting a supersampled source grid."""
    K = scene.intrinsics
    s = np.arange(supersample) / supersample
    uu = (np.arange(K.width)[:, None] + s[None, :]).ravel()
    vv = (np.arange(K.height)[:, None] + s[None, :]).ravel()
    U, V = np.meshgrid(uu, vv)
    px = np.stack([U.ravel(), V.ravel()], axis=1)
    z = scene.depth_at(px)
    uv, ok, X_t = project_points(px, T, 1.0 / z, K, margin=-0.5)
    ui = np.rint(uv[ok, 0]).astype(np.intp)
    vi = np.rint(uv[ok, 1]).astype(np.intp)
    zt = X_t[ok, 2]
    inside = (ui >= 0) & (ui < K.width) & (vi >= 0) & (vi < K.height)
    zbuf = np.full(K.width * K.height, np.inf)
    np.minimum.at(zbuf, vi[inside] * K.width + ui[inside], zt[inside])
    zbuf = zbuf.reshape(K.height, K.width)
    return np.where(np.isfinite(zbuf), zbuf, 0.0)


def _plane_depth_in_target(scene, T):
    K = scene.intrinsics
    if scene.depth_model == "fronto-parallel":
        n, c = np.array([0.0, 0.0, 1.0]), scene.base_depth
    else:
        a = math.radians(scene.slant_deg)
        n = np.array([math.sin(a), 0.0, math.cos(a)])
        c = scene.base_depth * math.cos(a)
    n_t = T.rotation @ n
    c_t = c + n_t @ T.translation
    vv, uu = np.mgrid[0 : K.height, 0 : K.width].astype(float)
    rays = np.stack([(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu)], axis=-1)
    denom = rays @ n_t
    with np.errstate(divide="ignore", invalid="ignore"):
        z = c_t / denom
    return np.where(np.isfinite(z) & (z > DEPTH_FLOOR), z, 0.0)


def render_pair(scene, T_gt, min_overlap=0.3, occlusion_tolerance=0.05):
    """Render an exactly consistent (source, target) pair and the dense flow.

    The procedural texture is the target image; the source image is obtained
    by warping it through the scene geometry, so the photometric residual at
    the ground-truth pose is zero up to rounding. Source pixels that leave
    the target image or are hidden there (z-buffer test) get intensity 0 and
    depth 0 and carry no flow.

    Returns ``(source_frame, target_frame, flow, flow_valid)``.
    """
    K = scene.intrinsics
    tex = scene.texture()
    depth_s = scene.depth_map()
    vv, uu = np.mgrid[0 : K.height, 0 : K.width].astype(float)
    px = np.stack([uu.ravel(), vv.ravel()], axis=1)
    uv, ok, X_t = project_points(px, T_gt, 1.0 / depth_s.ravel(), K, margin=0.0)

    if scene.depth_model == "height-field":
        depth_t = _splat_depth(scene, T_gt)
    else:
        depth_t = _plane_depth_in_target(scene, T_gt)
    ui = np.clip(np.rint(uv[:, 0]).astype(np.intp), 0, K.width - 1)
    vi = np.clip(np.rint(uv[:, 1]).astype(np.intp), 0, K.height - 1)
    zt = depth_t[vi, ui]
    visible = ok & (zt > 0) & (X_t[:, 2] <= zt * (1.0 + occlusion_tolerance))
    if visible.mean() < min_overlap:
        raise InputError(
            f"only {visible.mean():.0%} of source pixels visible in the target", kind="insufficient-overlap"
        )
    vals, _ = _bilinear_full(tex, uv)
    img_s = np.where(visible, vals, 0.0).reshape(K.height, K.width)
    flow = np.where(visible[:, None], uv - px, 0.0).reshape(K.height, K.width, 2)
    visible = visible.reshape(K.height, K.width)
    src = Frame(0.0, GrayImage(img_s), np.where(visible, depth_s, 0.0), SE3Pose.identity(), "source")
    tgt = Frame(1.0, GrayImage(tex), depth_t, T_gt.inverse(), "target")
    return src, tgt, flow, visible


# --- orbit sequences ------------------------------------------------------------


@dataclass
class OrbitSequenceSpec:
    """Camera orbiting a fixation point behind a textured world plane."""

    n_frames: int = 40
    step_deg: float = 1.2
    plane_depth: float = 2.0
    orbit_radius: float = 4.0
    bob_amplitude: float = 0.02
    seed: int = 0
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS
    texture_scale: int = 2
    texture_cells: tuple = (24, 12, 6, 3)
    texture_gains: tuple = (1.0, 0.8, 0.6, 0.45)
    frame_rate: float = 30.0

    def __post_init__(self):
        if isinstance(self.intrinsics, dict):
            self.intrinsics = CameraIntrinsics(**self.intrinsics)
        self.texture_cells = tuple(self.texture_cells)
        self.texture_gains = tuple(self.texture_gains)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def orbit_poses(spec):
    centre = np.array([0.0, 0.0, spec.orbit_radius])
    poses = []
    half = 0.5 * (spec.n_frames - 1)
    for k in range(spec.n_frames):
        phi = math.radians(spec.step_deg * (k - half))
        R = np.array([[math.cos(phi), 0, math.sin(phi)], [0, 1, 0], [-math.sin(phi), 0, math.cos(phi)]])
        c = centre - spec.orbit_radius * R[:, 2]
        c[1] += spec.bob_amplitude * math.sin(0.3 * k)
        poses.append(SE3Pose(R, c))
    return poses


def render_orbit_sequence(spec):
    """Render frames of a world plane ``Z = plane_depth`` textured with value noise.

    The texture lives on the plane with one texel per pixel at the nominal
    distance divided by ``texture_scale``; frames are sampled bilinearly.
    """
    K = spec.intrinsics
    texel = spec.plane_depth / K.fx / spec.texture_scale
    th, tw = K.height * spec.texture_scale * 3, K.width * spec.texture_scale * 3
    cells = tuple(c * spec.texture_scale for c in spec.texture_cells)
    tex = value_noise((th, tw), spec.seed, cells, spec.texture_gains)
    vv, uu = np.mgrid[0 : K.height, 0 : K.width].astype(float)
    rays = np.stack([(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu)], axis=-1)
    frames = []
    for k, pose in enumerate(orbit_poses(spec)):
        d = rays @ pose.rotation.T
        lam = (spec.plane_depth - pose.translation[2]) / d[..., 2]
        P = pose.translation + lam[..., None] * d
        tuv = np.stack([P[..., 0] / texel + 0.5 * tw, P[..., 1] / texel + 0.5 * th], axis=-1)
        img, ok = _bilinear_full(tex, tuv)
        if not ok.all():
            raise InputError("orbit leaves the textured region", kind="insufficient-overlap")
        frames.append(Frame(k / spec.frame_rate, GrayImage(img), lam, pose, f"{k:06d}"))
    return frames
