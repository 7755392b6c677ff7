"""Synthetic dataset generation and ingestion.

Ground-truth frames are rendered with the package's own rasterizer over a
ground-truth Gaussian scene, so optimization correctness can be tested
without any rendering-model mismatch. The generator stands in for the
external depth / tracking / motion-mask priors: it emits exact metric depth,
binary motion masks from dynamic coverage, and 2D tracks of the dynamic
Gaussian centers, with optional seeded noise on each.

Directory layout:
    rgb/%04d.png  depth/%04d.pfm  mask/%04d.png  tracks.csv
    gt_cameras.txt  gt_trajectories.txt  gt_scene.sgs1  spec.json
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from . import io as dio
from .gaussians import (DynamicGaussians, Scene, StaticGaussians,
                        inverse_sigmoid, load_scene, save_scene)
from .geometry import (DTYPE, Extrinsics, Intrinsics, load_camera_file,
                       project_valid, save_camera_file)
from .rasterizer import RenderConfig, render
from .spline import TrajectorySamples, fit_ls

log = logging.getLogger(__name__)

KNOWN_FILES = {"tracks.csv", "gt_cameras.txt", "gt_trajectories.txt",
               "gt_scene.sgs1", "spec.json", "manifest_synth.json",
               "timings.json"}


class DatasetError(ValueError):
    pass


@dataclass
class CameraPathSpec:
    kind: str = "line"               # static | line | orbit
    start: tuple = (0.0, 0.0, 0.0)
    end: tuple = (0.4, 0.0, 0.0)
    target: tuple = (0.0, 0.0, 6.0)
    center: tuple = (0.0, 0.0, 6.0)  # orbit
    radius: float = 6.0
    angle_start: float = -0.06
    angle_end: float = 0.06
    height: float = 0.0


@dataclass
class ObjectSpec:
    kind: str = "line"               # line | circle | poly3 | waypoints
    start: tuple = (-0.5, 0.0, 4.0)
    end: tuple = (0.5, 0.0, 4.0)
    center: tuple = (0.0, 0.0, 4.0)
    radius: float = 0.5
    angle_start: float = 0.0
    angle_end: float = math.pi
    coeffs: tuple = ()               # poly3: 4 x 3 nested list
    waypoints: tuple = ()            # explicit per-frame positions
    n_gaussians: int = 1
    size: float = 0.12
    spread: float = 0.15
    color: tuple = (0.9, 0.2, 0.2)


@dataclass
class NoiseSpec:
    depth: float = 0.0        # multiplicative std
    track_jitter: float = 0.0  # pixel std
    mask_morph: int = 0       # >0 dilate, <0 erode, in pixels


@dataclass
class SceneSpec:
    width: int = 96
    height: int = 64
    num_frames: int = 12
    focal: float = 140.0
    seed: int = 0
    camera: CameraPathSpec = field(default_factory=CameraPathSpec)
    background_depth: float = 6.0
    background_nx: int = 24
    background_ny: int = 16
    background_z_jitter: float = 0.0
    background_extent_scale: float = 1.7
    objects: list = field(default_factory=list)
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    def __post_init__(self):
        if self.num_frames < 2:
            raise ValueError("num_frames must be >= 2")

    @staticmethod
    def from_dict(d: dict) -> "SceneSpec":
        d = dict(d)
        cam = CameraPathSpec(**d.pop("camera", {}))
        noise = NoiseSpec(**d.pop("noise", {}))
        objects = [ObjectSpec(**o) for o in d.pop("objects", [])]
        return SceneSpec(camera=cam, noise=noise, objects=objects, **d)

    @staticmethod
    def from_json(path) -> "SceneSpec":
        with open(path) as fh:
            return SceneSpec.from_dict(json.load(fh))


@dataclass
class Dataset:
    images: np.ndarray     # (N_f, H, W, 3) in [0, 1]
    depths: np.ndarray     # (N_f, H, W) meters
    masks: np.ndarray      # (N_f, H, W) binary
    tracks: dict           # track_id -> (M, 3) array of (t, u, v)
    num_frames: int
    width: int
    height: int
    gt_cameras: list | None = None          # [(t, Extrinsics)]
    gt_intrinsics: Intrinsics | None = None
    gt_trajectories: dict | None = None     # object_id -> (N_f, 3)
    gt_scene_path: str | None = None


def look_at(pos: np.ndarray, target: np.ndarray) -> Extrinsics:
    """World-to-camera extrinsics for a camera at pos looking at target.

    OpenCV convention: +z forward, +y down (world down vector is +y).
    """
    pos = np.asarray(pos, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - pos
    fwd = fwd / np.linalg.norm(fwd)
    down = np.array([0.0, 1.0, 0.0])
    right = np.cross(down, fwd)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / nr
    down_c = np.cross(fwd, right)
    r = np.stack([right, down_c, fwd])
    return Extrinsics(torch.from_numpy(r), torch.from_numpy(-r @ pos))


def _camera_poses(spec: SceneSpec) -> list[Extrinsics]:
    cam = spec.camera
    n = spec.num_frames
    poses = []
    for t in range(n):
        a = t / (n - 1)
        if cam.kind == "static":
            ext = look_at(np.array(cam.start), np.array(cam.target))
        elif cam.kind == "line":
            pos = (1 - a) * np.array(cam.start) + a * np.array(cam.end)
            ext = look_at(pos, np.array(cam.target))
        elif cam.kind == "orbit":
            ang = (1 - a) * cam.angle_start + a * cam.angle_end
            c = np.array(cam.center)
            pos = c + cam.radius * np.array([math.sin(ang), 0.0, -math.cos(ang)])
            pos[1] += cam.height
            ext = look_at(pos, c)
        else:
            raise ValueError(f"unknown camera path kind {cam.kind!r}")
        poses.append(ext)
    # re-anchor the world to the first camera so pose 0 is exactly [I | 0]
    r0, t0 = poses[0].R.clone(), poses[0].T.clone()
    out = []
    for ext in poses:
        r_new = ext.R @ r0.T
        out.append(Extrinsics(r_new, ext.T - r_new @ t0))
    return out, (r0, t0)


def _object_center(obj: ObjectSpec, t: int, n_f: int) -> np.ndarray:
    a = t / (n_f - 1)
    if obj.kind == "line":
        return (1 - a) * np.array(obj.start) + a * np.array(obj.end)
    if obj.kind == "circle":
        ang = (1 - a) * obj.angle_start + a * obj.angle_end
        c = np.array(obj.center, dtype=np.float64)
        return c + obj.radius * np.array([math.cos(ang), math.sin(ang), 0.0])
    if obj.kind == "poly3":
        coeffs = np.asarray(obj.coeffs, dtype=np.float64)  # (4, 3)
        return sum(coeffs[k] * a**k for k in range(coeffs.shape[0]))
    if obj.kind == "waypoints":
        wp = np.asarray(obj.waypoints, dtype=np.float64)
        if wp.shape != (n_f, 3):
            raise ValueError("waypoints must supply one 3D point per frame")
        return wp[t]
    raise ValueError(f"unknown trajectory kind {obj.kind!r}")


def build_ground_truth(spec: SceneSpec):
    """Construct the GT Gaussian scene, cameras, and per-Gaussian trajectories."""
    rng = np.random.default_rng(spec.seed)
    n_f = spec.num_frames
    # cameras are re-anchored so pose 0 is [I | 0]; scene geometry below is
    # authored directly in that first-camera frame (z forward, y down)
    poses, _anchor = _camera_poses(spec)
    intr = Intrinsics(f=spec.focal, width=spec.width, height=spec.height)

    # background: jittered grid of static Gaussians on a fronto-parallel plane
    z0 = spec.background_depth
    half_w = z0 * (spec.width / 2) / spec.focal * spec.background_extent_scale
    half_h = z0 * (spec.height / 2) / spec.focal * spec.background_extent_scale
    xs = np.linspace(-half_w, half_w, spec.background_nx)
    ys = np.linspace(-half_h, half_h, spec.background_ny)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    n_bg = gx.size
    means = np.stack([gx.reshape(-1), gy.reshape(-1),
                      np.full(n_bg, z0) + spec.background_z_jitter
                      * rng.standard_normal(n_bg)], axis=-1)
    spacing = max(2 * half_w / max(spec.background_nx - 1, 1),
                  2 * half_h / max(spec.background_ny - 1, 1))
    log_s = np.log(np.stack([
        np.full(n_bg, spacing * 0.45),
        np.full(n_bg, spacing * 0.45),
        np.full(n_bg, spacing * 0.1),
    ], axis=-1))
    colors = rng.uniform(0.08, 0.92, size=(n_bg, 3))
    quats = np.zeros((n_bg, 4))
    quats[:, 0] = 1.0
    static = StaticGaussians(
        means=torch.from_numpy(means),
        quats=torch.from_numpy(quats),
        log_scales=torch.from_numpy(log_s),
        opacity_logits=torch.full((n_bg,), inverse_sigmoid(0.97), dtype=DTYPE),
        color_logits=torch.from_numpy(np.log(colors / (1 - colors))),
    )

    # dynamic: each object is a fixed-offset cluster; one GT trajectory and
    # one 2D track per member Gaussian
    cps, quats_d, bls_d, colors_d = [], [], [], []
    trajectories = {}
    gid = 0
    times = np.arange(n_f, dtype=np.float64)
    for obj in spec.objects:
        centers = np.stack([_object_center(obj, t, n_f) for t in range(n_f)])
        offsets = [np.zeros(3)]
        offsets += [rng.uniform(-obj.spread, obj.spread, size=3)
                    for _ in range(obj.n_gaussians - 1)]
        for off in offsets:
            path = centers + off
            cps.append(fit_ls(TrajectorySamples(times, path), n_f, n_f).points)
            quats_d.append([1.0, 0.0, 0.0, 0.0])
            bls_d.append(np.log([obj.size] * 3))
            c = np.clip(np.asarray(obj.color) + rng.uniform(-0.05, 0.05, 3),
                        0.02, 0.98)
            colors_d.append(np.log(c / (1 - c)))
            trajectories[gid] = path
            gid += 1
    n_dy = len(cps)
    dynamic = DynamicGaussians(
        control_points=cps,
        base_quats=torch.tensor(quats_d, dtype=DTYPE) if n_dy else torch.zeros(0, 4, dtype=DTYPE),
        quat_offsets=torch.zeros(n_dy, 1, 4, dtype=DTYPE),
        base_log_scales=torch.tensor(np.array(bls_d), dtype=DTYPE) if n_dy else torch.zeros(0, 3, dtype=DTYPE),
        dct_coeffs=torch.zeros(n_dy, 10, 3, dtype=DTYPE),
        opacity_logits=torch.full((n_dy,), inverse_sigmoid(0.97), dtype=DTYPE),
        color_logits=torch.tensor(np.array(colors_d), dtype=DTYPE) if n_dy else torch.zeros(0, 3, dtype=DTYPE),
        num_frames=n_f,
    )
    scene = Scene(static=static, dynamic=dynamic, num_frames=n_f)

    # visibility invariant: every trajectory must stay in front of every camera
    for oid, path in trajectories.items():
        pts = torch.from_numpy(path)
        for t in range(n_f):
            _, z, valid = project_valid(pts, poses[t], intr)
            if not bool(valid.all()):
                raise ValueError(
                    f"object {oid} goes behind the camera at frame {t}; "
                    "spec violates the visibility invariant")
    return scene, poses, intr, trajectories


def _morph_mask(mask: np.ndarray, amount: int) -> np.ndarray:
    """Binary dilation (amount > 0) or erosion (< 0) with a cross kernel."""
    out = mask.copy()
    for _ in range(abs(amount)):
        shifted = [out,
                   np.roll(out, 1, 0), np.roll(out, -1, 0),
                   np.roll(out, 1, 1), np.roll(out, -1, 1)]
        out = (np.max(shifted, axis=0) if amount > 0
               else np.min(shifted, axis=0))
    return out


def generate(spec: SceneSpec, out_dir) -> Dataset:
    """Render and write the dataset; returns the loaded result."""
    rng = np.random.default_rng(spec.seed + 1)  # noise stream, distinct from layout
    scene, poses, intr, trajectories = build_ground_truth(spec)
    n_f = spec.num_frames
    os.makedirs(out_dir, exist_ok=True)
    for sub in ("rgb", "depth", "mask"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    cfg = RenderConfig(normalize_depth=True)
    track_rows = []
    with torch.no_grad():
        for t in range(n_f):
            out = render(scene, poses[t], intr, float(t), cfg)
            depth = out.depth.numpy().copy()
            uncovered = out.weight_sum.numpy() < 1e-6
            depth[uncovered] = spec.background_depth
            mask = (out.mask.numpy() > 0.5).astype(np.float64)
            if spec.noise.mask_morph:
                mask = _morph_mask(mask, spec.noise.mask_morph)
            if spec.noise.depth > 0:
                depth = depth * (1 + spec.noise.depth
                                 * rng.standard_normal(depth.shape))
                depth = np.clip(depth, 1e-3, None)
            dio.save_png(os.path.join(out_dir, "rgb", f"{t:04d}.png"),
                         out.color.numpy())
            dio.save_pfm(os.path.join(out_dir, "depth", f"{t:04d}.pfm"), depth)
            dio.save_png(os.path.join(out_dir, "mask", f"{t:04d}.png"), mask)
            for oid, path in trajectories.items():
                px, _, valid = project_valid(torch.from_numpy(path[t : t + 1]),
                                             poses[t], intr)
                u, v = float(px[0, 0]), float(px[0, 1])
                if spec.noise.track_jitter > 0:
                    u += spec.noise.track_jitter * rng.standard_normal()
                    v += spec.noise.track_jitter * rng.standard_normal()
                inside = (bool(valid[0]) and 0 <= u <= spec.width - 1
                          and 0 <= v <= spec.height - 1)
                if inside:
                    track_rows.append((oid, t, u, v))

    with open(os.path.join(out_dir, "tracks.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["track_id", "t", "u", "v"])
        for row in track_rows:
            writer.writerow([row[0], row[1], f"{row[2]:.17g}", f"{row[3]:.17g}"])

    save_camera_file(os.path.join(out_dir, "gt_cameras.txt"),
                     [(float(t), poses[t]) for t in range(n_f)], intr)
    with open(os.path.join(out_dir, "gt_trajectories.txt"), "w") as fh:
        fh.write("# object_id t x y z\n")
        for oid, path in trajectories.items():
            for t in range(n_f):
                fh.write(f"{oid} {t} " + " ".join(f"{v:.17g}" for v in path[t]) + "\n")
    save_scene(os.path.join(out_dir, "gt_scene.sgs1"), scene)
    with open(os.path.join(out_dir, "spec.json"), "w") as fh:
        json.dump(_spec_to_dict(spec), fh, indent=2)
    return load(out_dir)


def generate_facets(width: int = 96, height: int = 64, num_frames: int = 12,
                    focal: float = 330.0,
                    cam_end: tuple = (0.25, 0.06, 0.0),
                    target: tuple = (0.0, 0.0, 1.3),
                    apex: tuple = (-0.1, 0.05),
                    slopes: tuple = (0.25, 0.2),
                    tilt: tuple = (-0.1, 0.05),
                    base_depth: float = 2.0) -> Dataset:
    """Analytic piecewise-planar scene for camera-recovery evaluation.

    The surface is the convex tent
        z = base_depth + slopes[0]*|x - apex[0]| + slopes[1]*|y - apex[1]|
            + tilt[0]*x + tilt[1]*y
    (four planar facets whose normals span 3D), textured with smooth
    sinusoids of the world position, and rendered by exact ray casting.
    Both depth and color are analytic, so consistency losses at the true
    cameras sit at numerical noise rather than at an interpolation floor,
    which makes estimated-camera quality directly readable off the loss.
    The camera translates from the origin to cam_end while fixating target;
    poses are re-anchored so frame 0 is [I | 0].
    """
    x0, y0 = apex

    def facet(sx, sy):
        a = slopes[0] * sx + tilt[0]
        b = slopes[1] * sy + tilt[1]
        return base_depth - slopes[0] * sx * x0 - slopes[1] * sy * y0, a, b

    def texture(x, y):
        c0 = 0.5 + 0.42 * np.sin(2 * np.pi * x / 0.55 + 0.7) * np.cos(2 * np.pi * y / 0.8)
        c1 = 0.5 + 0.42 * np.sin(2 * np.pi * (0.6 * x + 0.8 * y) / 0.7 + 2.1)
        c2 = 0.5 + 0.42 * np.cos(2 * np.pi * (0.9 * x - 0.4 * y) / 0.62 + 4.0)
        return np.stack([c0, c1, c2], -1)

    raw = []
    for t in range(num_frames):
        a = t / max(num_frames - 1, 1)
        e = look_at(np.asarray(cam_end, dtype=np.float64) * a,
                    np.asarray(target, dtype=np.float64))
        raw.append((e.R.numpy(), e.T.numpy()))
    r0, t0 = raw[0]
    poses = [(R @ r0.T, T - R @ r0.T @ t0) for R, T in raw]

    vv, uu = np.meshgrid(np.arange(height, dtype=np.float64),
                         np.arange(width, dtype=np.float64), indexing="ij")
    dirs = np.stack([(uu - width / 2) / focal, (vv - height / 2) / focal,
                     np.ones_like(uu)], -1)
    images, depths = [], []
    for R, T in poses:
        o = -R.T @ T
        d = dirs @ R
        best = np.full((height, width), np.inf)
        for sx in (-1.0, 1.0):
            for sy in (-1.0, 1.0):
                z0, a, b = facet(sx, sy)
                s = (z0 - (o[2] - a * o[0] - b * o[1])) / \
                    (d[..., 2] - a * d[..., 0] - b * d[..., 1])
                px = o[0] + s * d[..., 0]
                py = o[1] + s * d[..., 1]
                ok = (s > 0.1) & (np.sign(px - x0 + 1e-15) == sx) & \
                     (np.sign(py - y0 + 1e-15) == sy)
                best = np.where(ok & (s < best), s, best)
        if not np.isfinite(best).all():
            raise DatasetError("facet scene does not cover the full frame; "
                               "move the camera path or widen the tent")
        world = o[None, None] + best[..., None] * d
        cam = world @ R.T + T
        depths.append(cam[..., 2])
        images.append(texture(world[..., 0], world[..., 1]))

    gt_cameras = [(float(t), Extrinsics(torch.from_numpy(R), torch.from_numpy(T)))
                  for t, (R, T) in enumerate(poses)]
    intr = Intrinsics(f=torch.tensor(focal, dtype=DTYPE),
                      width=width, height=height)
    return Dataset(images=np.stack(images), depths=np.stack(depths),
                   masks=np.zeros((num_frames, height, width), dtype=bool),
                   tracks={}, num_frames=num_frames, width=width,
                   height=height, gt_cameras=gt_cameras, gt_intrinsics=intr)


def _spec_to_dict(spec: SceneSpec) -> dict:
    d = {k: v for k, v in vars(spec).items()
         if k not in ("camera", "noise", "objects")}
    d["camera"] = vars(spec.camera)
    d["noise"] = vars(spec.noise)
    d["objects"] = [vars(o) for o in spec.objects]
    return d


def load(dir_path) -> Dataset:
    """Load and validate a dataset directory; schema violations list every
    offending file. Unknown extra files are ignored with a warning."""
    errors: list[str] = []
    rgb_dir = os.path.join(dir_path, "rgb")
    if not os.path.isdir(rgb_dir):
        raise DatasetError(f"{dir_path}: missing rgb/ directory")
    frames = sorted(f for f in os.listdir(rgb_dir) if f.endswith(".png"))
    n_f = len(frames)
    if n_f == 0:
        raise DatasetError(f"{dir_path}: no rgb frames")
    images, depths, masks = [], [], []
    shape = None
    for t in range(n_f):
        name = f"{t:04d}"
        try:
            img = dio.load_png(os.path.join(rgb_dir, name + ".png"))
        except FileNotFoundError:
            errors.append(f"missing rgb/{name}.png")
            continue
        if shape is None:
            shape = img.shape[:2]
        elif img.shape[:2] != shape:
            errors.append(f"rgb/{name}.png: dimension mismatch {img.shape[:2]} != {shape}")
        images.append(img)
        for sub, ext, store in (("depth", ".pfm", depths), ("mask", ".png", masks)):
            path = os.path.join(dir_path, sub, name + ext)
            try:
                arr = dio.load_pfm(path) if ext == ".pfm" else dio.load_png(path)
            except FileNotFoundError:
                errors.append(f"missing {sub}/{name}{ext}")
                continue
            except ValueError as exc:
                errors.append(str(exc))
                continue
            if arr.shape[:2] != shape:
                errors.append(f"{sub}/{name}{ext}: dimension mismatch")
            store.append(arr)

    tracks: dict[int, list] = {}
    tracks_path = os.path.join(dir_path, "tracks.csv")
    if os.path.exists(tracks_path):
        with open(tracks_path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["track_id", "t", "u", "v"]:
                errors.append("tracks.csv: bad header")
            for lineno, row in enumerate(reader, 2):
                try:
                    tid, t = int(row[0]), int(row[1])
                    u, v = float(row[2]), float(row[3])
                except (ValueError, IndexError):
                    errors.append(f"tracks.csv:{lineno}: malformed row {row!r}")
                    continue
                if not 0 <= t < n_f:
                    errors.append(f"tracks.csv:{lineno}: frame {t} out of range")
                    continue
                tracks.setdefault(tid, []).append((t, u, v))
    if errors:
        raise DatasetError(f"{dir_path}: " + "; ".join(errors))

    gt_cameras = gt_intr = None
    cam_path = os.path.join(dir_path, "gt_cameras.txt")
    if os.path.exists(cam_path):
        gt_cameras, gt_intr = load_camera_file(cam_path)
    gt_traj = None
    traj_path = os.path.join(dir_path, "gt_trajectories.txt")
    if os.path.exists(traj_path):
        gt_traj = {}
        with open(traj_path) as fh:
            for line in fh:
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                parts = line.split()
                oid, t = int(parts[0]), int(parts[1])
                gt_traj.setdefault(oid, {})[t] = [float(v) for v in parts[2:5]]
        gt_traj = {oid: np.array([d[t] for t in sorted(d)])
                   for oid, d in gt_traj.items()}

    for name in os.listdir(dir_path):
        if name not in KNOWN_FILES and name not in ("rgb", "depth", "mask"):
            log.warning("ignoring unknown file %s in dataset %s", name, dir_path)

    scene_path = os.path.join(dir_path, "gt_scene.sgs1")
    return Dataset(
        images=np.stack(images),
        depths=np.stack(depths),
        masks=np.stack(masks),
        tracks={tid: np.array(rows, dtype=np.float64)
                for tid, rows in sorted(tracks.items())},
        num_frames=n_f,
        width=shape[1],
        height=shape[0],
        gt_cameras=gt_cameras,
        gt_intrinsics=gt_intr,
        gt_trajectories=gt_traj,
        gt_scene_path=scene_path if os.path.exists(scene_path) else None,
    )
