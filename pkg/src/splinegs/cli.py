"""Command-line surface: dataset synthesis, warm-up, training, rendering,
evaluation, and track visualization.

Every command writes a manifest (config snapshot, seed, input content hash)
into the run directory before doing any work, and records wall-clock timing
per stage in a sibling timings file so the manifest stays immutable.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time

import numpy as np
import torch

from . import io as dio
from .gaussians import Scene, load_scene
from .geometry import (DTYPE, Extrinsics, Intrinsics, load_camera_file,
                       save_camera_file)
from .losses import psnr
from .rasterizer import RenderConfig, render, render_trajectory
from .spline import ControlPointSet, basis_matrix, save_splines
from .synth import SceneSpec, generate
from .synth import load as load_dataset
from .trainer import (CameraModel, TrainConfig, apply_config, init_scene,
                      parse_config_file, train, warmup)

WARMUP_STATE = "warmup_state.pt"


class StageOrderingError(RuntimeError):
    pass


class CameraSpecError(ValueError):
    pass


# --------------------------------------------------------------------------
# manifest / config plumbing

def _hash_inputs(paths: list[str]) -> str:
    h = hashlib.sha256()
    for path in sorted(paths):
        if os.path.isdir(path):
            for root, _, files in os.walk(path):
                for name in sorted(files):
                    full = os.path.join(root, name)
                    h.update(os.path.relpath(full, path).encode())
                    with open(full, "rb") as fh:
                        h.update(fh.read())
        elif os.path.isfile(path):
            with open(path, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


def _config_snapshot(cfg: TrainConfig) -> dict:
    d = {k: v for k, v in vars(cfg).items() if k != "weights"}
    d["weights"] = dict(vars(cfg.weights))
    d["train_frames"] = list(cfg.train_frames) if cfg.train_frames else None
    d["background"] = list(cfg.background)
    return d


def write_manifest(run_dir, stage: str, cfg_snapshot: dict, seed: int,
                   inputs: list[str]) -> None:
    os.makedirs(run_dir, exist_ok=True)
    manifest = {
        "stage": stage,
        "seed": seed,
        "config": cfg_snapshot,
        "input_hash": _hash_inputs(inputs),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    with open(os.path.join(run_dir, f"manifest_{stage}.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, default=str)


def record_timing(run_dir, stage: str, seconds: float) -> None:
    path = os.path.join(run_dir, "timings.json")
    timings = {}
    if os.path.exists(path):
        with open(path) as fh:
            timings = json.load(fh)
    timings[stage] = seconds
    with open(path, "w") as fh:
        json.dump(timings, fh, indent=2)


def build_train_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if getattr(args, "config", None):
        cfg = apply_config(cfg, parse_config_file(args.config))
    overrides: dict = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "eps", None) is not None:
        overrides["eps"] = args.eps
    if getattr(args, "steps", None) is not None:
        key = "warmup_steps" if args.command == "warmup" else "main_steps"
        overrides[key] = args.steps
    if getattr(args, "weights", None):
        for item in args.weights.split(","):
            if "=" not in item:
                raise ValueError(f"--weights expects k=v pairs, got {item!r}")
            k, v = item.split("=", 1)
            overrides[f"weight_{k.strip()}"] = v.strip()
    return apply_config(cfg, overrides)


# --------------------------------------------------------------------------
# camera state persistence

def save_warmup_state(path, cameras: CameraModel, cfg: TrainConfig) -> None:
    torch.save({
        "pose_state": cameras.pose_model.state_dict(),
        "log_focal": cameras.log_focal.detach().clone(),
        "num_frames": cameras.num_frames,
        "width": cameras.width,
        "height": cameras.height,
        "use_pose_network": cfg.use_pose_network,
        "pose_freqs": cfg.pose_freqs,
        "pose_hidden": cfg.pose_hidden,
        "pose_depth": cfg.pose_depth,
    }, path)


def load_warmup_state(path, cfg: TrainConfig) -> CameraModel:
    state = torch.load(path, weights_only=True)
    import copy
    cfg = copy.copy(cfg)
    for key in ("use_pose_network", "pose_freqs", "pose_hidden", "pose_depth"):
        setattr(cfg, key, state[key])
    cameras = CameraModel(state["num_frames"], state["width"],
                          state["height"], cfg)
    cameras.pose_model.load_state_dict(state["pose_state"])
    with torch.no_grad():
        cameras.log_focal.copy_(state["log_focal"])
    return cameras


# --------------------------------------------------------------------------
# camera spec parsing

def _rotmat_to_quat(r: np.ndarray) -> np.ndarray:
    """(w, x, y, z) from a rotation matrix, Shepperd's branch selection."""
    tr = np.trace(r)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        return np.array([s / 4, (r[2, 1] - r[1, 2]) / s,
                         (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    i = int(np.argmax(np.diag(r)))
    j, k = (i + 1) % 3, (i + 2) % 3
    s = math.sqrt(r[i, i] - r[j, j] - r[k, k] + 1.0) * 2
    q = np.zeros(4)
    q[0] = (r[k, j] - r[j, k]) / s
    q[1 + i] = s / 4
    q[1 + j] = (r[j, i] + r[i, j]) / s
    q[1 + k] = (r[k, i] + r[i, k]) / s
    return q


def _quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _slerp(r_a: np.ndarray, r_b: np.ndarray, alpha: float) -> np.ndarray:
    qa, qb = _rotmat_to_quat(r_a), _rotmat_to_quat(r_b)
    if float(qa @ qb) < 0:
        qb = -qb
    dot = float(np.clip(qa @ qb, -1.0, 1.0))
    if dot > 1 - 1e-12:
        q = (1 - alpha) * qa + alpha * qb
    else:
        theta = math.acos(dot)
        q = (math.sin((1 - alpha) * theta) * qa
             + math.sin(alpha * theta) * qb) / math.sin(theta)
    return _quat_to_rotmat(q)


def _parse_pose_line(line: str, lineno: int) -> Extrinsics:
    parts = line.split()
    if len(parts) != 16:
        raise CameraSpecError(
            f"camera spec line {lineno}: expected 16 fields, got {len(parts)}")
    try:
        vals = [float(v) for v in parts]
    except ValueError as exc:
        raise CameraSpecError(f"camera spec line {lineno}: {exc}") from exc
    r = torch.tensor(vals[4:13], dtype=DTYPE).reshape(3, 3)
    t = torch.tensor(vals[13:16], dtype=DTYPE)
    return Extrinsics(r, t)


def parse_camera_spec(spec: str,
                      records: list[tuple[float, Extrinsics]]) -> Extrinsics:
    """Resolve a camera spec against the run's estimated cameras.

    Accepts a frame index, `lerp:tA:tB:alpha` (spherical rotation
    interpolation between the estimated poses at frames tA and tB), a path
    to a camera file (first pose is used), or an inline pose line in the
    camera file format.
    """
    spec = spec.strip()
    by_frame = {int(round(t)): ext for t, ext in records}
    if spec.lstrip("-").isdigit():
        idx = int(spec)
        if idx not in by_frame:
            raise CameraSpecError(
                f"camera spec line 1: frame {idx} not among estimated cameras")
        return by_frame[idx]
    if spec.startswith("lerp:"):
        parts = spec.split(":")
        if len(parts) != 4:
            raise CameraSpecError(
                "camera spec line 1: expected lerp:tA:tB:alpha")
        try:
            ta, tb, alpha = int(parts[1]), int(parts[2]), float(parts[3])
        except ValueError as exc:
            raise CameraSpecError(f"camera spec line 1: {exc}") from exc
        for idx in (ta, tb):
            if idx not in by_frame:
                raise CameraSpecError(
                    f"camera spec line 1: frame {idx} not among estimated cameras")
        ea, eb = by_frame[ta], by_frame[tb]
        r = _slerp(ea.R.numpy(), eb.R.numpy(), alpha)
        t = (1 - alpha) * ea.T.numpy() + alpha * eb.T.numpy()
        return Extrinsics(torch.from_numpy(r), torch.from_numpy(t))
    if os.path.isfile(spec):
        with open(spec) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if line:
                    return _parse_pose_line(line, lineno)
        raise CameraSpecError(f"camera spec line 1: {spec} contains no pose")
    return _parse_pose_line(spec, 1)


def parse_time_range(arg: str, n_f: int) -> list[float]:
    """`a:b:n` inclusive range of n times, or a single real-valued time."""
    if ":" in arg:
        parts = arg.split(":")
        if len(parts) != 3:
            raise ValueError(f"time range {arg!r}: expected a:b:n")
        a, b, n = float(parts[0]), float(parts[1]), int(parts[2])
        if n < 1:
            raise ValueError("time range needs at least one step")
        return list(np.linspace(a, b, n))
    return [float(arg)]


# --------------------------------------------------------------------------
# run artifacts

def _load_run(run_dir) -> tuple[Scene, list[tuple[float, Extrinsics]], Intrinsics]:
    scene_path = os.path.join(run_dir, "scene_latest.sgs1")
    cam_path = os.path.join(run_dir, "cameras_latest.txt")
    for path, stage in ((scene_path, "train"), (cam_path, "train")):
        if not os.path.exists(path):
            raise StageOrderingError(
                f"missing {path}; run the {stage} stage first")
    scene = load_scene(scene_path)
    records, intr = load_camera_file(cam_path)
    if intr is None:
        raise ValueError(f"{cam_path}: no intrinsics line")
    return scene, records, intr


def benchmark_gdef(scene: Scene, samples: int = 2000,
                   repeats: int = 3) -> float:
    """Mean per-Gaussian trajectory-evaluation latency in nanoseconds.

    Times the full deformation path (basis construction plus the control
    point combination) over a batch of query times and reports the
    per-evaluation cost, minimized over repeats.
    """
    dy = scene.dynamic
    if len(dy) == 0:
        return 0.0
    n_f = scene.num_frames
    ts = np.linspace(0.0, n_f - 1, samples)
    per_gaussian = []
    for i in range(len(dy)):
        pts = dy.control_points[i].detach().numpy()
        n_c = pts.shape[0]
        best = math.inf
        for _ in range(repeats):
            start = time.perf_counter()
            out = basis_matrix(ts, n_c, n_f) @ pts
            best = min(best, time.perf_counter() - start)
        assert out.shape == (samples, 3)
        per_gaussian.append(best / samples * 1e9)
    return float(np.mean(per_gaussian))


def control_point_histogram(scene: Scene) -> dict[int, int]:
    hist: dict[int, int] = {}
    for p in scene.dynamic.control_points:
        hist[p.shape[0]] = hist.get(p.shape[0], 0) + 1
    return dict(sorted(hist.items()))


def _check_finite(arrays) -> None:
    for name, arr in arrays:
        if not np.isfinite(np.asarray(arr)).all():
            raise RuntimeError(f"non-finite values in output {name}")


# --------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    spec = SceneSpec.from_json(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    write_manifest(args.out, "synth", {"spec": args.spec}, spec.seed,
                   [args.spec])
    start = time.perf_counter()
    dataset = generate(spec, args.out)
    record_timing(args.out, "synth", time.perf_counter() - start)
    _check_finite([("depths", dataset.depths), ("images", dataset.images)])
    print(f"synth: {dataset.num_frames} frames "
          f"{dataset.width}x{dataset.height}, {len(dataset.tracks)} tracks "
          f"-> {args.out}")
    return 0


def cmd_warmup(args) -> int:
    cfg = build_train_config(args)
    dataset = load_dataset(args.data)
    inputs = [args.data] + ([args.config] if args.config else [])
    write_manifest(args.out, "warmup", _config_snapshot(cfg), cfg.seed, inputs)
    start = time.perf_counter()
    cameras = warmup(dataset, cfg)
    record_timing(args.out, "warmup", time.perf_counter() - start)
    save_warmup_state(os.path.join(args.out, WARMUP_STATE), cameras, cfg)
    records = [(float(t), ext) for t, (ext, _) in
               enumerate(cameras.detached_cameras())]
    save_camera_file(os.path.join(args.out, "cameras_warmup.txt"),
                     records, cameras.intrinsics())
    focal = float(torch.exp(cameras.log_focal.detach()))
    if not math.isfinite(focal):
        raise RuntimeError("non-finite focal after warm-up")
    print(f"warmup: {cfg.warmup_steps} steps, focal estimate {focal:.3f} "
          f"-> {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = build_train_config(args)
    state_path = os.path.join(args.out, WARMUP_STATE)
    if not os.path.exists(state_path):
        raise StageOrderingError(
            f"missing {state_path}; run the warmup stage first")
    dataset = load_dataset(args.data)
    inputs = [args.data, state_path] + ([args.config] if args.config else [])
    write_manifest(args.out, "train", _config_snapshot(cfg), cfg.seed, inputs)
    cameras = load_warmup_state(state_path, cfg)
    start = time.perf_counter()
    scene = init_scene(dataset, cameras, cfg)
    scene, cameras = train(dataset, cfg, run_dir=args.out, cameras=cameras,
                           scene=scene)
    record_timing(args.out, "train", time.perf_counter() - start)
    splines = [(i, ControlPointSet(p.detach()))
               for i, p in enumerate(scene.dynamic.control_points)]
    save_splines(os.path.join(args.out, "splines_latest.txt"), splines)
    print(f"train: {cfg.main_steps} steps, {len(scene.static)} static + "
          f"{len(scene.dynamic)} dynamic Gaussians -> {args.out}")
    return 0


def cmd_render(args) -> int:
    scene, records, intr = _load_run(args.run)
    ext = parse_camera_spec(args.camera, records)
    times = parse_time_range(args.t, scene.num_frames)
    cfg = RenderConfig()
    outputs = []
    with torch.no_grad():
        for t in times:
            out = render(scene, ext, intr, t, cfg)
            outputs.append((t, out.color.numpy()))
    _check_finite([(f"t={t}", img) for t, img in outputs])
    if len(outputs) == 1:
        dio.save_png(args.out, outputs[0][1])
        written = [args.out]
    else:
        os.makedirs(args.out, exist_ok=True)
        written = []
        for k, (t, img) in enumerate(outputs):
            path = os.path.join(args.out, f"{k:04d}.png")
            dio.save_png(path, img)
            written.append(path)
    print(f"render: {len(written)} image(s) at t={args.t} -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    scene, records, intr = _load_run(args.run)
    dataset = load_dataset(args.data)
    by_frame = {int(round(t)): ext for t, ext in records}
    frames = (sorted(int(v) for v in args.frames.split(","))
              if args.frames else list(range(dataset.num_frames)))
    rows = []
    cfg = RenderConfig()
    with torch.no_grad():
        for t in frames:
            if t not in by_frame:
                raise ValueError(f"no estimated camera for frame {t}")
            out = render(scene, by_frame[t], intr, float(t), cfg)
            rows.append((t, psnr(out.color, torch.from_numpy(dataset.images[t]))))
    mean_psnr = float(np.mean([p for _, p in rows]))
    gdef_ns = benchmark_gdef(scene)
    hist = control_point_histogram(scene)

    out_path = args.out or os.path.join(args.run, "metrics.csv")
    with open(out_path, "w") as fh:
        fh.write("metric,value\n")
        for t, p in rows:
            fh.write(f"psnr_frame_{t:04d},{p:.6f}\n")
        fh.write(f"psnr_mean,{mean_psnr:.6f}\n")
        fh.write(f"g_def_ns,{gdef_ns:.6f}\n")
        for n_c, count in hist.items():
            fh.write(f"n_c_{n_c},{count}\n")
    for t, p in rows:
        print(f"frame {t:4d}  PSNR {p:7.3f} dB")
    print(f"mean PSNR {mean_psnr:.3f} dB")
    print(f"g_def {gdef_ns:.2f} ns/eval")
    print("N_c histogram: " + ", ".join(f"{k}: {v}" for k, v in hist.items()))
    _check_finite([("psnr", [p for _, p in rows])])
    return 0


def cmd_tracks(args) -> int:
    scene, records, intr = _load_run(args.run)
    ext = parse_camera_spec(args.camera, records)
    times = parse_time_range(args.t, scene.num_frames)
    cfg = RenderConfig()
    with torch.no_grad():
        base = render(scene, ext, intr, times[0], cfg).color.numpy().copy()
        tracks, coverage = render_trajectory(
            scene, ext, intr, (times[0], times[-1]), len(times), cfg)
    cov = coverage.numpy()
    overlay = 0
    h, w = base.shape[:2]
    hot = cov > 0.5
    for k in range(tracks.shape[0]):
        # color ramp along time: blue start, red end
        a = k / max(tracks.shape[0] - 1, 1)
        uv = tracks[k].numpy()
        ui = np.round(uv[..., 0]).astype(int)
        vi = np.round(uv[..., 1]).astype(int)
        ok = hot & (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
        base[vi[ok], ui[ok]] = (a, 0.1, 1 - a)
        overlay += int(ok.sum())
    dio.save_png(args.out, base)
    _check_finite([("overlay", base)])
    print(f"tracks: {overlay} overlay pixels across {len(times)} times "
          f"-> {args.out}")
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splinegs",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="key=value config file")
            sp.add_argument("--steps", type=int, help="override step count")
            sp.add_argument("--eps", type=float,
                            help="control-point pruning threshold (px^2)")
            sp.add_argument("--weights",
                            help="loss weight overrides, k=v,...")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("spec", help="scene spec JSON")
    sp.add_argument("--out", required=True)
    common(sp, config=False)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("warmup", help="stage one: camera estimation")
    sp.add_argument("data", help="dataset directory")
    sp.add_argument("--out", required=True, help="run directory")
    common(sp)
    sp.set_defaults(func=cmd_warmup)

    sp = sub.add_parser("train", help="stage two: joint optimization")
    sp.add_argument("data", help="dataset directory")
    sp.add_argument("--out", required=True, help="run directory")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("render", help="render novel views and times")
    sp.add_argument("run", help="run directory")
    sp.add_argument("--camera", required=True,
                    help="frame index, lerp:tA:tB:alpha, or pose line/file")
    sp.add_argument("--t", required=True, help="time or a:b:n range")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("eval", help="PSNR, deformation timing, N_c stats")
    sp.add_argument("run", help="run directory")
    sp.add_argument("data", help="dataset directory")
    sp.add_argument("--frames", help="comma-separated frame subset")
    sp.add_argument("--out", help="metrics CSV path")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("tracks", help="overlay dynamic trajectories")
    sp.add_argument("run", help="run directory")
    sp.add_argument("--camera", required=True)
    sp.add_argument("--t", required=True, help="a:b:n time range")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_tracks)
    return p


def main(argv=None) -> int:
    threads = os.environ.get("SPLINEGS_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # one-line machine-parsable failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
