"""Two-stage optimization: warm-up camera estimation, scene initialization
from tracks and depth, and joint main training with densification and
motion-adaptive control-point pruning.
"""

from __future__ import annotations

import copy
import logging
import math
import os
from dataclasses import dataclass, field, fields

import numpy as np
import torch
from torch import Tensor

from .gaussians import (DynamicGaussians, Scene, StaticGaussians,
                        inverse_sigmoid, save_scene)
from .geometry import (_IDENTITY_6D, DTYPE, DirectPoses, Extrinsics,
                       Intrinsics, PoseNetwork, save_camera_file)
from .losses import (LossWeights, depth_loss, dice_loss, geometric_loss,
                     photometric_loss, rgb_loss, total_main, total_warm)
from .odometry import estimate_cameras
from .rasterizer import RenderConfig, render
from .spline import (MIN_CONTROL_POINTS, ControlPointSet, TrajectorySamples,
                     fit_ls, macp_try_prune)
from .synth import Dataset

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    warmup_steps: int = 1000
    main_steps: int = 20000
    macp_interval: int = 100
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    densify_stop_frac: float = 0.8     # stop growing in the last 20% of steps
    opacity_prune: float = 0.005
    min_traj_depth: float = 0.1        # prune trajectories passing closer to a camera
    split_scale_frac: float = 0.01     # split/clone boundary as scene-extent fraction
    split_factor: float = 1.6
    # learning rates
    lr_position: float = 1.6e-4
    lr_position_final_scale: float = 0.01  # exponential decay target over main_steps
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    # temporal attribute coefficients (time-varying scale offsets and
    # rotation offsets); supervised only at training times, so a lower rate
    # keeps them from oscillating at held-out times
    lr_dct: float = 5e-3
    lr_quat_offset: float = 1e-3
    lr_pose: float = 1e-4
    lr_focal: float = 1e-3
    warmup_lr_pose: float = 3e-4
    warmup_lr_focal: float = 5e-3
    warmup_decay: float = 0.1          # lr multiplier reached at the last warm-up step
    # camera initialization before the warm-up gradient loop:
    # "identity" starts all poses at [I | 0]; "depth" chains point-to-plane
    # depth alignments and searches the focal before gradient refinement
    warmup_init: str = "identity"
    odometry_search_focal: bool = True
    odometry_fit_steps: int = 2000     # pose-network regression onto chained poses
    odometry_fit_lr: float = 3e-3
    # losses / scheduling
    weights: LossWeights = field(default_factory=LossWeights)
    eps: float = 1.0                   # MACP pixel^2 threshold
    n_c_init: int = 0                  # initial control points; 0 = one per frame
    ref_window: int = 8
    seed: int = 0
    focal_init: float = 500.0
    pose_freqs: int = 6
    pose_hidden: int = 64
    pose_depth: int = 2
    use_pose_network: bool = True
    # scene initialization
    static_stride: int = 6
    static_frame_stride: int = 3
    static_opacity_init: float = 0.1
    dynamic_opacity_init: float = 0.9
    checkpoint_interval: int = 1000
    train_frames: tuple | None = None  # subset of frame indices; None = all
    background: tuple = (0.0, 0.0, 0.0)

    def render_config(self) -> RenderConfig:
        return RenderConfig(background=self.background)


_CONFIG_SCALARS = {f.name: f.type for f in fields(TrainConfig)
                   if f.name not in ("weights", "train_frames", "background")}


def parse_config_file(path) -> dict:
    """Plain-text `key=value` config; weight keys use a `weight_` prefix."""
    out: dict = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, val = (s.strip() for s in line.split("=", 1))
            out[key] = val
    return out


def apply_config(cfg: TrainConfig, overrides: dict) -> TrainConfig:
    weights = copy.copy(cfg.weights)
    updates: dict = {}
    for key, val in overrides.items():
        if key.startswith("weight_"):
            wname = key[len("weight_"):]
            if not hasattr(weights, wname):
                raise ValueError(f"unknown loss weight {wname!r}")
            setattr(weights, wname, float(val))
        elif key == "train_frames":
            updates[key] = tuple(int(v) for v in str(val).split(",")) if val else None
        elif key == "background":
            updates[key] = tuple(float(v) for v in str(val).split(","))
        elif key in _CONFIG_SCALARS:
            current = getattr(cfg, key)
            if isinstance(current, bool):
                updates[key] = str(val).lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                updates[key] = int(val)
            elif isinstance(current, str):
                updates[key] = str(val)
            else:
                updates[key] = float(val)
        else:
            raise ValueError(f"unknown config key {key!r}")
    new = copy.copy(cfg)
    for k, v in updates.items():
        setattr(new, k, v)
    new.weights = weights
    return new


class CameraModel:
    """Learnable cameras: pose network (or direct poses) plus log-focal."""

    def __init__(self, num_frames: int, width: int, height: int,
                 cfg: TrainConfig):
        torch.manual_seed(cfg.seed)
        if cfg.use_pose_network:
            self.pose_model = PoseNetwork(num_frames, num_freqs=cfg.pose_freqs,
                                          hidden=cfg.pose_hidden,
                                          depth=cfg.pose_depth)
        else:
            self.pose_model = DirectPoses(num_frames)
        self.log_focal = torch.tensor(math.log(cfg.focal_init), dtype=DTYPE,
                                      requires_grad=True)
        self.width = width
        self.height = height
        self.num_frames = num_frames

    def intrinsics(self) -> Intrinsics:
        return Intrinsics(f=torch.exp(self.log_focal), width=self.width,
                          height=self.height)

    def pose_at(self, t: float) -> Extrinsics:
        return self.pose_model.pose_at(torch.tensor(float(t), dtype=DTYPE))

    def detached_cameras(self) -> list[tuple[Extrinsics, Intrinsics]]:
        intr = Intrinsics(f=torch.exp(self.log_focal).detach(),
                          width=self.width, height=self.height)
        cams = []
        with torch.no_grad():
            for t in range(self.num_frames):
                ext = self.pose_at(t)
                cams.append((Extrinsics(ext.R.clone(), ext.T.clone()), intr))
        return cams

    def parameters(self):
        yield from self.pose_model.parameters()
        yield self.log_focal

    def checksum(self) -> float:
        return float(sum(p.detach().abs().sum() for p in self.parameters()))


def _consistency_pair_losses(dataset: Dataset, cameras: CameraModel,
                             t: int, t_ref: int,
                             rendered_depth: Tensor | None = None):
    """(L_pc, L_gc, L_dpc) for one frame pair; L_dpc is None when no
    rendered depth is supplied."""
    intr = cameras.intrinsics()
    ext_t = cameras.pose_at(t)
    ext_ref = cameras.pose_at(t_ref)
    img_t = torch.from_numpy(dataset.images[t])
    img_ref = torch.from_numpy(dataset.images[t_ref])
    d_t = torch.from_numpy(dataset.depths[t])
    d_ref = torch.from_numpy(dataset.depths[t_ref])
    m_t = torch.from_numpy(dataset.masks[t])
    m_ref = torch.from_numpy(dataset.masks[t_ref])
    l_pc = photometric_loss(img_t, img_ref, d_t, ext_t, ext_ref, intr, m_t, m_ref)
    l_gc = geometric_loss(d_t, d_ref, ext_t, ext_ref, intr, m_t, m_ref)
    l_dpc = None
    if rendered_depth is not None:
        l_dpc = photometric_loss(img_t, img_ref, rendered_depth, ext_t,
                                 ext_ref, intr, m_t, m_ref)
    return l_pc, l_gc, l_dpc


def _sample_ref(rng: np.random.Generator, t: int, n_f: int, window: int,
                allowed: np.ndarray) -> int | None:
    lo, hi = max(0, t - window), min(n_f - 1, t + window)
    candidates = [u for u in allowed if lo <= u <= hi and u != t]
    if not candidates:
        return None
    return int(rng.choice(candidates))


def _depth_odometry_init(dataset: Dataset, cameras: CameraModel,
                         cfg: TrainConfig, allowed: np.ndarray) -> None:
    """Seed the camera model from chained depth alignments.

    Loads the chained trajectory into the pose model (closed form for direct
    poses, short regression for the network) and the recovered focal into
    log_focal, leaving the gradient loop to refine from a good basin."""
    frames = [int(t) for t in allowed]
    images = [torch.from_numpy(dataset.images[t]) for t in frames]
    depths = [torch.from_numpy(dataset.depths[t]) for t in frames]
    masks = [torch.from_numpy(dataset.masks[t]) for t in frames]
    poses, f_hat = estimate_cameras(images, depths, masks, cfg.focal_init,
                                    search_focal=cfg.odometry_search_focal)
    with torch.no_grad():
        cameras.log_focal.copy_(torch.tensor(math.log(f_hat), dtype=DTYPE))
    targets = torch.stack([torch.cat([p.R[:, 0], p.R[:, 1], p.T])
                           for p in poses])
    targets = targets - torch.cat([_IDENTITY_6D, torch.zeros(3, dtype=DTYPE)])
    if isinstance(cameras.pose_model, DirectPoses):
        with torch.no_grad():
            for i, t in enumerate(frames):
                cameras.pose_model.params[t] = targets[i]
        return
    ts = torch.tensor([float(t) for t in frames], dtype=DTYPE)
    opt = torch.optim.Adam(cameras.pose_model.parameters(),
                           lr=cfg.odometry_fit_lr)
    for _ in range(cfg.odometry_fit_steps):
        residual = cameras.pose_model.raw_output(ts) - targets
        loss = (residual ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    log.info("pose network fit to odometry trajectory: mse %.3e",
             float(loss.detach()))


def warmup(dataset: Dataset, cfg: TrainConfig) -> CameraModel:
    """Stage one: optimize only camera parameters with consistency losses."""
    cameras = CameraModel(dataset.num_frames, dataset.width, dataset.height, cfg)
    allowed = np.array(sorted(cfg.train_frames) if cfg.train_frames
                       else range(dataset.num_frames))
    if cfg.warmup_init == "depth" and len(allowed) >= 2:
        _depth_odometry_init(dataset, cameras, cfg, allowed)
    if len(allowed) < 2 or cfg.warmup_steps == 0:
        return cameras
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam([
        {"params": list(cameras.pose_model.parameters()), "lr": cfg.warmup_lr_pose},
        {"params": [cameras.log_focal], "lr": cfg.warmup_lr_focal},
    ])
    decay = cfg.warmup_decay ** (1.0 / max(cfg.warmup_steps, 1))
    last_good = None
    for step in range(cfg.warmup_steps):
        t = int(rng.choice(allowed))
        t_ref = _sample_ref(rng, t, dataset.num_frames, cfg.ref_window, allowed)
        if t_ref is None:
            continue
        l_pc, l_gc, _ = _consistency_pair_losses(dataset, cameras, t, t_ref)
        loss = total_warm(cfg.weights, l_pc, l_gc)
        if not loss.requires_grad:
            # both losses degenerated to constants (no valid static overlap)
            continue
        if not torch.isfinite(loss):
            log.error("warm-up diverged at step %d; restoring last checkpoint", step)
            if last_good is not None:
                cameras.pose_model.load_state_dict(last_good[0])
                with torch.no_grad():
                    cameras.log_focal.copy_(last_good[1])
            break
        opt.zero_grad()
        loss.backward()
        opt.step()
        for group in opt.param_groups:
            group["lr"] *= decay
        if step % 50 == 0:
            last_good = (copy.deepcopy(cameras.pose_model.state_dict()),
                         cameras.log_focal.detach().clone())
    return cameras


def init_control_points(tracks: dict, depths: np.ndarray, masks: np.ndarray,
                        cameras: CameraModel, n_c_init: int,
                        n_f: int) -> list[tuple[int, ControlPointSet]]:
    """Unproject each 2D track through its frames and least-squares fit a
    control-point set. Tracks with fewer than 4 valid observations are
    skipped."""
    from .losses import bilinear_sample

    cams = cameras.detached_cameras()
    out = []
    for tid, rows in tracks.items():
        times, points = [], []
        for t, u, v in rows:
            t = int(t)
            ext, intr = cams[t]
            d, valid = bilinear_sample(torch.from_numpy(depths[t]),
                                       torch.tensor([[u, v]], dtype=DTYPE))
            if not bool(valid[0]) or float(d[0]) <= 0:
                continue
            from .geometry import unproject_world
            world = unproject_world(torch.tensor([u, v], dtype=DTYPE),
                                    d[0], ext, intr)
            times.append(float(t))
            points.append(world.numpy())
        if len(times) < MIN_CONTROL_POINTS:
            log.warning("track %s skipped: only %d valid observations",
                        tid, len(times))
            continue
        samples = TrajectorySamples(np.array(times), np.stack(points))
        out.append((tid, fit_ls(samples, n_c_init, n_f)))
    return out


def init_scene(dataset: Dataset, cameras: CameraModel,
               cfg: TrainConfig) -> Scene:
    """Seed static Gaussians from unprojected static-mask pixels and dynamic
    Gaussians from fitted tracks."""
    n_f = dataset.num_frames
    cams = cameras.detached_cameras()
    f_px = float(torch.exp(cameras.log_focal.detach()))
    stride = cfg.static_stride
    means, log_scales, colors, frame_ids = [], [], [], []
    frames = (sorted(cfg.train_frames) if cfg.train_frames
              else list(range(n_f)))[:: cfg.static_frame_stride]
    for t in frames:
        ext, intr = cams[t]
        # stratified pixel sample offset per frame to avoid aliasing
        off = (t * (stride // 2 + 1)) % stride
        for v in range(off, dataset.height, stride):
            for u in range(off, dataset.width, stride):
                if dataset.masks[t][v, u] > 0.5:
                    continue
                d = float(dataset.depths[t][v, u])
                if d <= 0:
                    continue
                from .geometry import unproject_world
                world = unproject_world(torch.tensor([u, v], dtype=DTYPE),
                                        torch.tensor(d, dtype=DTYPE), ext, intr)
                means.append(world.numpy())
                # footprint of a stride x stride pixel block at this depth
                s = d * stride / f_px * 0.6
                log_scales.append([math.log(s)] * 3)
                colors.append(dataset.images[t][v, u])
                frame_ids.append(t)
    n_st = len(means)
    quats = torch.zeros(n_st, 4, dtype=DTYPE)
    quats[:, 0] = 1.0
    col = np.clip(np.array(colors) if n_st else np.zeros((0, 3)), 0.02, 0.98)
    static = StaticGaussians(
        means=torch.tensor(np.array(means), dtype=DTYPE) if n_st else torch.zeros(0, 3, dtype=DTYPE),
        quats=quats,
        log_scales=torch.tensor(np.array(log_scales), dtype=DTYPE) if n_st else torch.zeros(0, 3, dtype=DTYPE),
        opacity_logits=torch.full((n_st,), inverse_sigmoid(cfg.static_opacity_init), dtype=DTYPE),
        color_logits=torch.tensor(np.log(col / (1 - col)), dtype=DTYPE) if n_st else torch.zeros(0, 3, dtype=DTYPE),
    )

    n_c0 = cfg.n_c_init if cfg.n_c_init else n_f
    fitted = init_control_points(dataset.tracks, dataset.depths, dataset.masks,
                                 cameras, n_c0, n_f)
    cps, d_colors, d_scales = [], [], []
    for tid, cpset in fitted:
        cps.append(cpset.points)
        rows = dataset.tracks[tid]
        samples = []
        depths_at = []
        for t, u, v in rows:
            ui, vi = int(round(u)), int(round(v))
            if 0 <= ui < dataset.width and 0 <= vi < dataset.height:
                samples.append(dataset.images[int(t)][vi, ui])
                depths_at.append(dataset.depths[int(t)][vi, ui])
        c = np.clip(np.median(np.array(samples), axis=0) if samples
                    else np.full(3, 0.5), 0.02, 0.98)
        d_colors.append(np.log(c / (1 - c)))
        d_med = float(np.median(depths_at)) if depths_at else 1.0
        d_scales.append([math.log(max(d_med * 4 / f_px, 1e-4))] * 3)
    n_dy = len(cps)
    bq = torch.zeros(n_dy, 4, dtype=DTYPE)
    bq[:, 0] = 1.0
    dynamic = DynamicGaussians(
        control_points=cps,
        base_quats=bq,
        quat_offsets=torch.zeros(n_dy, 1, 4, dtype=DTYPE),
        base_log_scales=torch.tensor(np.array(d_scales), dtype=DTYPE) if n_dy else torch.zeros(0, 3, dtype=DTYPE),
        dct_coeffs=torch.zeros(n_dy, 10, 3, dtype=DTYPE),
        opacity_logits=torch.full((n_dy,), inverse_sigmoid(cfg.dynamic_opacity_init), dtype=DTYPE),
        color_logits=torch.tensor(np.array(d_colors), dtype=DTYPE) if n_dy else torch.zeros(0, 3, dtype=DTYPE),
        num_frames=n_f,
    )
    return Scene(static=static, dynamic=dynamic, num_frames=n_f)


def scene_extent(scene: Scene) -> float:
    pts = [scene.static.means.detach()]
    if len(scene.dynamic):
        pts.append(scene.dynamic.means_at(0.0).detach())
    allpts = torch.cat(pts)
    if allpts.shape[0] == 0:
        return 1.0
    return float((allpts.max(0).values - allpts.min(0).values).norm())


def densify(scene: Scene, cfg: TrainConfig, rng: np.random.Generator,
            cameras: CameraModel | None = None) -> Scene:
    """Gradient-driven clone/split plus transparency pruning.

    Small Gaussians over the screen-gradient threshold are cloned in place;
    large ones are split into two children with reduced scale at offsets
    sampled from the parent. Dynamic children inherit the parent control
    points (split children offset every point by the sampled displacement).

    When cameras are supplied, dynamic Gaussians whose trajectory passes
    closer than min_traj_depth in front of any camera are dropped: such
    paths are only reachable by exploiting unsupervised times, and a single
    near-camera splat can cover the whole frame there.
    """
    extent = scene_extent(scene)
    boundary = cfg.split_scale_frac * extent
    stats = scene.stats
    st, dy = scene.static, scene.dynamic

    def mean_grads(grad_sum, count):
        return (grad_sum / count.clamp_min(1)).numpy()

    with torch.no_grad():
        # --- static ---
        g = mean_grads(stats.grad_sum_static, stats.count_static)
        keep = (st.opacities() >= cfg.opacity_prune).numpy()
        new_rows = {k: [] for k in ("means", "quats", "log_scales",
                                    "opacity_logits", "color_logits")}
        for i in range(len(st)):
            if not keep[i]:
                continue
            grad_hit = g[i] > cfg.densify_grad_threshold
            max_scale = float(st.scales()[i].max())
            if grad_hit and max_scale > boundary:
                # split: two children at offsets sampled from the parent
                rot = _rotmat_single(st.quats[i])
                for _ in range(2):
                    local = rng.standard_normal(3) * st.scales()[i].numpy()
                    off = torch.from_numpy(rot.numpy() @ local)
                    new_rows["means"].append(st.means[i] + off)
                    new_rows["quats"].append(st.quats[i].clone())
                    new_rows["log_scales"].append(
                        st.log_scales[i] - math.log(cfg.split_factor))
                    new_rows["opacity_logits"].append(st.opacity_logits[i].clone())
                    new_rows["color_logits"].append(st.color_logits[i].clone())
                continue
            new_rows["means"].append(st.means[i].clone())
            new_rows["quats"].append(st.quats[i].clone())
            new_rows["log_scales"].append(st.log_scales[i].clone())
            new_rows["opacity_logits"].append(st.opacity_logits[i].clone())
            new_rows["color_logits"].append(st.color_logits[i].clone())
            if grad_hit:  # clone
                new_rows["means"].append(st.means[i].clone())
                new_rows["quats"].append(st.quats[i].clone())
                new_rows["log_scales"].append(st.log_scales[i].clone())
                new_rows["opacity_logits"].append(st.opacity_logits[i].clone())
                new_rows["color_logits"].append(st.color_logits[i].clone())
        n_new = len(new_rows["means"])
        new_static = StaticGaussians(
            means=torch.stack(new_rows["means"]) if n_new else torch.zeros(0, 3, dtype=DTYPE),
            quats=torch.stack(new_rows["quats"]) if n_new else torch.zeros(0, 4, dtype=DTYPE),
            log_scales=torch.stack(new_rows["log_scales"]) if n_new else torch.zeros(0, 3, dtype=DTYPE),
            opacity_logits=torch.stack(new_rows["opacity_logits"]) if n_new else torch.zeros(0, dtype=DTYPE),
            color_logits=torch.stack(new_rows["color_logits"]) if n_new else torch.zeros(0, 3, dtype=DTYPE),
        )

        # --- dynamic ---
        g = mean_grads(stats.grad_sum_dynamic, stats.count_dynamic)
        keep = (dy.opacities() >= cfg.opacity_prune).numpy()
        if cameras is not None and len(dy) and cfg.min_traj_depth > 0:
            cams = cameras.detached_cameras()
            zmin = torch.full((len(dy),), float("inf"), dtype=DTYPE)
            for t in range(scene.num_frames):
                ext, _ = cams[t]
                z = (dy.means_at(float(t)) @ ext.R.T + ext.T)[:, 2]
                zmin = torch.minimum(zmin, z)
            near = (zmin < cfg.min_traj_depth).numpy()
            if near.any():
                log.info("dropping %d dynamic Gaussians passing within %.3g "
                         "of a camera", int(near.sum()), cfg.min_traj_depth)
            keep &= ~near
        d_cps, d_bq, d_qo, d_bls, d_dct, d_op, d_col = [], [], [], [], [], [], []

        def push_dynamic(i, cp):
            d_cps.append(cp)
            d_bq.append(dy.base_quats[i].clone())
            d_qo.append(dy.quat_offsets[i].clone())
            d_bls.append(dy.base_log_scales[i].clone())
            d_dct.append(dy.dct_coeffs[i].clone())
            d_op.append(dy.opacity_logits[i].clone())
            d_col.append(dy.color_logits[i].clone())

        for i in range(len(dy)):
            if not keep[i]:
                continue
            grad_hit = g[i] > cfg.densify_grad_threshold
            scales0 = dy.scales_at(0.0)[i]
            if grad_hit and float(scales0.max()) > boundary:
                rot = _rotmat_single(dy.base_quats[i])
                for _ in range(2):
                    local = rng.standard_normal(3) * scales0.numpy()
                    off = torch.from_numpy(rot.numpy() @ local)
                    cp = dy.control_points[i].detach().clone() + off
                    push_dynamic(i, cp)
                    d_bls[-1] = d_bls[-1] - math.log(cfg.split_factor)
                continue
            push_dynamic(i, dy.control_points[i].detach().clone())
            if grad_hit:
                push_dynamic(i, dy.control_points[i].detach().clone())
        n_dy = len(d_cps)
        new_dynamic = DynamicGaussians(
            control_points=d_cps,
            base_quats=torch.stack(d_bq) if n_dy else torch.zeros(0, 4, dtype=DTYPE),
            quat_offsets=torch.stack(d_qo) if n_dy else torch.zeros(0, dy.n_q, 4, dtype=DTYPE),
            base_log_scales=torch.stack(d_bls) if n_dy else torch.zeros(0, 3, dtype=DTYPE),
            dct_coeffs=torch.stack(d_dct) if n_dy else torch.zeros(0, dy.dct_k, 3, dtype=DTYPE),
            opacity_logits=torch.stack(d_op) if n_dy else torch.zeros(0, dtype=DTYPE),
            color_logits=torch.stack(d_col) if n_dy else torch.zeros(0, 3, dtype=DTYPE),
            num_frames=dy.num_frames,
        )
        new_dynamic.n_q, new_dynamic.dct_k = dy.n_q, dy.dct_k
    new_scene = Scene(static=new_static, dynamic=new_dynamic,
                      num_frames=scene.num_frames)
    new_scene.stats.reset(len(new_static), len(new_dynamic))
    return new_scene


def _rotmat_single(q: Tensor) -> Tensor:
    from .gaussians import normalize_quat, quat_to_rotmat
    return quat_to_rotmat(normalize_quat(q[None]))[0]


def run_macp(scene: Scene, cameras: CameraModel, eps: float) -> int:
    """Try to prune one control point from every dynamic Gaussian.

    Returns the number of Gaussians pruned. Replaces the stored parameter
    tensors, so optimizers must be rebuilt afterwards."""
    cams = cameras.detached_cameras()
    n_f = scene.num_frames
    pruned = 0
    dy = scene.dynamic
    for i in range(len(dy)):
        cur = ControlPointSet(dy.control_points[i].detach().clone())
        new = macp_try_prune(cur, cams, eps, n_f)
        if new.num_points < cur.num_points:
            dy.control_points[i] = torch.nn.Parameter(new.points.clone())
            pruned += 1
    return pruned


def build_scene_optimizer(scene: Scene, cfg: TrainConfig,
                          position_lr: float) -> torch.optim.Adam:
    st, dy = scene.static, scene.dynamic
    groups = [
        {"params": [st.means] + list(dy.control_points), "lr": position_lr},
        {"params": [st.color_logits, dy.color_logits], "lr": cfg.lr_color},
        {"params": [st.opacity_logits, dy.opacity_logits], "lr": cfg.lr_opacity},
        {"params": [st.log_scales, dy.base_log_scales], "lr": cfg.lr_scale},
        {"params": [dy.dct_coeffs], "lr": cfg.lr_dct},
        {"params": [st.quats, dy.base_quats], "lr": cfg.lr_rotation},
        {"params": [dy.quat_offsets], "lr": cfg.lr_quat_offset},
    ]
    return torch.optim.Adam(groups)


def train(dataset: Dataset, cfg: TrainConfig, run_dir=None,
          cameras: CameraModel | None = None,
          scene: Scene | None = None) -> tuple[Scene, CameraModel]:
    """Main training stage: joint optimization of Gaussians and cameras."""
    if cameras is None:
        cameras = warmup(dataset, cfg)
    if scene is None:
        scene = init_scene(dataset, cameras, cfg)
    rng = np.random.default_rng(cfg.seed + 17)
    rcfg = cfg.render_config()
    allowed = np.array(sorted(cfg.train_frames) if cfg.train_frames
                       else range(dataset.num_frames))
    scene_opt = build_scene_optimizer(scene, cfg, cfg.lr_position)
    cam_opt = torch.optim.Adam([
        {"params": list(cameras.pose_model.parameters()), "lr": cfg.lr_pose},
        {"params": [cameras.log_focal], "lr": cfg.lr_focal},
    ])
    pos_decay = (cfg.lr_position_final_scale ** (1.0 / max(cfg.main_steps, 1))
                 if cfg.main_steps else 1.0)
    loss_log = []
    n_st = len(scene.static)
    for step in range(cfg.main_steps):
        t = int(rng.choice(allowed))
        intr = cameras.intrinsics()
        ext = cameras.pose_at(t)
        out = render(scene, ext, intr, float(t), rcfg)
        gt_img = torch.from_numpy(dataset.images[t])
        gt_depth = torch.from_numpy(dataset.depths[t])
        gt_mask = torch.from_numpy(dataset.masks[t])
        l_rgb = rgb_loss(out.color, gt_img)
        l_d = depth_loss(out.depth, gt_depth)
        l_m = dice_loss(gt_mask, out.mask.clamp(0, 1))
        t_ref = _sample_ref(rng, t, dataset.num_frames, cfg.ref_window, allowed)
        if t_ref is not None:
            l_pc, l_gc, l_dpc = _consistency_pair_losses(
                dataset, cameras, t, t_ref,
                rendered_depth=out.depth.clamp_min(1e-3))
        else:
            zero = torch.zeros((), dtype=DTYPE)
            l_pc = l_gc = l_dpc = zero
        loss = total_main(cfg.weights, l_rgb, l_d, l_m, l_pc, l_dpc, l_gc)
        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite loss at step {step}: "
                               f"rgb={float(l_rgb)} d={float(l_d)} m={float(l_m)}")
        scene_opt.zero_grad()
        cam_opt.zero_grad()
        loss.backward()
        # densification statistics from retained screen-space gradients
        if out.means2d is not None and out.means2d.grad is not None:
            mags = out.means2d.grad.norm(dim=-1)
            ids = out.visible_ids
            st_sel = ids < n_st
            scene.stats.grad_sum_static.index_add_(0, ids[st_sel], mags[st_sel])
            scene.stats.count_static.index_add_(
                0, ids[st_sel], torch.ones(int(st_sel.sum()), dtype=DTYPE))
            dy_ids = ids[~st_sel] - n_st
            scene.stats.grad_sum_dynamic.index_add_(0, dy_ids, mags[~st_sel])
            scene.stats.count_dynamic.index_add_(
                0, dy_ids, torch.ones(dy_ids.shape[0], dtype=DTYPE))
        scene_opt.step()
        cam_opt.step()
        scene_opt.param_groups[0]["lr"] *= pos_decay
        with torch.no_grad():
            scene.static.quats.data = scene.static.quats.data / \
                scene.static.quats.data.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        loss_log.append((step,) + tuple(
            float(v.detach()) for v in (l_rgb, l_d, l_m, l_pc, l_dpc, l_gc, loss)))
        rebuilt = False
        if (step + 1) % cfg.densify_interval == 0 and \
                step < cfg.densify_stop_frac * cfg.main_steps:
            scene = densify(scene, cfg, rng, cameras)
            n_st = len(scene.static)
            rebuilt = True
        if (step + 1) % cfg.macp_interval == 0:
            if run_macp(scene, cameras, cfg.eps):
                rebuilt = True
        if rebuilt:
            pos_lr = scene_opt.param_groups[0]["lr"]
            scene_opt = build_scene_optimizer(scene, cfg, pos_lr)
        if run_dir and (step + 1) % cfg.checkpoint_interval == 0:
            _write_checkpoint(run_dir, scene, cameras, step + 1)
    if run_dir:
        os.makedirs(run_dir, exist_ok=True)
        _write_checkpoint(run_dir, scene, cameras, cfg.main_steps)
        with open(os.path.join(run_dir, "loss_log.csv"), "w") as fh:
            fh.write("step,L_rgb,L_d,L_M,L_pc,L_dpc,L_gc,total\n")
            for row in loss_log:
                fh.write(",".join(f"{v:.12g}" if i else str(v)
                                  for i, v in enumerate(row)) + "\n")
    return scene, cameras


def _write_checkpoint(run_dir, scene: Scene, cameras: CameraModel,
                      step: int) -> None:
    os.makedirs(run_dir, exist_ok=True)
    save_scene(os.path.join(run_dir, f"scene_{step:06d}.sgs1"), scene)
    save_scene(os.path.join(run_dir, "scene_latest.sgs1"), scene)
    intr = Intrinsics(f=torch.exp(cameras.log_focal).detach(),
                      width=cameras.width, height=cameras.height)
    records = []
    with torch.no_grad():
        for t in range(cameras.num_frames):
            ext = cameras.pose_at(t)
            records.append((float(t), Extrinsics(ext.R.clone(), ext.T.clone())))
    save_camera_file(os.path.join(run_dir, f"cameras_{step:06d}.txt"),
                     records, intr)
    save_camera_file(os.path.join(run_dir, "cameras_latest.txt"), records, intr)
