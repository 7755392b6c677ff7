"""CPU forward Gaussian splatting with autograd-backed analytic gradients.

Forward pass: evaluate all Gaussians at the query time, project to 2D via
the EWA affine approximation, globally sort by camera depth and composite
front-to-back per pixel. The whole pipeline is built from differentiable
torch ops, so gradients to every attribute (control points included, via
spline linearity) come from the exact adjoint of the forward computation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor

from .gaussians import Scene
from .geometry import DTYPE, Extrinsics, Intrinsics


@dataclass
class RenderConfig:
    dilation: float = 0.3            # pixel^2 added to the 2D covariance diagonal
    alpha_clamp: float = 0.99
    alpha_skip: float = 1.0 / 255.0
    stop_transmittance: float = 1e-4
    near: float = 0.01               # meters; cull closer Gaussians
    cull_sigma: float = 3.0
    background: tuple = (0.0, 0.0, 0.0)
    normalize_depth: bool = False    # alpha-normalized depth instead of blended z
    chunk: int = 256


@dataclass
class Splat2D:
    center: Tensor      # (2,) pixels
    cov2d: Tensor       # (2, 2) pixels^2, dilated
    depth: Tensor       # camera-space z
    color: Tensor       # (3,)
    opacity: Tensor     # scalar in (0, 1)
    is_dynamic: bool
    source_id: int


@dataclass
class RenderOutput:
    color: Tensor          # (H, W, 3)
    depth: Tensor          # (H, W)
    mask: Tensor           # (H, W)
    transmittance: Tensor  # (H, W)
    # internals for gradient statistics / debugging
    means2d: Tensor | None = None        # (n_visible, 2), retains grad
    visible_ids: Tensor | None = None    # global source ids of visible Gaussians
    weight_sum: Tensor | None = None     # (H, W) accumulated blend weight


class NonFiniteSceneError(RuntimeError):
    pass


def _project_cov2d(means: Tensor, covs: Tensor, ext: Extrinsics,
                   intr: Intrinsics, dilation: float
                   ) -> tuple[Tensor, Tensor, Tensor]:
    """Project means/covariances: returns (centers (n,2), cov2d (n,2,2), z (n,))."""
    xc = means @ ext.R.T + ext.T
    x, y, z = xc.unbind(-1)
    f = intr.f
    u = f * x / z + intr.cx
    v = f * y / z + intr.cy
    centers = torch.stack([u, v], dim=-1)
    zero = torch.zeros_like(z)
    j = torch.stack([
        torch.stack([f / z, zero, -f * x / z**2], -1),
        torch.stack([zero, f / z, -f * y / z**2], -1),
    ], -2)  # (n, 2, 3)
    cov_cam = ext.R @ covs @ ext.R.T
    cov2d = j @ cov_cam @ j.transpose(-1, -2)
    cov2d = cov2d + dilation * torch.eye(2, dtype=DTYPE)
    return centers, cov2d, z


def project_gaussian(mean: Tensor, cov: Tensor, ext: Extrinsics,
                     intr: Intrinsics, color: Tensor = None,
                     opacity: Tensor = None, is_dynamic: bool = False,
                     source_id: int = 0,
                     cfg: RenderConfig = None) -> Splat2D | None:
    """Project a single Gaussian; returns None when culled (behind near plane
    or 3-sigma extent entirely off screen)."""
    cfg = cfg or RenderConfig()
    mean = torch.as_tensor(mean, dtype=DTYPE).reshape(1, 3)
    cov = torch.as_tensor(cov, dtype=DTYPE).reshape(1, 3, 3)
    xc = mean @ ext.R.T + ext.T
    if float(xc[0, 2]) <= cfg.near:
        return None
    centers, cov2d, z = _project_cov2d(mean, cov, ext, intr, cfg.dilation)
    radius = _cull_radius(cov2d, cfg.cull_sigma)[0]
    cu, cv = float(centers[0, 0]), float(centers[0, 1])
    r = float(radius)
    if cu + r < -0.5 or cu - r > intr.width - 0.5 or cv + r < -0.5 or cv - r > intr.height - 0.5:
        return None
    return Splat2D(
        center=centers[0], cov2d=cov2d[0], depth=z[0],
        color=torch.zeros(3, dtype=DTYPE) if color is None else torch.as_tensor(color, dtype=DTYPE),
        opacity=torch.tensor(1.0, dtype=DTYPE) if opacity is None else torch.as_tensor(opacity, dtype=DTYPE),
        is_dynamic=is_dynamic, source_id=source_id,
    )


def _cull_radius(cov2d: Tensor, n_sigma: float) -> Tensor:
    a, b, c = cov2d[..., 0, 0], cov2d[..., 0, 1], cov2d[..., 1, 1]
    mid = (a + c) / 2
    disc = torch.sqrt(((a - c) / 2) ** 2 + b**2)
    return n_sigma * torch.sqrt((mid + disc).clamp_min(0))


def _gather_scene(scene: Scene, t: float):
    """Evaluate all Gaussians at time t: means, covs, colors, opacities, flags, ids."""
    st, dy = scene.static, scene.dynamic
    parts_mean, parts_cov, parts_col, parts_op = [], [], [], []
    flags, ids = [], []
    if len(st):
        parts_mean.append(st.means)
        parts_cov.append(st.covariances())
        parts_col.append(st.colors())
        parts_op.append(st.opacities())
        flags.append(torch.zeros(len(st), dtype=DTYPE))
        ids.append(torch.arange(len(st)))
    if len(dy):
        parts_mean.append(dy.means_at(t))
        parts_cov.append(dy.covariances_at(t))
        parts_col.append(dy.colors())
        parts_op.append(dy.opacities())
        flags.append(torch.ones(len(dy), dtype=DTYPE))
        ids.append(torch.arange(len(dy)) + len(st))
    if not parts_mean:
        z3 = torch.zeros(0, 3, dtype=DTYPE)
        return (z3, torch.zeros(0, 3, 3, dtype=DTYPE), z3,
                torch.zeros(0, dtype=DTYPE), torch.zeros(0, dtype=DTYPE),
                torch.zeros(0, dtype=torch.long))
    means = torch.cat(parts_mean)
    covs = torch.cat(parts_cov)
    colors = torch.cat(parts_col)
    opacities = torch.cat(parts_op)
    for name, tensor in (("mean", means), ("covariance", covs),
                         ("color", colors), ("opacity", opacities)):
        bad = ~torch.isfinite(tensor.reshape(tensor.shape[0], -1)).all(dim=1)
        if bad.any():
            gid = int(torch.nonzero(bad)[0])
            raise NonFiniteSceneError(f"non-finite {name} on Gaussian {gid} at t={t}")
    return means, covs, colors, opacities, torch.cat(flags), torch.cat(ids)


def _pixel_grid(intr: Intrinsics) -> Tensor:
    v, u = torch.meshgrid(
        torch.arange(intr.height, dtype=DTYPE),
        torch.arange(intr.width, dtype=DTYPE),
        indexing="ij",
    )
    return torch.stack([u.reshape(-1), v.reshape(-1)], dim=-1)  # (P, 2)


def _composite(centers: Tensor, cov2d: Tensor, z: Tensor, colors: Tensor,
               opacities: Tensor, dyn_flags: Tensor, pix: Tensor,
               cfg: RenderConfig):
    """Front-to-back compositing over depth-sorted splats.

    Returns accumulated (color (P,3), depth (P,), mask (P,), weight_sum (P,),
    transmittance (P,)). Inputs must already be sorted.
    """
    p = pix.shape[0]
    acc_color = torch.zeros(p, 3, dtype=DTYPE)
    acc_depth = torch.zeros(p, dtype=DTYPE)
    acc_mask = torch.zeros(p, dtype=DTYPE)
    acc_w = torch.zeros(p, dtype=DTYPE)
    trans = torch.ones(p, dtype=DTYPE)
    n = centers.shape[0]
    for lo in range(0, n, cfg.chunk):
        hi = min(lo + cfg.chunk, n)
        ctr = centers[lo:hi]
        cv = cov2d[lo:hi]
        a, b, c = cv[:, 0, 0], cv[:, 0, 1], cv[:, 1, 1]
        det = a * c - b * b
        inv_a, inv_b, inv_c = c / det, -b / det, a / det
        d = pix[None, :, :] - ctr[:, None, :]          # (C, P, 2)
        dx, dy_ = d[..., 0], d[..., 1]
        power = -0.5 * (inv_a[:, None] * dx * dx
                        + 2 * inv_b[:, None] * dx * dy_
                        + inv_c[:, None] * dy_ * dy_)
        alpha = opacities[lo:hi, None] * torch.exp(power)
        alpha = alpha.clamp(max=cfg.alpha_clamp)
        alpha = torch.where(alpha < cfg.alpha_skip, torch.zeros_like(alpha), alpha)
        # early stop: once running transmittance crosses the floor, later
        # contributions on that pixel are dropped and T stays frozen
        one_minus = 1 - alpha
        t_excl = trans[None, :] * torch.cat(
            [torch.ones(1, p, dtype=DTYPE), torch.cumprod(one_minus, dim=0)[:-1]], dim=0)
        keep = t_excl >= cfg.stop_transmittance
        alpha = alpha * keep
        one_minus = 1 - alpha
        t_excl = trans[None, :] * torch.cat(
            [torch.ones(1, p, dtype=DTYPE), torch.cumprod(one_minus, dim=0)[:-1]], dim=0)
        w = alpha * t_excl                              # (C, P)
        acc_color = acc_color + (w[:, :, None] * colors[lo:hi, None, :]).sum(dim=0)
        acc_depth = acc_depth + (w * z[lo:hi, None]).sum(dim=0)
        acc_mask = acc_mask + (w * dyn_flags[lo:hi, None]).sum(dim=0)
        acc_w = acc_w + w.sum(dim=0)
        trans = trans * torch.prod(one_minus, dim=0)
    return acc_color, acc_depth, acc_mask, acc_w, trans


def render(scene: Scene, ext: Extrinsics, intr: Intrinsics, t: float,
           cfg: RenderConfig = None) -> RenderOutput:
    cfg = cfg or RenderConfig()
    h, w = intr.height, intr.width
    means, covs, colors, opacities, dyn_flags, ids = _gather_scene(scene, t)
    bg = torch.as_tensor(cfg.background, dtype=DTYPE)
    if means.shape[0] == 0:
        return RenderOutput(
            color=bg.expand(h, w, 3).clone(),
            depth=torch.zeros(h, w, dtype=DTYPE),
            mask=torch.zeros(h, w, dtype=DTYPE),
            transmittance=torch.ones(h, w, dtype=DTYPE),
            means2d=torch.zeros(0, 2, dtype=DTYPE),
            visible_ids=torch.zeros(0, dtype=torch.long),
            weight_sum=torch.zeros(h, w, dtype=DTYPE),
        )
    centers, cov2d, z = _project_cov2d(means, covs, ext, intr, cfg.dilation)
    radius = _cull_radius(cov2d, cfg.cull_sigma)
    visible = (
        (z > cfg.near)
        & (centers[:, 0] + radius >= -0.5) & (centers[:, 0] - radius <= w - 0.5)
        & (centers[:, 1] + radius >= -0.5) & (centers[:, 1] - radius <= h - 0.5)
    )
    idx = torch.nonzero(visible).squeeze(-1)
    centers, cov2d, z = centers[idx], cov2d[idx], z[idx]
    colors_v, opac_v, dyn_v, ids_v = colors[idx], opacities[idx], dyn_flags[idx], ids[idx]
    if centers.requires_grad:
        centers.retain_grad()
    means2d = centers
    order = torch.argsort(z, stable=True)  # depth ascending; stable = index tie-break
    acc_color, acc_depth, acc_mask, acc_w, trans = _composite(
        centers[order], cov2d[order], z[order], colors_v[order], opac_v[order],
        dyn_v[order], _pixel_grid(intr), cfg)
    color = acc_color + trans[:, None] * bg[None, :]
    depth = acc_depth / acc_w.clamp_min(1e-12) if cfg.normalize_depth else acc_depth
    return RenderOutput(
        color=color.reshape(h, w, 3),
        depth=depth.reshape(h, w),
        mask=acc_mask.reshape(h, w),
        transmittance=trans.reshape(h, w),
        means2d=means2d,
        visible_ids=ids_v,
        weight_sum=acc_w.reshape(h, w),
    )


def render_trajectory(scene: Scene, ext: Extrinsics, intr: Intrinsics,
                      t_range: tuple[float, float], steps: int,
                      cfg: RenderConfig = None) -> tuple[Tensor, Tensor]:
    """Rasterize dynamic-Gaussian trajectories into pixel space.

    Alpha weights are evaluated once at the anchor time t_range[0]; each
    sampled time contributes the alpha-blended projected spline positions of
    the dynamic Gaussians only. Returns (tracks (steps, H, W, 2),
    coverage (H, W)) where coverage is the anchor-time blend-weight sum.
    """
    cfg = cfg or RenderConfig()
    t1, t2 = t_range
    n_f = scene.num_frames
    if not (0 <= t1 <= t2 <= n_f - 1):
        raise ValueError("t_range must lie within [0, N_f - 1]")
    h, w = intr.height, intr.width
    dy = scene.dynamic
    ts = torch.linspace(t1, t2, steps, dtype=DTYPE)
    if len(dy) == 0:
        return (torch.zeros(steps, h, w, 2, dtype=DTYPE),
                torch.zeros(h, w, dtype=DTYPE))
    with torch.no_grad():
        means1 = dy.means_at(float(t1))
        covs1 = dy.covariances_at(float(t1))
        centers, cov2d, z = _project_cov2d(means1, covs1, ext, intr, cfg.dilation)
        visible = z > cfg.near
        pix = _pixel_grid(intr)
        n = len(dy)
        weights = torch.zeros(n, h * w, dtype=DTYPE)
        order = torch.argsort(torch.where(visible, z, torch.full_like(z, torch.inf)),
                              stable=True)
        trans = torch.ones(h * w, dtype=DTYPE)
        for i in order.tolist():
            if not bool(visible[i]):
                continue
            cv = cov2d[i]
            det = cv[0, 0] * cv[1, 1] - cv[0, 1] ** 2
            d = pix - centers[i]
            power = -0.5 * (cv[1, 1] * d[:, 0] ** 2 - 2 * cv[0, 1] * d[:, 0] * d[:, 1]
                            + cv[0, 0] * d[:, 1] ** 2) / det
            alpha = (dy.opacities()[i] * torch.exp(power)).clamp(max=cfg.alpha_clamp)
            alpha = torch.where(alpha < cfg.alpha_skip, torch.zeros_like(alpha), alpha)
            weights[i] = alpha * trans
            trans = trans * (1 - alpha)
        tracks = torch.zeros(steps, h * w, 2, dtype=DTYPE)
        for si, tp in enumerate(ts.tolist()):
            means_t = dy.means_at(tp)
            xc = means_t @ ext.R.T + ext.T
            zt = xc[:, 2]
            ok = zt > cfg.near
            z_safe = torch.where(ok, zt, torch.ones_like(zt))
            px = torch.stack([
                intr.f * xc[:, 0] / z_safe + intr.cx,
                intr.f * xc[:, 1] / z_safe + intr.cy,
            ], dim=-1)
            wt = weights * ok[:, None].to(DTYPE)
            tracks[si] = (wt[:, :, None] * px[:, None, :]).sum(dim=0)
        coverage = weights.sum(dim=0).reshape(h, w)
    return tracks.reshape(steps, h, w, 2), coverage


def backward(output_grads: dict[str, Tensor], scene: Scene, ext: Extrinsics,
             intr: Intrinsics, t: float, cfg: RenderConfig = None,
             extra_params: dict[str, Tensor] = None
             ) -> tuple[dict[str, Tensor], Tensor, Tensor]:
    """Gradients of sum(grad * output) w.r.t. every scene parameter.

    output_grads maps RenderOutput field names ('color', 'depth', 'mask',
    'transmittance') to cotangent arrays. extra_params can add, e.g., the
    focal tensor or pose parameters. Returns (named gradients, per-visible-
    Gaussian screen-space gradient magnitudes, their global source ids).
    """
    cfg = cfg or RenderConfig()
    named: dict[str, Tensor] = {}
    for prefix, mod in (("static", scene.static), ("dynamic", scene.dynamic)):
        for name, p in mod.named_parameters():
            named[f"{prefix}.{name}"] = p
    if extra_params:
        named.update(extra_params)
    out = render(scene, ext, intr, t, cfg)
    scalar = torch.zeros((), dtype=DTYPE)
    for key, g in output_grads.items():
        scalar = scalar + (torch.as_tensor(g, dtype=DTYPE) * getattr(out, key)).sum()
    inputs = list(named.values()) + [out.means2d]
    grads = torch.autograd.grad(scalar, inputs, allow_unused=True)
    result = {}
    for (name, p), g in zip(named.items(), grads[:-1]):
        result[name] = torch.zeros_like(p) if g is None else g
    g2d = grads[-1]
    screen_mags = (torch.zeros(out.means2d.shape[0], dtype=DTYPE)
                   if g2d is None else g2d.norm(dim=-1))
    return result, screen_mags, out.visible_ids
