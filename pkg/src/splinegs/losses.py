"""Training objectives: consistency, reconstruction, dice mask loss, totals.

All losses operate on (H, W, ...) float64 torch tensors and are
differentiable w.r.t. their continuous inputs. Pixels whose warp leaves the
reference image (or lands behind the reference camera) are flagged invalid
and contribute zero, rather than being clamped to the border.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
from torch import Tensor

from .geometry import DTYPE, Extrinsics, Intrinsics, project_valid, unproject_world

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    rgb: float = 1.0
    depth: float = 0.1
    mask: float = 0.1
    pc: float = 1.0
    gc: float = 1.0
    dpc: float = 0.1

    def __post_init__(self):
        for name, v in vars(self).items():
            if not (v >= 0 and v == v):
                raise ValueError(f"loss weight {name} must be finite and >= 0")


@dataclass
class ConsistencyPair:
    t: int
    t_ref: int

    def __post_init__(self):
        if self.t == self.t_ref:
            raise ValueError("target and reference frames must differ")


def bilinear_sample(img: Tensor, pts: Tensor) -> tuple[Tensor, Tensor]:
    """Sample img (H, W) or (H, W, C) at pts (N, 2) as (u, v).

    Returns (values (N,) or (N, C), valid (N,) bool). Points outside
    [0, W-1] x [0, H-1] are invalid and return zeros.
    """
    squeeze = img.dim() == 2
    if squeeze:
        img = img[..., None]
    h, w, _ = img.shape
    u, v = pts[:, 0], pts[:, 1]
    valid = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    u = torch.where(valid, u, torch.zeros_like(u))
    v = torch.where(valid, v, torch.zeros_like(v))
    u0 = u.floor().long().clamp(0, w - 2) if w > 1 else torch.zeros_like(u, dtype=torch.long)
    v0 = v.floor().long().clamp(0, h - 2) if h > 1 else torch.zeros_like(v, dtype=torch.long)
    fu = (u - u0.to(DTYPE))[:, None]
    fv = (v - v0.to(DTYPE))[:, None]
    i00 = img[v0, u0]
    i01 = img[v0, u0 + 1] if w > 1 else i00
    i10 = img[v0 + 1, u0] if h > 1 else i00
    i11 = img[v0 + 1, u0 + 1] if w > 1 and h > 1 else i00
    vals = ((1 - fv) * ((1 - fu) * i00 + fu * i01)
            + fv * ((1 - fu) * i10 + fu * i11))
    vals = vals * valid[:, None]
    if squeeze:
        vals = vals[:, 0]
    return vals, valid


def pixel_grid(intr: Intrinsics) -> Tensor:
    v, u = torch.meshgrid(
        torch.arange(intr.height, dtype=DTYPE),
        torch.arange(intr.width, dtype=DTYPE),
        indexing="ij",
    )
    return torch.stack([u.reshape(-1), v.reshape(-1)], dim=-1)


def warp_frame(depth_t: Tensor, ext_t: Extrinsics, ext_ref: Extrinsics,
               intr: Intrinsics) -> tuple[Tensor, Tensor, Tensor]:
    """Warp every target pixel into the reference frame using depth_t.

    Returns (world points (P, 3), warped pixels (P, 2), valid (P,) bool).
    Pixels with non-positive depth or landing behind the reference camera
    are invalid.
    """
    pts = pixel_grid(intr)
    d = depth_t.reshape(-1)
    pos = d > 0
    d_safe = torch.where(pos, d, torch.ones_like(d))
    world = unproject_world(pts, d_safe, ext_t, intr)
    px, _, in_front = project_valid(world, ext_ref, intr)
    return world, px, pos & in_front


def union_motion_mask(mask_t: Tensor, mask_ref: Tensor, warped: Tensor,
                      valid: Tensor) -> Tensor:
    """Static-region weight for consistency losses.

    S = (1 - M_t) * (1 - M_ref(warp)) * valid, flattened to (P,). Motion
    masks are 1 on dynamic content; consistency is supervised only where
    both endpoints are static and the warp stays in frame.
    """
    if mask_t.shape != mask_ref.shape:
        raise ValueError("mask dimensions differ")
    m_ref_w, inside = bilinear_sample(mask_ref.to(DTYPE), warped)
    ok = (valid & inside).to(DTYPE)
    return (1 - mask_t.reshape(-1).to(DTYPE)) * (1 - m_ref_w) * ok


def photometric_loss(img_t: Tensor, img_ref: Tensor, depth_source: Tensor,
                     ext_t: Extrinsics, ext_ref: Extrinsics, intr: Intrinsics,
                     mask_t: Tensor, mask_ref: Tensor) -> Tensor:
    """Masked color agreement between target pixels and their warps.

    depth_source is either the prior metric depth (L_pc) or the rendered
    depth (L_d-pc); gradients flow through poses, focal, and the depth.
    """
    if img_t.shape != img_ref.shape:
        raise ValueError("image dimensions differ")
    _, warped, valid = warp_frame(depth_source, ext_t, ext_ref, intr)
    s = union_motion_mask(mask_t, mask_ref, warped, valid)
    if float(s.detach().sum()) == 0:
        log.warning("photometric_loss: no valid static pixels for this pair")
        return (depth_source.reshape(-1) * 0).sum()
    ref_vals, _ = bilinear_sample(img_ref, warped)
    diff = img_t.reshape(-1, img_t.shape[-1]) - ref_vals
    return (s * (diff**2).sum(dim=-1)).mean()


def geometric_loss(depth_t: Tensor, depth_ref: Tensor, ext_t: Extrinsics,
                   ext_ref: Extrinsics, intr: Intrinsics,
                   mask_t: Tensor, mask_ref: Tensor) -> Tensor:
    """Masked 3D agreement of unprojected pixel pairs across frames."""
    world_t, warped, valid = warp_frame(depth_t, ext_t, ext_ref, intr)
    s = union_motion_mask(mask_t, mask_ref, warped, valid)
    if float(s.detach().sum()) == 0:
        log.warning("geometric_loss: no valid static pixels for this pair")
        return (depth_t.reshape(-1) * 0).sum()
    d_ref, inside = bilinear_sample(depth_ref, warped)
    pos = d_ref > 0
    d_safe = torch.where(pos, d_ref, torch.ones_like(d_ref))
    world_ref = unproject_world(warped, d_safe, ext_ref, intr)
    s = s * (pos & inside).to(DTYPE)
    return (s * ((world_t - world_ref) ** 2).sum(dim=-1)).mean()


def rgb_loss(rendered: Tensor, gt: Tensor) -> Tensor:
    if rendered.shape != gt.shape:
        raise ValueError("image dimensions differ")
    return (rendered - gt).abs().mean()


def depth_loss(rendered: Tensor, gt: Tensor) -> Tensor:
    if rendered.shape != gt.shape:
        raise ValueError("depth dimensions differ")
    return (rendered - gt).abs().mean()


def dice_loss(mask: Tensor, rendered: Tensor, eps: float = 1.0) -> Tensor:
    """Binary dice loss: 1 - (2 sum(M M_hat) + eps) / (sum(M + M_hat) + eps)."""
    if mask.shape != rendered.shape:
        raise ValueError("mask dimensions differ")
    m = mask.to(DTYPE)
    inter = (m * rendered).sum()
    total = (m + rendered).sum()
    return 1 - (2 * inter + eps) / (total + eps)


def total_warm(weights: LossWeights, l_pc: Tensor, l_gc: Tensor) -> Tensor:
    return weights.pc * l_pc + weights.gc * l_gc


def total_main(weights: LossWeights, l_rgb: Tensor, l_d: Tensor, l_m: Tensor,
               l_pc: Tensor, l_dpc: Tensor, l_gc: Tensor) -> Tensor:
    return (weights.rgb * l_rgb + weights.depth * l_d + weights.mask * l_m
            + weights.pc * l_pc + weights.dpc * l_dpc + weights.gc * l_gc)


PSNR_INF = float("inf")


def psnr(rendered: Tensor, gt: Tensor) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; inf on identical inputs."""
    if rendered.shape != gt.shape:
        raise ValueError("image dimensions differ")
    mse = float(((rendered - gt) ** 2).mean())
    if mse == 0:
        return PSNR_INF
    return 10.0 * torch.log10(torch.tensor(1.0 / mse, dtype=DTYPE)).item()
