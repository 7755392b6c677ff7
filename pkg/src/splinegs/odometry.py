"""Depth-map visual odometry for camera initialization.

Aligns consecutive depth maps with point-to-plane ICP, chains the relative
poses into a trajectory anchored at the first frame, and recovers the focal
length by minimizing the photometric + geometric consistency score of the
chained trajectory over a bracketed golden-section search.
"""

from __future__ import annotations

import logging
import math

import torch
from torch import Tensor

from .geometry import DTYPE, Extrinsics, Intrinsics
from .losses import geometric_loss, photometric_loss

log = logging.getLogger(__name__)

# coarse focal multipliers used to bracket the golden-section search
_FOCAL_GRID = (0.42, 0.55, 0.72, 0.95, 1.25, 1.64)


def unproject_depth_grid(depth: Tensor, f: float) -> Tensor:
    """Camera-space point map (H, W, 3) for a full depth image."""
    h, w = depth.shape
    vv, uu = torch.meshgrid(torch.arange(h, dtype=DTYPE),
                            torch.arange(w, dtype=DTYPE), indexing="ij")
    return torch.stack([(uu - w / 2) / f * depth,
                        (vv - h / 2) / f * depth, depth], -1)


def normal_map(points: Tensor) -> Tensor:
    """Per-pixel surface normals from central differences of a point map.

    Border pixels get zero normals and are ignored by callers."""
    n = torch.zeros_like(points)
    du = points[:, 2:] - points[:, :-2]
    dv = points[2:, :] - points[:-2, :]
    cr = torch.cross(du[1:-1], dv[:, 1:-1], dim=-1)
    n[1:-1, 1:-1] = cr / (cr.norm(dim=-1, keepdim=True) + 1e-12)
    return n


def _bilinear_rows(m: Tensor, u: Tensor, v: Tensor) -> Tensor:
    h, w = m.shape[:2]
    u0 = u.floor().long().clamp(0, w - 2)
    v0 = v.floor().long().clamp(0, h - 2)
    fu = (u - u0).clamp(0, 1)[:, None]
    fv = (v - v0).clamp(0, 1)[:, None]
    return ((1 - fv) * ((1 - fu) * m[v0, u0] + fu * m[v0, u0 + 1])
            + fv * ((1 - fu) * m[v0 + 1, u0] + fu * m[v0 + 1, u0 + 1]))


def _so3_exp(w: Tensor) -> Tensor:
    th = w.norm()
    k = torch.tensor([[0.0, -w[2], w[1]],
                      [w[2], 0.0, -w[0]],
                      [-w[1], w[0], 0.0]], dtype=DTYPE)
    eye = torch.eye(3, dtype=DTYPE)
    if float(th) < 1e-12:
        return eye + k
    return eye + torch.sin(th) / th * k + (1 - torch.cos(th)) / th ** 2 * (k @ k)


def relative_pose(depth_t: Tensor, depth_ref: Tensor, f: float,
                  mask_t: Tensor | None = None,
                  iters: int = 20) -> tuple[Tensor, Tensor]:
    """Point-to-plane alignment of depth_t onto depth_ref.

    Returns (R, b) with X_ref = R @ X_t + b in camera coordinates. Pixels
    flagged in mask_t (moving content) are excluded from the source cloud;
    a robust median threshold rejects occlusions and depth edges on the
    reference side.
    """
    h, w = depth_t.shape
    src = unproject_depth_grid(depth_t, f).reshape(-1, 3)
    if mask_t is not None:
        src = src[~mask_t.reshape(-1).bool()]
    ref_points = unproject_depth_grid(depth_ref, f)
    ref_normals = normal_map(ref_points)
    R = torch.eye(3, dtype=DTYPE)
    b = torch.zeros(3, dtype=DTYPE)
    for _ in range(iters):
        x = src @ R.T + b
        z = x[:, 2]
        u = f * x[:, 0] / z + w / 2
        v = f * x[:, 1] / z + h / 2
        ok = (z > 0.05) & (u >= 2) & (u <= w - 3) & (v >= 2) & (v <= h - 3)
        if int(ok.sum()) < 64:
            log.warning("depth alignment ran out of overlap; stopping early")
            break
        xo = x[ok]
        q = _bilinear_rows(ref_points, u[ok], v[ok])
        n = _bilinear_rows(ref_normals, u[ok], v[ok])
        n = n / (n.norm(dim=-1, keepdim=True) + 1e-12)
        r = ((xo - q) * n).sum(-1)
        keep = r.abs() < 3 * r.abs().median() + 1e-12
        xo, n, r = xo[keep], n[keep], r[keep]
        jac = torch.cat([torch.cross(xo, n, dim=-1), n], -1)
        lhs = jac.T @ jac + 1e-12 * torch.eye(6, dtype=DTYPE)
        dx = torch.linalg.solve(lhs, -(jac.T @ r))
        R = _so3_exp(dx[:3]) @ R
        b = b + dx[3:]
    return R, b


def chain_poses(depths: list[Tensor], f: float,
                masks: list[Tensor] | None = None,
                iters: int = 20) -> list[Extrinsics]:
    """World-to-camera poses from chained adjacent alignments.

    The world frame is anchored at the first entry: pose[0] = [I | 0]."""
    rs = [torch.eye(3, dtype=DTYPE)]
    ts = [torch.zeros(3, dtype=DTYPE)]
    for i in range(len(depths) - 1):
        m = masks[i] if masks is not None else None
        R, b = relative_pose(depths[i], depths[i + 1], f, m, iters)
        rs.append(R @ rs[-1])
        ts.append(R @ ts[-1] + b)
    return [Extrinsics(R, T) for R, T in zip(rs, ts)]


def _score_pairs(n: int) -> list[tuple[int, int]]:
    pairs = [(i, i + 1) for i in range(n - 1)]
    for i, j in ((0, n - 1), (0, n // 2), (n // 2, n - 1), (n // 4, 3 * n // 4)):
        if j - i > 1 and (i, j) not in pairs:
            pairs.append((i, j))
    return pairs


def consistency_score(images: list[Tensor], depths: list[Tensor],
                      masks: list[Tensor], poses: list[Extrinsics],
                      f: float) -> float:
    """Photometric + geometric consistency summed over adjacent and a few
    long-baseline pairs. Long pairs expose focal errors that adjacent pairs
    absorb into the pose chain."""
    intr = Intrinsics(f=torch.tensor(f, dtype=DTYPE),
                      width=depths[0].shape[1], height=depths[0].shape[0])
    total = 0.0
    with torch.no_grad():
        for i, j in _score_pairs(len(depths)):
            l_pc = photometric_loss(images[i], images[j], depths[i],
                                    poses[i], poses[j], intr,
                                    masks[i], masks[j])
            l_gc = geometric_loss(depths[i], depths[j], poses[i], poses[j],
                                  intr, masks[i], masks[j])
            total += float(l_pc) + 0.5 * float(l_gc)
    return total


def estimate_cameras(images: list[Tensor], depths: list[Tensor],
                     masks: list[Tensor], f_init: float,
                     search_focal: bool = True,
                     golden_iters: int = 12,
                     icp_iters: int = 20) -> tuple[list[Extrinsics], float]:
    """Joint trajectory and focal recovery from RGB-D frames.

    Chains depth alignments at candidate focals and scores each candidate's
    trajectory by cross-frame consistency; the score is minimized over a
    coarse bracket followed by golden-section refinement. Returns the poses
    at the best focal and the focal itself.
    """
    def solve(f: float) -> tuple[float, list[Extrinsics]]:
        poses = chain_poses(depths, f, masks, icp_iters)
        return consistency_score(images, depths, masks, poses, f), poses

    if not search_focal:
        score, poses = solve(f_init)
        log.info("depth odometry at fixed f=%.2f: score %.3e", f_init, score)
        return poses, f_init

    grid = [f_init * r for r in _FOCAL_GRID]
    scores = [solve(f)[0] for f in grid]
    best = min(range(len(grid)), key=lambda i: scores[i])
    a = grid[max(best - 1, 0)]
    b = grid[min(best + 1, len(grid) - 1)]
    phi = (math.sqrt(5.0) - 1) / 2
    c = b - phi * (b - a)
    d = a + phi * (b - a)
    fc = solve(c)[0]
    fd = solve(d)[0]
    for _ in range(golden_iters):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - phi * (b - a)
            fc = solve(c)[0]
        else:
            a, c, fc = c, d, fd
            d = a + phi * (b - a)
            fd = solve(d)[0]
    f_hat = 0.5 * (a + b)
    score, poses = solve(f_hat)
    log.info("depth odometry: f_hat %.3f score %.3e", f_hat, score)
    return poses, f_hat
