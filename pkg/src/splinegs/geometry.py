"""Pinhole camera math: projection, unprojection, cross-frame warping, pose model.

Conventions (OpenCV style): world-to-camera transform X_cam = R @ X_world + T,
camera looks along +z, pixel u grows right, v grows down. All tensors are
float64 on CPU.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

DTYPE = torch.float64


class BehindCameraError(ValueError):
    """A point landed on or behind the camera plane (z <= eps_z)."""


@dataclass
class Intrinsics:
    """Shared pinhole intrinsics. fx = fy = f, zero skew, fixed principal point."""

    f: Tensor  # scalar tensor, learnable focal in pixels
    width: int
    height: int

    def __post_init__(self):
        if not torch.is_tensor(self.f):
            self.f = torch.tensor(float(self.f), dtype=DTYPE)
        if float(self.f.detach()) <= 0:
            raise ValueError(f"focal must be positive, got {float(self.f.detach())}")

    @property
    def cx(self) -> float:
        return self.width / 2.0

    @property
    def cy(self) -> float:
        return self.height / 2.0

    def matrix(self) -> Tensor:
        k = torch.zeros(3, 3, dtype=DTYPE)
        k[0, 0] = self.f
        k[1, 1] = self.f
        k[0, 2] = self.cx
        k[1, 2] = self.cy
        k[2, 2] = 1.0
        return k


@dataclass
class Extrinsics:
    """World-to-camera rigid transform [R | T]."""

    R: Tensor  # (3, 3)
    T: Tensor  # (3,)

    def __post_init__(self):
        self.R = torch.as_tensor(self.R, dtype=DTYPE)
        self.T = torch.as_tensor(self.T, dtype=DTYPE)

    def validate(self, tol: float = 1e-9) -> None:
        err = (self.R.T @ self.R - torch.eye(3, dtype=DTYPE)).abs().max().item()
        if err > tol:
            raise ValueError(f"rotation not orthonormal (max deviation {err:.3e})")
        det = torch.linalg.det(self.R).item()
        if abs(det - 1.0) > tol:
            raise ValueError(f"rotation determinant {det} != 1")

    @staticmethod
    def identity() -> "Extrinsics":
        return Extrinsics(torch.eye(3, dtype=DTYPE), torch.zeros(3, dtype=DTYPE))

    def compose_world_offset(self, R_g: Tensor, T_g: Tensor) -> "Extrinsics":
        """Extrinsics seeing a world rigidly remapped by x -> R_g x + T_g."""
        return Extrinsics(self.R @ R_g.T, self.T - self.R @ R_g.T @ T_g)


def positional_encoding(t: Tensor | float, num_freqs: int) -> Tensor:
    """Sinusoidal encoding [sin(2^k pi t), cos(2^k pi t)], k = 0..num_freqs-1."""
    if num_freqs < 1:
        raise ValueError("num_freqs must be >= 1")
    t = torch.as_tensor(t, dtype=DTYPE)
    freqs = (2.0 ** torch.arange(num_freqs, dtype=DTYPE)) * math.pi
    angles = t[..., None] * freqs if t.dim() else t * freqs
    return torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1).reshape(
        *angles.shape[:-1], 2 * num_freqs
    )


def rotation_6d_to_matrix(d6: Tensor) -> Tensor:
    """Gram-Schmidt orthonormalization of a 6D rotation representation.

    d6: (..., 6) -> (..., 3, 3), rows of the first two output columns come
    from the two 3-vectors in d6.
    """
    a1, a2 = d6[..., 0:3], d6[..., 3:6]
    b1 = a1 / a1.norm(dim=-1, keepdim=True)
    a2p = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
    b2 = a2p / a2p.norm(dim=-1, keepdim=True)
    b3 = torch.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-2).transpose(-1, -2)


_IDENTITY_6D = torch.tensor([1.0, 0.0, 0.0, 0.0, 1.0, 0.0], dtype=DTYPE)


class PoseNetwork(nn.Module):
    """Small MLP mapping encoded time to per-frame extrinsics.

    Output head is a 6D rotation representation plus a 3D translation.
    The last layer is zero-initialized so every pose starts exactly at [I | 0].
    """

    def __init__(self, num_frames: int, num_freqs: int = 6, hidden: int = 64,
                 depth: int = 2):
        super().__init__()
        self.num_frames = num_frames
        self.num_freqs = num_freqs
        layers: list[nn.Module] = []
        in_dim = 2 * num_freqs
        for _ in range(depth):
            layers += [nn.Linear(in_dim, hidden, dtype=DTYPE), nn.Tanh()]
            in_dim = hidden
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(in_dim, 9, dtype=DTYPE)
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.zero_()

    def _normalize_time(self, t: Tensor | float) -> Tensor:
        t = torch.as_tensor(t, dtype=DTYPE)
        denom = max(self.num_frames - 1, 1)
        return t / denom

    def raw_output(self, t: Tensor | float) -> Tensor:
        tn = self._normalize_time(t)
        return self.head(self.body(positional_encoding(tn, self.num_freqs)))

    def pose_at(self, t: Tensor | float) -> Extrinsics:
        out = self.raw_output(t)
        R = rotation_6d_to_matrix(_IDENTITY_6D.to(out) + out[..., :6])
        return _make_extrinsics(R, out[..., 6:9])

    def poses_at(self, ts: Tensor) -> tuple[Tensor, Tensor]:
        """Batched poses: returns (R: (N,3,3), T: (N,3))."""
        out = self.raw_output(ts)
        R = rotation_6d_to_matrix(_IDENTITY_6D.to(out) + out[..., :6])
        return R, out[..., 6:9]


class DirectPoses(nn.Module):
    """Per-frame pose parameters with the same interface as PoseNetwork.

    Debugging/ablation alternative to the MLP; real-valued times linearly
    interpolate the underlying 6D+3 parameters of the bracketing frames.
    """

    def __init__(self, num_frames: int):
        super().__init__()
        self.num_frames = num_frames
        self.params = nn.Parameter(torch.zeros(num_frames, 9, dtype=DTYPE))

    def raw_output(self, t: Tensor | float) -> Tensor:
        t = torch.as_tensor(t, dtype=DTYPE)
        t = t.clamp(0, self.num_frames - 1)
        lo = t.floor().long().clamp(max=self.num_frames - 1)
        hi = (lo + 1).clamp(max=self.num_frames - 1)
        w = (t - lo.to(DTYPE))[..., None]
        return (1 - w) * self.params[lo] + w * self.params[hi]

    def pose_at(self, t: Tensor | float) -> Extrinsics:
        out = self.raw_output(t)
        R = rotation_6d_to_matrix(_IDENTITY_6D + out[..., :6])
        return _make_extrinsics(R, out[..., 6:9])

    def poses_at(self, ts: Tensor) -> tuple[Tensor, Tensor]:
        out = self.raw_output(ts)
        return rotation_6d_to_matrix(_IDENTITY_6D + out[..., :6]), out[..., 6:9]


def _make_extrinsics(R: Tensor, T: Tensor) -> Extrinsics:
    ext = object.__new__(Extrinsics)
    ext.R = R
    ext.T = T
    return ext


def cam_transform(x_world: Tensor, ext: Extrinsics) -> Tensor:
    """World to camera space, batched over leading dims."""
    return x_world @ ext.R.T + ext.T


def project(x_world: Tensor, ext: Extrinsics, intr: Intrinsics,
            eps_z: float = 1e-6) -> tuple[Tensor, Tensor]:
    """Project world points to pixels. Returns (pixel (...,2), depth (...)).

    Raises BehindCameraError if any point has camera z <= eps_z.
    """
    xc = cam_transform(torch.as_tensor(x_world, dtype=DTYPE), ext)
    z = xc[..., 2]
    if (z <= eps_z).any():
        raise BehindCameraError(f"point with camera z <= {eps_z}")
    u = intr.f * xc[..., 0] / z + intr.cx
    v = intr.f * xc[..., 1] / z + intr.cy
    return torch.stack([u, v], dim=-1), z


def project_valid(x_world: Tensor, ext: Extrinsics, intr: Intrinsics,
                  eps_z: float = 1e-6) -> tuple[Tensor, Tensor, Tensor]:
    """Like project() but returns a validity mask instead of raising.

    Invalid entries get pixel/depth values computed with z clamped away from
    zero; callers must mask them out.
    """
    xc = cam_transform(torch.as_tensor(x_world, dtype=DTYPE), ext)
    z = xc[..., 2]
    valid = z > eps_z
    z_safe = torch.where(valid, z, torch.ones_like(z))
    u = intr.f * xc[..., 0] / z_safe + intr.cx
    v = intr.f * xc[..., 1] / z_safe + intr.cy
    return torch.stack([u, v], dim=-1), z, valid


def unproject_world(pixel: Tensor, depth: Tensor | float, ext: Extrinsics,
                    intr: Intrinsics) -> Tensor:
    """Pixel + metric depth back to world space: R^T pi^-1(phi, d) - R^T T."""
    pixel = torch.as_tensor(pixel, dtype=DTYPE)
    depth = torch.as_tensor(depth, dtype=DTYPE)
    if (depth <= 0).any():
        raise ValueError("depth must be positive")
    x = (pixel[..., 0] - intr.cx) / intr.f * depth
    y = (pixel[..., 1] - intr.cy) / intr.f * depth
    xc = torch.stack([x, y, depth.expand_as(x)], dim=-1)
    return (xc - ext.T) @ ext.R


def warp_pixel(pixel: Tensor, depth: Tensor | float, ext_t: Extrinsics,
               ext_ref: Extrinsics, intr: Intrinsics,
               eps_z: float = 1e-6) -> tuple[Tensor, Tensor]:
    """Warp target-frame pixels into the reference frame via known depth.

    Returns (warped pixel (...,2), valid (...) bool). Pixels mapping on or
    behind the reference camera plane are flagged invalid, not clamped.
    """
    world = unproject_world(pixel, depth, ext_t, intr)
    px, _z, valid = project_valid(world, ext_ref, intr, eps_z=eps_z)
    return px, valid


def load_camera_file(path) -> tuple[list[tuple[float, Extrinsics]], Intrinsics | None]:
    """Read the text camera format: `t f cx cy r00..r22 t0 t1 t2` per line.

    Width/height are reconstructed from the principal point (cx = W/2).
    Returns (list of (t, extrinsics), intrinsics from the first record).
    """
    records = []
    intr = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            vals = [float(v) for v in line.split()]
            if len(vals) != 16:
                raise ValueError(f"{path}:{lineno}: expected 16 fields, got {len(vals)}")
            t, f, cx, cy = vals[:4]
            R = torch.tensor(vals[4:13], dtype=DTYPE).reshape(3, 3)
            T = torch.tensor(vals[13:16], dtype=DTYPE)
            ext = Extrinsics(R, T)
            ext.validate(tol=1e-6)
            records.append((t, ext))
            if intr is None:
                intr = Intrinsics(f=f, width=int(round(2 * cx)), height=int(round(2 * cy)))
    return records, intr


def save_camera_file(path, records: list[tuple[float, Extrinsics]],
                     intr: Intrinsics) -> None:
    with open(path, "w") as fh:
        fh.write("# t f cx cy r00 r01 r02 r10 r11 r12 r20 r21 r22 t0 t1 t2\n")
        for t, ext in records:
            flat = [float(v) for v in ext.R.reshape(-1)] + [float(v) for v in ext.T]
            f = intr.f.detach() if torch.is_tensor(intr.f) else intr.f
            fields = [t, float(f), intr.cx, intr.cy] + flat
            fh.write(" ".join(f"{v:.17g}" for v in fields) + "\n")
