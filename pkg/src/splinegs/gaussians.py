"""Static and dynamic 3D Gaussian attribute sets and covariance construction.

Attributes are stored batched (one tensor row per Gaussian) with raw
parameterizations: log scales, opacity logits, color logits, unnormalized
quaternions. Dynamic Gaussians carry per-Gaussian spline control points
(ragged: each Gaussian owns its own (N_c, 3) parameter tensor), a polynomial
time-dependent rotation and a DCT time-dependent scale offset.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import math

import torch
from torch import Tensor, nn

from .geometry import DTYPE
from .spline import MIN_CONTROL_POINTS, basis_weights

SCALE_FLOOR = 1e-6
CHECKPOINT_MAGIC = b"SGS1"


def inverse_sigmoid(x: float) -> float:
    return math.log(x / (1.0 - x))


def quat_to_rotmat(q: Tensor) -> Tensor:
    """Unit quaternion (w, x, y, z) to rotation matrix, batched (..., 4) -> (..., 3, 3)."""
    w, x, y, z = q.unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1)
    return torch.stack([row0, row1, row2], -2)


def normalize_quat(q: Tensor) -> Tensor:
    norm = q.norm(dim=-1, keepdim=True)
    if (norm == 0).any():
        raise ValueError("zero-norm quaternion")
    return q / norm


def covariance(q: Tensor, s: Tensor) -> Tensor:
    """Sigma = R diag(s^2) R^T for unit quaternion(s) q and positive scale(s) s."""
    r = quat_to_rotmat(q)
    return r @ torch.diag_embed(s * s) @ r.transpose(-1, -2)


class StaticGaussians(nn.Module):
    """Batched static Gaussians: fixed mean, rotation, scale, opacity, color."""

    def __init__(self, means: Tensor, quats: Tensor, log_scales: Tensor,
                 opacity_logits: Tensor, color_logits: Tensor):
        super().__init__()
        n = means.shape[0]
        assert quats.shape == (n, 4) and log_scales.shape == (n, 3)
        assert opacity_logits.shape == (n,) and color_logits.shape == (n, 3)
        self.means = nn.Parameter(means.to(DTYPE))
        self.quats = nn.Parameter(quats.to(DTYPE))
        self.log_scales = nn.Parameter(log_scales.to(DTYPE))
        self.opacity_logits = nn.Parameter(opacity_logits.to(DTYPE))
        self.color_logits = nn.Parameter(color_logits.to(DTYPE))

    def __len__(self) -> int:
        return self.means.shape[0]

    @staticmethod
    def empty() -> "StaticGaussians":
        z = torch.zeros
        return StaticGaussians(z(0, 3), z(0, 4), z(0, 3), z(0), z(0, 3))

    def scales(self) -> Tensor:
        return torch.exp(self.log_scales)

    def opacities(self) -> Tensor:
        return torch.sigmoid(self.opacity_logits)

    def colors(self) -> Tensor:
        return torch.sigmoid(self.color_logits)

    def covariances(self) -> Tensor:
        return covariance(normalize_quat(self.quats), self.scales())


class DynamicGaussians(nn.Module):
    """Batched dynamic Gaussians with per-Gaussian spline control points.

    Rotation over time: q(t) = q0 + sum_k dq_k * t_n^k (normalized time),
    then unit-normalized. Scale over time: exp(s0) plus a DCT offset with K
    coefficients, floor-clamped for positivity.
    """

    def __init__(self, control_points: list[Tensor], base_quats: Tensor,
                 quat_offsets: Tensor, base_log_scales: Tensor,
                 dct_coeffs: Tensor, opacity_logits: Tensor,
                 color_logits: Tensor, num_frames: int):
        super().__init__()
        n = len(control_points)
        self.n_q = quat_offsets.shape[1] if n else 1
        self.dct_k = dct_coeffs.shape[1] if n else 10
        assert base_quats.shape == (n, 4)
        assert quat_offsets.shape[0] == n and quat_offsets.shape[2] == 4
        assert base_log_scales.shape == (n, 3)
        assert dct_coeffs.shape[0] == n and dct_coeffs.shape[2] == 3
        self.num_frames = num_frames
        self.control_points = nn.ParameterList(
            nn.Parameter(p.to(DTYPE)) for p in control_points
        )
        for p in self.control_points:
            if p.shape[0] < MIN_CONTROL_POINTS:
                raise ValueError("control point set below minimum size")
        self.base_quats = nn.Parameter(base_quats.to(DTYPE))
        self.quat_offsets = nn.Parameter(quat_offsets.to(DTYPE))
        self.base_log_scales = nn.Parameter(base_log_scales.to(DTYPE))
        self.dct_coeffs = nn.Parameter(dct_coeffs.to(DTYPE))
        self.opacity_logits = nn.Parameter(opacity_logits.to(DTYPE))
        self.color_logits = nn.Parameter(color_logits.to(DTYPE))

    def __len__(self) -> int:
        return self.base_quats.shape[0]

    @staticmethod
    def empty(num_frames: int, n_q: int = 1, dct_k: int = 10) -> "DynamicGaussians":
        z = torch.zeros
        g = DynamicGaussians([], z(0, 4), z(0, n_q, 4), z(0, 3),
                             z(0, dct_k, 3), z(0), z(0, 3), num_frames)
        g.n_q, g.dct_k = n_q, dct_k
        return g

    def control_point_counts(self) -> list[int]:
        return [int(p.shape[0]) for p in self.control_points]

    def means_at(self, t: float) -> Tensor:
        """Spline positions of every dynamic Gaussian at time t, (n, 3)."""
        if len(self) == 0:
            return torch.zeros(0, 3, dtype=DTYPE)
        weight_cache: dict[int, Tensor] = {}
        rows = []
        for p in self.control_points:
            n_c = p.shape[0]
            w = weight_cache.get(n_c)
            if w is None:
                w = basis_weights(t, n_c, self.num_frames)
                weight_cache[n_c] = w
            rows.append(w @ p)
        return torch.stack(rows)

    def rotations_at(self, t: float) -> Tensor:
        """Unit quaternions at time t, (n, 4). Time is normalized to [0, 1]."""
        tn = t / max(self.num_frames - 1, 1)
        powers = torch.tensor([tn ** (k + 1) for k in range(self.n_q)], dtype=DTYPE)
        q = self.base_quats + (self.quat_offsets * powers[None, :, None]).sum(dim=1)
        return normalize_quat(q)

    def scale_offsets_at(self, t: float) -> Tensor:
        n_f = self.num_frames
        k = torch.arange(1, self.dct_k + 1, dtype=DTYPE)
        basis = math.sqrt(2.0 / n_f) * torch.cos(math.pi / (2 * n_f) * (2 * t + 1) * k)
        return (self.dct_coeffs * basis[None, :, None]).sum(dim=1)

    def scales_at(self, t: float) -> Tensor:
        s = torch.exp(self.base_log_scales) + self.scale_offsets_at(t)
        return s.clamp_min(SCALE_FLOOR)

    def opacities(self) -> Tensor:
        return torch.sigmoid(self.opacity_logits)

    def colors(self) -> Tensor:
        return torch.sigmoid(self.color_logits)

    def covariances_at(self, t: float) -> Tensor:
        return covariance(self.rotations_at(t), self.scales_at(t))


@dataclass
class DensifyStats:
    """Accumulated screen-space gradient statistics for densification."""

    grad_sum_static: Tensor = None
    count_static: Tensor = None
    grad_sum_dynamic: Tensor = None
    count_dynamic: Tensor = None

    def reset(self, n_static: int, n_dynamic: int) -> None:
        self.grad_sum_static = torch.zeros(n_static, dtype=DTYPE)
        self.count_static = torch.zeros(n_static, dtype=DTYPE)
        self.grad_sum_dynamic = torch.zeros(n_dynamic, dtype=DTYPE)
        self.count_dynamic = torch.zeros(n_dynamic, dtype=DTYPE)


@dataclass
class Scene:
    """Union of static and dynamic Gaussian sets plus training statistics."""

    static: StaticGaussians
    dynamic: DynamicGaussians
    num_frames: int
    stats: DensifyStats = field(default_factory=DensifyStats)

    def __post_init__(self):
        if self.stats.grad_sum_static is None:
            self.stats.reset(len(self.static), len(self.dynamic))

    def parameters(self):
        yield from self.static.parameters()
        yield from self.dynamic.parameters()


def _write_array(fh, arr: Tensor) -> None:
    fh.write(arr.detach().to(DTYPE).contiguous().numpy().tobytes())


def save_scene(path, scene: Scene) -> None:
    """Versioned binary checkpoint: `SGS1` header then little-endian f64 records."""
    st, dy = scene.static, scene.dynamic
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<5q", len(st), len(dy), scene.num_frames,
                             dy.n_q, dy.dct_k))
        for i in range(len(st)):
            _write_array(fh, st.means[i])
            _write_array(fh, st.quats[i])
            _write_array(fh, st.log_scales[i])
            _write_array(fh, st.opacity_logits[i : i + 1])
            _write_array(fh, st.color_logits[i])
        for i in range(len(dy)):
            cp = dy.control_points[i]
            fh.write(struct.pack("<q", cp.shape[0]))
            _write_array(fh, cp)
            _write_array(fh, dy.base_quats[i])
            _write_array(fh, dy.quat_offsets[i])
            _write_array(fh, dy.base_log_scales[i])
            _write_array(fh, dy.dct_coeffs[i])
            _write_array(fh, dy.opacity_logits[i : i + 1])
            _write_array(fh, dy.color_logits[i])


def _read_f64(fh, count: int) -> Tensor:
    data = fh.read(8 * count)
    if len(data) != 8 * count:
        raise ValueError("truncated checkpoint")
    return torch.frombuffer(bytearray(data), dtype=DTYPE).clone()


def load_scene(path) -> Scene:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic")
        n_st, n_dy, n_f, n_q, dct_k = struct.unpack("<5q", fh.read(40))
        means, quats, logsc, opac, col = [], [], [], [], []
        for _ in range(n_st):
            means.append(_read_f64(fh, 3))
            quats.append(_read_f64(fh, 4))
            logsc.append(_read_f64(fh, 3))
            opac.append(_read_f64(fh, 1))
            col.append(_read_f64(fh, 3))
        def stack(rows, dim):
            return torch.stack(rows) if rows else torch.zeros(0, dim, dtype=DTYPE)
        static = StaticGaussians(
            stack(means, 3), stack(quats, 4), stack(logsc, 3),
            torch.cat(opac) if opac else torch.zeros(0, dtype=DTYPE), stack(col, 3))
        cps, bq, qo, bls, dct, dop, dcol = [], [], [], [], [], [], []
        for _ in range(n_dy):
            (n_c,) = struct.unpack("<q", fh.read(8))
            cps.append(_read_f64(fh, 3 * n_c).reshape(n_c, 3))
            bq.append(_read_f64(fh, 4))
            qo.append(_read_f64(fh, 4 * n_q).reshape(n_q, 4))
            bls.append(_read_f64(fh, 3))
            dct.append(_read_f64(fh, 3 * dct_k).reshape(dct_k, 3))
            dop.append(_read_f64(fh, 1))
            dcol.append(_read_f64(fh, 3))
        dynamic = DynamicGaussians(
            cps,
            stack(bq, 4),
            torch.stack(qo) if qo else torch.zeros(0, n_q, 4, dtype=DTYPE),
            stack(bls, 3),
            torch.stack(dct) if dct else torch.zeros(0, dct_k, 3, dtype=DTYPE),
            torch.cat(dop) if dop else torch.zeros(0, dtype=DTYPE),
            stack(dcol, 3),
            int(n_f),
        )
        dynamic.n_q, dynamic.dct_k = int(n_q), int(dct_k)
    return Scene(static=static, dynamic=dynamic, num_frames=int(n_f))
