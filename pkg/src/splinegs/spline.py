"""Cubic Hermite trajectory splines over learnable control points.

A trajectory is a piecewise cubic over N_c control points, evaluated on the
normalized time axis t_n = t / (N_f - 1), with the knot grid uniform over
[0, 1]. Tangents are central differences of neighboring control points
(one-sided at the ends), so evaluation is exactly linear in the points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .geometry import DTYPE, Extrinsics, Intrinsics, project_valid

MIN_CONTROL_POINTS = 4


@dataclass
class ControlPointSet:
    points: Tensor  # (N_c, 3)

    def __post_init__(self):
        self.points = torch.as_tensor(self.points, dtype=DTYPE)
        if self.points.dim() != 2 or self.points.shape[1] != 3:
            raise ValueError("control points must have shape (N_c, 3)")
        if self.num_points < MIN_CONTROL_POINTS:
            raise ValueError(f"need at least {MIN_CONTROL_POINTS} control points")
        if not torch.isfinite(self.points).all():
            raise ValueError("control points must be finite")

    @property
    def num_points(self) -> int:
        return self.points.shape[0]


@dataclass
class TrajectorySamples:
    """(time, position) pairs with strictly increasing times in [0, N_f-1]."""

    times: np.ndarray      # (M,)
    positions: np.ndarray  # (M, 3)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.times.ndim != 1 or self.positions.shape != (len(self.times), 3):
            raise ValueError("need times (M,) and positions (M, 3)")
        if len(self.times) > 1 and not (np.diff(self.times) > 0).all():
            raise ValueError("sample times must be strictly increasing")


def _segment_params(t: float, n_c: int, n_f: int) -> tuple[int, float]:
    if n_f < 2:
        raise ValueError("N_f must be >= 2")
    if t < 0 or t > n_f - 1:
        raise ValueError(f"time {t} outside [0, {n_f - 1}]; extrapolation unsupported")
    t_s = (t / (n_f - 1)) * (n_c - 1)
    seg = min(int(np.floor(t_s)), n_c - 2)
    return seg, t_s - seg


def basis_weights(t: float, n_c: int, n_f: int) -> Tensor:
    """Weights w with eval(P, t) = w @ P. At most 4 entries are nonzero."""
    if n_c < MIN_CONTROL_POINTS:
        raise ValueError(f"N_c must be >= {MIN_CONTROL_POINTS}")
    seg, tr = _segment_params(float(t), n_c, n_f)
    h00 = 2 * tr**3 - 3 * tr**2 + 1
    h10 = tr**3 - 2 * tr**2 + tr
    h01 = -2 * tr**3 + 3 * tr**2
    h11 = tr**3 - tr**2
    w = torch.zeros(n_c, dtype=DTYPE)
    w[seg] += h00
    w[seg + 1] += h01
    # distribute tangent weights: m_k = (p_{k+1} - p_{k-1}) / 2 interior,
    # one-sided differences at the ends
    for h, k in ((h10, seg), (h11, seg + 1)):
        if k == 0:
            w[1] += h
            w[0] -= h
        elif k == n_c - 1:
            w[n_c - 1] += h
            w[n_c - 2] -= h
        else:
            w[k + 1] += h / 2
            w[k - 1] -= h / 2
    return w


def tangent_matrix(n_c: int) -> np.ndarray:
    """D with tangents m = D @ P: central differences, one-sided at the ends."""
    d = np.zeros((n_c, n_c))
    d[0, 0], d[0, 1] = -1.0, 1.0
    d[-1, -2], d[-1, -1] = -1.0, 1.0
    for k in range(1, n_c - 1):
        d[k, k - 1], d[k, k + 1] = -0.5, 0.5
    return d


def basis_matrix(times, n_c: int, n_f: int) -> np.ndarray:
    """Stacked basis_weights rows for a vector of times, vectorized numpy (M, N_c)."""
    ts = np.asarray(times, dtype=np.float64).reshape(-1)
    if n_f < 2:
        raise ValueError("N_f must be >= 2")
    if n_c < MIN_CONTROL_POINTS:
        raise ValueError(f"N_c must be >= {MIN_CONTROL_POINTS}")
    if len(ts) and ((ts < 0).any() or (ts > n_f - 1).any()):
        raise ValueError("times outside [0, N_f - 1]")
    t_s = ts / (n_f - 1) * (n_c - 1)
    seg = np.minimum(np.floor(t_s).astype(np.int64), n_c - 2)
    tr = t_s - seg
    h00 = 2 * tr**3 - 3 * tr**2 + 1
    h10 = tr**3 - 2 * tr**2 + tr
    h01 = -2 * tr**3 + 3 * tr**2
    h11 = tr**3 - tr**2
    cols = np.arange(n_c)
    lo = seg[:, None] == cols       # one-hot of the segment's left knot
    hi = seg[:, None] + 1 == cols
    w_point = h00[:, None] * lo + h01[:, None] * hi
    w_tan = h10[:, None] * lo + h11[:, None] * hi
    return w_point + w_tan @ tangent_matrix(n_c)


def eval_spline(points: Tensor, t: float, n_f: int) -> Tensor:
    """Position at time t. Linear in the control points; knots are interpolated."""
    w = basis_weights(t, points.shape[0], n_f).to(points)
    return w @ points


def tangent(cps: ControlPointSet, k: int) -> Tensor:
    p = cps.points
    n = cps.num_points
    if k < 0 or k > n - 1:
        raise IndexError(f"control point index {k} out of range [0, {n - 1}]")
    if k == 0:
        return p[1] - p[0]
    if k == n - 1:
        return p[n - 1] - p[n - 2]
    return (p[k + 1] - p[k - 1]) / 2


def fit_ls(samples: TrajectorySamples, n_c: int, n_f: int,
           ridge: float = 1e-8) -> ControlPointSet:
    """Least-squares control points minimizing the sample residual.

    Underdetermined systems (fewer samples than points) get a small ridge
    term so the solution is unique and deterministic.
    """
    if n_c < MIN_CONTROL_POINTS:
        raise ValueError(f"N_c must be >= {MIN_CONTROL_POINTS}")
    m = len(samples.times)
    if m == 0:
        raise ValueError("no samples to fit")
    if m > 1 and np.ptp(samples.times) == 0:
        raise ValueError("all samples at one time; system is degenerate")
    a = basis_matrix(samples.times, n_c, n_f)
    if m < n_c:
        ata = a.T @ a + ridge * np.eye(n_c)
        sol = np.linalg.solve(ata, a.T @ samples.positions)
    else:
        sol, *_ = np.linalg.lstsq(a, samples.positions, rcond=None)
    return ControlPointSet(torch.from_numpy(sol))


def fit_residual(cps: ControlPointSet, samples: TrajectorySamples, n_f: int) -> float:
    a = basis_matrix(samples.times, cps.num_points, n_f)
    return float(((a @ cps.points.numpy() - samples.positions) ** 2).sum())


def macp_error(points_a: Tensor, points_b: Tensor,
               cameras: list[tuple[Extrinsics, Intrinsics]],
               n_f: int) -> float | None:
    """Mean squared pixel distance between two splines projected per frame.

    Frames where either spline point falls behind the camera are dropped;
    returns None when no frame projects validly.
    """
    total = 0.0
    count = 0
    for t in range(n_f):
        ext, intr = cameras[t]
        xa = eval_spline(points_a, t, n_f)
        xb = eval_spline(points_b, t, n_f)
        px, _, valid = project_valid(torch.stack([xa, xb]), ext, intr)
        if not bool(valid.all()):
            continue
        total += float(((px[0] - px[1]) ** 2).sum())
        count += 1
    if count == 0:
        return None
    return total / n_f


def macp_try_prune(cps: ControlPointSet,
                   cameras: list[tuple[Extrinsics, Intrinsics]],
                   eps: float, n_f: int) -> ControlPointSet:
    """Motion-adaptive pruning: refit with one fewer control point and keep
    the smaller set if the projected pixel error stays below eps.

    Never goes below the 4-point floor; declines when no frame projects
    validly.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if len(cameras) < n_f:
        raise ValueError("cameras must cover every frame")
    n_c = cps.num_points
    if n_c - 1 < MIN_CONTROL_POINTS:
        return cps
    times = np.arange(n_f, dtype=np.float64)
    with torch.no_grad():
        positions = np.stack([eval_spline(cps.points, t, n_f).numpy() for t in times])
        reduced = fit_ls(TrajectorySamples(times, positions), n_c - 1, n_f)
        err = macp_error(cps.points, reduced.points, cameras, n_f)
    if err is None or err >= eps:
        return cps
    return reduced


def save_splines(path, splines: list[tuple[int, ControlPointSet]]) -> None:
    """Text export: `gaussian_id N_c p0x p0y p0z ... p{N_c-1}z` per line."""
    with open(path, "w") as fh:
        for gid, cps in splines:
            flat = " ".join(f"{float(v):.17g}" for v in cps.points.reshape(-1))
            fh.write(f"{gid} {cps.num_points} {flat}\n")


def load_splines(path) -> list[tuple[int, ControlPointSet]]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            gid, n_c = int(parts[0]), int(parts[1])
            vals = [float(v) for v in parts[2:]]
            if len(vals) != 3 * n_c:
                raise ValueError(f"{path}:{lineno}: expected {3 * n_c} coords")
            out.append((gid, ControlPointSet(torch.tensor(vals, dtype=DTYPE).reshape(n_c, 3))))
    return out
