import math

import numpy as np
import pytest
import torch

from conftest import fd_grad, rel_err
from splinegs.gaussians import (SCALE_FLOOR, DynamicGaussians, Scene,
                                StaticGaussians, covariance, inverse_sigmoid,
                                load_scene, normalize_quat, quat_to_rotmat,
                                save_scene)
from splinegs.geometry import DTYPE
from splinegs.spline import basis_weights


def make_dynamic(rng, n=3, n_c=5, n_f=8, n_q=1, dct_k=10):
    cps = [torch.tensor(rng.standard_normal((n_c, 3))) for _ in range(n)]
    g = DynamicGaussians(
        control_points=cps,
        base_quats=torch.tensor(rng.standard_normal((n, 4))),
        quat_offsets=torch.tensor(rng.standard_normal((n, n_q, 4)) * 0.2),
        base_log_scales=torch.tensor(rng.standard_normal((n, 3)) * 0.3),
        dct_coeffs=torch.tensor(rng.standard_normal((n, dct_k, 3)) * 0.05),
        opacity_logits=torch.tensor(rng.standard_normal(n)),
        color_logits=torch.tensor(rng.standard_normal((n, 3))),
        num_frames=n_f,
    )
    return g


def make_static(rng, n=3):
    return StaticGaussians(
        means=torch.tensor(rng.standard_normal((n, 3))),
        quats=normalize_quat(torch.tensor(rng.standard_normal((n, 4)))),
        log_scales=torch.tensor(rng.standard_normal((n, 3)) * 0.3),
        opacity_logits=torch.tensor(rng.standard_normal(n)),
        color_logits=torch.tensor(rng.standard_normal((n, 3))),
    )


class TestRotationAt:
    def test_zero_offsets_give_base(self):
        rng = np.random.default_rng(0)
        g = make_dynamic(rng)
        with torch.no_grad():
            g.quat_offsets.zero_()
        base = normalize_quat(g.base_quats.detach())
        for t in [0.0, 3.5, 7.0]:
            assert rel_err(g.rotations_at(t).detach(), base) < 1e-12

    def test_time_zero_is_normalized_base(self):
        rng = np.random.default_rng(1)
        g = make_dynamic(rng)
        got = g.rotations_at(0.0).detach()
        assert rel_err(got, normalize_quat(g.base_quats.detach())) < 1e-12

    def test_linear_term_at_unit_time(self):
        g = DynamicGaussians(
            control_points=[torch.zeros(4, 3, dtype=DTYPE)],
            base_quats=torch.tensor([[1.0, 0, 0, 0]], dtype=DTYPE),
            quat_offsets=torch.tensor([[[0.0, 0.1, 0, 0]]], dtype=DTYPE),
            base_log_scales=torch.zeros(1, 3, dtype=DTYPE),
            dct_coeffs=torch.zeros(1, 10, 3, dtype=DTYPE),
            opacity_logits=torch.zeros(1, dtype=DTYPE),
            color_logits=torch.zeros(1, 3, dtype=DTYPE),
            num_frames=5,
        )
        got = g.rotations_at(4.0).detach()  # t_n = 1
        expected = torch.tensor([1.0, 0.1, 0, 0], dtype=DTYPE)
        expected = expected / expected.norm()
        assert rel_err(got[0], expected) < 1e-12

    def test_unit_norm_property(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            g = make_dynamic(rng, n=5)
            for t in rng.uniform(0, 7, 10):
                q = g.rotations_at(float(t)).detach()
                assert rel_err(q.norm(dim=-1), torch.ones(5, dtype=DTYPE)) < 1e-9

    def test_zero_norm_rejected(self):
        rng = np.random.default_rng(3)
        g = make_dynamic(rng, n=1, n_f=5)
        with torch.no_grad():
            g.base_quats.zero_()
            g.quat_offsets.zero_()
        with pytest.raises(ValueError):
            g.rotations_at(2.0)


class TestScaleAt:
    def test_zero_coeffs_constant(self):
        rng = np.random.default_rng(4)
        g = make_dynamic(rng)
        with torch.no_grad():
            g.dct_coeffs.zero_()
        base = torch.exp(g.base_log_scales.detach())
        for t in [0.0, 1.7, 7.0]:
            assert rel_err(g.scales_at(t).detach(), base) < 1e-12

    def test_single_term_dct(self):
        n_f, k = 4, 1
        g = DynamicGaussians(
            control_points=[torch.zeros(4, 3, dtype=DTYPE)],
            base_quats=torch.tensor([[1.0, 0, 0, 0]], dtype=DTYPE),
            quat_offsets=torch.zeros(1, 1, 4, dtype=DTYPE),
            base_log_scales=torch.zeros(1, 3, dtype=DTYPE),
            dct_coeffs=torch.tensor([[[1.0, 0, 0]]], dtype=DTYPE),
            opacity_logits=torch.zeros(1, dtype=DTYPE),
            color_logits=torch.zeros(1, 3, dtype=DTYPE),
            num_frames=n_f,
        )
        off = g.scale_offsets_at(0.0).detach()
        expected = math.sqrt(2.0 / n_f) * math.cos(math.pi / (2 * n_f) * k)
        assert abs(float(off[0, 0]) - expected) < 1e-12
        assert float(off[0, 1]) == 0.0

    def test_negative_scale_clamped(self):
        rng = np.random.default_rng(5)
        g = make_dynamic(rng, n=1)
        with torch.no_grad():
            g.base_log_scales.fill_(math.log(1e-5))
            g.dct_coeffs.zero_()
            g.dct_coeffs[0, 0, :] = -5.0
        s = g.scales_at(0.0).detach()
        assert torch.all(s >= SCALE_FLOOR)
        assert float(s.min()) == SCALE_FLOOR


class TestCovariance:
    def test_identity(self):
        q = torch.tensor([1.0, 0, 0, 0], dtype=DTYPE)
        s = torch.ones(3, dtype=DTYPE)
        assert rel_err(covariance(q, s), torch.eye(3, dtype=DTYPE)) < 1e-12

    def test_diagonal(self):
        q = torch.tensor([1.0, 0, 0, 0], dtype=DTYPE)
        s = torch.tensor([2.0, 1, 1], dtype=DTYPE)
        assert rel_err(covariance(q, s),
                       torch.diag(torch.tensor([4.0, 1, 1], dtype=DTYPE))) < 1e-12

    def test_rotated(self):
        # 90 degree z-rotation swaps x and y variances
        q = torch.tensor([math.cos(math.pi / 4), 0, 0, math.sin(math.pi / 4)],
                         dtype=DTYPE)
        s = torch.tensor([2.0, 1, 1], dtype=DTYPE)
        assert rel_err(covariance(q, s),
                       torch.diag(torch.tensor([1.0, 4, 1], dtype=DTYPE))) < 1e-12

    def test_symmetric_positive_definite(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            q = normalize_quat(torch.tensor(rng.standard_normal(4)))
            s = torch.tensor(np.exp(rng.standard_normal(3) * 0.5))
            cov = covariance(q, s)
            assert rel_err(cov, cov.T) < 1e-12
            eigs = torch.linalg.eigvalsh(cov)
            assert float(eigs.min()) >= float(s.min()) ** 2 * (1 - 1e-9)

    def test_quat_rotmat_orthonormal(self):
        rng = np.random.default_rng(7)
        q = normalize_quat(torch.tensor(rng.standard_normal((100, 4))))
        r = quat_to_rotmat(q)
        err = (r.transpose(-1, -2) @ r - torch.eye(3, dtype=DTYPE)).abs().max()
        assert float(err) < 1e-12


class TestMeanAt:
    def test_delegates_to_spline(self):
        rng = np.random.default_rng(8)
        g = make_dynamic(rng, n=2, n_c=6, n_f=10)
        for t in [0.0, 4.2, 9.0]:
            got = g.means_at(t).detach()
            for i in range(2):
                w = basis_weights(t, 6, 10)
                assert rel_err(got[i], w @ g.control_points[i].detach()) < 1e-12

    def test_constant_control_points(self):
        p = torch.tensor([1.0, -2.0, 3.0], dtype=DTYPE).expand(5, 3).clone()
        g = DynamicGaussians(
            control_points=[p],
            base_quats=torch.tensor([[1.0, 0, 0, 0]], dtype=DTYPE),
            quat_offsets=torch.zeros(1, 1, 4, dtype=DTYPE),
            base_log_scales=torch.zeros(1, 3, dtype=DTYPE),
            dct_coeffs=torch.zeros(1, 10, 3, dtype=DTYPE),
            opacity_logits=torch.zeros(1, dtype=DTYPE),
            color_logits=torch.zeros(1, 3, dtype=DTYPE),
            num_frames=6,
        )
        for t in np.linspace(0, 5, 11):
            assert rel_err(g.means_at(float(t)).detach()[0],
                           torch.tensor([1.0, -2, 3], dtype=DTYPE)) < 1e-12

    def test_linear_control_points(self):
        pts = torch.stack([torch.tensor([float(k), 2 * k, 0.0], dtype=DTYPE)
                           for k in range(4)])
        g = DynamicGaussians(
            control_points=[pts],
            base_quats=torch.tensor([[1.0, 0, 0, 0]], dtype=DTYPE),
            quat_offsets=torch.zeros(1, 1, 4, dtype=DTYPE),
            base_log_scales=torch.zeros(1, 3, dtype=DTYPE),
            dct_coeffs=torch.zeros(1, 10, 3, dtype=DTYPE),
            opacity_logits=torch.zeros(1, dtype=DTYPE),
            color_logits=torch.zeros(1, 3, dtype=DTYPE),
            num_frames=7,
        )
        for t in np.linspace(0, 6, 13):
            x = g.means_at(float(t)).detach()[0]
            a = 3 * t / 6
            assert rel_err(x, torch.tensor([a, 2 * a, 0], dtype=DTYPE)) < 1e-12


class TestAttributeGradients:
    """Autograd gradients of the attribute maps vs finite differences."""

    def test_rotation_gradients(self):
        rng = np.random.default_rng(9)
        g = make_dynamic(rng, n=2)
        t = 3.3
        loss = (g.rotations_at(t) * torch.arange(8, dtype=DTYPE).reshape(2, 4)).sum()
        loss.backward()

        def fn(q0):
            g2 = make_dynamic(np.random.default_rng(9), n=2)
            with torch.no_grad():
                g2.base_quats.copy_(q0)
            return (g2.rotations_at(t)
                    * torch.arange(8, dtype=DTYPE).reshape(2, 4)).sum()

        fd = fd_grad(fn, g.base_quats.detach())
        assert rel_err(g.base_quats.grad, fd) < 1e-4

    def test_scale_gradients(self):
        rng = np.random.default_rng(10)
        g = make_dynamic(rng, n=2)
        t = 5.1
        weights = torch.arange(6, dtype=DTYPE).reshape(2, 3) + 1
        (g.scales_at(t) * weights).sum().backward()

        def fn(z):
            g2 = make_dynamic(np.random.default_rng(10), n=2)
            with torch.no_grad():
                g2.dct_coeffs.copy_(z)
            return (g2.scales_at(t) * weights).sum()

        fd = fd_grad(fn, g.dct_coeffs.detach())
        assert rel_err(g.dct_coeffs.grad, fd) < 1e-4

    def test_mean_gradients(self):
        rng = np.random.default_rng(11)
        g = make_dynamic(rng, n=1, n_c=5, n_f=9)
        t = 2.6
        g.means_at(t).sum().backward()
        w = basis_weights(t, 5, 9)
        assert rel_err(g.control_points[0].grad,
                       w[:, None].expand(5, 3)) < 1e-12


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(12)
        scene = Scene(static=make_static(rng, 4),
                      dynamic=make_dynamic(rng, n=3, n_c=6, n_f=9),
                      num_frames=9)
        # ragged control point counts
        scene.dynamic.control_points[1] = torch.nn.Parameter(
            torch.tensor(rng.standard_normal((4, 3))))
        path = tmp_path / "scene.sgs1"
        save_scene(path, scene)
        loaded = load_scene(path)
        assert loaded.num_frames == 9
        assert len(loaded.static) == 4 and len(loaded.dynamic) == 3
        for a, b in zip(scene.parameters(), loaded.parameters()):
            assert torch.equal(a.detach(), b.detach())
        # second save is byte-identical
        path2 = tmp_path / "scene2.sgs1"
        save_scene(path2, loaded)
        assert path.read_bytes() == path2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.sgs1"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError, match="magic"):
            load_scene(path)

    def test_truncation(self, tmp_path):
        rng = np.random.default_rng(13)
        scene = Scene(static=make_static(rng, 2),
                      dynamic=make_dynamic(rng, n=1), num_frames=8)
        path = tmp_path / "scene.sgs1"
        save_scene(path, scene)
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(ValueError, match="truncated"):
            load_scene(path)

    def test_inverse_sigmoid(self):
        for x in [0.1, 0.5, 0.9, 0.005]:
            assert abs(torch.sigmoid(torch.tensor(inverse_sigmoid(x),
                                                  dtype=DTYPE)).item()
                       - x) < 1e-12
