import math

import numpy as np
import pytest
import torch

from conftest import fd_grad, rel_err
from splinegs.geometry import (DTYPE, BehindCameraError, DirectPoses,
                               Extrinsics, Intrinsics, PoseNetwork,
                               load_camera_file, positional_encoding, project,
                               project_valid, rotation_6d_to_matrix,
                               save_camera_file, unproject_world, warp_pixel)


def random_extrinsics(rng):
    a = torch.tensor(rng.standard_normal(3) * 0.3, dtype=DTYPE)
    # Rodrigues via matrix exponential of the skew form
    k = torch.tensor([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]],
                     dtype=DTYPE)
    r = torch.matrix_exp(k)
    t = torch.tensor(rng.standard_normal(3) * 0.5, dtype=DTYPE)
    return Extrinsics(r, t)


class TestPositionalEncoding:
    def test_zero(self):
        out = positional_encoding(0.0, 2)
        assert torch.allclose(out, torch.tensor([0.0, 1, 0, 1], dtype=DTYPE))

    def test_one_freq_at_one(self):
        out = positional_encoding(1.0, 1)
        expected = torch.tensor([math.sin(math.pi), -1.0], dtype=DTYPE)
        assert torch.allclose(out, expected, atol=1e-12)

    def test_quarter(self):
        out = positional_encoding(0.25, 2)
        expected = torch.tensor([
            math.sin(math.pi / 4), math.cos(math.pi / 4),
            math.sin(math.pi / 2), math.cos(math.pi / 2),
        ], dtype=DTYPE)
        assert torch.allclose(out, expected, atol=1e-12)

    def test_rejects_zero_freqs(self):
        with pytest.raises(ValueError):
            positional_encoding(0.5, 0)


class TestPoseModels:
    def test_fresh_network_is_identity(self):
        net = PoseNetwork(num_frames=12)
        for t in [0.0, 3.0, 7.5, 11.0]:
            ext = net.pose_at(torch.tensor(t, dtype=DTYPE))
            assert torch.allclose(ext.R, torch.eye(3, dtype=DTYPE))
            assert torch.allclose(ext.T, torch.zeros(3, dtype=DTYPE))

    def test_fresh_direct_poses_identity(self):
        net = DirectPoses(num_frames=8)
        for t in [0.0, 2.5, 7.0]:
            ext = net.pose_at(torch.tensor(t, dtype=DTYPE))
            assert torch.allclose(ext.R, torch.eye(3, dtype=DTYPE))
            assert torch.allclose(ext.T, torch.zeros(3, dtype=DTYPE))

    def test_translation_bias_leaves_rotation_identity(self):
        net = PoseNetwork(num_frames=6)
        with torch.no_grad():
            net.head.bias[6] += 0.1
        ext = net.pose_at(torch.tensor(2.0, dtype=DTYPE))
        assert torch.allclose(ext.R, torch.eye(3, dtype=DTYPE))
        assert torch.allclose(ext.T, torch.tensor([0.1, 0, 0], dtype=DTYPE))

    def test_perturbed_network_rotations_orthonormal(self):
        torch.manual_seed(0)
        net = PoseNetwork(num_frames=10)
        with torch.no_grad():
            for p in net.parameters():
                p.add_(torch.randn_like(p) * 0.5)
        for t in np.linspace(0, 9, 25):
            ext = net.pose_at(torch.tensor(float(t), dtype=DTYPE))
            ext = Extrinsics(ext.R.detach(), ext.T.detach())
            ext.validate(tol=1e-9)

    def test_rotation_6d_gram_schmidt(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            d6 = torch.tensor(rng.standard_normal(6), dtype=DTYPE)
            r = rotation_6d_to_matrix(d6)
            assert rel_err(r.T @ r, torch.eye(3, dtype=DTYPE)) < 1e-12
            assert abs(float(torch.linalg.det(r)) - 1) < 1e-12


class TestProject:
    def test_optical_axis(self):
        intr = Intrinsics(f=500.0, width=640, height=480)
        px, z = project(torch.tensor([0.0, 0, 2], dtype=DTYPE),
                        Extrinsics.identity(), intr)
        assert torch.allclose(px, torch.tensor([320.0, 240.0], dtype=DTYPE))
        assert float(z) == 2.0

    def test_hand_example(self):
        intr = Intrinsics(f=500.0, width=960, height=540)
        px, z = project(torch.tensor([1.0, 0, 1], dtype=DTYPE),
                        Extrinsics.identity(), intr)
        assert torch.allclose(px, torch.tensor([980.0, 270.0], dtype=DTYPE))
        assert float(z) == 1.0

    def test_zero_depth_rejected(self):
        intr = Intrinsics(f=500.0, width=64, height=64)
        with pytest.raises(BehindCameraError):
            project(torch.tensor([0.0, 0, 0], dtype=DTYPE),
                    Extrinsics.identity(), intr)

    def test_behind_camera_flagged(self):
        intr = Intrinsics(f=500.0, width=64, height=64)
        _, _, valid = project_valid(torch.tensor([[0.0, 0, -1], [0, 0, 2]],
                                                 dtype=DTYPE),
                                    Extrinsics.identity(), intr)
        assert valid.tolist() == [False, True]


class TestUnproject:
    def test_principal_point(self):
        intr = Intrinsics(f=500.0, width=640, height=480)
        w = unproject_world(torch.tensor([320.0, 240.0], dtype=DTYPE), 1.0,
                            Extrinsics.identity(), intr)
        assert torch.allclose(w, torch.tensor([0.0, 0, 1], dtype=DTYPE))

    def test_round_trip_identity_pose(self):
        rng = np.random.default_rng(2)
        intr = Intrinsics(f=350.0, width=96, height=64)
        ext = Extrinsics.identity()
        for _ in range(20):
            px = torch.tensor([rng.uniform(0, 95), rng.uniform(0, 63)],
                              dtype=DTYPE)
            d = torch.tensor(rng.uniform(0.5, 10), dtype=DTYPE)
            w = unproject_world(px, d, ext, intr)
            px2, d2 = project(w, ext, intr)
            assert rel_err(px, px2) < 1e-9
            assert abs(float(d - d2)) < 1e-9

    def test_round_trip_nontrivial_pose(self):
        rng = np.random.default_rng(3)
        intr = Intrinsics(f=200.0, width=64, height=48)
        for _ in range(20):
            ext = random_extrinsics(rng)
            world = torch.tensor(rng.standard_normal(3), dtype=DTYPE)
            world[2] += 6  # keep in front
            px, d = project(world, ext, intr)
            w2 = unproject_world(px, d, ext, intr)
            assert rel_err(world, w2) < 1e-9

    def test_negative_depth_rejected(self):
        intr = Intrinsics(f=200.0, width=64, height=48)
        with pytest.raises(ValueError):
            unproject_world(torch.tensor([1.0, 1.0], dtype=DTYPE), -1.0,
                            Extrinsics.identity(), intr)


class TestWarp:
    def test_same_pose_identity(self):
        rng = np.random.default_rng(4)
        intr = Intrinsics(f=300.0, width=64, height=64)
        ext = random_extrinsics(rng)
        px = torch.tensor([[12.0, 40.0], [3.0, 3.0]], dtype=DTYPE)
        out, valid = warp_pixel(px, torch.tensor([2.0, 5.0], dtype=DTYPE),
                                ext, ext, intr)
        assert valid.all()
        assert torch.equal(out.detach(), px) or rel_err(out, px) < 1e-12

    def test_disparity_formula(self):
        f, depth, baseline = 400.0, 5.0, 0.3
        intr = Intrinsics(f=f, width=128, height=96)
        ext_t = Extrinsics.identity()
        # reference camera displaced by +baseline along world x
        ext_ref = Extrinsics(torch.eye(3, dtype=DTYPE),
                             torch.tensor([-baseline, 0, 0], dtype=DTYPE))
        px = torch.tensor([64.0, 48.0], dtype=DTYPE)
        out, valid = warp_pixel(px, depth, ext_t, ext_ref, intr)
        assert bool(valid)
        expected = px - torch.tensor([f * baseline / depth, 0.0], dtype=DTYPE)
        assert rel_err(out, expected) < 1e-12

    def test_behind_reference_invalid(self):
        intr = Intrinsics(f=300.0, width=64, height=64)
        ext_t = Extrinsics.identity()
        # reference flipped 180 degrees about y: target's forward is behind it
        r = torch.tensor([[-1.0, 0, 0], [0, 1, 0], [0, 0, -1]], dtype=DTYPE)
        ext_ref = Extrinsics(r, torch.zeros(3, dtype=DTYPE))
        _, valid = warp_pixel(torch.tensor([32.0, 32.0], dtype=DTYPE), 2.0,
                              ext_t, ext_ref, intr)
        assert not bool(valid)


class TestGradients:
    """Autograd vs central finite differences at step 1e-5, rel err < 1e-4."""

    def test_project_wrt_focal_and_point(self):
        world0 = torch.tensor([0.4, -0.3, 3.0], dtype=DTYPE)
        rng = np.random.default_rng(5)
        ext = random_extrinsics(rng)

        def loss_of_point(w):
            intr = Intrinsics(f=250.0, width=64, height=64)
            px, z = project(w, ext, intr)
            return (px.sum() + 2 * z)

        w = world0.clone().requires_grad_(True)
        loss_of_point(w).backward()
        assert rel_err(w.grad, fd_grad(loss_of_point, world0)) < 1e-4

        def loss_of_f(fval):
            intr = Intrinsics(f=fval.reshape(()), width=64, height=64)
            px, _ = project(world0, ext, intr)
            return px.sum()

        f = torch.tensor([250.0], dtype=DTYPE, requires_grad=True)
        loss_of_f(f).backward()
        assert rel_err(f.grad, fd_grad(loss_of_f, f.detach())) < 1e-4

    def test_warp_wrt_depth_and_pose_params(self):
        intr = Intrinsics(f=220.0, width=64, height=64)
        net = DirectPoses(num_frames=2)
        with torch.no_grad():
            net.params.add_(torch.randn(2, 9, dtype=DTYPE,
                                        generator=torch.Generator().manual_seed(6)) * 0.05)
        px = torch.tensor([20.0, 30.0], dtype=DTYPE)

        def loss_of_params(p):
            local = DirectPoses(num_frames=2)
            with torch.no_grad():
                local.params.copy_(p)
            out, _ = warp_pixel(px, 4.0, local.pose_at(0.0),
                                local.pose_at(1.0), intr)
            return out.sum()

        loss = loss_of_params(net.params)
        # recompute with grad through the live module
        out, _ = warp_pixel(px, 4.0, net.pose_at(0.0), net.pose_at(1.0), intr)
        out.sum().backward()
        assert rel_err(net.params.grad,
                       fd_grad(loss_of_params, net.params.detach())) < 1e-4
        assert abs(float(loss) - float(out.sum())) < 1e-12

        def loss_of_depth(d):
            out2, _ = warp_pixel(px, d.reshape(()), net.pose_at(0.0),
                                 net.pose_at(1.0), intr)
            return out2.sum()

        d = torch.tensor([4.0], dtype=DTYPE, requires_grad=True)
        loss_of_depth(d).backward()
        assert rel_err(d.grad, fd_grad(loss_of_depth, d.detach())) < 1e-4


class TestCameraFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        intr = Intrinsics(f=333.25, width=96, height=64)
        records = [(float(t), random_extrinsics(rng)) for t in range(5)]
        path = tmp_path / "cams.txt"
        save_camera_file(path, records, intr)
        loaded, intr2 = load_camera_file(path)
        assert intr2.width == 96 and intr2.height == 64
        assert abs(float(intr2.f) - 333.25) < 1e-12
        assert len(loaded) == 5
        for (t0, e0), (t1, e1) in zip(records, loaded):
            assert t0 == t1
            assert rel_err(e0.R, e1.R) < 1e-12
            assert rel_err(e0.T, e1.T) < 1e-12

    def test_comments_and_field_count(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("# header\n0 100 32 24 1 0 0 0 1 0 0 0 1 0 0\n")
        with pytest.raises(ValueError, match="expected 16 fields"):
            load_camera_file(path)
