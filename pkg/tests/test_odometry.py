import math

import torch

from splinegs.odometry import (chain_poses, consistency_score,
                               estimate_cameras, relative_pose)
from splinegs.synth import generate_facets
from splinegs.trainer import TrainConfig, apply_config, warmup


def rot_deg(Ra, Rb):
    c = float(((Ra.T @ Rb).trace() - 1) / 2)
    return math.degrees(math.acos(max(-1.0, min(1.0, c))))


def facets(num_frames=4, focal=200.0, **kw):
    return generate_facets(width=64, height=44, num_frames=num_frames,
                           focal=focal, **kw)


def tensors(ds):
    imgs = [torch.from_numpy(ds.images[t]) for t in range(ds.num_frames)]
    dps = [torch.from_numpy(ds.depths[t]) for t in range(ds.num_frames)]
    mks = [torch.from_numpy(ds.masks[t]) for t in range(ds.num_frames)]
    return imgs, dps, mks


class TestFacetScene:
    def test_frame_zero_identity(self):
        ds = facets()
        _, e0 = ds.gt_cameras[0]
        assert float((e0.R - torch.eye(3, dtype=torch.float64)).abs().max()) < 1e-12
        assert float(e0.T.abs().max()) < 1e-12

    def test_depth_positive_and_colors_in_range(self):
        ds = facets()
        assert ds.depths.min() > 0
        assert ds.images.min() >= 0 and ds.images.max() <= 1

    def test_consistency_floor_at_ground_truth(self):
        """Analytic depth and texture: the consistency score at the true
        cameras should sit at numerical noise."""
        ds = facets()
        imgs, dps, mks = tensors(ds)
        poses = [e for _, e in ds.gt_cameras]
        assert consistency_score(imgs, dps, mks, poses, 200.0) < 1e-5


class TestRelativePose:
    def test_recovers_adjacent_transform(self):
        ds = facets()
        ga = ds.gt_cameras[0][1]
        gb = ds.gt_cameras[1][1]
        R_gt = gb.R @ ga.R.T
        b_gt = gb.T - R_gt @ ga.T
        R, b = relative_pose(torch.from_numpy(ds.depths[0]),
                             torch.from_numpy(ds.depths[1]), 200.0)
        assert rot_deg(R_gt, R) < 1e-3
        assert float((b - b_gt).norm()) < 1e-4

    def test_masked_pixels_ignored(self):
        """Corrupted depth under the motion mask must not bias the solve."""
        ds = facets()
        d0 = ds.depths[0].copy()
        d0[5:18, 5:25] = 0.2
        mask = torch.zeros(44, 64, dtype=torch.bool)
        mask[5:18, 5:25] = True
        gb = ds.gt_cameras[1][1]
        R, b = relative_pose(torch.from_numpy(d0),
                             torch.from_numpy(ds.depths[1]), 200.0,
                             mask_t=mask)
        R_gt = gb.R
        b_gt = gb.T
        assert rot_deg(R_gt, R) < 1e-2
        assert float((b - b_gt).norm()) < 1e-3


class TestChainAndFocal:
    def test_chain_anchored_at_identity(self):
        ds = facets()
        _, dps, mks = tensors(ds)
        poses = chain_poses(dps, 200.0, mks)
        assert float((poses[0].R - torch.eye(3, dtype=torch.float64)).abs().max()) == 0
        assert float(poses[0].T.abs().max()) == 0

    def test_chain_matches_ground_truth_at_true_focal(self):
        ds = facets()
        _, dps, mks = tensors(ds)
        poses = chain_poses(dps, 200.0, mks)
        for (_, g), e in zip(ds.gt_cameras, poses):
            assert rot_deg(g.R, e.R) < 1e-2
            assert float((g.T - e.T).norm()) < 1e-3

    def test_score_discriminates_focal(self):
        ds = facets()
        imgs, dps, mks = tensors(ds)
        scores = {}
        for f in (150.0, 200.0, 280.0):
            poses = chain_poses(dps, f, mks)
            scores[f] = consistency_score(imgs, dps, mks, poses, f)
        assert scores[200.0] < 0.05 * scores[150.0]
        assert scores[200.0] < 0.05 * scores[280.0]

    def test_estimate_cameras_recovers_focal(self):
        ds = facets()
        imgs, dps, mks = tensors(ds)
        poses, f_hat = estimate_cameras(imgs, dps, mks, f_init=300.0)
        assert abs(f_hat - 200.0) / 200.0 < 0.02
        for (_, g), e in zip(ds.gt_cameras, poses):
            assert rot_deg(g.R, e.R) < 0.1

    def test_fixed_focal_skips_search(self):
        ds = facets()
        imgs, dps, mks = tensors(ds)
        poses, f_hat = estimate_cameras(imgs, dps, mks, f_init=200.0,
                                        search_focal=False)
        assert f_hat == 200.0
        assert rot_deg(ds.gt_cameras[-1][1].R, poses[-1].R) < 1e-2


class TestWarmupIntegration:
    def test_depth_init_seeds_direct_poses(self):
        ds = facets()
        cfg = TrainConfig(warmup_steps=0, warmup_init="depth",
                          use_pose_network=False, focal_init=200.0,
                          odometry_search_focal=False)
        cams = warmup(ds, cfg)
        for t in range(ds.num_frames):
            g = ds.gt_cameras[t][1]
            e = cams.pose_at(t)
            assert rot_deg(g.R, e.R.detach()) < 1e-2
            assert float((g.T - e.T.detach()).norm()) < 1e-3

    def test_depth_init_fits_pose_network(self):
        ds = facets()
        cfg = TrainConfig(warmup_steps=0, warmup_init="depth",
                          focal_init=200.0, odometry_search_focal=False,
                          odometry_fit_steps=800)
        cams = warmup(ds, cfg)
        for t in range(ds.num_frames):
            g = ds.gt_cameras[t][1]
            e = cams.pose_at(t)
            assert rot_deg(g.R, e.R.detach()) < 0.1
            assert float((g.T - e.T.detach()).norm()) < 5e-3

    def test_identity_init_unchanged(self):
        ds = facets()
        cfg = TrainConfig(warmup_steps=0)
        cams = warmup(ds, cfg)
        e = cams.pose_at(ds.num_frames - 1)
        assert float((e.R.detach() - torch.eye(3, dtype=torch.float64)).abs().max()) < 1e-12

    def test_config_string_override(self):
        cfg = apply_config(TrainConfig(), {"warmup_init": "depth",
                                           "odometry_search_focal": "false"})
        assert cfg.warmup_init == "depth"
        assert cfg.odometry_search_focal is False
