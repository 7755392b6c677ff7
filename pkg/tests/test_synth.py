import logging
import os

import numpy as np
import pytest
import torch

from splinegs import io as dio
from splinegs.gaussians import load_scene
from splinegs.rasterizer import RenderConfig, render
from splinegs.synth import (CameraPathSpec, Dataset, DatasetError, NoiseSpec,
                            ObjectSpec, SceneSpec, build_ground_truth,
                            generate, load)


def small_spec(**kw):
    defaults = dict(
        width=48, height=32, num_frames=6, focal=60.0, seed=3,
        background_nx=10, background_ny=7,
        camera=CameraPathSpec(kind="static", start=(0.0, 0.0, 0.0),
                              target=(0.0, 0.0, 6.0)),
        objects=[ObjectSpec(kind="line", start=(-0.5, 0.0, 4.0),
                            end=(0.5, 0.0, 4.0), size=0.15,
                            color=(0.9, 0.2, 0.2))],
    )
    defaults.update(kw)
    return SceneSpec(**defaults)


def dir_digest(root):
    out = {}
    for base, _, files in os.walk(root):
        for f in sorted(files):
            p = os.path.join(base, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


class TestGenerate:
    def test_static_only(self, tmp_path):
        ds = generate(small_spec(objects=[]), tmp_path / "d")
        assert float(np.abs(ds.masks).max()) == 0.0
        assert ds.tracks == {}

    def test_fixed_seed_byte_identical(self, tmp_path):
        spec = small_spec(noise=NoiseSpec(depth=0.02, track_jitter=0.3,
                                          mask_morph=1))
        generate(spec, tmp_path / "a")
        generate(spec, tmp_path / "b")
        da, db = dir_digest(tmp_path / "a"), dir_digest(tmp_path / "b")
        assert da.keys() == db.keys()
        for name in da:
            assert da[name] == db[name], name

    def test_linear_track_velocity(self, tmp_path):
        spec = small_spec()
        ds = generate(spec, tmp_path / "d")
        rows = ds.tracks[0]
        assert rows.shape[0] == spec.num_frames
        du = np.diff(rows[:, 1])
        dv = np.diff(rows[:, 2])
        vx = 1.0 / (spec.num_frames - 1)  # start/end are 1 unit apart in x
        expected = spec.focal * vx / 4.0  # fronto-parallel motion at z = 4
        assert np.abs(du - expected).max() < 1e-9
        assert np.abs(dv).max() < 1e-9

    def test_shapes_and_ranges(self, tmp_path):
        spec = small_spec()
        ds = generate(spec, tmp_path / "d")
        assert ds.images.shape == (6, 32, 48, 3)
        assert ds.depths.shape == (6, 32, 48)
        assert ds.masks.shape == (6, 32, 48)
        assert ds.images.min() >= 0 and ds.images.max() <= 1
        assert ds.depths.min() > 0
        assert set(np.unique(ds.masks)) <= {0.0, 1.0}

    def test_visibility_invariant_rejected(self, tmp_path):
        spec = small_spec(objects=[ObjectSpec(
            kind="line", start=(0.0, 0.0, 4.0), end=(0.0, 0.0, -2.0))])
        with pytest.raises(ValueError, match="behind the camera"):
            generate(spec, tmp_path / "d")

    def test_noise_leaves_ground_truth_untouched(self, tmp_path):
        clean = generate(small_spec(), tmp_path / "a")
        noisy = generate(small_spec(noise=NoiseSpec(depth=0.05,
                                                    track_jitter=0.5)),
                         tmp_path / "b")
        for oid in clean.gt_trajectories:
            assert np.array_equal(clean.gt_trajectories[oid],
                                  noisy.gt_trajectories[oid])
        for (_, ca), (_, cb) in zip(clean.gt_cameras, noisy.gt_cameras):
            assert torch.equal(ca.R, cb.R) and torch.equal(ca.T, cb.T)
        assert not np.array_equal(clean.depths, noisy.depths)
        assert not np.array_equal(np.array([clean.tracks[0]]),
                                  np.array([noisy.tracks[0]]))

    def test_pose_zero_is_identity(self, tmp_path):
        spec = small_spec(camera=CameraPathSpec(
            kind="orbit", center=(0.0, 0.0, 6.0), radius=6.0,
            angle_start=-0.1, angle_end=0.1))
        _, poses, _, _ = build_ground_truth(spec)
        assert float((poses[0].R - torch.eye(3, dtype=torch.float64)).abs().max()) < 1e-12
        assert float(poses[0].T.abs().max()) < 1e-12


class TestLoad:
    def test_round_trip_bit_exact(self, tmp_path):
        ds1 = generate(small_spec(), tmp_path / "d")
        ds2 = load(tmp_path / "d")
        assert np.array_equal(ds1.images, ds2.images)
        assert np.array_equal(ds1.depths, ds2.depths)
        assert np.array_equal(ds1.masks, ds2.masks)
        assert ds1.tracks.keys() == ds2.tracks.keys()
        for tid in ds1.tracks:
            assert np.array_equal(ds1.tracks[tid], ds2.tracks[tid])

    def test_truncated_depth_names_file(self, tmp_path):
        generate(small_spec(), tmp_path / "d")
        victim = tmp_path / "d" / "depth" / "0002.pfm"
        data = victim.read_bytes()
        victim.write_bytes(data[: len(data) // 2])
        with pytest.raises(DatasetError, match="0002.pfm"):
            load(tmp_path / "d")

    def test_errors_enumerate_every_file(self, tmp_path):
        generate(small_spec(), tmp_path / "d")
        os.remove(tmp_path / "d" / "depth" / "0001.pfm")
        os.remove(tmp_path / "d" / "mask" / "0004.png")
        with pytest.raises(DatasetError, match="0001.pfm") as exc:
            load(tmp_path / "d")
        assert "0004.png" in str(exc.value)

    def test_unknown_file_warns_but_loads(self, tmp_path, caplog):
        generate(small_spec(), tmp_path / "d")
        (tmp_path / "d" / "notes.txt").write_text("scratch")
        with caplog.at_level(logging.WARNING):
            ds = load(tmp_path / "d")
        assert isinstance(ds, Dataset)
        assert any("notes.txt" in r.getMessage() for r in caplog.records)

    def test_malformed_track_row(self, tmp_path):
        generate(small_spec(), tmp_path / "d")
        with open(tmp_path / "d" / "tracks.csv", "a") as fh:
            fh.write("0,banana,1.0,2.0\n")
        with pytest.raises(DatasetError, match="tracks.csv"):
            load(tmp_path / "d")

    def test_track_frame_out_of_range(self, tmp_path):
        generate(small_spec(), tmp_path / "d")
        with open(tmp_path / "d" / "tracks.csv", "a") as fh:
            fh.write("0,99,1.0,2.0\n")
        with pytest.raises(DatasetError, match="out of range"):
            load(tmp_path / "d")


class TestSelfConsistency:
    def test_rerender_reproduces_frames(self, tmp_path):
        """Ground-truth scene + cameras re-rendered through the public
        rasterizer must match the stored frames up to file quantization
        (8-bit PNG for rgb/mask, float32 PFM for depth)."""
        spec = small_spec()
        ds = generate(spec, tmp_path / "d")
        scene = load_scene(ds.gt_scene_path)
        cfg = RenderConfig(normalize_depth=True)
        with torch.no_grad():
            for t, ext in ds.gt_cameras:
                out = render(scene, ext, ds.gt_intrinsics, float(t), cfg)
                rgb = np.round(np.clip(out.color.numpy(), 0, 1) * 255) / 255
                assert np.array_equal(rgb, ds.images[int(t)])
                depth = out.depth.numpy().copy()
                depth[out.weight_sum.numpy() < 1e-6] = spec.background_depth
                assert np.array_equal(depth.astype(np.float32).astype(np.float64),
                                      ds.depths[int(t)])
                mask = (out.mask.numpy() > 0.5).astype(np.float64)
                assert np.array_equal(mask, ds.masks[int(t)])


class TestSpecParsing:
    def test_from_dict_round_trip(self):
        spec = small_spec()
        from splinegs.synth import _spec_to_dict
        spec2 = SceneSpec.from_dict(_spec_to_dict(spec))
        assert _spec_to_dict(spec2) == _spec_to_dict(spec)

    def test_min_frames(self):
        with pytest.raises(ValueError):
            SceneSpec(num_frames=1)

    def test_unknown_kinds_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            generate(small_spec(camera=CameraPathSpec(kind="zigzag")),
                     tmp_path / "d")
        with pytest.raises(ValueError):
            generate(small_spec(objects=[ObjectSpec(kind="warp")]),
                     tmp_path / "d")
