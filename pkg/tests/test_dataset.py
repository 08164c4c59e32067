"""Tests for dataset directories: writing, loading, and format errors."""

import json
import shutil

import numpy as np
import pytest

from o2v.dataset import load_dataset, write_dataset
from o2v.imageio import FormatError
from o2v.perception import ArchivePerception, SidecarTextEmbedder
from o2v.scene import CameraIntrinsics
from o2v.synthworld import generate_scene, orbit_trajectory, render_gt

CAM = CameraIntrinsics(fx=10.0, fy=10.0, cx=7.5, cy=5.5, width=16, height=12)


@pytest.fixture(scope="module")
def written(tmp_path_factory):
    scene = generate_scene(3, 2)
    poses = orbit_trajectory(scene, 4)
    root = tmp_path_factory.mktemp("ds")
    ds = write_dataset(root, scene, poses, CAM)
    return ds, scene, poses


class TestRoundTrip:
    def test_counts_and_intrinsics(self, written):
        ds, scene, poses = written
        loaded = load_dataset(ds.root)
        assert loaded.n_frames == 4
        assert loaded.intrinsics == CAM
        assert loaded.scene.to_json() == scene.to_json()

    def test_pose_text_round_trips_exactly(self, written):
        ds, _, poses = written
        for i, pose in enumerate(poses):
            got = ds.pose(i)
            assert np.array_equal(got.rotation, pose.rotation)
            assert np.array_equal(got.translation, pose.translation)

    def test_depth_raster_is_bit_exact(self, written):
        ds, scene, poses = written
        _, gt_depth, _ = render_gt(scene, poses[1], CAM)
        assert np.array_equal(ds.frame(1).depth, gt_depth)

    def test_rgb_survives_8bit_quantization(self, written):
        ds, scene, poses = written
        gt_rgb, _, _ = render_gt(scene, poses[2], CAM)
        quantized = np.rint(np.clip(gt_rgb, 0, 1).astype(np.float64)
                            * 255.0).astype(np.uint8)
        assert np.array_equal(ds.frame(2).rgb,
                              quantized.astype(np.float32) / 255.0)

    def test_frame_index_bounds(self, written):
        ds, _, _ = written
        with pytest.raises(IndexError):
            ds.frame(4)
        with pytest.raises(IndexError):
            ds.frame(-1)

    def test_frames_generator_stops_at_n(self, written):
        ds, _, _ = written
        frames = list(ds.frames(2))
        assert [f.frame_id for f in frames] == [0, 1]

    def test_perception_archive_readable(self, written):
        ds, _, _ = written
        assert ds.perception_path is not None
        provider = ArchivePerception(ds.perception_path)
        perception = provider.perceive(ds.frame(0))
        assert perception.frame_id == 0

    def test_sidecar_embeds_scene_labels(self, written):
        ds, scene, _ = written
        assert ds.sidecar_path is not None
        embedder = SidecarTextEmbedder(ds.sidecar_path)
        for label in scene.instance_labels():
            e = np.asarray(embedder.embed(label), dtype=np.float64)
            assert np.linalg.norm(e) == pytest.approx(1.0, abs=1e-6)

    def test_bounds_come_from_the_scene(self, written):
        ds, scene, _ = written
        b = ds.bounds()
        assert np.allclose(b.min, scene.room_min)
        assert np.allclose(b.max, scene.room_max)

    def test_without_perception(self, tmp_path):
        scene = generate_scene(4, 1)
        ds = write_dataset(tmp_path / "bare", scene,
                           orbit_trajectory(scene, 1), CAM,
                           with_perception=False)
        assert ds.perception_path is None
        assert ds.sidecar_path is None

    def test_depth_noise_perturbs_depth_only(self, tmp_path):
        scene = generate_scene(5, 1)
        poses = orbit_trajectory(scene, 1)
        clean = write_dataset(tmp_path / "clean", scene, poses, CAM,
                              with_perception=False)
        noisy = write_dataset(tmp_path / "noisy", scene, poses, CAM,
                              with_perception=False, depth_noise_sigma=0.02)
        assert not np.array_equal(clean.frame(0).depth, noisy.frame(0).depth)


def _edit_meta(root, mutate):
    meta = json.loads((root / "scene.json").read_text())
    mutate(meta)
    (root / "scene.json").write_text(json.dumps(meta))


class TestErrors:
    def test_missing_scene_json(self, tmp_path):
        with pytest.raises(FormatError, match="not a dataset"):
            load_dataset(tmp_path)

    def test_corrupt_scene_json(self, tmp_path):
        (tmp_path / "scene.json").write_text("{nope")
        with pytest.raises(FormatError, match="unreadable"):
            load_dataset(tmp_path)

    def test_missing_required_key(self, written, tmp_path):
        ds, _, _ = written
        shutil.copytree(ds.root, tmp_path / "d")
        _edit_meta(tmp_path / "d", lambda m: m.pop("n_frames"))
        with pytest.raises(FormatError, match="n_frames"):
            load_dataset(tmp_path / "d")

    def test_bad_intrinsics(self, written, tmp_path):
        ds, _, _ = written
        shutil.copytree(ds.root, tmp_path / "d")
        _edit_meta(tmp_path / "d",
                   lambda m: m["intrinsics"].update(fx="wide"))
        with pytest.raises(FormatError, match="intrinsics"):
            load_dataset(tmp_path / "d")

    def test_pose_with_wrong_column_count(self, written, tmp_path):
        ds, _, _ = written
        shutil.copytree(ds.root, tmp_path / "d")
        pose_file = tmp_path / "d" / "frames" / "frame_00000.pose"
        pose_file.write_text("1 0 0\n0 1 0\n0 0 1\n")
        with pytest.raises(FormatError, match="4 floats"):
            load_dataset(tmp_path / "d").pose(0)

    def test_pose_with_wrong_row_count(self, written, tmp_path):
        ds, _, _ = written
        shutil.copytree(ds.root, tmp_path / "d")
        pose_file = tmp_path / "d" / "frames" / "frame_00001.pose"
        pose_file.write_text("1 0 0 0\n0 1 0 0\n")
        with pytest.raises(FormatError, match="3 rows"):
            load_dataset(tmp_path / "d").pose(1)

    def test_bounds_need_scene_or_explicit_extent(self, written, tmp_path):
        ds, _, _ = written
        shutil.copytree(ds.root, tmp_path / "d")
        _edit_meta(tmp_path / "d", lambda m: m.update(scene=None))
        loaded = load_dataset(tmp_path / "d")
        with pytest.raises(FormatError, match="bounds"):
            loaded.bounds()

    def test_explicit_bounds_honored(self, written, tmp_path):
        ds, _, _ = written
        shutil.copytree(ds.root, tmp_path / "d")
        _edit_meta(tmp_path / "d", lambda m: m.update(
            scene=None, bounds_min=[0, 0, 0], bounds_max=[2, 2, 2]))
        b = load_dataset(tmp_path / "d").bounds()
        assert np.array_equal(b.min, [0.0, 0.0, 0.0])
        assert np.array_equal(b.max, [2.0, 2.0, 2.0])
