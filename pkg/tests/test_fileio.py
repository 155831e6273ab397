"""On-disk formats: PLY, tagged descriptor binaries, poses, manifests."""

import logging

import numpy as np
import pytest

from metareg.exceptions import ParseError
from metareg.fileio import (
    FrameFileSet,
    SceneManifest,
    load_descriptors,
    load_frame,
    load_global_feature,
    load_manifest,
    load_meta_ply,
    load_overlap_graph,
    load_ply,
    load_poses,
    load_scene,
    save_descriptors,
    save_global_feature,
    save_manifest,
    save_meta_ply,
    save_overlap_graph,
    save_ply,
    save_poses,
)
from metareg.geometry import MetaShape, Pose
from metareg.synthetic import hashed_descriptors

from helpers import random_pose_rt


ASCII_PLY = """ply
format ascii 1.0
comment three points
element vertex 3
property float x
property float y
property float z
end_header
0.0 0.0 0.0
1.0 0.5 0.25
-2.0 3.0 -4.0
"""


def unit_rows(n, d, seed=0):
    rng = np.random.default_rng(seed)
    rows = rng.normal(size=(n, d)).astype(np.float32).astype(np.float64)
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


class TestPly:
    def test_ascii_three_points(self, tmp_path):
        p = tmp_path / "a.ply"
        p.write_text(ASCII_PLY)
        pts = load_ply(p)
        np.testing.assert_array_equal(
            pts,
            [[0.0, 0.0, 0.0], [1.0, 0.5, 0.25], [-2.0, 3.0, -4.0]],
        )

    def test_binary_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(100, 3))
        p = tmp_path / "b.ply"
        save_ply(p, pts)
        again = load_ply(p)
        np.testing.assert_array_equal(pts, again)  # exact, not approx

    def test_extra_scalar_properties_skipped(self, tmp_path):
        p = tmp_path / "extra.ply"
        p.write_text(
            "ply\nformat ascii 1.0\nelement vertex 2\n"
            "property float x\nproperty float y\nproperty float z\n"
            "property uchar red\nend_header\n"
            "0 0 0 255\n1 1 1 10\n"
        )
        pts = load_ply(p)
        assert pts.shape == (2, 3)

    def test_not_a_ply(self, tmp_path):
        p = tmp_path / "x.ply"
        p.write_bytes(b"OFF\n3 0 0\n")
        with pytest.raises(ParseError):
            load_ply(p)

    def test_list_property_rejected(self, tmp_path):
        p = tmp_path / "tri.ply"
        p.write_text(
            "ply\nformat ascii 1.0\nelement vertex 1\n"
            "property list uchar int vertex_indices\nend_header\n0\n"
        )
        with pytest.raises(ParseError, match="list"):
            load_ply(p)

    def test_nan_coordinate_rejected(self, tmp_path):
        p = tmp_path / "nan.ply"
        p.write_text(
            "ply\nformat ascii 1.0\nelement vertex 1\n"
            "property float x\nproperty float y\nproperty float z\n"
            "end_header\n0 nan 0\n"
        )
        with pytest.raises(ParseError, match="NaN"):
            load_ply(p)

    def test_truncated_binary_rejected(self, tmp_path):
        p = tmp_path / "t.ply"
        save_ply(p, np.zeros((4, 3)))
        raw = p.read_bytes()
        p.write_bytes(raw[:-8])
        with pytest.raises(ParseError, match="truncated"):
            load_ply(p)

    def test_missing_axis_rejected(self, tmp_path):
        p = tmp_path / "m.ply"
        p.write_text(
            "ply\nformat ascii 1.0\nelement vertex 1\n"
            "property float x\nproperty float y\nend_header\n0 0\n"
        )
        with pytest.raises(ParseError, match="z"):
            load_ply(p)

    def test_parse_error_carries_offset(self, tmp_path):
        p = tmp_path / "o.ply"
        p.write_bytes(b"junk")
        with pytest.raises(ParseError) as exc:
            load_ply(p)
        assert exc.value.byte_offset == 0
        assert str(p) in str(exc.value)


class TestMetaPly:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        n = 40
        pts = rng.normal(size=(n, 3))
        meta = MetaShape(
            positions=pts,
            descriptors=unit_rows(n, 8, seed=3),
            coverage=rng.integers(1, 5, size=n),
            origin_frames=rng.integers(0, 3, size=n),
            frame_poses={0: Pose.identity()},
            merged_ids=[0],
            frame_keypoints={0: pts.copy()},
        )
        p = tmp_path / "meta.ply"
        save_meta_ply(p, meta)
        pos, origin, coverage = load_meta_ply(p)
        np.testing.assert_array_equal(pos, meta.positions)
        np.testing.assert_array_equal(origin, meta.origin_frames)
        np.testing.assert_array_equal(coverage, meta.coverage)

    def test_deterministic_bytes(self, tmp_path):
        pts = np.array([[0.1, 0.2, 0.3]])
        meta = MetaShape(
            positions=pts,
            descriptors=np.array([[1.0, 0.0]]),
            coverage=np.array([2]),
            origin_frames=np.array([7]),
            frame_poses={7: Pose.identity()},
            merged_ids=[7],
            frame_keypoints={7: pts.copy()},
        )
        a, b = tmp_path / "a.ply", tmp_path / "b.ply"
        save_meta_ply(a, meta)
        save_meta_ply(b, meta)
        assert a.read_bytes() == b.read_bytes()


class TestTaggedBinaries:
    def test_descriptor_round_trip(self, tmp_path):
        d = unit_rows(10, 32)
        p = tmp_path / "d.imrd"
        save_descriptors(p, d)
        np.testing.assert_allclose(load_descriptors(p), d, atol=1e-7)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.imrd"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ParseError, match="magic"):
            load_descriptors(p)

    def test_truncated(self, tmp_path):
        d = unit_rows(4, 8)
        p = tmp_path / "t.imrd"
        save_descriptors(p, d)
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(ParseError, match="truncated"):
            load_descriptors(p)

    def test_global_feature_round_trip(self, tmp_path):
        v = unit_rows(1, 16)[0]
        p = tmp_path / "g.imrg"
        save_global_feature(p, v)
        np.testing.assert_allclose(load_global_feature(p), v, atol=1e-7)


class TestLoadFrame:
    def write_frame(self, tmp_path, n=20, dim=16, seed=0):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(0.0, 3.0, size=(n, 3))
        desc = hashed_descriptors(pts, dim, salt=seed)
        kp = tmp_path / "f.ply"
        dp = tmp_path / "f.imrd"
        save_ply(kp, pts)
        save_descriptors(dp, desc)
        return FrameFileSet(keypoints=kp, descriptors=dp), pts, desc

    def test_assembles_frame(self, tmp_path):
        fs, pts, desc = self.write_frame(tmp_path)
        frame = load_frame(fs, frame_id=4)
        assert frame.id == 4
        np.testing.assert_array_equal(frame.keypoints, pts)
        np.testing.assert_allclose(frame.descriptors, desc, atol=1e-6)
        np.testing.assert_allclose(
            np.linalg.norm(frame.descriptors, axis=1), 1.0, atol=1e-12
        )

    def test_count_mismatch_names_both_values(self, tmp_path):
        fs, pts, desc = self.write_frame(tmp_path, n=20)
        save_descriptors(fs.descriptors, desc[:17])
        with pytest.raises(ParseError, match="17.*20|20.*17"):
            load_frame(fs)

    def test_norm_deviation_warns(self, tmp_path, caplog):
        fs, pts, desc = self.write_frame(tmp_path)
        save_descriptors(fs.descriptors, desc * 1.5)
        with caplog.at_level(logging.WARNING, logger="metareg"):
            frame = load_frame(fs)
        assert any("norm" in rec.message for rec in caplog.records)
        np.testing.assert_allclose(
            np.linalg.norm(frame.descriptors, axis=1), 1.0, atol=1e-12
        )

    def test_clean_norms_stay_quiet(self, tmp_path, caplog):
        fs, _, _ = self.write_frame(tmp_path)
        with caplog.at_level(logging.WARNING, logger="metareg"):
            load_frame(fs)
        assert not caplog.records


class TestPoses:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        poses = {i: Pose(*random_pose_rt(rng)) for i in (0, 3, 7)}
        p = tmp_path / "poses.txt"
        save_poses(p, poses)
        again = load_poses(p)
        assert set(again) == {0, 3, 7}
        for fid in poses:
            assert poses[fid].is_close(again[fid], tol=1e-12)

    def test_line_format(self, tmp_path):
        p = tmp_path / "poses.txt"
        save_poses(p, {2: Pose.identity()})
        line = p.read_text().strip()
        tokens = line.split()
        assert tokens[0] == "2"
        assert len(tokens) == 17
        np.testing.assert_array_equal(
            np.array(tokens[1:], dtype=float).reshape(4, 4), np.eye(4)
        )

    def test_malformed_line(self, tmp_path):
        p = tmp_path / "bad.txt"
        p.write_text("0 1 2 3\n")
        with pytest.raises(ParseError, match="16"):
            load_poses(p)

    def test_empty_rejected(self, tmp_path):
        p = tmp_path / "empty.txt"
        p.write_text("# nothing\n")
        with pytest.raises(ParseError):
            load_poses(p)


class TestManifest:
    def build_scene(self, tmp_path, n_frames=3, dim=16):
        rng = np.random.default_rng(9)
        sets, ids = [], []
        for i in range(n_frames):
            pts = rng.uniform(0.0, 3.0, size=(15, 3))
            kp = tmp_path / f"frame_{i}.ply"
            dp = tmp_path / f"frame_{i}.imrd"
            save_ply(kp, pts)
            save_descriptors(dp, hashed_descriptors(pts, dim, salt=i))
            sets.append(FrameFileSet(keypoints=kp, descriptors=dp))
            ids.append(i)
        return SceneManifest(frames=sets, frame_ids=ids)

    def test_round_trip(self, tmp_path):
        manifest = self.build_scene(tmp_path)
        mp = tmp_path / "scene.json"
        save_manifest(mp, manifest)
        again = load_manifest(mp)
        assert again.frame_ids == [0, 1, 2]
        assert again.units == "meters"
        frames, _ = load_scene(mp)
        assert [f.id for f in frames] == [0, 1, 2]
        assert all(f.keypoints.shape == (15, 3) for f in frames)

    def test_missing_file_keys(self, tmp_path):
        mp = tmp_path / "scene.json"
        mp.write_text('{"frames": [{"keypoints": "a.ply"}]}')
        with pytest.raises(ParseError, match="descriptors"):
            load_manifest(mp)

    def test_invalid_json(self, tmp_path):
        mp = tmp_path / "scene.json"
        mp.write_text("{not json")
        with pytest.raises(ParseError):
            load_manifest(mp)

    def test_duplicate_ids(self, tmp_path):
        manifest = self.build_scene(tmp_path, n_frames=2)
        mp = tmp_path / "scene.json"
        save_manifest(
            mp,
            SceneManifest(frames=manifest.frames, frame_ids=[1, 1]),
        )
        with pytest.raises(ParseError, match="duplicate"):
            load_manifest(mp)

    def test_mixed_descriptor_dims_rejected(self, tmp_path):
        manifest = self.build_scene(tmp_path, n_frames=2)
        rng = np.random.default_rng(2)
        pts = load_ply(manifest.frames[1].keypoints)
        save_descriptors(
            manifest.frames[1].descriptors, hashed_descriptors(pts, 8, salt=1)
        )
        mp = tmp_path / "scene.json"
        save_manifest(mp, manifest)
        with pytest.raises(ParseError, match="dim"):
            load_scene(mp)


class TestOverlapGraph:
    def test_round_trip(self, tmp_path):
        ids = [0, 1, 2]
        m = np.array([
            [1.0, 0.4, 0.0],
            [0.4, 1.0, 0.3],
            [0.0, 0.3, 1.0],
        ])
        p = tmp_path / "overlap.json"
        save_overlap_graph(p, ids, m)
        again_ids, again_m = load_overlap_graph(p)
        assert again_ids == ids
        np.testing.assert_array_equal(again_m, m)

    def test_shape_mismatch(self, tmp_path):
        p = tmp_path / "overlap.json"
        p.write_text('{"ids": [0, 1], "overlap": [[1.0]]}')
        with pytest.raises(ParseError, match="shape"):
            load_overlap_graph(p)
