"""The command-line surface: subcommands, flags, exit codes, outputs."""

import json
from pathlib import Path

import numpy as np
import pytest

from metareg.cli import run_cli
from metareg.fileio import (
    FrameFileSet,
    SceneManifest,
    save_descriptors,
    save_manifest,
    save_overlap_graph,
    save_ply,
    save_poses,
)
from metareg.synthetic import hashed_descriptors, make_plane_bridged_scene


def small_scene_config(tmp_path, n_frames=4, points=300, seed=42):
    cfg = tmp_path / "synth.json"
    cfg.write_text(json.dumps({
        "n_frames": n_frames,
        "points_per_frame": points,
        "seed": seed,
    }))
    return cfg


def synth_scene(tmp_path, **kw):
    cfg = small_scene_config(tmp_path, **kw)
    scene_dir = tmp_path / "scene"
    code = run_cli(["synth", "--config", str(cfg), "--out", str(scene_dir)])
    assert code == 0
    return scene_dir


class TestSynthCommand:
    def test_writes_complete_scene(self, tmp_path, capsys):
        scene_dir = synth_scene(tmp_path, n_frames=3, points=200)
        names = {p.name for p in scene_dir.iterdir()}
        assert "manifest.json" in names
        assert "gt_poses.txt" in names
        assert "overlap.json" in names
        assert "synth_config.json" in names
        assert {"frame_000.ply", "frame_000.imrd"} <= names
        echo = json.loads(capsys.readouterr().out)
        assert echo["config"]["n_frames"] == 3
        assert echo["frames"] == 3

    def test_seed_flag_overrides_config(self, tmp_path, capsys):
        cfg = small_scene_config(tmp_path, n_frames=3, points=150, seed=1)
        code = run_cli(["synth", "--config", str(cfg),
                        "--out", str(tmp_path / "s"), "--seed", "77"])
        assert code == 0
        echo = json.loads(capsys.readouterr().out)
        assert echo["config"]["seed"] == 77

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text('{"n_frames": 3, "wibble": 1}')
        code = run_cli(["synth", "--config", str(cfg),
                        "--out", str(tmp_path / "s")])
        assert code == 1
        assert "wibble" in capsys.readouterr().err


class TestRegisterCommand:
    def test_full_run_and_eval(self, tmp_path, capsys):
        scene_dir = synth_scene(tmp_path)
        run_dir = tmp_path / "run"
        code = run_cli(["register", str(scene_dir / "manifest.json"),
                        "--out", str(run_dir), "--seed", "42"])
        assert code == 0
        result = json.loads((run_dir / "result.json").read_text())
        assert result["failed"] == []
        assert sorted(result["order"]) == [0, 1, 2, 3]
        assert result["config"]["seed"] == 42
        assert result["config"]["ransac"]["iterations"] == 5000
        assert len(result["poses"]) == 4
        assert all(len(v) == 16 for v in result["poses"].values())
        for name in ("poses.txt", "meta_shape.ply", "order_log.csv",
                     "timings.csv", "fig_progress.png"):
            assert (run_dir / name).exists(), name

        capsys.readouterr()
        eval_dir = tmp_path / "eval"
        code = run_cli(["eval",
                        "--pred", str(run_dir / "poses.txt"),
                        "--gt", str(scene_dir / "gt_poses.txt"),
                        "--overlap-graph", str(scene_dir / "overlap.json"),
                        "--out", str(eval_dir)])
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        assert report["recall"] == 1.0
        assert report["failed_pairs"] == 0
        for name in ("report.json", "errors.csv", "ecdf.csv", "fig_ecdf.png"):
            assert (eval_dir / name).exists(), name

    def test_missing_manifest_exit_1_names_path(self, tmp_path, capsys):
        missing = tmp_path / "nope" / "missing.json"
        code = run_cli(["register", str(missing),
                        "--out", str(tmp_path / "out")])
        assert code == 1
        assert str(missing) in capsys.readouterr().err

    def test_unknown_flag_exit_1_with_usage(self, tmp_path, capsys):
        scene_dir = synth_scene(tmp_path, n_frames=3, points=150)
        code = run_cli(["register", str(scene_dir / "manifest.json"),
                        "--out", str(tmp_path / "o"), "--frobnicate"])
        assert code == 1
        err = capsys.readouterr().err
        assert "--frobnicate" in err
        assert "Usage" in err or "usage" in err

    def test_rerun_is_byte_identical(self, tmp_path):
        scene_dir = synth_scene(tmp_path, n_frames=3, points=250)
        args = ["register", str(scene_dir / "manifest.json"),
                "--seed", "5", "--threads", "1"]
        a, b = tmp_path / "run_a", tmp_path / "run_b"
        assert run_cli(args + ["--out", str(a)]) == 0
        assert run_cli(args + ["--out", str(b)]) == 0
        for name in ("result.json", "meta_shape.ply", "poses.txt",
                     "order_log.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name

    def test_flags_reach_the_pipeline(self, tmp_path):
        scene_dir = synth_scene(tmp_path, n_frames=3, points=250)
        run_dir = tmp_path / "run"
        code = run_cli(["register", str(scene_dir / "manifest.json"),
                        "--out", str(run_dir), "--tau", "0.08",
                        "--topk", "4", "--ransac-iters", "2000",
                        "--min-inliers", "12", "--merge-mode", "concat",
                        "--seed", "3", "--threads", "2",
                        "--fusion-neighbors", "2",
                        "--overlap-threshold", "0.25"])
        assert code == 0
        cfg = json.loads((run_dir / "result.json").read_text())["config"]
        assert cfg["tau"] == 0.08
        assert cfg["k"] == 4
        assert cfg["ransac"]["iterations"] == 2000
        assert cfg["ransac"]["min_inliers"] == 12
        assert cfg["ransac"]["inlier_threshold"] == 0.08
        assert cfg["merge_mode"] == "concat"
        assert cfg["seed"] == 3
        assert cfg["threads"] == 2
        assert cfg["fusion_neighbors"] == 2
        assert cfg["overlap_threshold"] == 0.25

    def test_failure_flags_give_exit_2(self, tmp_path):
        rng = np.random.default_rng(0)
        scene_dir = tmp_path / "scene"
        scene_dir.mkdir()

        def write(i, pts, salt):
            kp = scene_dir / f"f{i}.ply"
            dp = scene_dir / f"f{i}.imrd"
            save_ply(kp, pts)
            save_descriptors(dp, hashed_descriptors(pts, 16, salt=salt))
            return FrameFileSet(keypoints=kp, descriptors=dp)

        base = rng.uniform(0.0, 3.0, size=(150, 3))
        cells = np.floor(base / 0.14).astype(np.int64)
        _, first = np.unique(cells, axis=0, return_index=True)
        base = base[np.sort(first)][:60]
        island = rng.uniform(50.0, 53.0, size=(60, 3))
        sets = [write(0, base, 7), write(1, base, 7), write(2, island, 99)]
        manifest = scene_dir / "manifest.json"
        save_manifest(manifest, SceneManifest(frames=sets,
                                              frame_ids=[0, 1, 2]))
        run_dir = tmp_path / "run"
        code = run_cli(["register", str(manifest), "--out", str(run_dir)])
        assert code == 2
        result = json.loads((run_dir / "result.json").read_text())
        assert result["failed"] == [2]


class TestPairwiseCommand:
    def write_frame(self, tmp_path, name, frame):
        kp = tmp_path / f"{name}.ply"
        save_ply(kp, frame.keypoints)
        save_descriptors(tmp_path / f"{name}.imrd", frame.descriptors)
        return kp

    def test_identical_frames_exit_0(self, tmp_path, capsys):
        scene = make_plane_bridged_scene(seed=0)
        a = self.write_frame(tmp_path, "a", scene.frames[0])
        code = run_cli(["pairwise", str(a), str(a)])
        assert code == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["succeeded"] is True
        m = np.array(doc["transform"]).reshape(4, 4)
        np.testing.assert_allclose(m, np.eye(4), atol=1e-6)

    def test_starved_pair_exit_2(self, tmp_path, capsys):
        scene = make_plane_bridged_scene(seed=0)
        a = self.write_frame(tmp_path, "a", scene.frames[0])
        b = self.write_frame(tmp_path, "b", scene.frames[1])
        code = run_cli(["pairwise", str(b), str(a)])
        assert code == 2
        doc = json.loads(capsys.readouterr().out)
        assert doc["succeeded"] is False
        assert doc["transform"] is None
        assert doc["inlier_count"] < 15


class TestEvalCommand:
    def test_all_pairs_without_graph(self, tmp_path, capsys):
        scene = make_plane_bridged_scene(seed=0)
        gt = {f.id: f.gt_pose for f in scene.frames}
        gt_path = tmp_path / "gt.txt"
        save_poses(gt_path, gt)
        code = run_cli(["eval", "--pred", str(gt_path),
                        "--gt", str(gt_path)])
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        assert report["n_pairs"] == 3
        assert report["recall"] == 1.0
        assert report["mean_rotation_error_deg"] < 1e-5

    def test_graph_filters_pairs(self, tmp_path, capsys):
        scene = make_plane_bridged_scene(seed=0)
        gt = {f.id: f.gt_pose for f in scene.frames}
        gt_path = tmp_path / "gt.txt"
        save_poses(gt_path, gt)
        graph = tmp_path / "overlap.json"
        overlap = np.array([
            [1.0, 0.5, 0.05],
            [0.5, 1.0, 0.05],
            [0.05, 0.05, 1.0],
        ])
        save_overlap_graph(graph, [0, 1, 2], overlap)
        code = run_cli(["eval", "--pred", str(gt_path), "--gt", str(gt_path),
                        "--overlap-graph", str(graph)])
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        assert report["pairs"] == [[0, 1]]

    def test_missing_prediction_counts_failed(self, tmp_path, capsys):
        scene = make_plane_bridged_scene(seed=0)
        gt = {f.id: f.gt_pose for f in scene.frames}
        gt_path = tmp_path / "gt.txt"
        save_poses(gt_path, gt)
        pred_path = tmp_path / "pred.txt"
        save_poses(pred_path, {0: gt[0], 1: gt[1]})
        code = run_cli(["eval", "--pred", str(pred_path),
                        "--gt", str(gt_path)])
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        assert report["failed_pairs"] == 2
        assert report["recall"] == pytest.approx(1.0 / 3.0)


class TestLogging:
    def test_info_level_logs_to_stderr(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("REG_LOG_LEVEL", "info")
        scene_dir = synth_scene(tmp_path, n_frames=3, points=200)
        capsys.readouterr()
        code = run_cli(["register", str(scene_dir / "manifest.json"),
                        "--out", str(tmp_path / "run")])
        assert code == 0
        err = capsys.readouterr().err
        assert "INFO" in err and "loaded 3 frames" in err

    def test_default_level_is_quiet(self, tmp_path, capsys, monkeypatch):
        monkeypatch.delenv("REG_LOG_LEVEL", raising=False)
        scene_dir = synth_scene(tmp_path, n_frames=3, points=200)
        capsys.readouterr()
        code = run_cli(["register", str(scene_dir / "manifest.json"),
                        "--out", str(tmp_path / "run")])
        assert code == 0
        assert "INFO" not in capsys.readouterr().err

    def test_bad_level_falls_back(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("REG_LOG_LEVEL", "chatty")
        code = run_cli(["synth", "--out", str(tmp_path / "s"),
                        "--seed", "3", "--config",
                        str(small_scene_config(tmp_path, n_frames=3,
                                               points=150))])
        assert code == 0
        assert "REG_LOG_LEVEL" in capsys.readouterr().err
