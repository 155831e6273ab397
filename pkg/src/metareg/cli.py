"""Command-line interface.

Four subcommands: ``register`` runs the full incremental pipeline on a
scene manifest, ``pairwise`` aligns exactly two frames for debugging,
``eval`` scores predicted poses against ground truth, and ``synth``
writes a synthetic scene to disk. Exit codes: 0 on success, 2 when the
pipeline finished but flagged frames as unregistrable, 1 on any error.
The REG_LOG_LEVEL environment variable (error, warn, info, debug)
controls logging verbosity on standard error.
"""

from __future__ import annotations

import json
import logging
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import click
import numpy as np

from .exceptions import RegistrationError
from .fileio import (
    FrameFileSet,
    SceneManifest,
    load_frame,
    load_global_feature,
    load_overlap_graph,
    load_poses,
    load_scene,
    save_descriptors,
    save_manifest,
    save_overlap_graph,
    save_ply,
    save_poses,
)
from .matching import RansacConfig
from .metrics import evaluate_poses, pairs_above_overlap
from .pipeline import PipelineConfig, register_pair, register_scene
from .report import (
    error_report_document,
    write_eval_report,
    write_scene_report,
)
from .synthetic import SynthConfig, generate_scene

logger = logging.getLogger("metareg")

_LOG_LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


def _configure_logging() -> None:
    raw = os.environ.get("REG_LOG_LEVEL", "warn").lower()
    level = _LOG_LEVELS.get(raw)
    if level is None:
        level = logging.WARNING
    logging.basicConfig(
        stream=sys.stderr,
        level=level,
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )
    if raw not in _LOG_LEVELS:
        logger.warning("unknown REG_LOG_LEVEL %r, using warn", raw)


def _pipeline_options(fn):
    options = [
        click.option("--tau", type=float, default=0.07, show_default=True,
                     help="Inlier / neighborhood distance threshold."),
        click.option("--topk", type=int, default=10, show_default=True,
                     help="Candidates retrieved per merge step."),
        click.option("--fusion-neighbors", type=int, default=3,
                     show_default=True,
                     help="Neighbors mixed into each global feature."),
        click.option("--overlap-threshold", type=float, default=0.30,
                     show_default=True,
                     help="Minimum overlap for a refinement observation."),
        click.option("--ransac-iters", type=int, default=5000,
                     show_default=True, help="Hypotheses per candidate."),
        click.option("--min-inliers", type=int, default=15, show_default=True,
                     help="Inlier floor below which an estimate fails."),
        click.option("--merge-mode",
                     type=click.Choice(["reservoir", "concat", "mean"]),
                     default="reservoir", show_default=True,
                     help="How redundant points enter the meta-shape."),
        click.option("--seed", type=int, default=0, show_default=True,
                     help="Root of all randomness in the run."),
        click.option("--threads", type=int, default=1, show_default=True,
                     help="Worker threads for candidate evaluation."),
    ]
    for opt in reversed(options):
        fn = opt(fn)
    return fn


def _build_config(tau, topk, fusion_neighbors, overlap_threshold,
                  ransac_iters, min_inliers, merge_mode, seed,
                  threads) -> PipelineConfig:
    return PipelineConfig(
        k=topk,
        tau=tau,
        overlap_threshold=overlap_threshold,
        fusion_neighbors=fusion_neighbors,
        ransac=RansacConfig(
            iterations=ransac_iters,
            inlier_threshold=tau,
            min_inliers=min_inliers,
            seed=seed,
        ),
        merge_mode=merge_mode,
        seed=seed,
        threads=threads,
    )


@click.group()
def cli():
    """Incremental multiview point-cloud registration."""


@cli.command()
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False),
              help="Directory for result.json, poses, and figures.")
@_pipeline_options
def register(manifest, out, **flags):
    """Register every frame of the scene described by MANIFEST."""
    cfg = _build_config(**flags)
    frames, scene_manifest = load_scene(manifest)
    logger.info("loaded %d frames from %s", len(frames), manifest)

    pooled = None
    if all(fs.global_feature for fs in scene_manifest.frames):
        pooled = np.vstack(
            [load_global_feature(fs.global_feature)
             for fs in scene_manifest.frames]
        )
        logger.info("using precomputed global features")

    result = register_scene(frames, cfg, pooled_features=pooled)
    paths = write_scene_report(out, result, units=scene_manifest.units)
    click.echo(
        f"registered {result.n_registered}/{len(frames)} frames "
        f"(order {result.order}); report in {paths['result']}"
    )
    if result.failed:
        logger.warning("frames flagged as failed: %s", list(result.failed))
        return 2
    return 0


@cli.command()
@click.argument("frame_a", type=click.Path(exists=True, dir_okay=False))
@click.argument("frame_b", type=click.Path(exists=True, dir_okay=False))
@_pipeline_options
def pairwise(frame_a, frame_b, **flags):
    """Align FRAME_A onto FRAME_B (debug path, no meta-shape).

    Each argument is a keypoint PLY; the descriptor file is found by
    swapping the extension for .imrd.
    """
    cfg = _build_config(**flags)

    def _load(path, fid):
        p = Path(path)
        return load_frame(
            FrameFileSet(keypoints=p, descriptors=p.with_suffix(".imrd")),
            frame_id=fid,
        )

    a, b = _load(frame_a, 0), _load(frame_b, 1)
    est = register_pair(a, b, cfg)
    doc = {
        "config": asdict(cfg),
        "succeeded": est.succeeded,
        "inlier_count": est.inlier_count,
        "transform": (
            [float(v) for v in est.transform.matrix().ravel()]
            if est.succeeded
            else None
        ),
    }
    click.echo(json.dumps(doc, indent=2, sort_keys=True))
    return 0 if est.succeeded else 2


@cli.command("eval")
@click.option("--pred", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Predicted poses (id + 16 floats per line).")
@click.option("--gt", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Ground-truth poses in the same format.")
@click.option("--overlap-graph", type=click.Path(exists=True, dir_okay=False),
              help="Overlap matrix JSON; only pairs above 0.1 are scored.")
@click.option("--out", type=click.Path(file_okay=False),
              help="Also write report.json, tables, and the eCDF figure.")
def eval_cmd(pred, gt, overlap_graph, out):
    """Score predicted poses against ground truth."""
    predicted = load_poses(pred)
    truth = load_poses(gt)

    if overlap_graph:
        ids, overlap = load_overlap_graph(overlap_graph)
        index_pairs = pairs_above_overlap(overlap)
        pairs = [(ids[i], ids[j]) for i, j in index_pairs]
    else:
        ids = sorted(truth)
        pairs = [
            (ids[i], ids[j])
            for i in range(len(ids))
            for j in range(i + 1, len(ids))
        ]
    if not pairs:
        raise RegistrationError("no frame pairs to evaluate")

    full_pred = {fid: predicted.get(fid) for fid in truth}
    report = evaluate_poses(full_pred, truth, pairs)
    doc = error_report_document(report)
    click.echo(json.dumps(doc, indent=2, sort_keys=True))
    if out:
        paths = write_eval_report(out, report)
        logger.info("eval report written to %s", paths["report"])
    return 0


@cli.command()
@click.option("--config", "config_path",
              type=click.Path(exists=True, dir_okay=False),
              help="JSON overriding scene-generator defaults.")
@click.option("--out", required=True, type=click.Path(file_okay=False),
              help="Directory for frames, manifest, and ground truth.")
@click.option("--seed", type=int, default=None,
              help="Override the generator seed.")
def synth(config_path, out, seed):
    """Generate a synthetic corridor scene on disk."""
    overrides = {}
    if config_path:
        overrides = json.loads(Path(config_path).read_text(encoding="utf-8"))
        known = {f.name for f in fields(SynthConfig)}
        unknown = set(overrides) - known
        if unknown:
            raise RegistrationError(
                f"unknown scene-generator keys: {sorted(unknown)}"
            )
        if "overlap" in overrides and isinstance(overrides["overlap"], list):
            overrides["overlap"] = tuple(overrides["overlap"])
    cfg = SynthConfig(**overrides)
    if seed is not None:
        cfg = replace(cfg, seed=seed)

    scene = generate_scene(cfg)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)

    file_sets, ids = [], []
    for frame in scene.frames:
        kp = out_dir / f"frame_{frame.id:03d}.ply"
        dp = out_dir / f"frame_{frame.id:03d}.imrd"
        save_ply(kp, frame.keypoints)
        save_descriptors(dp, frame.descriptors)
        file_sets.append(FrameFileSet(keypoints=kp, descriptors=dp))
        ids.append(frame.id)

    gt_path = out_dir / "gt_poses.txt"
    save_poses(gt_path, {f.id: f.gt_pose for f in scene.frames})
    overlap_path = out_dir / "overlap.json"
    save_overlap_graph(overlap_path, ids, scene.overlap)
    manifest_path = out_dir / "manifest.json"
    save_manifest(
        manifest_path,
        SceneManifest(
            frames=file_sets,
            frame_ids=ids,
            gt_poses=gt_path,
            overlap_graph=overlap_path,
        ),
    )

    echo = {"config": asdict(cfg), "frames": len(scene.frames),
            "manifest": str(manifest_path)}
    (out_dir / "synth_config.json").write_text(
        json.dumps({"config": asdict(cfg)}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    click.echo(json.dumps(echo, indent=2, sort_keys=True))
    return 0


def run_cli(argv=None) -> int:
    """Run the CLI programmatically; returns the process exit code."""
    _configure_logging()
    try:
        rv = cli.main(args=argv, standalone_mode=False)
        return rv if isinstance(rv, int) else 0
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.UsageError as exc:
        exc.show(file=sys.stderr)
        return 1
    except click.ClickException as exc:
        exc.show(file=sys.stderr)
        return 1
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except RegistrationError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except FileNotFoundError as exc:
        click.echo(f"error: file not found: {exc.filename}", err=True)
        return 1
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
