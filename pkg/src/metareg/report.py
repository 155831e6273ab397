"""Rendering run results to disk: JSON, delimited tables, and figures.

The registration report keeps wall-clock numbers out of ``result.json``
so that two runs with the same seed produce byte-identical result files;
timings land in a ``timings.csv`` sidecar instead.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .fileio import save_meta_ply, save_poses  # noqa: E402
from .metrics import ErrorReport  # noqa: E402
from .pipeline import SceneResult  # noqa: E402


def _config_echo(result: SceneResult) -> dict:
    return asdict(result.config)  # recurses into the nested RANSAC config


def _dump_json(path: Path, doc: dict) -> None:
    path.write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def scene_result_document(result: SceneResult, units: str = "meters") -> dict:
    """The serializable view of a SceneResult (no wall-clock content)."""
    return {
        "config": _config_echo(result),
        "units": units,
        "order": list(result.order),
        "failed": list(result.failed),
        "poses": {
            str(fid): [float(v) for v in pose.matrix().ravel()]
            for fid, pose in sorted(result.poses.items())
        },
        "steps": [
            {
                "frame_id": s.frame_id,
                "inlier_count": s.inlier_count,
                "n_observations": s.n_observations,
                "overlap_weights": [float(w) for w in s.overlap_weights],
            }
            for s in result.steps
        ],
    }


def write_scene_report(out_dir, result: SceneResult, units: str = "meters"):
    """Write result.json, poses.txt, meta_shape.ply, tables, and a figure.

    Returns the paths written, keyed by a short name.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "result": out / "result.json",
        "poses": out / "poses.txt",
        "meta": out / "meta_shape.ply",
        "order_log": out / "order_log.csv",
        "timings": out / "timings.csv",
        "figure": out / "fig_progress.png",
    }

    _dump_json(paths["result"], scene_result_document(result, units))
    save_poses(paths["poses"], result.poses)
    if result.meta is not None:
        save_meta_ply(paths["meta"], result.meta)

    with open(paths["order_log"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["step", "frame_id", "inlier_count", "n_observations",
             "overlap_weights"]
        )
        writer.writerow([0, result.order[0], "", "", ""])  # the seed frame
        for i, s in enumerate(result.steps, start=1):
            writer.writerow(
                [i, s.frame_id, s.inlier_count, s.n_observations,
                 ";".join(f"{w:.6f}" for w in s.overlap_weights)]
            )

    with open(paths["timings"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "frame_id", "seconds"])
        for i, (s, dt) in enumerate(
            zip(result.steps, result.durations), start=1
        ):
            writer.writerow([i, s.frame_id, f"{dt:.6f}"])

    _progress_figure(paths["figure"], result)
    return paths


def _progress_figure(path: Path, result: SceneResult) -> None:
    steps = np.arange(1, len(result.steps) + 1)
    ic = [s.inlier_count for s in result.steps]
    obs = [s.n_observations for s in result.steps]

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9.0, 3.6))
    if len(steps):
        ax1.plot(steps, ic, marker="o", color="tab:blue")
        labels = [str(s.frame_id) for s in result.steps]
        ax1.set_xticks(steps, labels)
    ax1.set_xlabel("merge step (frame id)")
    ax1.set_ylabel("inlier count")
    ax1.set_title("Geometric support per merge")
    ax1.grid(alpha=0.3)

    if len(steps):
        ax2.bar(steps, obs, color="tab:orange")
        ax2.set_xticks(steps, [str(s.frame_id) for s in result.steps])
    ax2.set_xlabel("merge step (frame id)")
    ax2.set_ylabel("refinement observations")
    ax2.set_title("Overlapping frames used in refinement")
    ax2.grid(alpha=0.3, axis="y")

    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def error_report_document(report: ErrorReport) -> dict:
    def _clean(values):
        return [
            (None if not np.isfinite(v) else float(v)) for v in values
        ]

    return {
        "config": {
            "rotation_thresholds_deg": [
                float(np.rad2deg(t)) for t in report.rotation_thresholds
            ],
            "translation_thresholds": [
                float(t) for t in report.translation_thresholds
            ],
        },
        "n_pairs": report.n_pairs,
        "failed_pairs": report.failed_pairs,
        "recall": float(report.recall),
        "mean_rotation_error_deg": _clean(
            [np.rad2deg(report.mean_rotation_error)]
        )[0],
        "median_rotation_error_deg": _clean(
            [np.rad2deg(report.median_rotation_error)]
        )[0],
        "mean_translation_error": _clean([report.mean_translation_error])[0],
        "median_translation_error": _clean(
            [report.median_translation_error]
        )[0],
        "pairs": [[int(i), int(j)] for i, j in report.pairs],
        "rotation_errors_deg": _clean(np.rad2deg(report.rotation_errors)),
        "translation_errors": _clean(report.translation_errors),
    }


def write_eval_report(out_dir, report: ErrorReport):
    """Write report.json, errors.csv, ecdf.csv, and the eCDF figure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "report": out / "report.json",
        "errors": out / "errors.csv",
        "ecdf": out / "ecdf.csv",
        "figure": out / "fig_ecdf.png",
    }

    _dump_json(paths["report"], error_report_document(report))

    with open(paths["errors"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_i", "frame_j", "rotation_error_deg",
                         "translation_error"])
        for (i, j), re_val, te_val in zip(
            report.pairs, report.rotation_errors, report.translation_errors
        ):
            writer.writerow([
                i, j,
                f"{np.rad2deg(re_val):.6f}" if np.isfinite(re_val) else "inf",
                f"{te_val:.6f}" if np.isfinite(te_val) else "inf",
            ])

    rot_cdf = report.rotation_ecdf()
    tr_cdf = report.translation_ecdf()
    with open(paths["ecdf"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "threshold", "fraction"])
        for t, v in zip(report.rotation_thresholds, rot_cdf):
            writer.writerow(["rotation_deg", f"{np.rad2deg(t):.6f}", f"{v:.6f}"])
        for t, v in zip(report.translation_thresholds, tr_cdf):
            writer.writerow(["translation", f"{t:.6f}", f"{v:.6f}"])

    _ecdf_figure(paths["figure"], report, rot_cdf, tr_cdf)
    return paths


def _ecdf_figure(path: Path, report: ErrorReport, rot_cdf, tr_cdf) -> None:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9.0, 3.6))

    rot_deg = np.rad2deg(np.asarray(report.rotation_thresholds))
    ax1.plot(rot_deg, rot_cdf, marker="o", drawstyle="steps-post",
             color="tab:blue")
    ax1.set_xlabel("rotation error threshold (deg)")
    ax1.set_ylabel("fraction of pairs")
    ax1.set_ylim(-0.02, 1.02)
    ax1.set_title("Rotation error eCDF")
    ax1.grid(alpha=0.3)

    ax2.plot(report.translation_thresholds, tr_cdf, marker="s",
             drawstyle="steps-post", color="tab:orange")
    ax2.set_xlabel("translation error threshold")
    ax2.set_ylabel("fraction of pairs")
    ax2.set_ylim(-0.02, 1.02)
    ax2.set_title("Translation error eCDF")
    ax2.grid(alpha=0.3)

    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
