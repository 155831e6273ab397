"""Meta-shape point maintenance when a frame is merged.

Redundant points (mutual nearest neighbors within tau of an existing
meta point) are resolved by reservoir sampling so that, after any
number of merges, each stored point is a uniform draw from every
observation of that location. Two simpler strategies, plain
concatenation and coverage-weighted averaging, exist for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Frame, MetaShape, Pose, transform_points

__all__ = [
    "RedundantPair",
    "MERGE_MODES",
    "find_redundant_pairs",
    "keep_new_probability",
    "reservoir_merge",
    "alt_merge",
]

MERGE_MODES = ("reservoir", "concat", "mean")


@dataclass(frozen=True)
class RedundantPair:
    """A meta point and an incoming frame point observing the same spot."""

    meta_index: int
    frame_index: int
    distance: float


def _mutual_pairs(meta_pts: np.ndarray, new_pts: np.ndarray, tau: float):
    n_meta, n_new = meta_pts.shape[0], new_pts.shape[0]
    if n_meta == 0 or n_new == 0:
        return []
    if n_meta * n_new <= 4096:
        # Tree construction costs more than it saves on small clouds.
        d = np.linalg.norm(meta_pts[:, None, :] - new_pts[None, :, :], axis=2)
        j_mn = np.argmin(d, axis=1)
        i_nm = np.argmin(d, axis=0)
        d_mn = d[np.arange(n_meta), j_mn]
    else:
        d_mn, j_mn = cKDTree(new_pts).query(meta_pts)
        _, i_nm = cKDTree(meta_pts).query(new_pts)
    meta_idx = np.flatnonzero((i_nm[j_mn] == np.arange(n_meta)) & (d_mn < tau))
    return [
        RedundantPair(int(i), int(j_mn[i]), float(d_mn[i])) for i in meta_idx
    ]


def find_redundant_pairs(
    meta: MetaShape, frame: Frame, pose: Pose, tau: float
) -> list[RedundantPair]:
    """Mutual spatial nearest neighbors strictly closer than tau.

    ``pose`` carries the frame's keypoints into meta coordinates first.
    Pairs come back sorted by ascending meta index, which fixes the
    order in which the merge consumes random draws; mutuality means no
    index appears on either side twice.
    """
    if tau <= 0.0:
        raise ValueError("tau must be positive")
    return _mutual_pairs(
        meta.positions, transform_points(pose, frame.keypoints), tau
    )


def keep_new_probability(coverage: int) -> float:
    """Chance that the incoming observation replaces the stored point.

    A stored point with coverage c stands for c observations; the new
    one is the (c+1)-th, so it wins with probability 1/(c+1). That keeps
    the stored point uniform over all observations seen so far.
    """
    if coverage < 1:
        raise ValueError("coverage of a stored point is at least 1")
    return 1.0 / (coverage + 1.0)


def _merged_bookkeeping(meta: MetaShape, frame: Frame, pose: Pose) -> dict:
    if frame.id in meta.frame_poses:
        raise ValueError(f"frame {frame.id} is already part of the meta-shape")
    poses = dict(meta.frame_poses)
    poses[frame.id] = pose
    keypoints = dict(meta.frame_keypoints)
    keypoints[frame.id] = frame.keypoints
    return {
        "frame_poses": poses,
        "merged_ids": list(meta.merged_ids) + [frame.id],
        "frame_keypoints": keypoints,
    }


def reservoir_merge(
    meta: MetaShape,
    frame: Frame,
    pose: Pose,
    tau: float,
    rng,
) -> MetaShape:
    """Merge a frame into the meta-shape with reservoir replacement.

    ``rng`` is a numpy Generator or a seed for one. Each redundant pair
    spends exactly one draw, in ascending meta-index order; the survivor
    keeps the combined coverage. Frame points without a counterpart are
    appended with coverage 1. The input meta-shape is left untouched;
    merging a frame that is already present is an error.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    mapped = transform_points(pose, frame.keypoints)
    pairs = _mutual_pairs(meta.positions, mapped, tau)

    positions = meta.positions.copy()
    descriptors = meta.descriptors.copy()
    coverage = meta.coverage.copy()
    origins = meta.origin_frames.copy()
    paired = np.zeros(len(frame), dtype=bool)

    for pair in pairs:
        paired[pair.frame_index] = True
        c = int(coverage[pair.meta_index])
        if rng.random() < keep_new_probability(c):
            positions[pair.meta_index] = mapped[pair.frame_index]
            descriptors[pair.meta_index] = frame.descriptors[pair.frame_index]
            origins[pair.meta_index] = frame.id
        coverage[pair.meta_index] = c + 1

    fresh = np.flatnonzero(~paired)
    return MetaShape(
        positions=np.vstack([positions, mapped[fresh]]),
        descriptors=np.vstack([descriptors, frame.descriptors[fresh]]),
        coverage=np.concatenate([coverage, np.ones(fresh.size, dtype=np.int64)]),
        origin_frames=np.concatenate(
            [origins, np.full(fresh.size, frame.id, dtype=np.int64)]
        ),
        **_merged_bookkeeping(meta, frame, pose),
    )


def alt_merge(
    meta: MetaShape,
    frame: Frame,
    pose: Pose,
    tau: float,
    mode: str,
    rng: np.random.Generator | None = None,
) -> MetaShape:
    """Non-reservoir merge strategies, for comparison runs.

    ``concat`` appends every frame point regardless of redundancy.
    ``mean`` folds each redundant pair into a coverage-weighted running
    average (descriptors are averaged the same way, then rescaled to
    unit length) and appends the rest.
    """
    if mode == "reservoir":
        if rng is None:
            raise ValueError("reservoir mode needs a random generator")
        return reservoir_merge(meta, frame, pose, tau, rng)
    if mode not in ("concat", "mean"):
        raise ValueError(f"unknown merge mode {mode!r}")

    mapped = transform_points(pose, frame.keypoints)
    book = _merged_bookkeeping(meta, frame, pose)

    if mode == "concat":
        return MetaShape(
            positions=np.vstack([meta.positions, mapped]),
            descriptors=np.vstack([meta.descriptors, frame.descriptors]),
            coverage=np.concatenate(
                [meta.coverage, np.ones(len(frame), dtype=np.int64)]
            ),
            origin_frames=np.concatenate(
                [meta.origin_frames, np.full(len(frame), frame.id, dtype=np.int64)]
            ),
            **book,
        )

    pairs = _mutual_pairs(meta.positions, mapped, tau)
    positions = meta.positions.copy()
    descriptors = meta.descriptors.copy()
    coverage = meta.coverage.copy()
    origins = meta.origin_frames.copy()
    paired = np.zeros(len(frame), dtype=bool)
    for pair in pairs:
        paired[pair.frame_index] = True
        c = int(coverage[pair.meta_index])
        positions[pair.meta_index] = (
            c * positions[pair.meta_index] + mapped[pair.frame_index]
        ) / (c + 1)
        blended = (
            c * descriptors[pair.meta_index] + frame.descriptors[pair.frame_index]
        ) / (c + 1)
        norm = np.linalg.norm(blended)
        if norm > 0.0:
            blended = blended / norm
        descriptors[pair.meta_index] = blended
        coverage[pair.meta_index] = c + 1

    fresh = np.flatnonzero(~paired)
    return MetaShape(
        positions=np.vstack([positions, mapped[fresh]]),
        descriptors=np.vstack([descriptors, frame.descriptors[fresh]]),
        coverage=np.concatenate([coverage, np.ones(fresh.size, dtype=np.int64)]),
        origin_frames=np.concatenate(
            [origins, np.full(fresh.size, frame.id, dtype=np.int64)]
        ),
        **book,
    )
