"""Transform refinement by averaging per-frame re-estimates.

A freshly estimated frame-to-meta transform is cross-checked against
every frame already merged into the meta-shape: each sufficiently
overlapping frame contributes its own rigid re-estimate, and the
contributions are fused by a weighted geometric median on rotations and
weighted least squares on translations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import DegenerateGeometryError
from .geometry import Frame, MetaShape, Pose, project_so3, transform_points, vec_inv, vec

__all__ = [
    "ObservedTransform",
    "RefinementConfig",
    "overlap_ratio",
    "procrustes",
    "rotation_average",
    "translation_average",
    "refine_transform",
]


@dataclass(frozen=True, eq=False)
class ObservedTransform:
    """One re-estimate of the frame-to-meta transform, with its weight."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)
    weight: float

    def __post_init__(self):
        if self.weight < 0.0:
            raise ValueError("observation weight must be nonnegative")


@dataclass(frozen=True)
class RefinementConfig:
    tau: float = 0.07
    overlap_threshold: float = 0.30
    min_pairs: int = 3
    max_iterations: int = 10
    epsilon: float = 1e-3

    def __post_init__(self):
        if self.tau <= 0.0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.overlap_threshold < 1.0:
            raise ValueError("overlap threshold must be in [0, 1)")


def overlap_ratio(points_a, points_b, transform: Pose, tau: float) -> float:
    """Fraction of points with a close counterpart across both sets.

    ``transform`` maps ``points_a`` into the coordinates of ``points_b``.
    A point counts when its nearest neighbor on the other side lies
    strictly within ``tau``; the two directional counts are summed and
    divided by the total number of points.
    """
    if tau <= 0.0:
        raise ValueError("tau must be positive")
    a = np.asarray(points_a, dtype=np.float64)
    b = np.asarray(points_b, dtype=np.float64)
    total = a.shape[0] + b.shape[0]
    if total == 0:
        raise ValueError("overlap of two empty sets is undefined")
    if a.shape[0] == 0 or b.shape[0] == 0:
        return 0.0
    mapped = transform_points(transform, a)
    d_ab, _ = cKDTree(b).query(mapped)
    d_ba, _ = cKDTree(mapped).query(b)
    return float((np.sum(d_ab < tau) + np.sum(d_ba < tau)) / total)


def procrustes(source, target, weights=None) -> Pose:
    """Weighted least-squares rigid transform mapping source onto target.

    Minimizes sum(w_i * ||R s_i + t - q_i||^2). Raises
    DegenerateGeometryError when fewer than three pairs are given or the
    pairs do not pin down a rotation (collinear points).
    """
    src = np.asarray(source, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    if src.shape != tgt.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("source and target must both be (n, 3)")
    n = src.shape[0]
    if n < 3:
        raise DegenerateGeometryError(f"need at least 3 pairs, got {n}")
    if weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (n,) or np.any(w < 0.0):
            raise ValueError("weights must be (n,) and nonnegative")
        total = w.sum()
        if total <= 0.0:
            raise ValueError("weights must not all be zero")
        w = w / total

    mu_s = w @ src
    mu_t = w @ tgt
    h = (src - mu_s).T @ ((tgt - mu_t) * w[:, None])
    u, s, vt = np.linalg.svd(h)
    if s[1] <= 1e-12 * max(s[0], 1e-300):
        raise DegenerateGeometryError("point pairs do not determine a rotation")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return Pose(r, mu_t - r @ mu_s)


def rotation_average(
    initial: np.ndarray,
    observations: list[ObservedTransform],
    max_iterations: int = 10,
    epsilon: float = 1e-3,
) -> np.ndarray:
    """Weighted geometric median of observed rotations.

    Runs Weiszfeld iterations on the flattened rotation matrices,
    starting from ``initial``, and projects the fixed point back onto a
    valid rotation. When the iterate lands exactly on an observation the
    median is that observation and it is returned directly.
    """
    if not observations:
        raise ValueError("rotation averaging needs at least one observation")
    obs = np.stack([vec(o.rotation) for o in observations])
    w = np.array([o.weight for o in observations], dtype=np.float64)
    if w.sum() <= 0.0:
        raise ValueError("at least one observation weight must be positive")

    s = vec(np.asarray(initial, dtype=np.float64))
    for _ in range(max_iterations):
        v = obs - s
        d = np.linalg.norm(v, axis=1)
        hit = np.flatnonzero(d < 1e-12)
        if hit.size:
            return np.array(observations[int(hit[0])].rotation, dtype=np.float64)
        inv = w / d
        s_next = s + (inv @ v) / inv.sum()
        step = float(np.linalg.norm(s_next - s))
        s = s_next
        if step < epsilon:
            break
    return project_so3(vec_inv(s))


def translation_average(
    rotation: np.ndarray, observations: list[ObservedTransform]
) -> np.ndarray:
    """Weighted least-squares translation consistent with the rotation.

    Each observation constrains R_i @ R.T @ t ~ t_i; the normal
    equations of the stacked weighted system are solved directly.
    """
    if not observations:
        raise ValueError("translation averaging needs at least one observation")
    r_bar = np.asarray(rotation, dtype=np.float64)
    a = np.vstack([o.rotation @ r_bar.T for o in observations])
    b = np.concatenate([o.translation for o in observations])
    w = np.repeat([o.weight for o in observations], 3)
    if w.sum() <= 0.0:
        raise ValueError("at least one observation weight must be positive")
    atw = a.T * w
    return np.linalg.solve(atw @ a, atw @ b)


def _mutual_pairs_within(a: np.ndarray, b: np.ndarray, tau: float) -> np.ndarray:
    """Indices (k, 2) of mutual spatial nearest neighbors closer than tau."""
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((0, 2), dtype=np.int64)
    d_ab, j_ab = cKDTree(b).query(a)
    _, i_ba = cKDTree(a).query(b)
    ai = np.flatnonzero((i_ba[j_ab] == np.arange(a.shape[0])) & (d_ab < tau))
    return np.column_stack([ai, j_ab[ai]])


def gather_observations(
    frame: Frame, meta: MetaShape, estimate: Pose, cfg: RefinementConfig
) -> list[ObservedTransform]:
    """One rigid-fit observation per merged frame the new frame overlaps.

    Each merged frame's original keypoints are mapped through its stored
    pose; if the incoming frame overlaps it strongly enough, mutual
    nearest neighbors under the initial estimate become pairs for a
    weighted rigid re-fit whose weight is the overlap ratio.
    """
    mapped_frame = transform_points(estimate, frame.keypoints)
    observations: list[ObservedTransform] = []
    for j in meta.merged_ids:
        mapped_j = transform_points(meta.frame_poses[j], meta.frame_keypoints[j])
        o_j = overlap_ratio(frame.keypoints, mapped_j, estimate, cfg.tau)
        if o_j <= cfg.overlap_threshold:
            continue
        pairs = _mutual_pairs_within(mapped_frame, mapped_j, cfg.tau)
        if pairs.shape[0] < cfg.min_pairs:
            continue
        try:
            fit = procrustes(frame.keypoints[pairs[:, 0]], mapped_j[pairs[:, 1]])
        except DegenerateGeometryError:
            continue
        observations.append(ObservedTransform(fit.rotation, fit.translation, o_j))
    return observations


def resolve_observations(
    estimate: Pose, observations: list[ObservedTransform], cfg: RefinementConfig
) -> Pose:
    """Collapse per-frame observations into one transform.

    Two or more observations are averaged, a single one is adopted as
    is, and none at all leaves the initial estimate untouched (the very
    same object, so callers can detect the no-op).
    """
    if not observations:
        return estimate
    if len(observations) == 1:
        return Pose(observations[0].rotation, observations[0].translation)
    r_bar = rotation_average(
        estimate.rotation, observations, cfg.max_iterations, cfg.epsilon
    )
    return Pose(r_bar, translation_average(r_bar, observations))


def refine_transform(
    frame: Frame, meta: MetaShape, estimate: Pose, cfg: RefinementConfig
) -> Pose:
    """Refine a frame-to-meta transform against each merged frame."""
    return resolve_observations(
        estimate, gather_observations(frame, meta, estimate, cfg), cfg
    )
