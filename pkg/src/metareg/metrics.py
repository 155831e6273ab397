"""Registration quality metrics.

Errors are measured between relative transforms recomputed from absolute
poses, so any global gauge shared by all predictions cancels out. A pair
whose prediction is missing scores infinite error and can never be
recalled, but it still counts in every denominator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, compose, invert

__all__ = [
    "ROTATION_ECDF_THRESHOLDS_DEG",
    "TRANSLATION_ECDF_THRESHOLDS",
    "RECALL_MAX_ROTATION_DEG",
    "RECALL_MAX_TRANSLATION",
    "rotation_error",
    "translation_error",
    "ecdf",
    "registration_recall",
    "ErrorReport",
    "evaluate_poses",
    "pairs_above_overlap",
]

ROTATION_ECDF_THRESHOLDS_DEG = (3.0, 5.0, 10.0, 30.0, 45.0)
TRANSLATION_ECDF_THRESHOLDS = (0.05, 0.10, 0.25, 0.50, 0.75)
RECALL_MAX_ROTATION_DEG = 15.0
RECALL_MAX_TRANSLATION = 0.2


def rotation_error(pred: np.ndarray, gt: np.ndarray) -> float:
    """Geodesic angle in radians between two rotation matrices.

    arccos((trace(pred^T gt) - 1) / 2), with the argument clamped so
    nearly-identical inputs cannot produce NaN.
    """
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != (3, 3) or g.shape != (3, 3):
        raise ValueError("rotation_error expects two 3x3 matrices")
    arg = (np.trace(p.T @ g) - 1.0) / 2.0
    return float(np.arccos(np.clip(arg, -1.0, 1.0)))


def translation_error(pred: np.ndarray, gt: np.ndarray) -> float:
    """Euclidean distance between two translation vectors."""
    p = np.asarray(pred, dtype=np.float64).reshape(3)
    g = np.asarray(gt, dtype=np.float64).reshape(3)
    return float(np.linalg.norm(p - g))


def ecdf(errors, thresholds) -> np.ndarray:
    """Fraction of errors at or below each threshold.

    Thresholds must be ascending; the output is then nondecreasing.
    Infinite errors (failed pairs) stay in the denominator.
    """
    e = np.asarray(errors, dtype=np.float64)
    t = np.asarray(thresholds, dtype=np.float64)
    if t.size and np.any(np.diff(t) < 0.0):
        raise ValueError("thresholds must be ascending")
    if e.size == 0:
        raise ValueError("no errors to summarize")
    return (e[None, :] <= t[:, None]).mean(axis=1)


def registration_recall(
    rotation_errors,
    translation_errors,
    max_rotation: float = np.deg2rad(RECALL_MAX_ROTATION_DEG),
    max_translation: float = RECALL_MAX_TRANSLATION,
) -> float:
    """Fraction of pairs strictly under both error bounds.

    ``rotation_errors`` and ``max_rotation`` are radians.
    """
    re = np.asarray(rotation_errors, dtype=np.float64)
    te = np.asarray(translation_errors, dtype=np.float64)
    if re.shape != te.shape or re.ndim != 1:
        raise ValueError("error arrays must be 1-d and the same length")
    if re.size == 0:
        raise ValueError("recall over zero pairs is undefined")
    return float(np.mean((re < max_rotation) & (te < max_translation)))


@dataclass(frozen=True, eq=False)
class ErrorReport:
    """Per-pair errors plus their summary statistics.

    Rotation quantities are radians. Summary means and medians cover
    only the finite entries; ``failed_pairs`` counts the rest.
    """

    pairs: list
    rotation_errors: np.ndarray
    translation_errors: np.ndarray
    recall: float
    rotation_thresholds: np.ndarray = field(
        default_factory=lambda: np.deg2rad(ROTATION_ECDF_THRESHOLDS_DEG)
    )
    translation_thresholds: np.ndarray = field(
        default_factory=lambda: np.asarray(TRANSLATION_ECDF_THRESHOLDS)
    )

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    @property
    def failed_pairs(self) -> int:
        return int(np.sum(~np.isfinite(self.rotation_errors)))

    def _finite(self, x: np.ndarray) -> np.ndarray:
        return x[np.isfinite(x)]

    @property
    def mean_rotation_error(self) -> float:
        ok = self._finite(self.rotation_errors)
        return float(np.mean(ok)) if ok.size else float("nan")

    @property
    def median_rotation_error(self) -> float:
        ok = self._finite(self.rotation_errors)
        return float(np.median(ok)) if ok.size else float("nan")

    @property
    def mean_translation_error(self) -> float:
        ok = self._finite(self.translation_errors)
        return float(np.mean(ok)) if ok.size else float("nan")

    @property
    def median_translation_error(self) -> float:
        ok = self._finite(self.translation_errors)
        return float(np.median(ok)) if ok.size else float("nan")

    def rotation_ecdf(self) -> np.ndarray:
        return ecdf(self.rotation_errors, self.rotation_thresholds)

    def translation_ecdf(self) -> np.ndarray:
        return ecdf(self.translation_errors, self.translation_thresholds)


def evaluate_poses(
    predicted: dict[int, Pose | None],
    ground_truth: dict[int, Pose],
    pairs,
) -> ErrorReport:
    """Score predicted absolute poses against ground truth over pairs.

    For each pair (i, j) the relative transform pose_j o pose_i^{-1} is
    formed on both sides and compared. A pair whose prediction is
    missing or None on either end gets infinite errors.
    """
    pair_list = [(int(i), int(j)) for i, j in pairs]
    if not pair_list:
        raise ValueError("no pairs to evaluate")
    re = np.empty(len(pair_list))
    te = np.empty(len(pair_list))
    for k, (i, j) in enumerate(pair_list):
        if i not in ground_truth or j not in ground_truth:
            raise ValueError(f"ground truth is missing frame {i} or {j}")
        pi = predicted.get(i)
        pj = predicted.get(j)
        if pi is None or pj is None:
            re[k] = np.inf
            te[k] = np.inf
            continue
        rel_pred = compose(pj, invert(pi))
        rel_gt = compose(ground_truth[j], invert(ground_truth[i]))
        re[k] = rotation_error(rel_pred.rotation, rel_gt.rotation)
        te[k] = translation_error(rel_pred.translation, rel_gt.translation)
    return ErrorReport(
        pairs=pair_list,
        rotation_errors=re,
        translation_errors=te,
        recall=registration_recall(re, te),
    )


def pairs_above_overlap(overlap: np.ndarray, threshold: float = 0.1) -> list:
    """Index pairs (i < j) whose overlap entry strictly exceeds threshold."""
    m = np.asarray(overlap, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("overlap must be a square matrix")
    n = m.shape[0]
    return [(i, j) for i in range(n) for j in range(i + 1, n) if m[i, j] > threshold]
