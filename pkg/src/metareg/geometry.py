"""Rigid-motion algebra and the shared geometric data model.

All rotations are stored as full 3x3 matrices and re-projected onto SO(3)
on construction, so long chains of compositions stay orthonormal. Lengths
are unitless scene units throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DegenerateGeometryError

__all__ = [
    "Pose",
    "Frame",
    "MetaPoint",
    "MetaShape",
    "compose",
    "invert",
    "vec",
    "vec_inv",
    "project_so3",
    "transform_points",
]

_ORTHO_TOL = 1e-9
_DESC_NORM_TOL = 1e-5


def project_so3(m: np.ndarray) -> np.ndarray:
    """Return the rotation nearest to ``m`` in Frobenius norm.

    Uses the SVD projection with the sign of the last singular vector
    corrected so the result has determinant +1.

    Raises DegenerateGeometryError when two singular values vanish, in
    which case the nearest rotation is not unique.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got shape {m.shape}")
    u, s, vt = np.linalg.svd(m)
    if s[1] <= 1e-12 * max(s[0], 1e-300):
        raise DegenerateGeometryError(
            "matrix has two vanishing singular values; nearest rotation is undefined"
        )
    d = np.sign(np.linalg.det(u @ vt))
    r = (u * np.array([1.0, 1.0, d])) @ vt
    return r


def vec(m: np.ndarray) -> np.ndarray:
    """Column-stacking vectorization of a 3x3 matrix into a 9-vector."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got shape {m.shape}")
    return m.reshape(9, order="F").copy()


def vec_inv(v: np.ndarray) -> np.ndarray:
    """Inverse of :func:`vec`: rebuild the 3x3 matrix from a 9-vector."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (9,):
        raise ValueError(f"expected a 9-vector, got shape {v.shape}")
    return v.reshape(3, 3, order="F").copy()


@dataclass(frozen=True, eq=False)
class Pose:
    """A rigid transform: ``p -> rotation @ p + translation``.

    The rotation is re-projected onto SO(3) on construction, which keeps
    chains of thousands of composed poses orthonormal to ~1e-12.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = project_so3(np.asarray(self.rotation, dtype=np.float64))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(t)):
            raise ValueError("pose entries must be finite")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        """Build from a 4x4 homogeneous matrix."""
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got shape {m.shape}")
        return Pose(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        """Return the 4x4 homogeneous matrix (bottom row 0 0 0 1)."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Apply the transform to one point (3,) or a batch (n, 3)."""
        return transform_points(self, points)

    def is_close(self, other: "Pose", tol: float = 1e-9) -> bool:
        return (
            np.linalg.norm(self.rotation - other.rotation) <= tol
            and np.linalg.norm(self.translation - other.translation) <= tol
        )


def transform_points(pose: Pose, points: np.ndarray) -> np.ndarray:
    """Apply ``pose`` to an (n, 3) array (or a single 3-vector)."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    out = pts @ pose.rotation.T + pose.translation
    return out[0] if single else out


def compose(a: Pose, b: Pose) -> Pose:
    """Composition ``a after b``: (a o b)(p) = a(b(p))."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(t: Pose) -> Pose:
    """Inverse transform: invert(t) o t is the identity."""
    rt = t.rotation.T
    return Pose(rt, -rt @ t.translation)


@dataclass(frozen=True, eq=False)
class Frame:
    """One scan: keypoints with unit-norm local descriptors.

    keypoints are (n, 3) in frame-local coordinates; descriptors are
    (n, d) with L2 norm 1 per row. ``gt_pose`` is optional ground truth
    in the reported absolute-pose convention.
    """

    id: int
    keypoints: np.ndarray
    descriptors: np.ndarray
    gt_pose: Pose | None = None

    def __post_init__(self):
        kp = np.ascontiguousarray(self.keypoints, dtype=np.float64)
        desc = np.ascontiguousarray(self.descriptors, dtype=np.float64)
        if kp.ndim != 2 or kp.shape[1] != 3:
            raise ValueError(f"keypoints must be (n, 3), got {kp.shape}")
        if desc.ndim != 2:
            raise ValueError(f"descriptors must be (n, d), got {desc.shape}")
        if kp.shape[0] != desc.shape[0] or kp.shape[0] < 1:
            raise ValueError(
                f"keypoint count {kp.shape[0]} and descriptor count "
                f"{desc.shape[0]} must match and be >= 1"
            )
        norms = np.linalg.norm(desc, axis=1)
        if np.any(np.abs(norms - 1.0) > _DESC_NORM_TOL):
            worst = float(np.max(np.abs(norms - 1.0)))
            raise ValueError(
                f"descriptors must be unit L2 norm (worst deviation {worst:.2e})"
            )
        kp.setflags(write=False)
        desc.setflags(write=False)
        object.__setattr__(self, "keypoints", kp)
        object.__setattr__(self, "descriptors", desc)

    def __len__(self) -> int:
        return self.keypoints.shape[0]


@dataclass(frozen=True)
class MetaPoint:
    """Read-only view of one merged point of the meta-shape."""

    position: np.ndarray
    descriptor: np.ndarray
    coverage: int
    origin_frame: int


@dataclass(eq=False)
class MetaShape:
    """The growing registered model.

    Point data is stored densely: positions (n, 3) in meta coordinates,
    descriptors (n, d), per-point coverage counts and origin frame ids.
    ``frame_poses`` maps each merged frame id to its frame-local -> meta
    transform; ``frame_keypoints`` retains the original (untrimmed)
    keypoints of every merged frame, which the refinement stage needs
    even after sampling discards meta points.
    """

    positions: np.ndarray
    descriptors: np.ndarray
    coverage: np.ndarray
    origin_frames: np.ndarray
    frame_poses: dict[int, Pose] = field(default_factory=dict)
    merged_ids: list[int] = field(default_factory=list)
    frame_keypoints: dict[int, np.ndarray] = field(default_factory=dict)

    @staticmethod
    def from_seed(frame: Frame) -> "MetaShape":
        """Initialize from the seed frame; its pose is the identity."""
        n = len(frame)
        return MetaShape(
            positions=frame.keypoints.copy(),
            descriptors=frame.descriptors.copy(),
            coverage=np.ones(n, dtype=np.int64),
            origin_frames=np.full(n, frame.id, dtype=np.int64),
            frame_poses={frame.id: Pose.identity()},
            merged_ids=[frame.id],
            frame_keypoints={frame.id: frame.keypoints.copy()},
        )

    # Duck-type the matching interface shared with Frame.
    @property
    def keypoints(self) -> np.ndarray:
        return self.positions

    def point(self, i: int) -> MetaPoint:
        return MetaPoint(
            position=self.positions[i].copy(),
            descriptor=self.descriptors[i].copy(),
            coverage=int(self.coverage[i]),
            origin_frame=int(self.origin_frames[i]),
        )

    def __len__(self) -> int:
        return self.positions.shape[0]

    def validate(self) -> None:
        """Check structural invariants; raises ValueError on violation."""
        if np.any(self.coverage < 1):
            raise ValueError("coverage must be >= 1 for every meta point")
        merged = set(self.merged_ids)
        if len(merged) != len(self.merged_ids):
            raise ValueError("merged_ids contains duplicates")
        origins = set(int(o) for o in self.origin_frames)
        if not origins <= merged:
            raise ValueError("every origin frame must appear in merged_ids")
        if set(self.frame_poses) != merged:
            raise ValueError("frame_poses must hold exactly one pose per merged id")
