"""Synthetic indoor scenes with exact ground truth.

The generator builds a corridor-shaped room (floor plus two walls, with
box clutter) out of points placed on a 2*tau grid, one point per grid
cell, then carves overlapping windows along the corridor and expresses
each window in its own frame under a random rigid motion. Descriptors
are deterministic hashes of the quantized world coordinates, so the same
physical point gets the same descriptor in every frame that sees it,
without any learned model. Keypoint noise, descriptor noise, and
descriptor outliers are controlled separately.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Frame, Pose, compose, invert, transform_points
from .refinement import overlap_ratio

__all__ = [
    "SynthConfig",
    "SyntheticScene",
    "hashed_descriptors",
    "generate_scene",
    "make_plane_bridged_scene",
]

_TAU = 0.07
_CELL = 2.0 * _TAU


# 64-bit finalizer with good avalanche behavior; constants are the
# standard splitmix64 ones.
def _mix(x: np.ndarray) -> np.ndarray:
    z = (x + np.uint64(0x9E3779B97F4A7C15)).astype(np.uint64)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def hashed_descriptors(
    points: np.ndarray, dim: int, salt: int, cell: float = _CELL
) -> np.ndarray:
    """Unit descriptors derived from quantized point coordinates.

    Points in the same grid cell map to the same descriptor; distinct
    cells decorrelate completely. ``salt`` reshuffles everything.
    """
    if dim < 2:
        raise ValueError("descriptor dimension must be at least 2")
    pts = np.asarray(points, dtype=np.float64)
    cells = np.floor(pts / cell).astype(np.int64).astype(np.uint64)
    h = _mix(np.uint64(salt % (1 << 64)) ^ cells[:, 0])
    h = _mix(h ^ cells[:, 1])
    h = _mix(h ^ cells[:, 2])
    lanes = (np.arange(1, dim + 1, dtype=np.uint64)) * np.uint64(0x9E3779B97F4A7C15)
    vals = _mix(h[:, None] ^ lanes[None, :])
    desc = (vals >> np.uint64(11)).astype(np.float64) * 2.0**-52 - 1.0
    norms = np.linalg.norm(desc, axis=1, keepdims=True)
    bad = norms[:, 0] <= 0.0
    if np.any(bad):
        desc[bad] = 0.0
        desc[bad, 0] = 1.0
        norms[bad] = 1.0
    return desc / norms


def _snap(level: float) -> float:
    """Nearest grid-cell center along one axis."""
    return (np.floor(level / _CELL) + 0.5) * _CELL


def _plane_grid(rng, const_axis, level, u_axis, u_lo, u_hi, v_axis, v_lo, v_hi):
    """Jittered points on an axis-aligned plane patch, one per cell.

    Grid centers sit at (k + 0.5) * cell and jitter stays within a
    quarter cell per axis, so every point remains inside its own cell
    and any two points are at least half a cell apart.
    """

    def centers(lo, hi):
        k_lo = int(np.floor(lo / _CELL))
        k_hi = int(np.floor(hi / _CELL)) + 1
        c = (np.arange(k_lo, k_hi) + 0.5) * _CELL
        return c[(c >= lo) & (c <= hi)]

    cu = centers(u_lo, u_hi)
    cv = centers(v_lo, v_hi)
    if cu.size == 0 or cv.size == 0:
        return np.zeros((0, 3))
    uu, vv = np.meshgrid(cu, cv, indexing="ij")
    pts = np.empty((uu.size, 3))
    pts[:, const_axis] = _snap(level)
    pts[:, u_axis] = uu.ravel()
    pts[:, v_axis] = vv.ravel()
    return pts + rng.uniform(-_TAU / 2.0, _TAU / 2.0, size=pts.shape)


def _box_shell(rng, x0, x1, y0, y1, z0, z1):
    """Grid points on the five visible faces of an axis-aligned box."""
    faces = [
        _plane_grid(rng, 2, z1, 0, x0, x1, 1, y0, y1),  # top
        _plane_grid(rng, 0, x0, 1, y0, y1, 2, z0, z1),
        _plane_grid(rng, 0, x1, 1, y0, y1, 2, z0, z1),
        _plane_grid(rng, 1, y0, 0, x0, x1, 2, z0, z1),
        _plane_grid(rng, 1, y1, 0, x0, x1, 2, z0, z1),
    ]
    return np.vstack(faces)


def _dedupe_by_cell(points: np.ndarray) -> np.ndarray:
    """Keep the first point of every occupied grid cell."""
    cells = np.floor(points / _CELL).astype(np.int64)
    _, first = np.unique(cells, axis=0, return_index=True)
    return points[np.sort(first)]


def _random_rotation(rng) -> np.ndarray:
    """Uniform random rotation from a normalized quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the generated scene.

    ``overlap`` is either one fraction shared by all consecutive window
    pairs or a schedule with one entry per pair; fractions must lie in
    (0, 1]. ``extent`` sets the room width and height as well as the
    window width; the corridor length follows from the schedule.
    """

    seed: int = 42
    n_frames: int = 8
    points_per_frame: int = 500
    overlap: float | tuple = 0.4
    noise_sigma: float = 0.01
    descriptor_dim: int = 32
    descriptor_noise: float = 0.02
    outlier_fraction: float = 0.05
    extent: float = 2.0

    def __post_init__(self):
        if self.n_frames < 2:
            raise ValueError("need at least 2 frames")
        if self.points_per_frame < 1:
            raise ValueError("points_per_frame must be positive")
        if self.noise_sigma < 0.0 or self.descriptor_noise < 0.0:
            raise ValueError("noise levels must be nonnegative")
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise ValueError("outlier fraction must be in [0, 1]")
        if self.extent <= 4.0 * _CELL:
            raise ValueError("extent too small for the sampling grid")
        if self.descriptor_dim < 2:
            raise ValueError("descriptor dimension must be at least 2")
        sched = self.overlap
        if np.isscalar(sched):
            sched = (float(sched),) * (self.n_frames - 1)
        else:
            sched = tuple(float(f) for f in sched)
        if len(sched) != self.n_frames - 1:
            raise ValueError(
                f"overlap schedule has {len(sched)} entries for "
                f"{self.n_frames} frames; expected {self.n_frames - 1}"
            )
        if any(not 0.0 < f <= 1.0 for f in sched):
            raise ValueError("overlap fractions must lie in (0, 1]")
        object.__setattr__(self, "overlap", sched)


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    """Frames with ground-truth poses plus the measured overlap graph."""

    frames: list
    overlap: np.ndarray  # (n, n), symmetric, zero diagonal
    windows: list  # (x_start, x_end) per frame, world coordinates


def _measured_overlap(frames: list) -> np.ndarray:
    n = len(frames)
    ov = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            rel = compose(frames[j].gt_pose, invert(frames[i].gt_pose))
            ov[i, j] = ov[j, i] = overlap_ratio(
                frames[i].keypoints, frames[j].keypoints, rel, _TAU
            )
    return ov


def generate_scene(cfg: SynthConfig) -> SyntheticScene:
    """Build the corridor scene described by ``cfg``.

    Deterministic: the same config always produces the same scene. Each
    frame's ``gt_pose`` maps world coordinates into that frame.
    """
    rng = np.random.default_rng(cfg.seed)
    w = cfg.extent
    steps = [w * (1.0 - f) for f in cfg.overlap]
    starts = np.concatenate([[0.0], np.cumsum(steps)])
    length = float(starts[-1] + w)
    windows = [(float(s), float(s + w)) for s in starts]

    wall_hi = _snap(cfg.extent - _CELL / 2.0)
    surfaces = [
        _plane_grid(rng, 2, _TAU, 0, 0.0, length, 1, 0.0, cfg.extent),  # floor
        _plane_grid(rng, 1, _TAU, 0, 0.0, length, 2, 0.0, cfg.extent),  # near wall
        _plane_grid(rng, 1, wall_hi, 0, 0.0, length, 2, 0.0, cfg.extent),  # far wall
    ]
    # one clutter box per window keeps every frame geometrically rich
    for s, e in windows:
        cx = rng.uniform(s + 0.3 * w, e - 0.3 * w)
        cy = rng.uniform(0.3 * cfg.extent, 0.7 * cfg.extent)
        sx, sy, sz = rng.uniform(0.12, 0.25, size=3) * cfg.extent
        surfaces.append(
            _box_shell(
                rng,
                cx - sx, cx + sx,
                cy - sy, cy + sy,
                3.0 * _CELL, 3.0 * _CELL + 2.0 * sz,
            )
        )
    world = _dedupe_by_cell(np.vstack(surfaces))

    x = world[:, 0]
    counts = [np.sum((x >= s) & (x < e)) for s, e in windows]
    mean_count = float(np.mean(counts))
    if mean_count > cfg.points_per_frame:
        keep = rng.random(world.shape[0]) < cfg.points_per_frame / mean_count
        world = world[keep]

    base_desc = hashed_descriptors(world, cfg.descriptor_dim, cfg.seed)

    frames = []
    for i, (s, e) in enumerate(windows):
        idx = np.flatnonzero((world[:, 0] >= s) & (world[:, 0] < e))
        if idx.size < 3:
            raise ValueError(
                f"window {i} holds only {idx.size} points; the overlap "
                "schedule or point budget is infeasible"
            )
        gt = Pose(_random_rotation(rng), rng.uniform(-cfg.extent, cfg.extent, 3))
        local = transform_points(gt, world[idx])
        if cfg.noise_sigma > 0.0:
            local = local + rng.normal(size=local.shape) * cfg.noise_sigma
        desc = base_desc[idx].copy()
        if cfg.descriptor_noise > 0.0:
            desc = desc + rng.normal(size=desc.shape) * cfg.descriptor_noise
        n_out = int(round(cfg.outlier_fraction * idx.size))
        if n_out:
            chosen = rng.choice(idx.size, size=n_out, replace=False)
            desc[chosen] = rng.normal(size=(n_out, cfg.descriptor_dim))
        norms = np.linalg.norm(desc, axis=1, keepdims=True)
        norms[norms <= 0.0] = 1.0
        frames.append(
            Frame(id=i, keypoints=local, descriptors=desc / norms, gt_pose=gt)
        )

    return SyntheticScene(
        frames=frames, overlap=_measured_overlap(frames), windows=windows
    )


def make_plane_bridged_scene(seed: int = 0) -> SyntheticScene:
    """Three frames whose adjacent views share only a featureless plane.

    The middle frame sees two small wall panels, one shared with each
    outer frame; the outer frames share a large box that the middle one
    does not see. Floor points all carry the same constant descriptor,
    so descriptor matching across two floor patches collapses to a
    single pair and pairwise registration of adjacent frames starves
    below any sensible inlier minimum. Registering the outer frames
    first makes both panels visible at once, which is exactly the regime
    incremental merging is built for. Noise-free and deterministic.
    """
    rng = np.random.default_rng(seed)
    w = 2.0
    windows = [(0.0, 2.0), (1.4, 3.4), (2.8, 4.8)]

    floor = _plane_grid(rng, 2, _TAU, 0, 0.0, 4.8, 1, 0.0, 1.4)
    panel_a = _plane_grid(rng, 1, 0.63, 0, 1.55, 2.0, 2, 0.3, 0.8)
    panel_b = _plane_grid(rng, 1, 0.63, 0, 2.95, 3.4, 2, 0.3, 0.8)
    box = _box_shell(rng, 2.03, 2.73, 0.35, 1.05, 3.0 * _CELL, 1.0)

    structured = _dedupe_by_cell(np.vstack([panel_a, panel_b, box]))
    n_a = panel_a.shape[0]
    n_b = panel_b.shape[0]
    panel_a = structured[:n_a]
    panel_b = structured[n_a:n_a + n_b]
    box = structured[n_a + n_b:]

    dim = 32
    desc_a = hashed_descriptors(panel_a, dim, seed)
    desc_b = hashed_descriptors(panel_b, dim, seed)
    desc_box = hashed_descriptors(box, dim, seed)
    flat = np.zeros(dim)
    flat[0] = 1.0

    def floor_slice(lo, hi):
        sel = (floor[:, 0] >= lo) & (floor[:, 0] < hi)
        pts = floor[sel]
        return pts, np.tile(flat, (pts.shape[0], 1))

    members = [
        floor_slice(*windows[0]) + (panel_a, desc_a) + (box, desc_box),
        floor_slice(*windows[1]) + (panel_a, desc_a) + (panel_b, desc_b),
        floor_slice(*windows[2]) + (panel_b, desc_b) + (box, desc_box),
    ]

    frames = []
    for i, parts in enumerate(members):
        pts = np.vstack(parts[0::2])
        desc = np.vstack(parts[1::2])
        gt = Pose(_random_rotation(rng), rng.uniform(-w, w, 3))
        frames.append(
            Frame(
                id=i,
                keypoints=transform_points(gt, pts),
                descriptors=desc,
                gt_pose=gt,
            )
        )
    return SyntheticScene(
        frames=frames, overlap=_measured_overlap(frames), windows=windows
    )
