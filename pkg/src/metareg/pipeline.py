"""Incremental scene registration.

One frame seeds a growing meta-shape; every step retrieves the most
promising unmerged frames by global similarity, verifies them
geometrically against the meta-shape, refines the winner's transform
against each overlapping merged frame, and merges it. Frames that fail
every attempt are deferred and retried as the meta-shape grows.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .geometry import Frame, MetaShape, Pose, invert
from .matching import (
    PairwiseEstimate,
    RansacConfig,
    _evaluate_candidate,
    rerank_candidates,
)
from .merge import MERGE_MODES, alt_merge, reservoir_merge
from .refinement import (
    RefinementConfig,
    gather_observations,
    resolve_observations,
)
from .retrieval import (
    build_similarity,
    fuse_features,
    pool_global,
    select_seed,
    top_k_candidates,
    update_meta_row,
)


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs for :func:`register_scene`.

    ``tau`` is the inlier / neighborhood radius used everywhere a
    distance threshold appears. When ``ransac`` is omitted it is built
    from ``tau`` and ``seed``.
    """

    k: int = 10
    tau: float = 0.07
    overlap_threshold: float = 0.30
    fusion_neighbors: int = 3
    pooling_exponent: float = 3.0
    ransac: RansacConfig | None = None
    merge_mode: str = "reservoir"
    seed: int = 0
    max_deferral_passes: int = 3
    threads: int = 1
    match_cap: int = 5000

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.tau <= 0.0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.overlap_threshold < 1.0:
            raise ValueError("overlap_threshold must be in [0, 1)")
        if self.merge_mode not in MERGE_MODES:
            raise ValueError(f"unknown merge mode {self.merge_mode!r}")
        if self.max_deferral_passes < 1:
            raise ValueError("max_deferral_passes must be at least 1")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")
        if self.ransac is None:
            object.__setattr__(
                self,
                "ransac",
                RansacConfig(inlier_threshold=self.tau, seed=self.seed),
            )

    def refinement(self) -> RefinementConfig:
        return RefinementConfig(
            tau=self.tau, overlap_threshold=self.overlap_threshold
        )


@dataclass(frozen=True)
class StepDiagnostics:
    """What happened during one merge step."""

    frame_id: int
    inlier_count: int
    n_observations: int
    overlap_weights: tuple[float, ...]


@dataclass(frozen=True)
class SceneResult:
    """Outcome of a full incremental registration run.

    ``poses`` maps each registered frame id to its absolute pose (the
    inverse of its frame-to-meta transform, so the seed frame's pose is
    the identity). ``order`` lists registered ids, seed first. Frames
    that could not be registered appear in ``failed`` instead of
    ``poses``. ``durations`` holds the wall-clock seconds of each merge
    step and is deliberately kept out of the serialized result.
    """

    poses: dict[int, Pose]
    order: list[int]
    steps: list[StepDiagnostics]
    failed: tuple[int, ...]
    config: PipelineConfig
    durations: tuple[float, ...] = field(default=())
    meta: MetaShape | None = field(default=None, compare=False)

    @property
    def n_registered(self) -> int:
        return len(self.order)


def _global_features(frames: list[Frame], cfg: PipelineConfig) -> np.ndarray:
    pooled = np.vstack(
        [pool_global(f.descriptors, cfg.pooling_exponent) for f in frames]
    )
    return fuse_features(pooled, cfg.fusion_neighbors)


def _merge_frame(
    meta: MetaShape, frame: Frame, pose: Pose, cfg: PipelineConfig, rng
) -> MetaShape:
    if cfg.merge_mode == "reservoir":
        return reservoir_merge(meta, frame, pose, cfg.tau, rng)
    return alt_merge(meta, frame, pose, cfg.tau, cfg.merge_mode, rng)


def register_scene(
    frames: list[Frame],
    cfg: PipelineConfig | None = None,
    pooled_features: np.ndarray | None = None,
) -> SceneResult:
    """Register every frame of a scene against a growing meta-shape.

    Global features pick the seed frame and rank candidates at each
    step; geometric verification picks the actual winner among the top
    ``cfg.k``. When every candidate of a step fails, those frames are
    set aside for the rest of the pass; once a merge succeeds they
    become eligible again. After ``cfg.max_deferral_passes`` full passes
    without a single merge the remaining frames are flagged as failed.

    ``pooled_features`` substitutes precomputed per-frame global
    features (one row per frame, unit norm) for the built-in pooling;
    neighbor fusion still runs on them.
    """
    cfg = cfg or PipelineConfig()
    if len(frames) < 2:
        raise ValueError("register_scene needs at least two frames")
    ids = [f.id for f in frames]
    if len(set(ids)) != len(ids):
        raise ValueError("frame ids must be unique")

    if pooled_features is None:
        features = _global_features(frames, cfg)
    else:
        pooled_features = np.asarray(pooled_features, dtype=np.float64)
        if pooled_features.shape[0] != len(frames):
            raise ValueError("need one pooled feature row per frame")
        features = fuse_features(pooled_features, cfg.fusion_neighbors)
    sim = build_similarity(features)
    seed_pos = select_seed(sim)
    sim = update_meta_row(sim, seed_pos)
    meta = MetaShape.from_seed(frames[seed_pos])
    rng = np.random.default_rng(cfg.seed)
    refine_cfg = cfg.refinement()

    transforms: dict[int, Pose] = {frames[seed_pos].id: Pose.identity()}
    order = [frames[seed_pos].id]
    steps: list[StepDiagnostics] = []
    durations: list[float] = []
    pos_of = {f.id: i for i, f in enumerate(frames)}

    deferred: set[int] = set()
    stalled_passes = 0
    while True:
        candidates = top_k_candidates(sim, cfg.k, exclude=deferred)
        if not candidates:
            if not np.any(~sim.merged):
                break  # everything merged
            stalled_passes += 1
            deferred.clear()
            if stalled_passes >= cfg.max_deferral_passes:
                break
            continue

        t0 = time.perf_counter()
        best = rerank_candidates(
            meta,
            [frames[i] for i in candidates],
            cfg.ransac,
            cap=cfg.match_cap,
            threads=cfg.threads,
        )
        if best is None:
            deferred.update(candidates)
            continue

        frame = frames[pos_of[best.candidate_id]]
        observations = gather_observations(frame, meta, best.transform, refine_cfg)
        pose = resolve_observations(best.transform, observations, refine_cfg)
        meta = _merge_frame(meta, frame, pose, cfg, rng)
        sim = update_meta_row(sim, pos_of[frame.id])

        transforms[frame.id] = pose
        order.append(frame.id)
        steps.append(
            StepDiagnostics(
                frame_id=frame.id,
                inlier_count=best.inlier_count,
                n_observations=len(observations),
                overlap_weights=tuple(o.weight for o in observations),
            )
        )
        durations.append(time.perf_counter() - t0)
        deferred.clear()
        stalled_passes = 0

    failed = tuple(sorted(f.id for f in frames if f.id not in transforms))
    poses = {fid: invert(t) for fid, t in transforms.items()}
    return SceneResult(
        poses=poses,
        order=order,
        steps=steps,
        failed=failed,
        config=cfg,
        durations=tuple(durations),
        meta=meta,
    )


def register_pair(
    a: Frame, b: Frame, cfg: PipelineConfig | None = None
) -> PairwiseEstimate:
    """Estimate the rigid transform mapping frame ``a`` onto frame ``b``.

    A matching-plus-verification shortcut with no meta-shape involved;
    useful for debugging a single pair. Shares the per-frame seeding of
    the scene loop, so the result matches what the first step of
    :func:`register_scene` would compute for the same pair.
    """
    cfg = cfg or PipelineConfig()
    return _evaluate_candidate(b, a, cfg.ransac, cfg.match_cap)
