"""Incremental multiview point-cloud registration.

Frames are registered one at a time against a growing meta-shape: a
sampled union of everything merged so far. Global descriptor pooling
ranks which frame to try next, RANSAC over mutual nearest-neighbor
correspondences verifies it, transformation averaging against every
overlapping merged frame refines its pose, and reservoir sampling keeps
the meta-shape's density flat while it grows.

Typical use::

    from metareg import PipelineConfig, register_scene

    result = register_scene(frames, PipelineConfig(seed=42))
    for frame_id, pose in result.poses.items():
        ...

The ``metareg`` console script exposes the same pipeline on files.
"""

from .exceptions import (
    DegenerateGeometryError,
    ParseError,
    RegistrationError,
)
from .geometry import (
    Frame,
    MetaPoint,
    MetaShape,
    Pose,
    compose,
    invert,
    project_so3,
    transform_points,
    vec,
    vec_inv,
)
from .matching import (
    CorrespondenceSet,
    PairwiseEstimate,
    RansacConfig,
    inlier_count,
    match_descriptors,
    ransac_estimate,
    rerank_candidates,
)
from .merge import (
    MERGE_MODES,
    RedundantPair,
    alt_merge,
    find_redundant_pairs,
    keep_new_probability,
    reservoir_merge,
)
from .metrics import (
    ErrorReport,
    ecdf,
    evaluate_poses,
    pairs_above_overlap,
    registration_recall,
    rotation_error,
    translation_error,
)
from .pipeline import (
    PipelineConfig,
    SceneResult,
    StepDiagnostics,
    register_pair,
    register_scene,
)
from .refinement import (
    ObservedTransform,
    RefinementConfig,
    overlap_ratio,
    procrustes,
    refine_transform,
    rotation_average,
    translation_average,
)
from .retrieval import (
    SimilarityState,
    build_similarity,
    fuse_features,
    pool_global,
    select_seed,
    top_k_candidates,
    update_meta_row,
)
from .synthetic import (
    SynthConfig,
    SyntheticScene,
    generate_scene,
    hashed_descriptors,
    make_plane_bridged_scene,
)

__version__ = "0.1.0"

__all__ = [
    "DegenerateGeometryError",
    "ParseError",
    "RegistrationError",
    "Frame",
    "MetaPoint",
    "MetaShape",
    "Pose",
    "compose",
    "invert",
    "project_so3",
    "transform_points",
    "vec",
    "vec_inv",
    "CorrespondenceSet",
    "PairwiseEstimate",
    "RansacConfig",
    "inlier_count",
    "match_descriptors",
    "ransac_estimate",
    "rerank_candidates",
    "MERGE_MODES",
    "RedundantPair",
    "alt_merge",
    "find_redundant_pairs",
    "keep_new_probability",
    "reservoir_merge",
    "ErrorReport",
    "ecdf",
    "evaluate_poses",
    "pairs_above_overlap",
    "registration_recall",
    "rotation_error",
    "translation_error",
    "PipelineConfig",
    "SceneResult",
    "StepDiagnostics",
    "register_pair",
    "register_scene",
    "ObservedTransform",
    "RefinementConfig",
    "overlap_ratio",
    "procrustes",
    "refine_transform",
    "rotation_average",
    "translation_average",
    "SimilarityState",
    "build_similarity",
    "fuse_features",
    "pool_global",
    "select_seed",
    "top_k_candidates",
    "update_meta_row",
    "SynthConfig",
    "SyntheticScene",
    "generate_scene",
    "hashed_descriptors",
    "make_plane_bridged_scene",
    "__version__",
]
