"""Coarse stage of frame selection.

Global feature aggregation, neighbor fusion, the pairwise similarity
matrix, seed selection, top-k candidate retrieval, and the dynamically
maintained meta row that stands in for re-pooling the merged model at
every step.

Global features here are plain unit-norm 1-D float arrays; a stack of
them is an (n_frames, g) array.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SimilarityState",
    "pool_global",
    "fuse_features",
    "build_similarity",
    "select_seed",
    "top_k_candidates",
    "update_meta_row",
]


def _signed_power(x: np.ndarray, exponent: float) -> np.ndarray:
    return np.sign(x) * np.abs(x) ** exponent


def pool_global(descriptors: np.ndarray, exponent: float = 3.0) -> np.ndarray:
    """Aggregate one global feature from a frame's local descriptors.

    Generalized-mean pooling with a signed power so negative descriptor
    coordinates keep their sign: per coordinate, sp(mean(sp(x, p)), 1/p)
    with sp(x, p) = sign(x) * |x|^p, then L2-normalized. Deterministic
    and training-free. With p = 1 this is the normalized arithmetic mean.
    """
    desc = np.asarray(descriptors, dtype=np.float64)
    if desc.ndim != 2 or desc.shape[0] < 1:
        raise ValueError("pool_global needs a nonempty (n, d) descriptor array")
    pooled = _signed_power(np.mean(_signed_power(desc, exponent), axis=0), 1.0 / exponent)
    norm = np.linalg.norm(pooled)
    if norm == 0.0:
        # All-cancelling descriptors; fall back to a deterministic unit vector.
        pooled = np.zeros(desc.shape[1])
        pooled[0] = 1.0
        return pooled
    return pooled / norm


def fuse_features(features: np.ndarray, neighbors: int = 3) -> np.ndarray:
    """Refine each global feature with its nearest neighbors.

    Every output row i is the weighted combination

        (g_i + sum_j w_j * g_j) / (1 + sum_j w_j),   w_j = max(g_j . g_i, 0)

    over the ``neighbors`` nearest rows by L2 distance (excluding i),
    evaluated on the ORIGINAL features so row order cannot leak into the
    result, then re-normalized to unit length. ``neighbors`` >= n is
    clamped to n - 1; with 0 neighbors the input is returned unchanged.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise ValueError("fuse_features needs a nonempty (n, g) feature array")
    n = feats.shape[0]
    m = min(int(neighbors), n - 1)
    if m <= 0:
        return feats.copy()

    dots = feats @ feats.T
    sq = np.sum(feats * feats, axis=1)
    dist2 = sq[:, None] + sq[None, :] - 2.0 * dots
    np.fill_diagonal(dist2, np.inf)

    fused = np.empty_like(feats)
    for i in range(n):
        nn = np.argsort(dist2[i], kind="stable")[:m]
        w = np.maximum(dots[i, nn], 0.0)
        combined = (feats[i] + w @ feats[nn]) / (1.0 + np.sum(w))
        norm = np.linalg.norm(combined)
        fused[i] = combined / norm if norm > 0.0 else feats[i]
    return fused


@dataclass(eq=False)
class SimilarityState:
    """The n x n global similarity matrix plus the live meta row.

    ``matrix`` is symmetric with unit diagonal; ``meta_row`` holds the
    similarity of each frame to the current meta-shape and is exactly 0
    at merged indices; ``merged`` is the merged mask.
    """

    matrix: np.ndarray
    meta_row: np.ndarray
    merged: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.meta_row = np.asarray(self.meta_row, dtype=np.float64)
        self.merged = np.asarray(self.merged, dtype=bool)
        n = self.matrix.shape[0]
        if self.matrix.shape != (n, n):
            raise ValueError("similarity matrix must be square")
        if self.meta_row.shape != (n,) or self.merged.shape != (n,):
            raise ValueError("meta_row and merged mask must have length n")

    @property
    def n_frames(self) -> int:
        return self.matrix.shape[0]


def build_similarity(features: np.ndarray) -> SimilarityState:
    """Map pairwise feature distances into [0, 1] similarities.

    s_ij = (2 - ||g_i - g_j||) / 2, which lands in [0, 1] for unit-norm
    features. The meta row starts at zero and the merged mask empty; the
    first :func:`update_meta_row` call (with the seed) initializes them.
    """
    feats = np.asarray(features, dtype=np.float64)
    n = feats.shape[0]
    diff = feats[:, None, :] - feats[None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    matrix = np.clip((2.0 - dist) / 2.0, 0.0, 1.0)
    np.fill_diagonal(matrix, 1.0)
    return SimilarityState(
        matrix=matrix,
        meta_row=np.zeros(n),
        merged=np.zeros(n, dtype=bool),
    )


def select_seed(sim: SimilarityState) -> int:
    """Index of the frame most similar to all others (argmax of row sums).

    Ties break toward the lowest index.
    """
    return int(np.argmax(np.sum(sim.matrix, axis=1)))


def top_k_candidates(
    sim: SimilarityState, k: int, exclude: set[int] | None = None
) -> list[int]:
    """Up to k unmerged frame indices, best meta-row score first.

    Ties break toward the lower index. ``exclude`` removes additional
    indices (used by the pipeline to skip frames deferred in the current
    pass). Returns an empty list when nothing is eligible.
    """
    eligible = ~sim.merged
    if exclude:
        eligible = eligible.copy()
        for i in exclude:
            eligible[i] = False
    idx = np.flatnonzero(eligible)
    if idx.size == 0:
        return []
    order = np.argsort(-sim.meta_row[idx], kind="stable")
    return [int(i) for i in idx[order][: max(int(k), 0)]]


def update_meta_row(sim: SimilarityState, selected: int) -> SimilarityState:
    """Fold the selected frame's row into the meta row.

    meta_row becomes the elementwise max of itself and the selected
    frame's matrix row; entries of merged frames (the selected one
    included) are then forced to 0.
    """
    if sim.merged[selected]:
        raise ValueError(f"frame index {selected} is already merged")
    merged = sim.merged.copy()
    merged[selected] = True
    meta_row = np.maximum(sim.meta_row, sim.matrix[selected])
    meta_row[merged] = 0.0
    return SimilarityState(matrix=sim.matrix, meta_row=meta_row, merged=merged)
