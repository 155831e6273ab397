"""Fine stage of frame selection.

Mutual-nearest-neighbor descriptor matching, robust transform estimation
over minimal 3-point samples, inlier counting, and candidate reranking
by inlier count against the current meta-shape.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .geometry import Frame, MetaShape, Pose, transform_points

__all__ = [
    "CorrespondenceSet",
    "RansacConfig",
    "PairwiseEstimate",
    "match_descriptors",
    "inlier_count",
    "ransac_estimate",
    "rerank_candidates",
]

_COLLINEAR_TOL = 1e-6
_HYPOTHESIS_CHUNK = 256


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Matched point pairs: source[i] is believed to map onto target[i]."""

    source: np.ndarray  # (n, 3)
    target: np.ndarray  # (n, 3)
    distance: np.ndarray  # (n,) descriptor L2 distances

    def __len__(self) -> int:
        return self.source.shape[0]

    @staticmethod
    def empty() -> "CorrespondenceSet":
        return CorrespondenceSet(
            source=np.zeros((0, 3)), target=np.zeros((0, 3)), distance=np.zeros(0)
        )


@dataclass(frozen=True)
class RansacConfig:
    """Robust-estimation loop parameters.

    ``inlier_threshold`` is the residual gate in scene units; the sample
    size is pinned to 3, the minimum for rigid 3D alignment.
    """

    iterations: int = 5000
    sample_size: int = 3
    inlier_threshold: float = 0.07
    min_inliers: int = 15
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.inlier_threshold <= 0.0:
            raise ValueError("inlier threshold must be positive")
        if self.sample_size != 3:
            raise ValueError("sample size is fixed at 3")


@dataclass(frozen=True, eq=False)
class PairwiseEstimate:
    """Outcome of estimating candidate-frame -> meta coordinates.

    ``transform`` is None when estimation failed (too few matches or
    inlier support below the configured minimum); the best inlier count
    seen is still recorded.
    """

    transform: Pose | None
    inlier_count: int
    inlier_mask: np.ndarray
    candidate_id: int

    @property
    def succeeded(self) -> bool:
        return self.transform is not None


def match_descriptors(source, target, cap: int = 5000) -> CorrespondenceSet:
    """Mutual nearest neighbors in descriptor space.

    ``source`` and ``target`` are Frames or MetaShapes (anything with
    ``keypoints`` and ``descriptors``). Keeps the ``cap`` pairs with the
    smallest descriptor distance when there are more. Unit-norm
    descriptors let distances come from dot products.
    """
    sd = source.descriptors
    td = target.descriptors
    if sd.shape[0] == 0 or td.shape[0] == 0:
        raise ValueError("both sides of matching must be nonempty")

    # Nearest target for every source row, chunked to bound memory.
    ns = sd.shape[0]
    nearest_t = np.empty(ns, dtype=np.int64)
    best_dot_s = np.empty(ns, dtype=np.float64)
    chunk = max(1, int(2**22 // max(td.shape[0], 1)))
    for lo in range(0, ns, chunk):
        hi = min(lo + chunk, ns)
        dots = sd[lo:hi] @ td.T
        nearest_t[lo:hi] = np.argmax(dots, axis=1)
        best_dot_s[lo:hi] = dots[np.arange(hi - lo), nearest_t[lo:hi]]

    nt = td.shape[0]
    nearest_s = np.empty(nt, dtype=np.int64)
    for lo in range(0, nt, chunk):
        hi = min(lo + chunk, nt)
        dots = td[lo:hi] @ sd.T
        nearest_s[lo:hi] = np.argmax(dots, axis=1)

    src_idx = np.flatnonzero(nearest_s[nearest_t] == np.arange(ns))
    if src_idx.size == 0:
        return CorrespondenceSet.empty()
    tgt_idx = nearest_t[src_idx]
    dist = np.sqrt(np.maximum(2.0 - 2.0 * best_dot_s[src_idx], 0.0))

    if src_idx.size > cap:
        keep = np.argsort(dist, kind="stable")[:cap]
        src_idx, tgt_idx, dist = src_idx[keep], tgt_idx[keep], dist[keep]

    return CorrespondenceSet(
        source=source.keypoints[src_idx].copy(),
        target=target.keypoints[tgt_idx].copy(),
        distance=dist,
    )


def inlier_count(c: CorrespondenceSet, t: Pose, threshold: float) -> int:
    """Number of pairs with residual strictly below the threshold."""
    if threshold <= 0.0:
        raise ValueError("threshold must be positive")
    if len(c) == 0:
        return 0
    residuals = np.linalg.norm(transform_points(t, c.source) - c.target, axis=1)
    return int(np.sum(residuals < threshold))


def _kabsch_batch(p: np.ndarray, q: np.ndarray):
    """Rigid transforms mapping each (m, k, 3) sample of p onto q.

    Returns rotations (m, 3, 3) and translations (m, 3). No degeneracy
    handling; callers must filter collinear samples themselves.
    """
    pc = p - p.mean(axis=1, keepdims=True)
    qc = q - q.mean(axis=1, keepdims=True)
    h = np.einsum("mki,mkj->mij", pc, qc)
    u, _, vt = np.linalg.svd(h)
    det = np.linalg.det(np.einsum("mij,mkj->mik", vt, u).transpose(0, 2, 1))
    d = np.ones((p.shape[0], 3))
    d[:, 2] = np.sign(det)
    r = np.einsum("mji,mj,mkj->mik", vt, d, u)
    t = q.mean(axis=1) - np.einsum("mij,mj->mi", r, p.mean(axis=1))
    return r, t


def _collinear_mask(tri: np.ndarray) -> np.ndarray:
    """True where a (m, 3, 3) point triple is too close to a line."""
    ab = tri[:, 1] - tri[:, 0]
    ac = tri[:, 2] - tri[:, 0]
    cross = np.linalg.norm(np.cross(ab, ac), axis=1)
    scale = np.linalg.norm(ab, axis=1) * np.linalg.norm(ac, axis=1)
    return (scale <= 0.0) | (cross < _COLLINEAR_TOL * np.maximum(scale, 1e-300))


def _refit_procrustes(p: np.ndarray, q: np.ndarray) -> Pose:
    r, t = _kabsch_batch(p[None], q[None])
    return Pose(r[0], t[0])


def ransac_estimate(
    c: CorrespondenceSet, cfg: RansacConfig, candidate_id: int = -1
) -> PairwiseEstimate:
    """Hypothesize-and-verify rigid estimation over the correspondences.

    Minimal 3-point samples are drawn from a generator seeded by the
    config, hypotheses are scored by inlier count (ties go to the
    smaller mean inlier residual, then to the earlier sample), and the
    winner is refit on its full inlier set. Bit-identical output for
    identical inputs and seed.
    """
    n = len(c)
    if n < 3:
        return PairwiseEstimate(
            transform=None,
            inlier_count=0,
            inlier_mask=np.zeros(n, dtype=bool),
            candidate_id=candidate_id,
        )

    rng = np.random.default_rng(cfg.seed)
    tau = cfg.inlier_threshold
    best = (-1, np.inf)  # (ic, mean residual), maximized lexicographically
    best_mask = np.zeros(n, dtype=bool)
    best_rt: tuple[np.ndarray, np.ndarray] | None = None

    remaining = cfg.iterations
    while remaining > 0:
        m = min(_HYPOTHESIS_CHUNK, remaining)
        remaining -= m
        # argpartition of uniform noise yields m distinct triples.
        samples = np.argpartition(rng.random((m, n)), 2, axis=1)[:, :3]
        src_tri = c.source[samples]
        tgt_tri = c.target[samples]
        bad = _collinear_mask(src_tri)
        r, t = _kabsch_batch(src_tri, tgt_tri)

        resid = np.linalg.norm(
            np.einsum("mij,nj->mni", r, c.source) + t[:, None, :] - c.target[None],
            axis=2,
        )
        inl = resid < tau
        ic = inl.sum(axis=1)
        ic[bad] = -1
        with np.errstate(invalid="ignore"):
            mean_res = np.where(
                ic > 0, np.sum(resid * inl, axis=1) / np.maximum(ic, 1), np.inf
            )

        for j in range(m):
            score = (int(ic[j]), float(mean_res[j]))
            if score[0] > best[0] or (score[0] == best[0] and score[1] < best[1]):
                best = score
                best_mask = inl[j]
                best_rt = (r[j], t[j])

    best_ic = max(best[0], 0)
    if best_rt is None or best_ic < max(cfg.min_inliers, 3):
        return PairwiseEstimate(
            transform=None,
            inlier_count=best_ic,
            inlier_mask=best_mask if best_rt is not None else np.zeros(n, dtype=bool),
            candidate_id=candidate_id,
        )

    refit = _refit_procrustes(c.source[best_mask], c.target[best_mask])
    residuals = np.linalg.norm(transform_points(refit, c.source) - c.target, axis=1)
    mask = residuals < tau
    ic = int(mask.sum())
    if ic < max(cfg.min_inliers, 3):
        return PairwiseEstimate(
            transform=None, inlier_count=ic, inlier_mask=mask, candidate_id=candidate_id
        )
    return PairwiseEstimate(
        transform=refit, inlier_count=ic, inlier_mask=mask, candidate_id=candidate_id
    )


def _evaluate_candidate(
    meta: MetaShape, frame: Frame, cfg: RansacConfig, cap: int
) -> PairwiseEstimate:
    corr = match_descriptors(frame, meta, cap=cap)
    per_candidate = RansacConfig(
        iterations=cfg.iterations,
        sample_size=cfg.sample_size,
        inlier_threshold=cfg.inlier_threshold,
        min_inliers=cfg.min_inliers,
        seed=cfg.seed ^ frame.id,
    )
    return ransac_estimate(corr, per_candidate, candidate_id=frame.id)


def rerank_candidates(
    meta: MetaShape,
    candidates: list[Frame],
    cfg: RansacConfig,
    cap: int = 5000,
    threads: int = 1,
) -> PairwiseEstimate | None:
    """Estimate every candidate against the meta-shape, keep the best.

    The winner has the maximal inlier count; ties break toward the lower
    frame id. Candidates whose estimation failed are skipped; None when
    all of them failed. Each candidate draws from its own generator
    (seed XOR frame id) so results do not depend on evaluation order.
    """
    if not candidates:
        raise ValueError("rerank_candidates needs at least one candidate")

    if threads > 1 and len(candidates) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            estimates = list(
                pool.map(lambda f: _evaluate_candidate(meta, f, cfg, cap), candidates)
            )
    else:
        estimates = [_evaluate_candidate(meta, f, cfg, cap) for f in candidates]

    best: PairwiseEstimate | None = None
    for est in estimates:
        if not est.succeeded:
            continue
        if (
            best is None
            or est.inlier_count > best.inlier_count
            or (est.inlier_count == best.inlier_count and est.candidate_id < best.candidate_id)
        ):
            best = est
    return best
