"""Pose hypotheses from sampled correspondence triples, scored by rendering."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from surfdist.correspondence import (CategoricalSampler, CorrespondenceSample, CorrespondenceTable,
                                     joint_distribution, maxpool3)
from surfdist.errors import NoValidHypothesis
from surfdist.geometry.transform import Camera, Pose, orthonormalize
from surfdist.pose.ap3p import solve_bearings_batch
from surfdist.pose.scoring import PROB_CLAMP, score_poses, visibility_check_batch


@dataclass
class RansacConfig:
    iterations: int = 2000
    gamma: float = 1.5
    top_k: int = 8
    rng_seed: int = 0
    min_score_floor: float = float(np.log(PROB_CLAMP))
    score_batch: int = 256

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")


@dataclass(eq=False)
class PoseHypothesis:
    pose: Pose
    score: float
    mask_score: float
    corr_score: float
    triple: tuple
    iteration: int = -1


@dataclass(eq=False)
class RansacResult:
    best: PoseHypothesis
    top: list
    scores: np.ndarray = field(repr=False)    # every scored hypothesis, in iteration order
    n_sampled: int = 0

    def __iter__(self):
        yield self.best
        yield self.top


def sample_triples(weights, rng, iterations: int):
    """Draw ``iterations`` triples of (row, col, sample index); arrays shaped iterations×3."""
    rows, cols, idx = CategoricalSampler(weights).draw(rng, 3 * iterations)
    return rows.reshape(-1, 3), cols.reshape(-1, 3), idx.reshape(-1, 3)


def hypotheses_from_triples(rows, cols, idx, camera: Camera, surface):
    """AP3P on every triple with depth and normal-visibility pruning.

    Returns (R, t, owner) for the surviving candidates, ordered by triple.
    """
    uv = np.stack([cols, rows], axis=-1).astype(np.float64)
    rays = camera.rays(uv)
    b = rays / np.linalg.norm(rays, axis=-1, keepdims=True)
    w = surface.points[idx]
    R, t, owner = solve_bearings_batch(b, w)
    if len(owner) == 0:
        return R, t, owner
    X = np.einsum("mij,mkj->mki", R, w[owner]) + t[:, None, :]
    ok = np.all(X[..., 2] > 0, axis=1) & np.isfinite(R).all(axis=(1, 2)) & np.isfinite(t).all(axis=1)
    ok &= visibility_check_batch(R, surface.normals[idx[owner]], rays[owner])
    return R[ok], t[ok], owner[ok]


def ransac(table: CorrespondenceTable, mask_prob, camera: Camera, surface,
           cfg: RansacConfig | None = None, pooled=None) -> RansacResult:
    """Best-scoring hypothesis over ``cfg.iterations`` sampled triples.

    ``camera`` must match the table resolution. Ties go to the earlier
    iteration, so results are deterministic for a given seed.
    """
    cfg = cfg or RansacConfig()
    weights = joint_distribution(table, mask_prob, cfg.gamma)
    rng = np.random.default_rng(cfg.rng_seed)
    rows, cols, idx = sample_triples(weights, rng, cfg.iterations)
    R, t, owner = hypotheses_from_triples(rows, cols, idx, camera, surface)
    if len(owner) == 0:
        raise NoValidHypothesis(f"none of {cfg.iterations} sampled triples gave a valid pose")
    if pooled is None:
        pooled = maxpool3(table)
    s, s_m, s_c = score_poses(R, t, camera, surface, mask_prob, pooled, PROB_CLAMP,
                              cfg.min_score_floor, cfg.score_batch)
    finite = np.isfinite(s)
    if not finite.any():
        raise NoValidHypothesis("every hypothesis scored non-finite")
    s_safe = np.where(finite, s, -np.inf)
    # stable sort: equal scores keep iteration order
    order = np.argsort(-s_safe, kind="stable")[:max(cfg.top_k, 1)]

    def make(k):
        it = int(owner[k])
        triple = tuple(CorrespondenceSample((int(rows[it, j]), int(cols[it, j])), int(idx[it, j]))
                       for j in range(3))
        return PoseHypothesis(Pose(orthonormalize(R[k]), t[k]), float(s[k]), float(s_m[k]),
                              float(s_c[k]), triple, it)

    top = [make(k) for k in order if finite[k]]
    return RansacResult(top[0], top, s, cfg.iterations)
