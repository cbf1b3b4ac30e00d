"""Hypothesis visibility pruning and the mask / correspondence log-likelihood scores.

Hypothesis masks and visible surface samples come from the point z-buffer at
the resolution of the probability table. Scores are averages of clamped
log-probabilities, so a single confident mistake costs a bounded amount.
"""
from __future__ import annotations

import numpy as np

from surfdist.geometry.render import zbuffer_indices
from surfdist.geometry.transform import Camera, Pose

PROB_CLAMP = 1e-6


def visibility_check(pose: Pose, normals, pixels, camera: Camera) -> bool:
    """True iff every object-frame normal faces the camera along its pixel's ray.

    ``pixels`` are (u, v) coordinates, one per normal.
    """
    n_cam = np.asarray(normals, dtype=np.float64).reshape(-1, 3) @ pose.rotation.T
    rays = camera.rays(np.asarray(pixels, dtype=np.float64).reshape(-1, 2))
    return bool(np.all(np.sum(n_cam * rays, axis=1) < 0))


def visibility_check_batch(rotations, normals, rays) -> np.ndarray:
    """Vectorized :func:`visibility_check`: B×3×3 rotations, B×k×3 normals and rays."""
    n_cam = np.einsum("bij,bkj->bki", rotations, normals)
    return np.all(np.sum(n_cam * rays, axis=2) < 0, axis=1)


def mask_scores(index_images, mask_prob, clamp: float = PROB_CLAMP) -> np.ndarray:
    """Mean log-probability of each rendered hypothesis mask (B×H×W index images)."""
    p = np.asarray(mask_prob, dtype=np.float64)
    if clamp > 0:
        p = np.clip(p, clamp, 1.0 - clamp)
    with np.errstate(divide="ignore"):
        log_in, log_out = np.log(p), np.log1p(-p)
    inside = np.asarray(index_images) >= 0
    total = np.where(inside, log_in, log_out).reshape(len(inside), -1).sum(axis=1)
    return total / p.size


def corr_scores(index_images, pooled, clamp: float = PROB_CLAMP,
                floor: float = np.log(PROB_CLAMP)) -> np.ndarray:
    """Mean log-probability of the rendered sample index at each hypothesis-mask pixel.

    Hypotheses with an empty mask get ``floor``.
    """
    idx = np.asarray(index_images)
    B = len(idx)
    out = np.full(B, float(floor))
    b, r, c = np.nonzero(idx >= 0)
    if len(b) == 0:
        return out
    p = np.asarray(pooled)[r, c, idx[b, r, c]].astype(np.float64)
    if clamp > 0:
        p = np.maximum(p, clamp)
    with np.errstate(divide="ignore"):
        logs = np.log(p)
    sums = np.bincount(b, weights=logs, minlength=B)
    counts = np.bincount(b, minlength=B)
    has = counts > 0
    out[has] = sums[has] / counts[has]
    return out


def combined_score(s_m, s_c, n_keys: int):
    """Entropy-normalized score; -2 for uninformative predictions, 0 for perfect ones."""
    return np.asarray(s_m) / np.log(2.0) + np.asarray(s_c) / np.log(n_keys)


def render_hypotheses(rotations, translations, camera: Camera, surface):
    idx, _ = zbuffer_indices(rotations, translations, camera, surface, warn=False)
    return idx


def mask_score(pose: Pose, camera: Camera, surface, mask_prob, clamp: float = PROB_CLAMP) -> float:
    idx = render_hypotheses(pose.rotation[None], pose.translation[None], camera, surface)
    return float(mask_scores(idx, mask_prob, clamp)[0])


def corr_score(pose: Pose, camera: Camera, surface, pooled, clamp: float = PROB_CLAMP,
               floor: float = np.log(PROB_CLAMP)) -> float:
    idx = render_hypotheses(pose.rotation[None], pose.translation[None], camera, surface)
    return float(corr_scores(idx, pooled, clamp, floor)[0])


def score_poses(rotations, translations, camera: Camera, surface, mask_prob, pooled,
                clamp: float = PROB_CLAMP, floor: float = np.log(PROB_CLAMP), batch: int = 256):
    """Score many hypotheses. Returns (s, s_M, s_C) arrays."""
    R = np.asarray(rotations, dtype=np.float64).reshape(-1, 3, 3)
    t = np.asarray(translations, dtype=np.float64).reshape(-1, 3)
    s_m = np.empty(len(R))
    s_c = np.empty(len(R))
    for start in range(0, len(R), batch):
        sl = slice(start, start + batch)
        idx = render_hypotheses(R[sl], t[sl], camera, surface)
        s_m[sl] = mask_scores(idx, mask_prob, clamp)
        s_c[sl] = corr_scores(idx, pooled, clamp, floor)
    n_keys = np.asarray(pooled).shape[2]
    return combined_score(s_m, s_c, n_keys), s_m, s_c
