"""Translation correction along the viewing ray from an observed depth image."""
from __future__ import annotations

import numpy as np

from surfdist.errors import NoConfidentPixels, NoDepthOverlap
from surfdist.geometry.render import zbuffer_indices
from surfdist.geometry.transform import Camera, Pose

NORM_FRACTION = 0.8


def confident_pixels(queries, shape, fraction: float = NORM_FRACTION) -> np.ndarray:
    """Boolean H×W mask of pixels whose query norm is at least ``fraction`` of the maximum.

    A query image coarser than ``shape`` is mapped by integer block division.
    """
    q = np.asarray(queries, dtype=np.float64)
    norms = np.linalg.norm(q, axis=2)
    H, W = shape
    if norms.shape != (H, W):
        sr = max(H // norms.shape[0], 1)
        sc = max(W // norms.shape[1], 1)
        rows = np.minimum(np.arange(H) // sr, norms.shape[0] - 1)
        cols = np.minimum(np.arange(W) // sc, norms.shape[1] - 1)
        norms = norms[np.ix_(rows, cols)]
    top = norms.max()
    if not top > 0:
        raise NoConfidentPixels("all query norms are zero")
    return norms >= fraction * top


def depth_adjust(pose: Pose, query_image, depth_observed, camera: Camera, surface,
                 fraction: float = NORM_FRACTION) -> Pose:
    """Shift ``pose`` along the ray through the confident pixels' center of mass.

    The shift is the median of (observed - rendered) depth over confident pixels
    where both depths exist; it moves the object's depth by exactly that amount.
    """
    obs = np.asarray(depth_observed, dtype=np.float64)
    queries = getattr(query_image, "queries", query_image)
    sel = confident_pixels(queries, obs.shape, fraction)
    _, rendered = zbuffer_indices(pose.rotation[None], pose.translation[None], camera, surface, warn=False)
    rendered = rendered[0]
    valid = sel & (obs > 0) & np.isfinite(obs) & (rendered > 0)
    if not valid.any():
        raise NoDepthOverlap("no confident pixel has both observed and rendered depth")
    delta = float(np.median(obs[valid] - rendered[valid]))
    rows, cols = np.nonzero(valid)
    ray = camera.rays([cols.mean(), rows.mean()])
    return Pose(pose.rotation, pose.translation + delta * ray / ray[2])
