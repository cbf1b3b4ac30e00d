"""Embedding visualizations: three dimension-set sums mapped to RGB with zero as mid-gray."""
from __future__ import annotations

import numpy as np

from surfdist.pnm import to_uint8


def dimension_sets(embed_dim: int, count: int = 3) -> list:
    """Split ``range(embed_dim)`` into ``count`` contiguous, nearly equal sets."""
    return [s for s in np.array_split(np.arange(embed_dim), count)]


def embedding_rgb(embeddings, valid=None) -> np.ndarray:
    """H×W×E embeddings to H×W×3 uint8.

    Each channel sums one dimension set. The common scale maps the largest
    absolute sum over valid pixels to the range end, so zero lands on mid-gray.
    Invalid pixels are drawn as zero.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    H, W, E = e.shape
    valid = np.ones((H, W), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    sums = np.zeros((H, W, 3))
    for c, dims in enumerate(dimension_sets(E)):
        if len(dims):
            sums[..., c] = e[..., dims].sum(axis=-1)
    sums[~valid] = 0.0
    scale = float(np.abs(sums[valid]).max()) if valid.any() else 0.0
    if scale == 0.0:
        scale = 1.0
    return to_uint8(sums, -scale, scale)


def key_image(keys_fn, coord_image, mask) -> np.ndarray:
    """Keys of the rendered surface, demeaned over the shown pixels, as RGB."""
    mask = np.asarray(mask, dtype=bool)
    H, W = mask.shape
    out = np.zeros((H, W, 0))
    if mask.any():
        k = np.asarray(keys_fn(coord_image[mask]), dtype=np.float64)
        k = k - k.mean(axis=0)
        out = np.zeros((H, W, k.shape[1]))
        out[mask] = k
    else:
        out = np.zeros((H, W, 3))
    return embedding_rgb(out, mask)
