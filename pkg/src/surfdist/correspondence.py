"""Dense surface distributions from query/key embeddings, and sampling from them.

A pixel with query ``q`` assigns surface sample ``i`` the probability
``exp(q·k_i) / Σ_j exp(q·k_j)``. The full H×W×|Ŝ| table of these values drives
hypothesis sampling (after weighting by the mask) and hypothesis scoring
(after a 3×3 spatial max-pool).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.special import expit, logsumexp

from surfdist.errors import AllZeroMask, ShapeMismatch, TableTooLarge
from surfdist.pnm import write_pgm

DEFAULT_TABLE_BUDGET = 512 * 2**20  # bytes for the float32 probability table


@dataclass(eq=False)
class QueryImage:
    queries: np.ndarray         # H×W×E
    mask_prob: np.ndarray       # H×W
    downscale_factor: int = 1

    def __post_init__(self):
        self.queries = np.asarray(self.queries, dtype=np.float64)
        self.mask_prob = np.asarray(self.mask_prob, dtype=np.float64)
        if self.queries.ndim != 3 or self.queries.shape[:2] != self.mask_prob.shape:
            raise ShapeMismatch(f"queries {self.queries.shape} vs mask {self.mask_prob.shape}")
        if np.any(self.mask_prob < 0) or np.any(self.mask_prob > 1):
            raise ValueError("mask_prob must lie in [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask_prob.shape

    @property
    def embed_dim(self) -> int:
        return self.queries.shape[2]


def block_average(image: np.ndarray, factor: int) -> np.ndarray:
    """Mean over non-overlapping factor×factor blocks; trailing rows/cols are dropped."""
    img = np.asarray(image, dtype=np.float64)
    if factor == 1:
        return img
    H, W = img.shape[0] // factor, img.shape[1] // factor
    cut = img[:H * factor, :W * factor]
    return cut.reshape(H, factor, W, factor, *img.shape[2:]).mean(axis=(1, 3))


def _query_fn(query_model):
    return query_model.query if hasattr(query_model, "query") else query_model


def build_query_image(query_model, feature_image, downscale_factor: int = 1) -> QueryImage:
    """Evaluate the per-pixel query model on (block-averaged) features.

    ``query_model`` maps N×F features to N×(E+1) outputs whose last column is
    the mask logit. Either a callable or an object with a ``query`` method.
    """
    s = int(downscale_factor)
    if s < 1:
        raise ValueError("downscale_factor must be >= 1")
    feats = block_average(feature_image, s)
    H, W, F = feats.shape
    out = np.asarray(_query_fn(query_model)(feats.reshape(-1, F)), dtype=np.float64)
    E = out.shape[1] - 1
    return QueryImage(out[:, :E].reshape(H, W, E), expit(out[:, E]).reshape(H, W), s)


def key_distribution(query, keys) -> tuple[np.ndarray, float]:
    """Softmax of ``keys @ query``. Returns (probabilities, log denominator)."""
    k = np.asarray(keys, dtype=np.float64)
    if len(k) < 1:
        raise ValueError("need at least one key")
    logits = k @ np.asarray(query, dtype=np.float64)
    log_den = float(logsumexp(logits))
    return np.exp(logits - log_den), log_den


def log_denominator(queries, keys, chunk: int = 2048) -> np.ndarray:
    """Per-pixel ``log Σ_j exp(q·k_j)`` without materializing the whole table."""
    q = np.asarray(queries, dtype=np.float64)
    flat = q.reshape(-1, q.shape[-1])
    k = np.asarray(keys, dtype=np.float64)
    out = np.empty(len(flat))
    for start in range(0, len(flat), chunk):
        logits = flat[start:start + chunk] @ k.T
        top = logits.max(axis=1)
        logits -= top[:, None]
        np.exp(logits, out=logits)
        out[start:start + chunk] = np.log(logits.sum(axis=1)) + top
    return out.reshape(q.shape[:-1])


@dataclass(eq=False)
class CorrespondenceTable:
    probs: np.ndarray            # H×W×N float32
    log_denominator: np.ndarray  # H×W float64
    keys: np.ndarray             # N×E
    surface: object = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.probs.shape[:2]

    @property
    def n_keys(self) -> int:
        return self.probs.shape[2]


def build_table(query_image: QueryImage, keys, surface=None,
                memory_budget: int = DEFAULT_TABLE_BUDGET) -> CorrespondenceTable:
    k = np.asarray(keys, dtype=np.float64)
    H, W = query_image.shape
    size = H * W * len(k) * 4
    if size > memory_budget:
        raise TableTooLarge(f"table of {H}×{W}×{len(k)} needs {size} bytes, budget is {memory_budget}")
    probs = np.empty((H, W, len(k)), dtype=np.float32)
    log_den = np.empty((H, W))
    q = query_image.queries
    for r in range(H):
        logits = q[r] @ k.T
        top = logits.max(axis=1)
        logits -= top[:, None]
        np.exp(logits, out=logits)
        total = logits.sum(axis=1)
        probs[r] = logits / total[:, None]
        log_den[r] = np.log(total) + top
    return CorrespondenceTable(probs, log_den, k, surface)


def joint_distribution(table, mask_prob, gamma: float = 1.0) -> np.ndarray:
    """Weights ∝ (Pr(u|I)·p_i(u))^γ over all (pixel, sample) pairs, shape H×W×N, summing to 1."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    probs = table.probs if isinstance(table, CorrespondenceTable) else np.asarray(table)
    m = np.asarray(mask_prob, dtype=np.float64)
    total = m.sum()
    if not total > 0:
        raise AllZeroMask("mask probabilities sum to zero")
    w = (m / total)[..., None] * probs.astype(np.float64)
    if gamma != 1.0:
        w **= gamma
    s = w.sum()
    if not s > 0:
        raise AllZeroMask("no pixel carries probability mass")
    w /= s
    return w


@dataclass(frozen=True)
class CorrespondenceSample:
    pixel: tuple[int, int]    # (row, col)
    surface_index: int


class CategoricalSampler:
    """Inversion sampling: binary search of uniform draws in a precomputed CDF."""

    def __init__(self, weights):
        w = np.asarray(weights, dtype=np.float64)
        if np.any(w < 0):
            raise ValueError("weights must be non-negative")
        self.shape = w.shape
        self.cdf = np.cumsum(w.ravel())
        if not self.cdf[-1] > 0:
            raise ValueError("weights sum to zero")

    def draw_flat(self, rng, count: int) -> np.ndarray:
        u = rng.random(count) * self.cdf[-1]
        idx = np.searchsorted(self.cdf, u, side="right")
        return np.minimum(idx, len(self.cdf) - 1)

    def draw(self, rng, count: int) -> tuple[np.ndarray, ...]:
        """Multi-index draws, one array per weight dimension."""
        return np.unravel_index(self.draw_flat(rng, count), self.shape)


def inversion_sample(weights, rng, count: int) -> list[CorrespondenceSample]:
    """Draw ``count`` (pixel, surface index) pairs from H×W×N weights."""
    w = np.asarray(weights)
    if w.ndim != 3:
        raise ShapeMismatch("weights must be H×W×N")
    rows, cols, idx = CategoricalSampler(w).draw(np.random.default_rng(rng), count)
    return [CorrespondenceSample((int(r), int(c)), int(i)) for r, c, i in zip(rows, cols, idx)]


def maxpool3(probs) -> np.ndarray:
    """3×3 spatial max per surface index; border windows shrink to the image."""
    p = np.asarray(probs.probs if isinstance(probs, CorrespondenceTable) else probs)
    return ndimage.maximum_filter(p, size=(3, 3) + (1,) * (p.ndim - 2), mode="nearest")


def table_entropy(table: CorrespondenceTable) -> np.ndarray:
    p = table.probs.astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(p > 0, p * np.log(p), 0.0).sum(axis=2)
    return h


def dump_table(table: CorrespondenceTable, argmax_path, entropy_path) -> None:
    """Argmax sample index (16-bit PGM) and entropy scaled by ln N (8-bit PGM)."""
    arg = np.argmax(table.probs, axis=2)
    write_pgm(argmax_path, arg, maxval=65535 if table.n_keys > 256 else 255)
    h = table_entropy(table) / max(np.log(table.n_keys), 1e-12)
    write_pgm(entropy_path, np.clip(np.rint(h * 255), 0, 255).astype(np.int64))
