"""Ground-truth embedding models for testing the inference pipeline without training.

Keys and queries are built from a symmetry-invariant descriptor ``φ`` of object
coordinates, in units of the kernel bandwidth. With keys
``k(x) = [φ(x), -|φ(x)|²/2, -log m(φ(x))]`` and pixel queries
``q_u = [s_u φ_u, s_u, 1]`` the softmax over keys is the Gaussian kernel
``exp(-s_u |φ_u - φ(x)|²/2) / m(φ(x))``: centered on the pixel's true surface
point and spread over its symmetry orbit, which is what a perfectly trained
model would express.

``m`` is the kernel density of the surface samples in descriptor space.
Dividing by it gives every orbit the same total mass however many samples it
holds, so the per-pixel normalizer is nearly constant.

``s_u`` is a per-pixel precision that widens the kernel by the spread of the
pixel footprint on the surface. At grazing angles one pixel covers tens of
millimetres, and a kernel built from the center point alone would give the
other surface points in that footprint log-probabilities far below what any
finite-resolution model predicts.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt
from scipy.special import logsumexp

from surfdist.correspondence import QueryImage, block_average
from surfdist.geometry.render import RenderedCrop

MASK_CLAMP = 1e-3
EXTEND_PX = 3.0
DEFAULT_WIDTH = 2.0


def invariant_descriptor(kind: str, coords, width: float) -> np.ndarray:
    """Symmetry-invariant descriptor in units of ``width`` (the kernel bandwidth)."""
    x = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    if kind == "blob":
        return x / width
    if kind == "cylinder":
        return np.column_stack([np.hypot(x[:, 0], x[:, 1]), x[:, 2]]) / width
    if kind == "cube":
        # invariants of the 4-fold rotation about z, each with units of length
        r2 = x[:, 0] ** 2 + x[:, 1] ** 2
        q4 = np.sqrt(np.abs(x[:, 0] * x[:, 1]))
        return np.column_stack([x[:, 2], np.sqrt(r2), q4 * np.sqrt(2.0)]) / width
    if kind == "sphere":
        return np.zeros((len(x), 1))
    raise ValueError(f"no descriptor for object kind {kind!r}")


def _log_kernel_density(phi, reference, chunk: int = 512) -> np.ndarray:
    """log Σ_i exp(-|φ - φ_i|²/2) over the reference descriptors."""
    ref_sq = np.sum(reference * reference, axis=1)
    out = np.empty(len(phi))
    for a in range(0, len(phi), chunk):
        p = phi[a:a + chunk]
        d2 = np.sum(p * p, axis=1)[:, None] + ref_sq[None, :] - 2.0 * p @ reference.T
        out[a:a + chunk] = logsumexp(-0.5 * np.maximum(d2, 0.0), axis=1)
    return out


def footprint_precision(phi_image, mask) -> np.ndarray:
    """Per-pixel kernel precision ``1 / (1 + var)`` from the descriptor spread over the pixel.

    ``var`` is the variance of a uniform pixel footprint under the local linear
    map from pixel offsets to descriptors, ``(|∂φ/∂u|² + |∂φ/∂v|²) / 12``, with
    derivatives from central differences (one-sided at the mask border).
    """
    phi_image = np.where(mask[..., None], phi_image, 0.0)
    var = np.zeros(mask.shape)
    for axis in (0, 1):
        fwd = np.zeros(mask.shape + phi_image.shape[2:])
        bwd = np.zeros_like(fwd)
        has_f = np.zeros(mask.shape, dtype=bool)
        has_b = np.zeros(mask.shape, dtype=bool)
        lo = [slice(None)] * 2
        hi = [slice(None)] * 2
        lo[axis], hi[axis] = slice(None, -1), slice(1, None)
        lo, hi = tuple(lo), tuple(hi)
        diff = phi_image[hi] - phi_image[lo]
        both = mask[hi] & mask[lo]
        fwd[lo] = diff
        has_f[lo] = both
        bwd[hi] = diff
        has_b[hi] = both
        n = has_f.astype(np.float64) + has_b
        grad = (fwd * has_f[..., None] + bwd * has_b[..., None]) / np.maximum(n, 1.0)[..., None]
        var += np.sum(grad * grad, axis=-1) / 12.0
    return np.where(mask, 1.0 / (1.0 + var), 1.0)


@dataclass(eq=False)
class OracleModels:
    """Key function plus per-pixel ground-truth queries for one object kind.

    ``reference`` holds descriptors of the surface samples; without it the keys
    carry no density correction.
    """

    kind: str
    width: float
    reference: np.ndarray | None = None

    @property
    def embed_dim(self) -> int:
        return invariant_descriptor(self.kind, np.zeros((1, 3)), 1.0).shape[1] + 2

    def keys(self, coords) -> np.ndarray:
        phi = invariant_descriptor(self.kind, coords, self.width)
        log_m = np.zeros(len(phi)) if self.reference is None else _log_kernel_density(phi, self.reference)
        return np.column_stack([phi, -0.5 * np.sum(phi * phi, axis=1), -log_m])

    def queries_for(self, coords, precision=None) -> np.ndarray:
        phi = invariant_descriptor(self.kind, coords, self.width)
        s = np.ones(len(phi)) if precision is None else np.asarray(precision, dtype=np.float64).ravel()
        return np.column_stack([s[:, None] * phi, s, np.ones(len(phi))])

    def query_image(self, crop: RenderedCrop, downscale_factor: int = 1) -> QueryImage:
        """Queries from the crop's ground-truth coordinates over the full mask.

        Background pixels within ``EXTEND_PX`` of the mask take the descriptor of
        the nearest mask pixel, so that silhouette points are not pulled inward
        during refinement; farther background gets the zero query (a uniform
        distribution). A downscaled query describes its whole block: the kernel
        is centered on the block's mean descriptor, its variance adds the spread
        of descriptors within the block to the mean footprint variance, and the
        query is scaled by the fraction of the block that carries a descriptor.
        At full resolution this is ``[s φ, s, 1]`` with the footprint precision.
        """
        H, W = crop.full_mask.shape
        m = crop.full_mask
        d = self.embed_dim - 2
        phi = np.zeros((H, W, d))
        var = np.zeros((H, W))
        valid = np.zeros((H, W), dtype=bool)
        if m.any():
            phi_mask = invariant_descriptor(self.kind, crop.coord_image, self.width).reshape(H, W, d)
            var_mask = 1.0 / footprint_precision(phi_mask, m) - 1.0
            dist, (ri, ci) = distance_transform_edt(~m, return_indices=True)
            valid = dist <= EXTEND_PX
            phi[valid] = phi_mask[ri[valid], ci[valid]]
            var[valid] = var_mask[ri[valid], ci[valid]]
        f = int(downscale_factor)
        w = valid.astype(np.float64)
        cover = block_average(w, f)
        safe = np.maximum(cover, 1e-300)
        mean = block_average(phi * w[..., None], f) / safe[..., None]
        second = block_average(np.sum(phi * phi, axis=-1) * w, f) / safe
        spread = np.maximum(second - np.sum(mean * mean, axis=-1), 0.0)
        prec = 1.0 / (1.0 + block_average(var * w, f) / safe + spread)
        q = cover[..., None] * np.concatenate([prec[..., None] * mean, prec[..., None],
                                               np.ones_like(prec)[..., None]], axis=-1)
        mask = block_average(m.astype(np.float64), f)
        return QueryImage(q, np.clip(mask, MASK_CLAMP, 1.0 - MASK_CLAMP), f)


def oracle_models(obj, width: float | None = None) -> OracleModels:
    """Oracle for a :class:`SyntheticObject`; bandwidth defaults to ``DEFAULT_WIDTH`` sample spacings."""
    w = DEFAULT_WIDTH * obj.surface.nominal_spacing if width is None else float(width)
    return OracleModels(obj.spec.kind, w, invariant_descriptor(obj.spec.kind, obj.surface.points, w))
