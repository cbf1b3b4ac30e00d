"""Point-projection rendering with a z-buffer and small disk splats.

No triangles are rasterized. Every surface sample is projected to its nearest
pixel and splatted over a disk of a few pixels; each pixel keeps the sample
closest to the camera. The object mask is the morphological closing of the
directly-hit pixels, which fills sampling holes without dilating silhouettes.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from surfdist.errors import SparseSurfaceWarning
from surfdist.geometry.sampling import SurfaceSampleSet
from surfdist.geometry.transform import MIN_DEPTH, Camera, Pose

_INDEX_BITS = 22
_KEY_LEVELS = 1 << 40
_EMPTY = np.iinfo(np.int64).max
DIRECT_HIT_FRACTION = 0.6
SPLAT_DEPTH_STEP = 4.0   # depth penalty per pixel of splat offset, in sample spacings


@dataclass(eq=False)
class RenderedCrop:
    coord_image: np.ndarray
    visible_mask: np.ndarray
    full_mask: np.ndarray
    normal_image: np.ndarray
    depth_image: np.ndarray
    feature_image: np.ndarray | None = None

    @property
    def shape(self):
        return self.visible_mask.shape


def splat_radius(spacing: float, focal: float, median_depth: float) -> int:
    if not median_depth > 0:
        return 1
    return int(np.clip(np.ceil(spacing * focal / median_depth), 1, 3))


def _disk_offsets(radius: int):
    r = int(radius)
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    keep = dx * dx + dy * dy <= r * r
    return dy[keep], dx[keep]


def _closing(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary closing of a B×H×W stack with a disk, padded so borders do not erode."""
    dy, dx = _disk_offsets(radius)
    k = 2 * radius + 1
    struct = np.zeros((1, k, k), dtype=bool)
    struct[0, dy + radius, dx + radius] = True
    pad = radius + 1
    padded = np.pad(mask, ((0, 0), (pad, pad), (pad, pad)))
    closed = ndimage.binary_closing(padded, structure=struct)
    return closed[:, pad:-pad, pad:-pad]


def zbuffer_indices(rotations, translations, camera: Camera, surface: SurfaceSampleSet,
                    radius: int | None = None, warn: bool = True, center_tol: float | None = None):
    """Render sample indices for a batch of poses.

    Returns ``(index, depth)`` with shapes B×H×W; index is -1 on background.
    Samples behind the camera or facing away from it are skipped. A pixel counts as directly hit when
    a sample projects within ``center_tol`` pixels (per axis) of its center;
    by default that is a fraction of the projected sample spacing, so coarse
    renders do not grow the silhouette by half a pixel.
    """
    R = np.asarray(rotations, dtype=np.float64).reshape(-1, 3, 3)
    t = np.asarray(translations, dtype=np.float64).reshape(-1, 3)
    B, H, W = len(R), camera.height, camera.width
    index = np.full((B, H, W), -1, dtype=np.int64)
    depth = np.zeros((B, H, W))
    n = len(surface)
    if n == 0 or B == 0:
        return index, depth
    if n >= 1 << _INDEX_BITS:
        raise ValueError("surface too large for the z-buffer index encoding")

    X = (R.reshape(-1, 3) @ surface.points.T).reshape(B, 3, n) + t[:, :, None]
    z = X[:, 2]
    # Back-facing samples of a closed surface are never the nearest surface;
    # culling them keeps them from leaking through splat gaps at silhouettes.
    Nc = (R.reshape(-1, 3) @ surface.normals.T).reshape(B, 3, n)
    front = (z > MIN_DEPTH) & (np.einsum("bkn,bkn->bn", Nc, X) < 0)
    if front.all():
        med = z.mean(axis=1)
    else:
        med = np.array([z[b][front[b]].mean() if front[b].any() else 0.0 for b in range(B)])
    spacing_px = surface.nominal_spacing * camera.fx / np.where(med > 0, med, np.inf)
    if radius is None:
        radii = np.array([splat_radius(surface.nominal_spacing, camera.fx, m) for m in med])
    else:
        radii = np.full(B, int(radius))
    if center_tol is None:
        tols = np.clip(DIRECT_HIT_FRACTION * spacing_px, 0.25, 0.5)
    else:
        tols = np.full(B, float(center_tol))

    # Render into a buffer padded by 2r+1 so that clipped far-off projections
    # and their splats land in the discarded border, never inside the crop.
    r_max = int(radii.max())
    pad = 2 * r_max + 1
    Hp, Wp = H + 2 * pad, W + 2 * pad
    counts = front.sum(axis=1)
    b_ids = np.repeat(np.arange(B), counts)
    s_ids = np.broadcast_to(np.arange(n), (B, n))[front]
    zf = z[front]
    u = camera.fx * X[:, 0][front] / zf + camera.cx
    v = camera.fy * X[:, 1][front] / zf + camera.cy
    col = np.clip(np.rint(u), -r_max - 1, W + r_max)
    row = np.clip(np.rint(v), -r_max - 1, H + r_max)
    centered = np.maximum(np.abs(u - col), np.abs(v - row)) <= tols[b_ids]
    base = (b_ids * Hp + row.astype(np.int64) + pad) * Wp + col.astype(np.int64) + pad
    # Splat key: depth plus a penalty per pixel of offset, so a sample landing
    # on the pixel wins unless a splat is well in front of it.
    step = SPLAT_DEPTH_STEP * surface.nominal_spacing
    zmax = float(zf.max()) if len(zf) else 1.0
    key_scale = (_KEY_LEVELS - 1) / (1.5 * (zmax + 3.0 * step))
    buf = np.full(B * Hp * Wp, _EMPTY, dtype=np.int64)
    direct = np.zeros(B * Hp * Wp, dtype=bool)
    landed = np.zeros(B * Hp * Wp, dtype=bool)

    for rad in np.unique(radii):
        sel = radii[b_ids] == rad
        bs = base[sel]
        code0 = ((zf[sel] * key_scale).astype(np.int64) << _INDEX_BITS) | s_ids[sel]
        for dy, dx in zip(*_disk_offsets(rad)):
            penalty = int(np.hypot(dx, dy) * step * key_scale) << _INDEX_BITS
            np.minimum.at(buf, bs + (dy * Wp + dx), code0 + penalty)
        direct[bs[centered[sel]]] = True
        landed[bs] = True

    buf = buf.reshape(B, Hp, Wp)[:, pad:pad + H, pad:pad + W]
    direct = direct.reshape(B, Hp, Wp)[:, pad:pad + H, pad:pad + W]
    landed = landed.reshape(B, Hp, Wp)[:, pad:pad + H, pad:pad + W]
    covered = buf != _EMPTY
    mask = np.zeros_like(direct)
    for rad in np.unique(radii):
        sel = radii == rad
        mask[sel] = _closing(direct[sel], rad) & covered[sel]
    if warn:
        interior = mask.sum()
        holes = (mask & ~landed).sum()
        if interior > 0 and holes > 0.05 * interior:
            warnings.warn(f"{holes}/{interior} mask pixels were filled by splatting",
                          SparseSurfaceWarning, stacklevel=2)
    ids = np.where(mask, buf & ((1 << _INDEX_BITS) - 1), -1)
    index[:] = ids
    safe = np.where(ids >= 0, ids, 0)
    depth[:] = np.where(mask, np.take_along_axis(z, safe.reshape(B, -1), axis=1).reshape(B, H, W), 0.0)
    return index, depth


def render_point_zbuffer(pose: Pose, camera: Camera, surface: SurfaceSampleSet,
                         warn: bool = True) -> RenderedCrop:
    """Render the visible layer of ``surface`` under ``pose``."""
    idx, depth = zbuffer_indices(pose.rotation[None], pose.translation[None], camera, surface, warn=warn)
    return crop_from_indices(idx[0], depth[0], pose, surface)


def crop_from_indices(idx, depth, pose: Pose, surface: SurfaceSampleSet) -> RenderedCrop:
    mask = idx >= 0
    H, W = idx.shape
    coord = np.full((H, W, 3), np.nan)
    normal = np.zeros((H, W, 3))
    if mask.any():
        sel = idx[mask]
        coord[mask] = surface.points[sel]
        normal[mask] = surface.normals[sel] @ pose.rotation.T
    return RenderedCrop(coord_image=coord, visible_mask=mask.copy(), full_mask=mask.copy(),
                        normal_image=normal, depth_image=depth)


def visible_coordinates(pose: Pose, camera: Camera, surface: SurfaceSampleSet, warn: bool = True):
    """Sparse form of the render: (pixels as (row, col), object coords, object normals, sample ids)."""
    idx, _ = zbuffer_indices(pose.rotation[None], pose.translation[None], camera, surface, warn=warn)
    idx = idx[0]
    rows, cols = np.nonzero(idx >= 0)
    sel = idx[rows, cols]
    return np.column_stack([rows, cols]), surface.points[sel], surface.normals[sel], sel
