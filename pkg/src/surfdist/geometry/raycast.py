"""Exact ray casting of triangle meshes and spheres at pixel centers.

Used for ground-truth crops, where silhouettes and coordinates should be
exact at every pixel center rather than inherited from point splats.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from surfdist.geometry.mesh import Mesh
from surfdist.geometry.transform import Camera, Pose

_EPS = 1e-12


@dataclass(eq=False)
class RayHits:
    """Per-pixel nearest hit. ``face`` is -1 where the ray misses; ``depth`` is camera z (inf on a miss)."""

    face: np.ndarray
    depth: np.ndarray
    points: np.ndarray      # object-frame hit points, NaN on a miss
    bary: np.ndarray        # barycentric weights of the hit in its face, zero on a miss

    @property
    def mask(self) -> np.ndarray:
        return self.face >= 0


def raycast_mesh(mesh: Mesh, pose: Pose, camera: Camera) -> RayHits:
    """Cast one ray per pixel center against ``mesh`` placed at ``pose``.

    Candidate (triangle, pixel) pairs come from each triangle's projected
    bounding box; the intersection itself is the Möller–Trumbore test in the
    camera frame, with the nearest hit kept per pixel.
    """
    H, W = camera.height, camera.width
    face = np.full((H, W), -1, dtype=np.int64)
    depth = np.full((H, W), np.inf)
    points = np.full((H, W, 3), np.nan)
    bary = np.zeros((H, W, 3))
    tri = pose.apply(mesh.vertices)[mesh.faces]                  # F×3×3 camera frame
    front = np.all(tri[:, :, 2] > _EPS, axis=1)
    if not front.any():
        return RayHits(face, depth, points, bary)
    fid = np.nonzero(front)[0]
    tri = tri[fid]
    u = camera.fx * tri[:, :, 0] / tri[:, :, 2] + camera.cx
    v = camera.fy * tri[:, :, 1] / tri[:, :, 2] + camera.cy
    c0 = np.clip(np.ceil(u.min(axis=1)), 0, W).astype(np.int64)
    c1 = np.clip(np.floor(u.max(axis=1)), -1, W - 1).astype(np.int64)
    r0 = np.clip(np.ceil(v.min(axis=1)), 0, H).astype(np.int64)
    r1 = np.clip(np.floor(v.max(axis=1)), -1, H - 1).astype(np.int64)
    nc = np.maximum(c1 - c0 + 1, 0)
    nr = np.maximum(r1 - r0 + 1, 0)
    counts = nc * nr
    if counts.sum() == 0:
        return RayHits(face, depth, points, bary)
    t_idx = np.repeat(np.arange(len(tri)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    rows = r0[t_idx] + local // nc[t_idx]
    cols = c0[t_idx] + local % nc[t_idx]

    d = np.column_stack([(cols - camera.cx) / camera.fx, (rows - camera.cy) / camera.fy,
                         np.ones(len(rows))])
    a = tri[t_idx, 0]
    e1 = tri[t_idx, 1] - a
    e2 = tri[t_idx, 2] - a
    p = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, p)
    ok = np.abs(det) > _EPS
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = -a                                                      # ray origin is the camera center
    b1 = np.einsum("ij,ij->i", s, p) * inv
    qv = np.cross(s, e1)
    b2 = np.einsum("ij,ij->i", d, qv) * inv
    z = np.einsum("ij,ij->i", e2, qv) * inv                     # ray parameter = depth since d_z = 1
    hit = ok & (b1 >= 0) & (b2 >= 0) & (b1 + b2 <= 1) & (z > _EPS)
    if not hit.any():
        return RayHits(face, depth, points, bary)
    rows, cols, z, t_idx = rows[hit], cols[hit], z[hit], t_idx[hit]
    b1, b2 = b1[hit], b2[hit]
    flat = rows * W + cols
    np.minimum.at(depth.reshape(-1), flat, z)
    win = z == depth.reshape(-1)[flat]
    flat, t_idx, b1, b2 = flat[win], t_idx[win], b1[win], b2[win]
    obj_tri = mesh.vertices[mesh.faces[fid[t_idx]]]
    hit_pts = obj_tri[:, 0] + b1[:, None] * (obj_tri[:, 1] - obj_tri[:, 0]) \
        + b2[:, None] * (obj_tri[:, 2] - obj_tri[:, 0])
    face.reshape(-1)[flat] = fid[t_idx]
    points.reshape(-1, 3)[flat] = hit_pts
    bary.reshape(-1, 3)[flat] = np.column_stack([1.0 - b1 - b2, b1, b2])
    return RayHits(face, depth, points, bary)


def hit_normals(mesh: Mesh, hits: RayHits) -> np.ndarray:
    """Object-frame unit normals at the hits: interpolated corner normals when the
    mesh has them, face normals otherwise. Zero on a miss."""
    out = np.zeros(hits.face.shape + (3,))
    m = hits.mask
    f = hits.face[m]
    if mesh.corner_normals is not None:
        n = np.einsum("nk,nki->ni", hits.bary[m], mesh.corner_normals[f])
    else:
        n = mesh.face_normals()[f]
    out[m] = n / np.linalg.norm(n, axis=1, keepdims=True)
    return out


def raycast_sphere(center, radius: float, camera: Camera) -> np.ndarray:
    """Camera-z depth of the front intersection with a sphere (inf on a miss)."""
    c = np.asarray(center, dtype=np.float64)
    d = camera.rays(camera.pixel_grid())                        # H×W×3, z = 1
    dd = np.einsum("...i,...i->...", d, d)
    dc = d @ c
    disc = dc * dc - dd * (c @ c - radius * radius)
    t = (dc - np.sqrt(np.maximum(disc, 0.0))) / dd
    return np.where((disc >= 0) & (t > _EPS), t, np.inf)
