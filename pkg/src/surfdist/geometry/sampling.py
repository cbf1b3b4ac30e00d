"""Even (Poisson-disk) surface sampling and the ``SSET`` binary format."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from surfdist.errors import DegenerateMesh
from surfdist.geometry.mesh import Mesh

SSET_MAGIC = b"SSET"

# Packing ratio N·r²/A reached by greedy dart throwing on a finite candidate pool.
_DART_DENSITY = 0.65


@dataclass(frozen=True, eq=False)
class SurfaceSampleSet:
    points: np.ndarray
    normals: np.ndarray
    nominal_spacing: float

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        n = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if p.shape != n.shape:
            raise ValueError("points and normals must have the same shape")
        p.flags.writeable = False
        n.flags.writeable = False
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "normals", n)
        object.__setattr__(self, "nominal_spacing", float(self.nominal_spacing))

    def __len__(self):
        return len(self.points)

    @classmethod
    def empty(cls, spacing: float = 1.0) -> SurfaceSampleSet:
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), spacing)


def sample_triangles(mesh: Mesh, count: int, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Area-uniform random points. Returns (points, normals, face index)."""
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise DegenerateMesh("mesh has zero surface area")
    face = rng.choice(len(areas), size=count, p=areas / total)
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    bary = np.column_stack([1 - r1, r1 * (1 - r2), r1 * r2])
    tri = mesh.triangles[face]
    pts = np.einsum("nk,nkd->nd", bary, tri)
    if mesh.corner_normals is not None:
        nrm = np.einsum("nk,nkd->nd", bary, mesh.corner_normals[face])
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    else:
        nrm = mesh.face_normals()[face]
    return pts, nrm, face


def _greedy_disk(candidates: np.ndarray, radius: float, images=None) -> np.ndarray:
    """Dart throwing over a fixed candidate pool: accept in order unless blocked.

    ``images`` optionally holds rotated copies of the pool (G×P×3); a candidate
    is then also blocked by the images of accepted points.
    """
    n = len(candidates)
    if images is None:
        expanded = candidates
    else:
        expanded = np.concatenate([candidates[None], images]).reshape(-1, 3)
    tree = cKDTree(expanded)
    neigh = tree.query_ball_point(candidates, radius, return_sorted=False)
    blocked = np.zeros(n, dtype=bool)
    accepted = []
    for i in range(n):
        if blocked[i]:
            continue
        accepted.append(i)
        for j in neigh[i]:
            blocked[j % n] = True
    return np.asarray(accepted, dtype=np.int64)


def _axis_vertices(mesh: Mesh):
    """Mesh vertices on the z axis with the mean normal of their incident faces."""
    on_axis = np.flatnonzero(np.hypot(mesh.vertices[:, 0], mesh.vertices[:, 1]) < 1e-9)
    fn = mesh.face_normals()
    pts, nrm = [], []
    for v in on_axis:
        n = fn[np.any(mesh.faces == v, axis=1)].sum(axis=0)
        if np.linalg.norm(n) > 0:
            pts.append(mesh.vertices[v])
            nrm.append(n / np.linalg.norm(n))
    return np.array(pts).reshape(-1, 3), np.array(nrm).reshape(-1, 3)


def sample_surface_even(mesh: Mesh, target_count: int, rng=None, symmetry=None,
                        oversample: int = 10) -> SurfaceSampleSet:
    """Poisson-disk sample a mesh surface with roughly ``target_count`` points.

    Candidates are drawn area-uniformly and thinned by greedy dart throwing.
    The rejection radius starts at ``sqrt(A / (N·ρ))`` and is rescaled until the
    count lands within 5% of the target.

    ``symmetry`` is an optional cyclic group of rotations about z (a G×3×3
    stack including the identity). When given, one fundamental wedge is sampled
    and replicated, so the returned set maps onto itself under the group.
    """
    if target_count < 4:
        raise ValueError("target_count must be at least 4")
    rng = np.random.default_rng(rng)
    area = mesh.total_area()
    if not area > 0:
        raise DegenerateMesh("mesh has zero surface area")
    order = 1 if symmetry is None else len(symmetry)
    pool_size = max(oversample * target_count, 64)
    pts, nrm, _ = sample_triangles(mesh, pool_size, rng)
    radius = np.sqrt(area * _DART_DENSITY / target_count)

    images = None
    if order > 1:
        rots = np.asarray(symmetry, dtype=np.float64)
        others = np.array([R for R in rots if not np.allclose(R, np.eye(3))])
        wedge = 2 * np.pi / order
        theta = np.mod(np.arctan2(pts[:, 1], pts[:, 0]), 2 * np.pi)
        rho = np.hypot(pts[:, 0], pts[:, 1])
        keep = theta < wedge
        axis_p, axis_n = _axis_vertices(mesh)
        pts = np.concatenate([axis_p, pts[keep]])
        nrm = np.concatenate([axis_n, nrm[keep]])
        rho = np.hypot(pts[:, 0], pts[:, 1])

    for _ in range(12):
        if order > 1:
            # orbit points must stay at least half a spacing apart
            rho_min = 0.5 * radius / (2 * np.sin(np.pi / order))
            on_axis = rho < 1e-9
            ok = (rho >= rho_min) | on_axis
            cand, cand_n = pts[ok], nrm[ok]
            images = np.einsum("gij,nj->gni", others, cand)
            idx = _greedy_disk(cand, radius, images)
            base, base_n = cand[idx], cand_n[idx]
            axis_pts = np.abs(np.hypot(base[:, 0], base[:, 1])) < 1e-9
            full_p = [base]
            full_n = [base_n]
            for R in others:
                full_p.append(base[~axis_pts] @ R.T)
                full_n.append(base_n[~axis_pts] @ R.T)
            out_p, out_n = np.concatenate(full_p), np.concatenate(full_n)
        else:
            idx = _greedy_disk(pts, radius)
            out_p, out_n = pts[idx], nrm[idx]
        ratio = len(out_p) / target_count
        if abs(ratio - 1) <= 0.05:
            break
        radius *= np.sqrt(ratio) if ratio > 0 else 0.5
    return SurfaceSampleSet(out_p, out_n, radius)


def write_sset(surface: SurfaceSampleSet, dest) -> None:
    """Little-endian: magic, u32 count, N×6 f32 (point, normal), f32 spacing."""
    data = np.hstack([surface.points, surface.normals]).astype("<f4")
    payload = SSET_MAGIC + struct.pack("<I", len(surface)) + data.tobytes() + struct.pack("<f", surface.nominal_spacing)
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "wb") as fh:
            fh.write(payload)
    else:
        dest.write(payload)


def read_sset(source) -> SurfaceSampleSet:
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            raw = fh.read()
    else:
        raw = source.read()
    if raw[:4] != SSET_MAGIC:
        raise ValueError("not an SSET file")
    (n,) = struct.unpack_from("<I", raw, 4)
    expected = 8 + 24 * n + 4
    if len(raw) != expected:
        raise ValueError(f"SSET size mismatch: expected {expected} bytes, got {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", count=6 * n, offset=8).reshape(n, 6).astype(np.float64)
    (spacing,) = struct.unpack_from("<f", raw, 8 + 24 * n)
    nrm = data[:, 3:]
    norm = np.linalg.norm(nrm, axis=1, keepdims=True)
    nrm = nrm / np.where(norm > 0, norm, 1.0)
    return SurfaceSampleSet(data[:, :3], nrm, spacing)
