"""Triangle meshes: the OBJ subset reader/writer and parametric primitives."""
from __future__ import annotations

import io
import os
from dataclasses import dataclass

import numpy as np

from surfdist.errors import DegenerateMesh


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangle soup with optional per-corner normals (F×3×3) for smooth shading."""

    vertices: np.ndarray
    faces: np.ndarray
    corner_normals: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "faces", np.asarray(self.faces, dtype=np.int64).reshape(-1, 3))
        if self.corner_normals is not None:
            cn = np.asarray(self.corner_normals, dtype=np.float64).reshape(-1, 3, 3)
            if len(cn) != len(self.faces):
                raise ValueError("corner_normals must have one entry per face")
            object.__setattr__(self, "corner_normals", cn)

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_normals(self) -> np.ndarray:
        tri = self.triangles
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(norm > 0, norm, 1.0)

    def face_areas(self) -> np.ndarray:
        tri = self.triangles
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def total_area(self) -> float:
        return float(self.face_areas().sum())

    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.vertices, axis=1).max())

    def with_vertex_normals(self) -> Mesh:
        """Smooth normals from area-weighted averaging of incident face normals."""
        tri = self.triangles
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        acc = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(acc, self.faces[:, k], n)
        acc /= np.linalg.norm(acc, axis=1, keepdims=True)
        return Mesh(self.vertices, self.faces, acc[self.faces])


def _parse_index(token: str, count: int) -> int:
    i = int(token)
    return i - 1 if i > 0 else count + i


def read_obj(source) -> Mesh:
    """Read the ``v``/``vn``/``f`` subset of Wavefront OBJ; polygons are fan-triangulated.

    ``source`` is a path or a text stream. Corner normals are kept only when
    every face references normals.
    """
    if isinstance(source, (str, os.PathLike)):
        with open(source, "r", encoding="utf-8") as fh:
            return read_obj(fh)
    verts, normals, faces, face_norms = [], [], [], []
    all_have_normals = True
    for line in source:
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        tag = parts[0]
        if tag == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif tag == "vn":
            normals.append([float(x) for x in parts[1:4]])
        elif tag == "f":
            vi, ni = [], []
            for tok in parts[1:]:
                fields = tok.split("/")
                vi.append(_parse_index(fields[0], len(verts)))
                ni.append(_parse_index(fields[2], len(normals)) if len(fields) > 2 and fields[2] else None)
            for k in range(1, len(vi) - 1):
                faces.append([vi[0], vi[k], vi[k + 1]])
                tri_n = [ni[0], ni[k], ni[k + 1]]
                if any(x is None for x in tri_n):
                    all_have_normals = False
                face_norms.append(tri_n)
    if not faces:
        raise DegenerateMesh("OBJ contains no faces")
    corner = None
    if all_have_normals and normals:
        nrm = np.asarray(normals, dtype=np.float64)
        corner = nrm[np.asarray(face_norms, dtype=np.int64)]
        corner /= np.linalg.norm(corner, axis=2, keepdims=True)
    return Mesh(np.asarray(verts), np.asarray(faces), corner)


def write_obj(mesh: Mesh, dest) -> None:
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", encoding="utf-8") as fh:
            write_obj(mesh, fh)
        return
    buf = io.StringIO()
    for v in mesh.vertices:
        buf.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
    if mesh.corner_normals is not None:
        for n in mesh.corner_normals.reshape(-1, 3):
            buf.write(f"vn {n[0]:.17g} {n[1]:.17g} {n[2]:.17g}\n")
        for fi, f in enumerate(mesh.faces):
            a, b, c = f + 1
            n0 = 3 * fi + 1
            buf.write(f"f {a}//{n0} {b}//{n0 + 1} {c}//{n0 + 2}\n")
    else:
        for a, b, c in mesh.faces + 1:
            buf.write(f"f {a} {b} {c}\n")
    dest.write(buf.getvalue())


# --- primitives -------------------------------------------------------------

def box_mesh(size) -> Mesh:
    """Axis-aligned box centered at the origin with flat faces."""
    sx, sy, sz = np.broadcast_to(np.asarray(size, dtype=np.float64), (3,)) / 2.0
    v = np.array([[x, y, z] for x in (-sx, sx) for y in (-sy, sy) for z in (-sz, sz)])
    # vertex index = 4*ix + 2*iy + iz
    quads = [(0, 1, 3, 2), (4, 6, 7, 5),  # -x, +x
             (0, 4, 5, 1), (2, 3, 7, 6),  # -y, +y
             (0, 2, 6, 4), (1, 5, 7, 3)]  # -z, +z
    faces = []
    for a, b, c, d in quads:
        faces += [(a, b, c), (a, c, d)]
    return Mesh(v, np.array(faces))


def cylinder_mesh(radius: float, height: float, segments: int = 144) -> Mesh:
    """Closed cylinder along z, centered at the origin, smooth side normals."""
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    h = height / 2.0
    bottom = np.column_stack([ring, np.full(segments, -h)])
    top = np.column_stack([ring, np.full(segments, h)])
    verts = np.vstack([bottom, top, [[0.0, 0.0, -h], [0.0, 0.0, h]]])
    cb, ct = 2 * segments, 2 * segments + 1
    radial = np.column_stack([np.cos(ang), np.sin(ang), np.zeros(segments)])
    faces, normals = [], []
    up, down = np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, -1.0])
    for i in range(segments):
        j = (i + 1) % segments
        faces.append((i, j, segments + j))
        normals.append((radial[i], radial[j], radial[j]))
        faces.append((i, segments + j, segments + i))
        normals.append((radial[i], radial[j], radial[i]))
        faces.append((cb, j, i))
        normals.append((down, down, down))
        faces.append((ct, segments + i, segments + j))
        normals.append((up, up, up))
    return Mesh(verts, np.array(faces), np.array(normals))


def icosphere_mesh(radius: float = 1.0, subdivisions: int = 3) -> Mesh:
    """Subdivided icosahedron with exact sphere normals at the vertices."""
    p = (1 + 5 ** 0.5) / 2
    v = [[-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0], [0, -1, p], [0, 1, p],
         [0, -1, -p], [0, 1, -p], [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1]]
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.asarray(x, dtype=np.float64) / np.linalg.norm(x) for x in v]
    faces = f
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new
    unit = np.array(verts)
    faces = np.array(faces)
    return Mesh(radius * unit, faces, unit[faces])


def blob_mesh(radius: float, seed: int = 0, amplitude: float = 0.25,
              subdivisions: int = 4, n_waves: int = 6) -> Mesh:
    """Icosphere with a smooth random radial perturbation; generically asymmetric."""
    rng = np.random.default_rng(seed)
    base = icosphere_mesh(1.0, subdivisions)
    d = base.vertices
    dirs = rng.normal(size=(n_waves, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    freq = rng.uniform(1.0, 2.5, n_waves)
    phase = rng.uniform(0, 2 * np.pi, n_waves)
    weights = rng.uniform(0.5, 1.0, n_waves)
    bump = (weights * np.sin(freq * (d @ dirs.T) + phase)).sum(axis=1) / weights.sum()
    r = radius * (1.0 + amplitude * bump)
    return Mesh(d * r[:, None], base.faces).with_vertex_normals()
