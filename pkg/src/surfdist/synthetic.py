"""Synthetic objects with known symmetry groups, scenes, and feature rendering.

The query model sees per-pixel feature vectors instead of RGB:
camera-frame normal (3), Lambertian shading under two lights (2), surface
color (3) and normalized crop coordinates (2). Color is the only object-frame
signal, so an object's visual ambiguity is exactly the symmetry of its color
field and shape.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.spatial import ConvexHull
from scipy.spatial.distance import pdist
from scipy.spatial.transform import Rotation

from surfdist.errors import FullyOccluded
from surfdist.geometry.mesh import Mesh, blob_mesh, box_mesh, cylinder_mesh, icosphere_mesh
from surfdist.geometry.raycast import hit_normals, raycast_mesh, raycast_sphere
from surfdist.geometry.render import RenderedCrop
from surfdist.geometry.sampling import SurfaceSampleSet, sample_surface_even
from surfdist.geometry.transform import Camera, Pose, rotvec_to_matrix

FEATURE_DIM = 10
CONTINUOUS_STEPS = 36
DEFAULT_LIGHTS = np.array([[0.0, 0.0, -1.0], [0.6, -0.6, -0.5]])
DEFAULT_LIGHTS = DEFAULT_LIGHTS / np.linalg.norm(DEFAULT_LIGHTS, axis=1, keepdims=True)
BACKGROUND_SIGMA = 0.3
RCRP_MAGIC = b"RCRP"


# --- symmetry ---------------------------------------------------------------------

def z_rotations(count: int) -> np.ndarray:
    return np.stack([rotvec_to_matrix([0.0, 0.0, 2 * np.pi * k / count]) for k in range(count)])


def cube_rotations() -> np.ndarray:
    """The 24 proper rotations of the cube."""
    import itertools
    out = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1, -1), repeat=3):
            M = np.zeros((3, 3))
            for i, (j, s) in enumerate(zip(perm, signs)):
                M[i, j] = s
            if np.linalg.det(M) > 0:
                out.append(M)
    return np.array(out)


@dataclass(frozen=True, eq=False)
class SymmetryGroup:
    """Rotational symmetry about the object origin.

    ``kind`` is one of ``none``, ``cyclic`` (about z), ``axial`` (continuous about z),
    ``cube`` or ``full`` (all rotations). ``rotations`` holds the discretized group.
    """

    kind: str
    rotations: np.ndarray

    @classmethod
    def trivial(cls) -> SymmetryGroup:
        return cls("none", np.eye(3)[None])

    @classmethod
    def cyclic(cls, order: int) -> SymmetryGroup:
        return cls("cyclic", z_rotations(order))

    @classmethod
    def axial(cls, steps: int = CONTINUOUS_STEPS) -> SymmetryGroup:
        return cls("axial", z_rotations(steps))

    @classmethod
    def cube(cls) -> SymmetryGroup:
        return cls("cube", cube_rotations())

    @classmethod
    def full(cls) -> SymmetryGroup:
        rots = np.einsum("aij,bjk->abik", cube_rotations(), z_rotations(CONTINUOUS_STEPS)).reshape(-1, 3, 3)
        return cls("full", _unique_rotations(rots))

    def __len__(self):
        return len(self.rotations)

    def orbit(self, point, tol: float = 1e-6) -> np.ndarray:
        """Distinct images of ``point`` under the (discretized) group."""
        pts = self.rotations @ np.asarray(point, dtype=np.float64)
        keep = []
        for p in pts:
            if all(np.linalg.norm(p - q) > tol for q in keep):
                keep.append(p)
        return np.array(keep)

    __call__ = orbit


def _unique_rotations(rots, tol=1e-9):
    out = []
    for R in rots:
        if not any(np.abs(R - Q).max() < tol for Q in out):
            out.append(R)
    return np.array(out)


def symmetry_aware_distance(pose_a: Pose, pose_b: Pose, points, group: SymmetryGroup) -> float:
    """Maximum symmetry-aware surface distance.

    ``min_S max_x |P_a x - P_b S x|`` over the group. Axial groups start from the
    36-step discretization and polish the best angle with a bounded 1-D search;
    the full rotation group of a sphere centered at the origin reduces to the
    translation difference.
    """
    x = np.asarray(points, dtype=np.float64)
    xa = pose_a.apply(x)
    dt = pose_a.translation - pose_b.translation
    if group.kind == "full":
        return float(np.linalg.norm(dt))

    def err(R):
        xb = x @ (pose_b.rotation @ R).T + pose_b.translation
        return float(np.sqrt(np.max(np.sum((xa - xb) ** 2, axis=1))))

    errs = [err(R) for R in group.rotations]
    best = int(np.argmin(errs))
    if group.kind != "axial":
        return errs[best]
    step = 2 * np.pi / len(group.rotations)
    center = best * step
    res = minimize_scalar(lambda a: err(rotvec_to_matrix([0.0, 0.0, a])),
                          bounds=(center - step, center + step), method="bounded",
                          options={"xatol": 1e-7})
    return float(min(errs[best], res.fun))


def symmetry_aware_rotation_error(Ra, Rb, group: SymmetryGroup) -> float:
    """Smallest rotation angle (radians) between ``Ra`` and ``Rb @ S`` over the group."""
    if group.kind == "full":
        return 0.0
    if group.kind == "axial":
        # Only the image of the symmetry axis is observable.
        za, zb = Ra[:, 2], Rb[:, 2]
        return float(np.arccos(np.clip(za @ zb, -1.0, 1.0)))
    best = np.inf
    for S in group.rotations:
        c = (np.trace(Ra.T @ Rb @ S) - 1.0) / 2.0
        best = min(best, float(np.arccos(np.clip(c, -1.0, 1.0))))
    return best


# --- objects ----------------------------------------------------------------------

@dataclass(frozen=True)
class ObjectSpec:
    """Parametric test object. ``size`` is the cylinder height (= diameter), cube edge,
    sphere diameter or blob mean diameter."""

    kind: str
    size: float = 100.0
    seed: int = 0
    cube_group: str = "cyclic4"

    def __post_init__(self):
        if self.kind not in ("cylinder", "cube", "sphere", "blob"):
            raise ValueError(f"unknown object kind {self.kind!r}")
        if not self.size > 0:
            raise ValueError("size must be positive")


@dataclass(eq=False)
class SyntheticObject:
    spec: ObjectSpec
    mesh: Mesh
    surface: SurfaceSampleSet          # inference points Ŝ
    symmetry: SymmetryGroup
    texture: Callable[[np.ndarray], np.ndarray]
    diameter: float = field(default=0.0)

    @property
    def name(self) -> str:
        return self.spec.kind

    def symmetry_oracle(self, point) -> np.ndarray:
        return self.symmetry.orbit(point)


def _blob_texture(size, seed):
    frame = Rotation.random(random_state=np.random.default_rng(seed + 7919)).as_matrix()
    phase = np.random.default_rng(seed + 104729).uniform(0, 2 * np.pi, 3)
    scale = 1.2 / (size / 2.0)

    def texture(x):
        return 0.5 + 0.45 * np.sin(scale * (np.asarray(x) @ frame) + phase * 0.25)
    return texture


def _cylinder_texture(size):
    h, r = size / 2.0, size / 2.0

    def texture(x):
        x = np.asarray(x)
        rho = np.hypot(x[:, 0], x[:, 1])
        return np.column_stack([0.5 + 0.45 * x[:, 2] / h, 0.2 + 0.6 * rho / r, np.full(len(x), 0.5)])
    return texture


def _cube_texture(size):
    s = size / 2.0

    def texture(x):
        x = np.asarray(x)
        return np.column_stack([0.5 + 0.45 * x[:, 2] / s,
                                0.2 + 0.6 * (x[:, 0] ** 2 + x[:, 1] ** 2) / (2 * s * s),
                                0.2 + 0.6 * (x[:, 0] * x[:, 1] / (s * s)) ** 2])
    return texture


def _constant_texture(value=0.6):
    def texture(x):
        return np.full((len(x), 3), value)
    return texture


def make_object(spec: ObjectSpec, sample_count: int = 4096, rng=None) -> SyntheticObject:
    """Mesh, inference sample set, texture and symmetry group for ``spec``.

    Symmetric objects get sample sets that are themselves invariant under a
    finite subgroup (12-fold for the cylinder, 4-fold for the cube), so
    renders of symmetry-related poses coincide.
    """
    seed = spec.seed if rng is None else rng
    if spec.kind == "cylinder":
        mesh = cylinder_mesh(spec.size / 2.0, spec.size, segments=144)
        group = SymmetryGroup.axial()
        sample_group = z_rotations(12)
        texture = _cylinder_texture(spec.size)
    elif spec.kind == "cube":
        mesh = box_mesh(spec.size)
        group = SymmetryGroup.cube() if spec.cube_group == "cube" else SymmetryGroup.cyclic(4)
        sample_group = z_rotations(4)
        texture = _constant_texture() if spec.cube_group == "cube" else _cube_texture(spec.size)
    elif spec.kind == "sphere":
        mesh = icosphere_mesh(spec.size / 2.0, 4)
        group = SymmetryGroup.full()
        sample_group = None
        texture = _constant_texture()
    else:
        mesh = blob_mesh(spec.size / 2.0, seed=spec.seed)
        group = SymmetryGroup.trivial()
        sample_group = None
        texture = _blob_texture(spec.size, spec.seed)
    base = np.random.default_rng(seed)
    surface = sample_surface_even(mesh, sample_count, rng=base.integers(2**32), symmetry=sample_group)
    diameter = _diameter(mesh.vertices)
    return SyntheticObject(spec, mesh, surface, group, texture, diameter)


def _diameter(points) -> float:
    hull = points[ConvexHull(points).vertices]
    return float(pdist(hull).max())


# --- scenes -----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Occluder:
    pose: Pose
    radius: float
    color: np.ndarray


@dataclass(frozen=True, eq=False)
class Scene:
    pose: Pose
    camera: Camera
    occluders: tuple = ()
    lights: np.ndarray = field(default_factory=lambda: DEFAULT_LIGHTS.copy())
    seed: int = 0
    object_id: str = ""

    def to_json(self) -> dict:
        return {"object_id": self.object_id, "seed": int(self.seed),
                "pose": pose_to_json(self.pose),
                "camera": {k: getattr(self.camera, k) for k in ("fx", "fy", "cx", "cy", "width", "height")},
                "lights": self.lights.tolist(),
                "occluders": [{"pose": pose_to_json(o.pose), "radius": o.radius, "color": o.color.tolist()}
                              for o in self.occluders]}

    @classmethod
    def from_json(cls, d: dict) -> Scene:
        return cls(pose_from_json(d["pose"]), Camera(**d["camera"]),
                   tuple(Occluder(pose_from_json(o["pose"]), float(o["radius"]), np.asarray(o["color"]))
                         for o in d.get("occluders", [])),
                   np.asarray(d.get("lights", DEFAULT_LIGHTS)), int(d.get("seed", 0)), d.get("object_id", ""))


def pose_to_json(pose: Pose) -> dict:
    return {"R": pose.rotation.reshape(-1).tolist(), "t": pose.translation.tolist()}


def pose_from_json(d: dict) -> Pose:
    return Pose(np.asarray(d["R"], dtype=np.float64).reshape(3, 3), d["t"])


def default_camera(size: int = 112) -> Camera:
    c = (size - 1) / 2.0
    return Camera(2.0 * size, 2.0 * size, c, c, size, size)


def sample_scene(obj: SyntheticObject, camera: Camera, rng, max_occluders: int = 2,
                 min_visible: float = 0.1, fill_range=(0.3, 0.7)) -> Scene:
    """Uniform rotation, object center in the central half of the crop, 0..max_occluders spheres."""
    rng = np.random.default_rng(rng)
    seed = int(rng.integers(2**31))
    R = Rotation.random(random_state=rng).as_matrix()
    fill = rng.uniform(*fill_range)
    W, H = camera.width, camera.height
    u = rng.uniform(W * 0.25, W * 0.75)
    v = rng.uniform(H * 0.25, H * 0.75)
    z = camera.fx * obj.diameter / (fill * W)
    t = camera.rays([u, v]) * z
    pose = Pose(R, t)
    radius = obj.diameter / 2.0
    for _ in range(50):
        occ = []
        for _ in range(int(rng.integers(0, max_occluders + 1))):
            r_occ = radius * rng.uniform(0.2, 0.4)
            du, dv = rng.uniform(-1, 1, 2) * fill * W / 2.0
            z_occ = z - radius - r_occ - rng.uniform(0.05, 0.3) * radius
            t_occ = camera.rays([u + du, v + dv]) * z_occ
            occ.append(Occluder(Pose(np.eye(3), t_occ), float(r_occ), rng.uniform(0.0, 1.0, 3)))
        scene = Scene(pose, camera, tuple(occ), DEFAULT_LIGHTS.copy(), seed, obj.name)
        if not occ:
            return scene
        crop = render_features(scene, obj, check_visible=False)
        full = crop.full_mask.sum()
        if full and crop.visible_mask.sum() >= min_visible * full:
            return scene
    return Scene(pose, camera, (), DEFAULT_LIGHTS.copy(), seed, obj.name)


def _shade(normals, lights):
    return np.maximum(0.0, normals @ lights.T)


def render_features(scene: Scene, obj: SyntheticObject, check_visible: bool = True,
                    background_sigma: float = BACKGROUND_SIGMA) -> RenderedCrop:
    """Ground-truth crop with the query model's per-pixel features."""
    cam = scene.camera
    H, W = cam.height, cam.width
    hits = raycast_mesh(obj.mesh, scene.pose, cam)
    full, depth = hits.mask, hits.depth

    occ_depth = np.full((H, W), np.inf)
    occ_normal = np.zeros((H, W, 3))
    occ_color = np.zeros((H, W, 3))
    rays = cam.rays(cam.pixel_grid())
    for o in scene.occluders:
        od = raycast_sphere(o.pose.translation, o.radius, cam)
        hit = od < occ_depth
        occ_depth[hit] = od[hit]
        occ_normal[hit] = (rays[hit] * od[hit, None] - o.pose.translation) / o.radius
        occ_color[hit] = o.color
    occluded = full & (occ_depth < depth)
    visible = full & ~occluded
    if check_visible and full.any() and not visible.any():
        raise FullyOccluded("object is fully occluded")

    coord = hits.points
    normal = np.zeros((H, W, 3))
    normal[full] = hit_normals(obj.mesh, hits)[full] @ scene.pose.rotation.T
    obs_depth = np.where(visible, depth, 0.0)
    occ_front = np.isfinite(occ_depth) & ~visible
    obs_depth[occ_front] = occ_depth[occ_front]

    rng = np.random.default_rng(scene.seed)
    feat = rng.normal(0.0, background_sigma, (H, W, FEATURE_DIM))
    grid = cam.pixel_grid()
    ncoord = np.stack([grid[..., 0] / (W - 1) * 2 - 1 if W > 1 else grid[..., 0] * 0,
                       grid[..., 1] / (H - 1) * 2 - 1 if H > 1 else grid[..., 1] * 0], axis=-1)
    if visible.any():
        n = normal[visible]
        feat[visible] = np.hstack([n, _shade(n, scene.lights), obj.texture(coord[visible]), ncoord[visible]])
    if occ_front.any():
        n = occ_normal[occ_front]
        feat[occ_front] = np.hstack([n, _shade(n, scene.lights), occ_color[occ_front], ncoord[occ_front]])
    return RenderedCrop(coord_image=coord, visible_mask=visible, full_mask=full,
                        normal_image=normal, depth_image=obs_depth, feature_image=feat)


def object_depth(scene_pose: Pose, camera: Camera, obj: SyntheticObject) -> np.ndarray:
    """Depth image of the unoccluded object (0 on background)."""
    d = raycast_mesh(obj.mesh, scene_pose, camera).depth
    return np.where(np.isfinite(d), d, 0.0)


# --- dataset persistence ---------------------------------------------------------------

def write_crop(crop: RenderedCrop, dest) -> None:
    """``RCRP``: magic, u32 H, W, F, then f32 planes: coord xyz, visible, full, normal xyz, depth, features."""
    H, W = crop.full_mask.shape
    feats = crop.feature_image if crop.feature_image is not None else np.zeros((H, W, 0))
    planes = [crop.coord_image[..., k] for k in range(3)]
    planes += [crop.visible_mask.astype(np.float32), crop.full_mask.astype(np.float32)]
    planes += [crop.normal_image[..., k] for k in range(3)]
    planes += [crop.depth_image]
    planes += [feats[..., k] for k in range(feats.shape[-1])]
    body = np.stack(planes).astype("<f4").tobytes()
    payload = RCRP_MAGIC + struct.pack("<III", H, W, feats.shape[-1]) + body
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "wb") as fh:
            fh.write(payload)
    else:
        dest.write(payload)


def read_crop(source) -> RenderedCrop:
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            raw = fh.read()
    else:
        raw = source.read()
    if raw[:4] != RCRP_MAGIC:
        raise ValueError("not an RCRP file")
    H, W, F = struct.unpack_from("<III", raw, 4)
    planes = np.frombuffer(raw, "<f4", offset=16).reshape(9 + F, H, W).astype(np.float64)
    coord = np.moveaxis(planes[0:3], 0, -1)
    feats = np.moveaxis(planes[9:], 0, -1) if F else None
    return RenderedCrop(coord_image=coord, visible_mask=planes[3] > 0.5, full_mask=planes[4] > 0.5,
                        normal_image=np.moveaxis(planes[5:8], 0, -1), depth_image=planes[8],
                        feature_image=feats)


def write_ground_truth(scenes, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, s in enumerate(scenes):
            rec = {"scene_id": i, **s.to_json()}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_ground_truth(path) -> list:
    with open(path, "r", encoding="utf-8") as fh:
        return [Scene.from_json(json.loads(line)) for line in fh if line.strip()]
