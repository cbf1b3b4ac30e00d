"""Rigid transforms, the pinhole camera, and axis-angle helpers.

Conventions: camera frame has x right, y down, z forward. Pixel centers sit
at integer coordinates, so pixel (row r, col c) covers u in [c-0.5, c+0.5).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from surfdist.errors import NonPositiveDepth

MIN_DEPTH = 1e-9


@dataclass(frozen=True, eq=False)
class Pose:
    """Object-to-camera rigid transform, ``x_cam = R @ x_obj + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9, rtol=0):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation has det != +1")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> Pose:
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation) -> Pose:
        return cls(rotvec_to_matrix(rotvec), translation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: Pose) -> Pose:
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def inverse(self) -> Pose:
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def __repr__(self):
        rv = matrix_to_rotvec(self.rotation)
        return f"Pose(rotvec={np.round(rv, 6).tolist()}, t={np.round(self.translation, 6).tolist()})"


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def downscaled(self, factor: int) -> Camera:
        """Camera of an image whose pixels average ``factor``×``factor`` blocks."""
        s = int(factor)
        off = (s - 1) / 2.0
        return Camera(self.fx / s, self.fy / s, (self.cx - off) / s, (self.cy - off) / s,
                      self.width // s, self.height // s)

    def rays(self, uv) -> np.ndarray:
        """Unnormalized viewing rays with z = 1 for pixel coordinates ``uv``."""
        uv = np.asarray(uv, dtype=np.float64)
        x = (uv[..., 0] - self.cx) / self.fx
        y = (uv[..., 1] - self.cy) / self.fy
        return np.stack([x, y, np.ones_like(x)], axis=-1)

    def pixel_grid(self) -> np.ndarray:
        """H×W×2 array of (u, v) pixel-center coordinates."""
        v, u = np.mgrid[0:self.height, 0:self.width]
        return np.stack([u, v], axis=-1).astype(np.float64)


def project(pose: Pose, camera: Camera, points) -> tuple[np.ndarray, np.ndarray]:
    """Project object points to pixels. Returns (N×2 uv, N depths)."""
    X = pose.apply(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = X[:, 2]
    if np.any(z <= MIN_DEPTH):
        raise NonPositiveDepth(f"{int(np.sum(z <= MIN_DEPTH))} point(s) at or behind the camera")
    uv = np.empty((len(X), 2))
    uv[:, 0] = camera.fx * X[:, 0] / z + camera.cx
    uv[:, 1] = camera.fy * X[:, 1] / z + camera.cy
    return uv, z


def backproject(camera: Camera, uv, depth, pose: Pose | None = None) -> np.ndarray:
    """Inverse of :func:`project`; returns object-frame points if ``pose`` is given."""
    X = camera.rays(uv) * np.asarray(depth, dtype=np.float64)[..., None]
    if pose is not None:
        X = (X - pose.translation) @ pose.rotation
    return X


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotvec_to_matrix(rotvec) -> np.ndarray:
    w = np.asarray(rotvec, dtype=np.float64)
    theta = np.linalg.norm(w)
    W = skew(w)
    if theta < 1e-8:
        return np.eye(3) + W + 0.5 * W @ W
    return np.eye(3) + np.sin(theta) / theta * W + (1 - np.cos(theta)) / theta**2 * W @ W


def matrix_to_rotvec(R) -> np.ndarray:
    from scipy.spatial.transform import Rotation
    return Rotation.from_matrix(np.asarray(R)).as_rotvec()


def rotvec_jacobians(rotvec) -> np.ndarray:
    """Derivatives dR/dw_i of ``rotvec_to_matrix`` as a 3×3×3 array (index i first).

    Uses the closed form of Gallego & Yezzi; falls back to the generators at w≈0.
    """
    w = np.asarray(rotvec, dtype=np.float64)
    E = np.eye(3)
    theta2 = w @ w
    if theta2 < 1e-16:
        return np.stack([skew(E[i]) for i in range(3)])
    R = rotvec_to_matrix(w)
    out = np.empty((3, 3, 3))
    IR = np.eye(3) - R
    for i in range(3):
        out[i] = (w[i] * skew(w) + skew(np.cross(w, IR @ E[i]))) / theta2 @ R
    return out


def orthonormalize(R) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=np.float64))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def rotation_angle(Ra, Rb) -> float:
    """Geodesic angle (radians) between two rotations."""
    c = (np.trace(np.asarray(Ra).T @ np.asarray(Rb)) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))
