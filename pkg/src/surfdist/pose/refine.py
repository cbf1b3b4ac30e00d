"""Local pose refinement: maximize the mean log-probability of fixed surface points.

Each point ``x_j`` (with key ``k_j``) projects to a sub-pixel location where the
query image and the log-denominator image are bilinearly interpolated; the
objective is the mean of ``q·k_j - log Z``. The visible point set is taken once
from the initial pose.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from surfdist.errors import EmptyVisibleSet, ShapeMismatch
from surfdist.geometry.transform import MIN_DEPTH, Camera, Pose, orthonormalize, rotvec_jacobians, rotvec_to_matrix


@dataclass(eq=False)
class RefineResult:
    pose: Pose
    trace: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0

    @property
    def objective(self) -> float:
        return self.trace[-1]


class RefineObjective:
    """Objective and analytic gradient in scaled 6-DoF coordinates about ``initial``.

    Parameters are ``(w, d)`` with ``R = exp(w) R0`` and ``t = t0 + d·scale``;
    ``scale`` is the radius of the point set so both blocks move pixels similarly.
    """

    def __init__(self, initial: Pose, queries, log_denominator, keys, coords, camera: Camera):
        self.Q = np.asarray(queries, dtype=np.float64)
        self.L = np.asarray(log_denominator, dtype=np.float64)
        self.k = np.asarray(keys, dtype=np.float64)
        self.x = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
        if len(self.x) == 0:
            raise EmptyVisibleSet("no visible surface coordinates to refine against")
        if self.Q.shape[:2] != self.L.shape or self.k.shape != (len(self.x), self.Q.shape[2]):
            raise ShapeMismatch("queries, log denominator, keys and coords disagree in shape")
        H, W = self.L.shape
        if H < 2 or W < 2:
            raise ShapeMismatch("refinement needs an image of at least 2×2 pixels")
        self.camera = camera
        self.R0 = initial.rotation
        self.t0 = initial.translation
        centered = self.x - self.x.mean(axis=0)
        self.scale = float(max(np.sqrt((centered ** 2).sum(axis=1).max()), 1e-9))

    def pose(self, params) -> Pose:
        p = np.asarray(params, dtype=np.float64)
        R = orthonormalize(rotvec_to_matrix(p[:3]) @ self.R0)
        return Pose(R, self.t0 + p[3:] * self.scale)

    def _field(self, rows, cols):
        """q·k_j - log Z at integer pixels, per point."""
        return np.einsum("ne,ne->n", self.Q[rows, cols], self.k) - self.L[rows, cols]

    def value_and_grad(self, params):
        p = np.asarray(params, dtype=np.float64)
        Rw = rotvec_to_matrix(p[:3])
        R = Rw @ self.R0
        t = self.t0 + p[3:] * self.scale
        X = self.x @ R.T + t
        cam = self.camera
        H, W = self.L.shape
        z = X[:, 2]
        front = z > MIN_DEPTH
        zc = np.where(front, z, MIN_DEPTH)
        u = cam.fx * X[:, 0] / zc + cam.cx
        v = cam.fy * X[:, 1] / zc + cam.cy
        uc = np.clip(u, 0.0, W - 1.0)
        vc = np.clip(v, 0.0, H - 1.0)
        u0 = np.minimum(np.floor(uc).astype(np.int64), W - 2)
        v0 = np.minimum(np.floor(vc).astype(np.int64), H - 2)
        a = uc - u0
        b = vc - v0
        f00 = self._field(v0, u0)
        f01 = self._field(v0, u0 + 1)
        f10 = self._field(v0 + 1, u0)
        f11 = self._field(v0 + 1, u0 + 1)
        val = (1 - a) * (1 - b) * f00 + a * (1 - b) * f01 + (1 - a) * b * f10 + a * b * f11
        n = len(val)
        obj = float(val.mean())

        du = ((1 - b) * (f01 - f00) + b * (f11 - f10)) * ((u >= 0) & (u <= W - 1) & front)
        dv = ((1 - a) * (f10 - f00) + a * (f11 - f01)) * ((v >= 0) & (v <= H - 1) & front)
        # d(u, v)/dX
        gX = np.zeros_like(X)
        gX[:, 0] = du * cam.fx / zc
        gX[:, 1] = dv * cam.fy / zc
        gX[:, 2] = -(du * cam.fx * X[:, 0] + dv * cam.fy * X[:, 1]) / zc ** 2
        gX /= n
        Rx = self.x @ self.R0.T
        J = rotvec_jacobians(p[:3])
        g_rot = np.array([np.sum(gX * (Rx @ J[i].T)) for i in range(3)])
        g_t = gX.sum(axis=0) * self.scale
        return obj, np.concatenate([g_rot, g_t])

    def value(self, params) -> float:
        return self.value_and_grad(params)[0]


def refine(initial: Pose, query_image, log_denominator, key_model, visible_coords, camera: Camera,
           max_iterations: int = 100, gtol: float = 1e-6) -> RefineResult:
    """BFGS maximization of the mean correspondence log-likelihood.

    ``query_image`` is a :class:`QueryImage` or an H×W×E array at the resolution
    of ``camera``; ``key_model`` maps N×3 object coordinates to keys (a callable
    or an object with a ``keys`` method).
    """
    queries = getattr(query_image, "queries", query_image)
    coords = np.asarray(visible_coords, dtype=np.float64).reshape(-1, 3)
    if len(coords) == 0:
        raise EmptyVisibleSet("initial pose renders no visible surface")
    key_fn = key_model.keys if hasattr(key_model, "keys") else key_model
    keys = np.asarray(key_fn(coords), dtype=np.float64)
    fun = RefineObjective(initial, queries, log_denominator, keys, coords, camera)

    x0 = np.zeros(6)
    f0 = fun.value(x0)
    trace = [f0]

    def neg(p):
        f, g = fun.value_and_grad(p)
        return -f, -g

    def record(xk):
        trace.append(fun.value(xk))

    res = minimize(neg, x0, jac=True, method="BFGS", callback=record,
                   options={"gtol": gtol, "maxiter": max_iterations})
    best = res.x
    f_best = -float(res.fun)
    if not np.isfinite(f_best) or f_best < f0:
        best, f_best = x0, f0
    if trace[-1] != f_best:
        trace.append(f_best)
    return RefineResult(fun.pose(best), trace, bool(res.success), int(res.nit))
