"""Algebraic perspective-three-point solver (Ke and Roumeliotis formulation).

The unknown rotation is expressed through two intermediate frames built from
the first two bearings and the first two object points. Eliminating the
remaining angle leaves a quartic in the cosine of one rotation angle; each
real root in [-1, 1] yields one closed-form pose.
"""
from __future__ import annotations

import numpy as np

from surfdist.errors import DegenerateConfiguration, NoRealSolution
from surfdist.geometry.transform import Camera, Pose, orthonormalize, rotvec_to_matrix, skew

_EPS = 1e-12


def quartic_roots(coeffs) -> np.ndarray:
    """Real roots of a quartic (highest power first), polished by one Newton step.

    Roots come from the companion-matrix eigenvalues; complex ones with a
    relative imaginary part above 1e-6 are dropped.
    """
    c = np.asarray(coeffs, dtype=np.float64)
    scale = np.max(np.abs(c))
    if not scale > 0:
        return np.zeros(0)
    c = c / scale
    nz = np.flatnonzero(np.abs(c) > _EPS)
    c = c[nz[0]:]
    if len(c) < 2:
        return np.zeros(0)
    roots = np.roots(c)
    real = roots[np.abs(roots.imag) <= 1e-6 * np.maximum(1.0, np.abs(roots))].real
    dc = np.polyder(c)
    out = []
    for x in real:
        d = np.polyval(dc, x)
        if abs(d) > _EPS:
            x = x - np.polyval(c, x) / d
        out.append(x)
    return np.asarray(out)


def bearings(camera: Camera, pixels) -> np.ndarray:
    """Unit viewing directions for (u, v) pixels."""
    rays = camera.rays(np.asarray(pixels, dtype=np.float64))
    return rays / np.linalg.norm(rays, axis=-1, keepdims=True)


def reprojection_error(pose: Pose, camera: Camera, object_points, image_points) -> np.ndarray:
    X = pose.apply(object_points)
    uv = np.column_stack([camera.fx * X[:, 0] / X[:, 2] + camera.cx,
                          camera.fy * X[:, 1] / X[:, 2] + camera.cy])
    return np.linalg.norm(uv - np.asarray(image_points, dtype=np.float64), axis=1)


def _cross(a, b):
    return np.stack([a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
                     a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
                     a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]], axis=-1)


def _dot(a, b):
    return np.einsum("...i,...i->...", a, b)


def _norm(a):
    return np.sqrt(_dot(a, a))


def degenerate_mask(b, w, tol: float = 1e-9) -> np.ndarray:
    """True for triples with non-finite input, collinear points or coincident rays."""
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3, 3)
    w = np.asarray(w, dtype=np.float64).reshape(-1, 3, 3)
    bad = ~(np.isfinite(b).all(axis=(1, 2)) & np.isfinite(w).all(axis=(1, 2)))
    with np.errstate(invalid="ignore", over="ignore"):
        e1, e2, e3 = w[:, 1] - w[:, 0], w[:, 2] - w[:, 0], w[:, 2] - w[:, 1]
        span = np.maximum(np.maximum(_norm(e1), _norm(e2)), _norm(e3))
        area = _norm(_cross(e1, e2))
        bad |= ~(span > 0) | ~(area > tol * span * span)
        for i, j in ((0, 1), (0, 2), (1, 2)):
            bad |= ~(_norm(_cross(b[:, i], b[:, j])) > tol)
        k3 = _cross(b[:, 0], b[:, 1])
        bad |= ~(np.abs(_dot(k3, b[:, 2])) > _EPS * _norm(k3))
    return bad


def _batch_quartic_roots(coeffs):
    """Real roots (N×4, NaN where absent) of N quartics via companion eigenvalues."""
    c = coeffs / coeffs[:, :1]
    n = len(c)
    comp = np.zeros((n, 4, 4))
    comp[:, 0, :] = -c[:, 1:]
    comp[:, 1, 0] = comp[:, 2, 1] = comp[:, 3, 2] = 1.0
    roots = np.linalg.eigvals(comp)
    real = np.where(np.abs(roots.imag) <= 1e-6 * np.maximum(1.0, np.abs(roots)), roots.real, np.nan)
    # one Newton step
    p = (((c[:, :1] * real + c[:, 1:2]) * real + c[:, 2:3]) * real + c[:, 3:4]) * real + c[:, 4:5]
    dp = ((4 * c[:, :1] * real + 3 * c[:, 1:2]) * real + 2 * c[:, 2:3]) * real + c[:, 3:4]
    step = np.where(np.abs(dp) > _EPS, p / np.where(dp == 0, 1.0, dp), 0.0)
    return real - step


def solve_bearings_batch(b, w):
    """Vectorized AP3P over N triples of unit bearings and object points.

    Returns ``(R, t, owner)``: candidate rotations (M×3×3), translations (M×3)
    with ``b_i ∝ R @ w_i + t``, and the index of the triple each came from.
    Degenerate triples contribute no candidates.
    """
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3, 3)
    w = np.asarray(w, dtype=np.float64).reshape(-1, 3, 3)
    keep = np.flatnonzero(~degenerate_mask(b, w))
    R, t, owner = _solve_nondegenerate(b[keep], w[keep])
    return R, t, keep[owner]


def _solve_nondegenerate(b, w):
    b1, b2, b3 = b[:, 0], b[:, 1], b[:, 2]
    w1, w2, w3 = w[:, 0], w[:, 1], w[:, 2]

    u0 = w1 - w2
    nu0 = _norm(u0)
    k1 = u0 / nu0[:, None]
    k3 = _cross(b1, b2)
    nk3 = _norm(k3)
    k3 = k3 / nk3[:, None]
    tz = _cross(b1, k3)
    v1 = _cross(b1, b3)
    v2 = _cross(b2, b3)
    u1 = w1 - w3
    u1k1 = _dot(u1, k1)
    k3b3 = _dot(k3, b3)

    f11 = k3b3.copy()
    f13 = _dot(k3, v1)
    f15 = -u1k1 * f11
    nl = _cross(u1, k1)
    delta = _norm(nl)
    nl = nl / delta[:, None]
    f11 *= delta
    f13 *= delta

    u2k1 = u1k1 - nu0
    f21 = _dot(tz, v2)
    f22 = nk3 * k3b3
    f23 = _dot(k3, v2)
    f24 = u2k1 * f22
    f25 = -u2k1 * f21
    f21 *= delta
    f22 *= delta
    f23 *= delta

    g1 = f13 * f22
    g2 = f13 * f25 - f15 * f23
    g3 = f11 * f23 - f13 * f21
    g4 = -f13 * f24
    g5 = f11 * f22
    g6 = f11 * f25 - f15 * f21
    g7 = -f15 * f24
    coeffs = np.column_stack([g5 * g5 + g1 * g1 + g3 * g3,
                              2 * (g5 * g6 + g1 * g2 + g3 * g4),
                              g6 * g6 + 2 * g5 * g7 + g2 * g2 + g4 * g4 - g1 * g1 - g3 * g3,
                              2 * (g6 * g7 - g1 * g2 - g3 * g4),
                              g7 * g7 - g2 * g2 - g4 * g4])
    ok_lead = np.abs(coeffs[:, 0]) > _EPS * np.abs(coeffs).max(axis=1)
    roots = np.full((len(b), 4), np.nan)
    if ok_lead.any():
        roots[ok_lead] = _batch_quartic_roots(coeffs[ok_lead])

    owner, col = np.nonzero(np.abs(roots) <= 1.0 + 1e-9)
    c1 = np.clip(roots[owner, col], -1.0, 1.0)
    sgn = np.where(k3b3[owner] > 0, 1.0, -1.0)
    s1 = np.sqrt(np.maximum(0.0, 1.0 - c1 * c1)) * sgn
    G = [g[owner] for g in (g1, g2, g3, g4, g5, g6, g7)]
    den = (G[4] * c1 + G[5]) * c1 + G[6]
    good = np.abs(den) > _EPS
    owner, c1, s1, den = owner[good], c1[good], s1[good], den[good]
    G = [g[good] for g in G]
    n3 = s1 / den
    ct3 = (G[0] * c1 + G[1]) * n3
    st3 = (G[2] * c1 + G[3]) * n3
    zero = np.zeros_like(c1)
    C13 = np.stack([np.stack([ct3, zero, -st3], -1),
                    np.stack([s1 * st3, c1, s1 * ct3], -1),
                    np.stack([c1 * st3, -s1, c1 * ct3], -1)], axis=1)
    Ck1nl = np.stack([k1, nl, _cross(k1, nl)], axis=2)[owner]
    Cb = np.stack([b1, k3, tz], axis=1)[owner]
    R = np.swapaxes(Ck1nl @ C13 @ Cb, 1, 2)
    b3p = b3[owner] * (delta / k3b3)[owner, None]
    t = s1[:, None] * b3p - np.einsum("nij,nj->ni", R, w3[owner])
    return R, t, owner


def solve_bearings(b, w) -> list[tuple[np.ndarray, np.ndarray]]:
    """AP3P for a single triple. Returns a list of (R, t) with ``b_i ∝ R @ w_i + t``."""
    b = np.asarray(b, dtype=np.float64).reshape(1, 3, 3)
    w = np.asarray(w, dtype=np.float64).reshape(1, 3, 3)
    if degenerate_mask(b, w)[0]:
        raise DegenerateConfiguration("collinear object points or coincident viewing rays")
    R, t, _ = _solve_nondegenerate(b, w)
    return list(zip(R, t))


def _polish(R, t, w, b, iterations: int = 3):
    """Gauss-Newton on the tangent-plane residuals of the three bearings."""
    for _ in range(iterations):
        X = w @ R.T + t
        z = X[:, 2:3]
        res = (X[:, :2] / z - b[:, :2] / b[:, 2:3]).ravel()
        if np.max(np.abs(res)) < 1e-15:
            break
        J = np.zeros((6, 6))
        for i in range(3):
            x, y, zz = X[i]
            dproj = np.array([[1 / zz, 0, -x / zz**2], [0, 1 / zz, -y / zz**2]])
            J[2 * i:2 * i + 2, :3] = dproj @ -skew(X[i] - t)
            J[2 * i:2 * i + 2, 3:] = dproj
        try:
            step = np.linalg.solve(J, -res)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)):
            break
        R = rotvec_to_matrix(step[:3]) @ R
        t = t + step[3:]
    return R, t


def ap3p(image_points, object_points, camera: Camera, max_residual: float = 1e-6) -> list[Pose]:
    """Poses mapping three object points onto three pixels (up to four).

    ``image_points`` are (u, v) pixel coordinates. Candidates with a point
    behind the camera or a reprojection residual above ``max_residual``
    pixels after polishing are discarded.
    """
    uv = np.asarray(image_points, dtype=np.float64).reshape(3, 2)
    w = np.asarray(object_points, dtype=np.float64).reshape(3, 3)
    b = bearings(camera, uv)
    poses = []
    for R, t in solve_bearings(b, w):
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            continue
        R = orthonormalize(R)
        if np.any((w @ R.T + t)[:, 2] <= 0):
            continue
        R, t = _polish(R, t, w, b)
        R = orthonormalize(R)
        if np.any((w @ R.T + t)[:, 2] <= 0):
            continue
        pose = Pose(R, t)
        if np.max(reprojection_error(pose, camera, w, uv)) <= max_residual:
            poses.append(pose)
    if not poses:
        raise NoRealSolution("no real pose candidate in front of the camera")
    return poses
