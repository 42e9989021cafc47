"""Pinhole cameras, projection, linear triangulation and reprojection refinement.

World units are centimetres throughout; image coordinates are pixels with the
origin at the top-left corner. Cameras carry no distortion model.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

ORTHONORMAL_TOL = 1e-9


class GeometryError(ValueError):
    pass


class NonPositiveDepth(GeometryError):
    """The point lies on or behind the camera plane."""


class DegenerateGeometry(GeometryError):
    """The observations do not constrain a unique 3D point."""


class DidNotConverge(RuntimeWarning):
    pass


@dataclass(frozen=True, eq=False)
class CameraView:
    """Calibrated pinhole camera mapping world points via ``K (R X + t)``."""

    id: int
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self) -> None:
        K = np.asarray(self.K, dtype=float).reshape(3, 3)
        R = np.asarray(self.R, dtype=float).reshape(3, 3)
        t = np.asarray(self.t, dtype=float).reshape(3)
        if abs(K[1, 0]) > 0 or abs(K[2, 0]) > 0 or abs(K[2, 1]) > 0:
            raise GeometryError(f"camera {self.id}: K must be upper-triangular")
        if K[0, 0] <= 0 or K[1, 1] <= 0 or K[2, 2] <= 0:
            raise GeometryError(f"camera {self.id}: focal entries of K must be positive")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHONORMAL_TOL:
            raise GeometryError(f"camera {self.id}: R is not orthonormal")
        if self.width <= 0 or self.height <= 0:
            raise GeometryError(f"camera {self.id}: image dimensions must be positive")
        if not (np.all(np.isfinite(K)) and np.all(np.isfinite(t))):
            raise GeometryError(f"camera {self.id}: non-finite parameters")
        for name, value in (("K", K), ("R", R), ("t", t)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def extrinsic(self) -> np.ndarray:
        return np.hstack([self.R, self.t[:, None]])

    @property
    def projection_matrix(self) -> np.ndarray:
        return self.K @ self.extrinsic

    def in_image(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return (
            (uv[..., 0] >= 0)
            & (uv[..., 0] < self.width)
            & (uv[..., 1] >= 0)
            & (uv[..., 1] < self.height)
        )


def project(cam: CameraView, X) -> np.ndarray:
    """Project a world point to pixel coordinates.

    Raises NonPositiveDepth when the camera-frame depth is not positive. The
    result may lie outside the image; callers check visibility themselves.
    """
    X = np.asarray(X, dtype=float).reshape(3)
    Xc = cam.R @ X + cam.t
    if Xc[2] <= 0:
        raise NonPositiveDepth(f"point has depth {Xc[2]:.6g} in camera {cam.id}")
    p = cam.K @ Xc
    return p[:2] / p[2]


def project_points(cam: CameraView, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised projection of an ``(N, 3)`` array.

    Returns ``(uv, depth)``; entries with ``depth <= 0`` hold NaN.
    """
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    Xc = X @ cam.R.T + cam.t
    p = Xc @ cam.K.T
    depth = Xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = p[:, :2] / p[:, 2:3]
    uv[depth <= 0] = np.nan
    return uv, depth


def reprojection_error(cam: CameraView, X, x) -> float:
    return float(np.linalg.norm(project(cam, X) - np.asarray(x, dtype=float).reshape(2)))


def projection_jacobian(cam: CameraView, X) -> np.ndarray:
    """Derivative of ``project(cam, X)`` with respect to ``X`` (2x3)."""
    P = cam.projection_matrix
    X = np.asarray(X, dtype=float).reshape(3)
    p = P[:, :3] @ X + P[:, 3]
    if p[2] <= 0 or (cam.R @ X + cam.t)[2] <= 0:
        raise NonPositiveDepth(f"point behind camera {cam.id}")
    uv = p[:2] / p[2]
    return (P[:2, :3] - uv[:, None] * P[2, :3]) / p[2]


class CameraRig:
    """Stacked camera matrices for vectorised work over many views."""

    def __init__(self, cams: Sequence[CameraView]):
        self.cams = list(cams)
        ids = [c.id for c in self.cams]
        if len(set(ids)) != len(ids):
            raise GeometryError("duplicate camera ids")
        self.index = {cid: i for i, cid in enumerate(ids)}
        self.ids = np.array(ids, dtype=int)
        self.P = np.stack([c.projection_matrix for c in self.cams]) if cams else np.zeros((0, 3, 4))
        self.E = np.stack([c.extrinsic for c in self.cams]) if cams else np.zeros((0, 3, 4))
        self.Kinv = np.stack([np.linalg.inv(c.K) for c in self.cams]) if cams else np.zeros((0, 3, 3))
        self.centers = np.stack([c.center for c in self.cams]) if cams else np.zeros((0, 3))
        self.sizes = np.array([(c.width, c.height) for c in self.cams], dtype=float).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.cams)

    def __getitem__(self, cid: int) -> CameraView:
        return self.cams[self.index[cid]]

    def rows(self, view_ids: Iterable[int]) -> np.ndarray:
        return np.array([self.index[v] for v in view_ids], dtype=int)

    def normalize(self, rows: np.ndarray, uv: np.ndarray) -> np.ndarray:
        """Pixel coordinates to normalised image coordinates (``K^-1`` applied)."""
        h = np.concatenate([uv, np.ones(uv.shape[:-1] + (1,))], axis=-1)
        n = np.einsum("...ij,...j->...i", self.Kinv[rows], h)
        return n[..., :2] / n[..., 2:3]

    def reproject(self, rows: np.ndarray, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project points ``X[..., 3]`` into views ``rows`` (broadcast together).

        Returns ``(uv, depth)`` with NaN pixels where depth is not positive.
        """
        Xh = np.concatenate([X, np.ones(X.shape[:-1] + (1,))], axis=-1)
        p = np.einsum("...ij,...j->...i", self.P[rows], Xh)
        depth = np.einsum("...j,...j->...", self.E[rows][..., 2, :], Xh)
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = p[..., :2] / p[..., 2:3]
        uv = np.where((depth > 0)[..., None], uv, np.nan)
        return uv, depth


def as_rig(cams: Sequence[CameraView] | CameraRig) -> CameraRig:
    return cams if isinstance(cams, CameraRig) else CameraRig(cams)


def dlt_batch(E: np.ndarray, xn: np.ndarray, rank_tol: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
    """Homogeneous DLT over a batch of problems.

    ``E`` holds extrinsics ``(..., k, 3, 4)`` and ``xn`` normalised image
    points ``(..., k, 2)``. Returns points ``(..., 3)`` and a boolean mask that
    is False where the design matrix is rank-deficient or the solution lies at
    infinity.
    """
    rows_x = xn[..., 0:1] * E[..., 2, :] - E[..., 0, :]
    rows_y = xn[..., 1:2] * E[..., 2, :] - E[..., 1, :]
    A = np.concatenate([rows_x, rows_y], axis=-2)
    A = A / np.linalg.norm(A, axis=-1, keepdims=True)
    _, s, vt = np.linalg.svd(A)
    Xh = vt[..., -1, :]
    ok = (s[..., 2] > rank_tol * s[..., 0]) & (np.abs(Xh[..., 3]) > 1e-12)
    with np.errstate(divide="ignore", invalid="ignore"):
        X = Xh[..., :3] / Xh[..., 3:4]
    return X, ok & np.all(np.isfinite(X), axis=-1)


def _unpack(obs) -> tuple[list[CameraView], np.ndarray]:
    cams = [c for c, _ in obs]
    uv = np.array([np.asarray(x, dtype=float).reshape(2) for _, x in obs]).reshape(-1, 2)
    return cams, uv


def triangulate_linear(obs: Sequence[tuple[CameraView, object]]) -> np.ndarray:
    """Least-squares DLT triangulation from ``(camera, pixel)`` pairs."""
    if len(obs) < 2:
        raise DegenerateGeometry("need at least two observations")
    cams, uv = _unpack(obs)
    E = np.stack([c.extrinsic for c in cams])
    h = np.stack([np.linalg.solve(c.K, [u, v, 1.0]) for c, (u, v) in zip(cams, uv)])
    X, ok = dlt_batch(E, h[:, :2] / h[:, 2:3])
    if not ok:
        raise DegenerateGeometry("rank-deficient design matrix (parallel rays or coincident centres)")
    return X


@dataclass(frozen=True)
class LMOptions:
    damping: float = 1e-3
    factor: float = 10.0
    max_iterations: int = 50
    tolerance: float = 1e-10

    def __post_init__(self) -> None:
        if self.damping <= 0 or self.factor <= 1 or self.max_iterations < 1 or self.tolerance <= 0:
            raise ValueError("invalid Levenberg-Marquardt options")


@dataclass(frozen=True, eq=False)
class Refinement:
    point: np.ndarray
    residuals: np.ndarray = field(repr=False)
    cost: float
    initial_cost: float
    iterations: int
    converged: bool


def _residuals(P: np.ndarray, E: np.ndarray, uv: np.ndarray, X: np.ndarray):
    Xh = np.append(X, 1.0)
    p = P @ Xh
    depth = E[:, 2, :] @ Xh
    if np.any(depth <= 0) or np.any(p[:, 2] <= 0):
        return None, None, None
    proj = p[:, :2] / p[:, 2:3]
    r = proj - uv
    return r, p, proj


def refine_triangulation(
    X0,
    obs: Sequence[tuple[CameraView, object]],
    options: LMOptions = LMOptions(),
) -> Refinement:
    """Minimise summed squared reprojection error with Levenberg-Marquardt.

    The final cost never exceeds the cost at ``X0``. If the iteration budget
    runs out while the cost is still dropping faster than the tolerance, the
    best iterate is returned with ``converged=False`` and a DidNotConverge
    warning is issued.
    """
    if len(obs) < 2:
        raise DegenerateGeometry("need at least two observations")
    cams, uv = _unpack(obs)
    P = np.stack([c.projection_matrix for c in cams])
    E = np.stack([c.extrinsic for c in cams])
    return refine_stacked(X0, P, E, uv, options)


def refine_stacked(
    X0,
    P: np.ndarray,
    E: np.ndarray,
    uv: np.ndarray,
    options: LMOptions = LMOptions(),
) -> Refinement:
    """:func:`refine_triangulation` on pre-stacked projection and extrinsic matrices."""
    X = np.asarray(X0, dtype=float).reshape(3).copy()
    if not np.all(np.isfinite(X)):
        raise GeometryError("initial point must be finite")

    r, p, proj = _residuals(P, E, uv, X)
    if r is None:
        raise NonPositiveDepth("initial point is behind at least one camera")
    cost = float(np.sum(r * r))
    initial_cost = cost
    lam = options.damping
    converged = cost == 0.0
    it = 0
    while not converged and it < options.max_iterations:
        it += 1
        J = (P[:, :2, :3] - proj[:, :, None] * P[:, 2:3, :3]) / p[:, 2, None, None]
        J = J.reshape(-1, 3)
        rr = r.reshape(-1)
        H = J.T @ J
        g = J.T @ rr
        if not np.any(g):
            converged = True
            break
        diag = np.diag(np.maximum(np.diag(H), 1e-12))
        while True:
            try:
                step = np.linalg.solve(H + lam * diag, -g)
            except np.linalg.LinAlgError:
                step = None
            if step is not None:
                X_new = X + step
                r_new, p_new, proj_new = _residuals(P, E, uv, X_new)
                cost_new = float(np.sum(r_new * r_new)) if r_new is not None else np.inf
                if cost_new < cost:
                    rel = (cost - cost_new) / cost
                    X, r, p, proj, cost = X_new, r_new, p_new, proj_new, cost_new
                    lam = max(lam / options.factor, 1e-15)
                    if rel < options.tolerance or cost == 0.0:
                        converged = True
                    break
            lam *= options.factor
            if lam > 1e16:
                # no descent direction left at this scale: a local minimum
                converged = True
                break
    if not converged:
        warnings.warn(f"refinement stopped after {it} iterations", DidNotConverge, stacklevel=3)
    return Refinement(
        point=X,
        residuals=np.linalg.norm(r, axis=1),
        cost=cost,
        initial_cost=initial_cost,
        iterations=it,
        converged=converged,
    )


def look_at_camera(
    cid: int,
    center,
    target,
    focal: float,
    width: int,
    height: int,
    up=(0.0, 0.0, 1.0),
) -> CameraView:
    """Camera at ``center`` whose optical axis passes through ``target``."""
    center = np.asarray(center, dtype=float)
    z = np.asarray(target, dtype=float) - center
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=float))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, np.array([1.0, 0.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    K = np.array([[focal, 0.0, width / 2.0], [0.0, focal, height / 2.0], [0.0, 0.0, 1.0]])
    return CameraView(cid, K, R, -R @ center, width, height)


@dataclass(frozen=True, eq=False)
class Capsule:
    """Segment ``a``-``b`` swept by a ball of ``radius``; models a body part."""

    a: np.ndarray
    b: np.ndarray
    radius: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "a", np.asarray(self.a, dtype=float).reshape(3))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float).reshape(3))
        if self.radius <= 0:
            raise GeometryError("capsule radius must be positive")


def segment_distance(p0, p1, q0, q1) -> float:
    """Minimum distance between segments ``p0p1`` and ``q0q1``."""
    p0, p1, q0, q1 = (np.asarray(v, dtype=float) for v in (p0, p1, q0, q1))
    d1 = p1 - p0
    d2 = q1 - q0
    r = p0 - q0
    a = d1 @ d1
    e = d2 @ d2
    f = d2 @ r
    eps = 1e-18
    if a <= eps and e <= eps:
        return float(np.linalg.norm(r))
    if a <= eps:
        s, t = 0.0, float(np.clip(f / e, 0.0, 1.0))
    else:
        c = d1 @ r
        if e <= eps:
            s, t = float(np.clip(-c / a, 0.0, 1.0)), 0.0
        else:
            b = d1 @ d2
            denom = a * e - b * b
            s = float(np.clip((b * f - c * e) / denom, 0.0, 1.0)) if denom > eps else 0.0
            t = (b * s + f) / e
            if t < 0.0:
                t, s = 0.0, float(np.clip(-c / a, 0.0, 1.0))
            elif t > 1.0:
                t, s = 1.0, float(np.clip((b - c) / a, 0.0, 1.0))
    return float(np.linalg.norm(p0 + d1 * s - (q0 + d2 * t)))


def segment_hits_capsule(p0, p1, capsule: Capsule) -> bool:
    return segment_distance(p0, p1, capsule.a, capsule.b) <= capsule.radius


def ray_blocked(center, X, occluders: Sequence[Capsule]) -> bool:
    """True when the sight line from a camera centre to ``X`` crosses an occluder."""
    return any(segment_hits_capsule(center, X, c) for c in occluders)


def segments_blocked(centers: np.ndarray, X: np.ndarray, occluders: Sequence[Capsule]) -> np.ndarray:
    """``(V, N)`` flags: does segment ``centers[v]``-``X[n]`` pass through any capsule?

    Vectorised counterpart of :func:`ray_blocked`.
    """
    centers = np.asarray(centers, dtype=float).reshape(-1, 3)
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    if not occluders:
        return np.zeros((len(centers), len(X)), dtype=bool)
    q0 = np.stack([c.a for c in occluders])
    q1 = np.stack([c.b for c in occluders])
    radius = np.array([c.radius for c in occluders])
    # Axes: (V, N, C) with the coordinate axis last.
    p0 = centers[:, None, None, :]
    d1 = X[None, :, None, :] - p0
    d2 = q1 - q0
    r = p0 - q0
    a = np.einsum("...i,...i->...", d1, d1)
    e = np.einsum("...i,...i->...", d2, d2)
    b = np.einsum("...i,...i->...", d1, d2)
    c = np.einsum("...i,...i->...", d1, r)
    f = np.einsum("...i,...i->...", r, d2)
    a, b, c, f = np.broadcast_arrays(a, b, c, f)
    safe_a = np.where(a > 1e-18, a, 1.0)
    safe_e = np.where(e > 1e-18, e, 1.0)
    denom = a * e - b * b
    s = np.where(denom > 1e-12, np.clip((b * f - c * e) / np.where(denom > 1e-12, denom, 1.0), 0.0, 1.0), 0.0)
    t = (b * s + f) / safe_e
    s = np.where(t < 0, np.clip(-c / safe_a, 0.0, 1.0), np.where(t > 1, np.clip((b - c) / safe_a, 0.0, 1.0), s))
    t = np.clip(t, 0.0, 1.0)
    # Degenerate capsules (a ball) reduce to point-to-segment distance.
    s = np.where(e > 1e-18, s, np.clip(-c / safe_a, 0.0, 1.0))
    t = np.where(e > 1e-18, t, 0.0)
    gap = p0 + s[..., None] * d1 - (q0 + t[..., None] * d2)
    hit = np.einsum("...i,...i->...", gap, gap) <= radius**2
    return hit.any(axis=-1)
