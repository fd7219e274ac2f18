"""Epipolar geometry on camera-normalized correspondences.

Conventions: a correspondence row is ``(x, y, u, v)`` with ``p = (x, y, 1)``
in view 1 and ``p' = (u, v, 1)`` in view 2.  Points map as ``X2 = R @ X1 + t``
and the essential matrix ``E = [t]_x R`` satisfies ``p'^T E p = 0``.

Everything here is float64 numpy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEN_EPS = 1e-15
DEFAULT_EPS = 1e-4
MAX_COORD = 10.0
CHEIRALITY_ROWS = 100


class GeometryError(ValueError):
    pass


class DegenerateDenominatorError(GeometryError):
    pass


class RankDeficiencyError(GeometryError):
    pass


class InsufficientSupportError(GeometryError):
    pass


class CheiralityTieError(GeometryError):
    pass


@dataclass(frozen=True)
class CameraPose:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    def check(self, tol: float = 1e-9) -> None:
        if not np.allclose(self.R.T @ self.R, np.eye(3), atol=tol):
            raise GeometryError("R is not orthonormal")
        if abs(np.linalg.det(self.R) - 1.0) > tol:
            raise GeometryError("det(R) != 1")
        if abs(np.linalg.norm(self.t) - 1.0) > tol:
            raise GeometryError("t is not a unit vector")


def as_correspondences(rows) -> np.ndarray:
    """Validate and return an (N, 4) float64 array."""
    c = np.asarray(rows, dtype=np.float64)
    if c.ndim == 1:
        c = c.reshape(1, -1)
    if c.ndim != 2 or c.shape[1] != 4 or c.shape[0] < 1:
        raise GeometryError(f"expected an (N, 4) correspondence array, got {c.shape}")
    if not np.all(np.isfinite(c)):
        raise GeometryError("correspondences must be finite")
    if np.any(np.abs(c) > MAX_COORD):
        raise GeometryError(f"normalized coordinate exceeds {MAX_COORD}")
    return c


def skew(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    return np.array([[0.0, -t[2], t[1]], [t[2], 0.0, -t[0]], [-t[1], t[0], 0.0]])


def essential_from_pose(pose: CameraPose) -> np.ndarray:
    return skew(pose.t) @ pose.R


def _homogeneous(c: np.ndarray):
    ones = np.ones(len(c))
    return np.column_stack([c[:, 0], c[:, 1], ones]), np.column_stack([c[:, 2], c[:, 3], ones])


def epipolar_residual(E, corrs) -> np.ndarray:
    """Algebraic residual p'^T E p per row."""
    c = np.atleast_2d(np.asarray(corrs, dtype=np.float64))
    p, q = _homogeneous(c)
    return np.einsum("ni,ij,nj->n", q, np.asarray(E, dtype=np.float64), p)


def symmetric_epipolar_distance(E, corrs) -> np.ndarray | float:
    """(p'^T E p)^2 / (|Ep|_{1,2}^2 + |E^T p'|_{1,2}^2).

    Accepts a single row (returns a float) or an (N, 4) array.
    """
    E = np.asarray(E, dtype=np.float64)
    arr = np.asarray(corrs, dtype=np.float64)
    single = arr.ndim == 1
    c = np.atleast_2d(arr)
    p, q = _homogeneous(c)
    Ep = p @ E.T
    Etq = q @ E
    num = np.einsum("ni,ni->n", q, Ep) ** 2
    den = Ep[:, 0] ** 2 + Ep[:, 1] ** 2 + Etq[:, 0] ** 2 + Etq[:, 1] ** 2
    bad = den <= DEN_EPS
    if np.any(bad):
        raise DegenerateDenominatorError(
            f"epipolar line normals vanish at row(s) {np.flatnonzero(bad)[:5].tolist()}"
        )
    d = num / den
    return float(d[0]) if single else d


def label_correspondences(E_gt, corrs, eps_label: float = DEFAULT_EPS) -> np.ndarray:
    if eps_label <= 0:
        raise ValueError("eps_label must be positive")
    return (symmetric_epipolar_distance(E_gt, as_correspondences(corrs)) < eps_label).astype(np.uint8)


def verify(E_hat, corrs, eps_verify: float = DEFAULT_EPS) -> np.ndarray:
    """Full-size verification: binary inlier flags over every row of ``corrs``."""
    if eps_verify <= 0:
        raise ValueError("eps_verify must be positive")
    return (symmetric_epipolar_distance(E_hat, as_correspondences(corrs)) < eps_verify).astype(np.uint8)


def eight_point_rows(corrs: np.ndarray) -> np.ndarray:
    """Rows q_i with q_i . vec(E) = p'^T E p (row-major vec)."""
    x, y, u, v = (corrs[:, k] for k in range(4))
    return np.column_stack([u * x, u * y, u, v * x, v * y, v, x, y, np.ones_like(x)])


def canonical_sign(E: np.ndarray) -> np.ndarray:
    """Flip sign so that the largest-magnitude entry is positive."""
    flat = E.ravel()
    return -E if flat[np.argmax(np.abs(flat))] < 0 else E


def enforce_essential(m) -> np.ndarray:
    """Project onto the essential manifold: U diag(1, 1, 0) V^T."""
    m = np.asarray(m, dtype=np.float64).reshape(3, 3)
    U, s, Vt = np.linalg.svd(m)
    if not s[1] > 1e-12 * s[0]:
        raise RankDeficiencyError("matrix has numerical rank < 2")
    if np.linalg.det(U) < 0:
        U[:, 2] = -U[:, 2]
    if np.linalg.det(Vt) < 0:
        Vt[2] = -Vt[2]
    return U @ np.diag([1.0, 1.0, 0.0]) @ Vt


def weighted_eight_point(corrs, weights) -> np.ndarray:
    """Weighted least-squares essential matrix from the smallest eigenvector of
    G = sum_i w_i q_i q_i^T, enforced and sign-canonicalized."""
    c = as_correspondences(corrs)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != c.shape[0]:
        raise GeometryError("weights and correspondences differ in length")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise GeometryError("weights must be finite and nonnegative")
    if np.count_nonzero(w > 0) < 8:
        raise InsufficientSupportError(f"{np.count_nonzero(w > 0)} positive weights, need 8")
    Q = eight_point_rows(c)
    G = Q.T @ (w[:, None] * Q)
    lam, V = np.linalg.eigh(G)
    if lam[1] <= 1e-12 * max(lam[-1], np.finfo(float).tiny):
        raise RankDeficiencyError("eight-point system has a nullspace of dimension > 1")
    return canonical_sign(enforce_essential(V[:, 0].reshape(3, 3)))


def _midpoint_depths(R, t, corrs):
    """Depths (view 1, view 2) of midpoint triangulation; 0 where the rays are parallel."""
    p, q = _homogeneous(corrs)
    d2 = q @ R  # R^T p' expressed in view-1 frame
    c2 = -R.T @ t
    # minimize |s1 p - (c2 + s2 d2)|^2
    a = np.einsum("ni,ni->n", p, p)
    b = np.einsum("ni,ni->n", p, d2)
    cc = np.einsum("ni,ni->n", d2, d2)
    r1 = p @ c2
    r2 = d2 @ c2
    det = a * cc - b * b
    ok = det > 1e-12 * a * cc
    safe = np.where(ok, det, 1.0)
    s1 = np.where(ok, (cc * r1 - b * r2) / safe, 0.0)
    s2 = np.where(ok, (b * r1 - a * r2) / safe, 0.0)
    return s1, s2


def pose_candidates(E) -> list[CameraPose]:
    U, _, Vt = np.linalg.svd(np.asarray(E, dtype=np.float64))
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2] / np.linalg.norm(U[:, 2])
    out = []
    for R in (U @ W @ Vt, U @ W.T @ Vt):
        for s in (1.0, -1.0):
            out.append(CameraPose(R, s * t))
    return out


def cheirality_counts(E, support) -> np.ndarray:
    c = as_correspondences(support)[:CHEIRALITY_ROWS]
    counts = []
    for cand in pose_candidates(E):
        s1, s2 = _midpoint_depths(cand.R, cand.t, c)
        counts.append(int(np.count_nonzero((s1 > 0) & (s2 > 0))))
    return np.array(counts)


def decompose_essential(E, support) -> CameraPose:
    """Pick the (R, t) candidate with the most support rows in front of both cameras."""
    cands = pose_candidates(E)
    counts = cheirality_counts(E, support)
    order = np.argsort(-counts, kind="stable")
    if counts[order[0]] == counts[order[1]]:
        raise CheiralityTieError(f"no strict cheirality maximum (counts {counts.tolist()})")
    return cands[order[0]]


def rotation_error_deg(R_est, R_gt) -> float:
    """Angle of R_gt^T R_est.  Same value as arccos((trace - 1) / 2) clamped to
    [-1, 1], evaluated with atan2 so it stays accurate near zero."""
    Rr = np.asarray(R_gt, dtype=np.float64).T @ np.asarray(R_est, dtype=np.float64)
    cos = np.clip((np.trace(Rr) - 1.0) / 2.0, -1.0, 1.0)
    sin = 0.5 * np.linalg.norm([Rr[2, 1] - Rr[1, 2], Rr[0, 2] - Rr[2, 0], Rr[1, 0] - Rr[0, 1]])
    return float(np.degrees(np.arctan2(sin, cos)))


def translation_error_deg(t_est, t_gt) -> float:
    t_est = np.asarray(t_est, dtype=np.float64)
    t_gt = np.asarray(t_gt, dtype=np.float64)
    t_est = t_est / np.linalg.norm(t_est)
    t_gt = t_gt / np.linalg.norm(t_gt)
    cos = min(abs(float(t_est @ t_gt)), 1.0)
    sin = float(np.linalg.norm(np.cross(t_est, t_gt)))
    return float(np.degrees(np.arctan2(sin, cos)))


def pose_error(est: CameraPose, gt: CameraPose) -> tuple[float, float]:
    """Angular errors (rotation, translation) in degrees; translation sign ignored."""
    return rotation_error_deg(est.R, gt.R), translation_error_deg(est.t, gt.t)
