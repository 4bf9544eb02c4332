"""Classical two-frame structure-from-motion pipeline.

Robust essential-matrix estimation (normalized 8-point inside RANSAC),
motion recovery by cheirality, Levenberg-Marquardt refinement of the
reprojection error, and dense depth by triangulating a flow field. Serves
as the comparison baseline for the learned model, and as an oracle when
fed ground-truth flow and motion.

Correspondences are in normalized camera coordinates (intrinsics removed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    CameraMotion,
    FlowField,
    Intrinsics,
    InverseDepthMap,
    angle_axis_from_rotation,
    depth_from_flow_motion,
    rotation_from_angle_axis,
)


class EstimationError(RuntimeError):
    """Estimation failed (too few points, degenerate configuration, ...)."""


class AmbiguousDecompositionError(EstimationError):
    """No essential-matrix decomposition wins the cheirality vote."""


@dataclass
class Correspondences:
    """Point matches (x1 <-> x2) in normalized camera coordinates."""

    x1: np.ndarray  # (N, 2)
    x2: np.ndarray  # (N, 2)

    def __post_init__(self):
        self.x1 = np.asarray(self.x1, dtype=np.float64).reshape(-1, 2)
        self.x2 = np.asarray(self.x2, dtype=np.float64).reshape(-1, 2)
        if self.x1.shape != self.x2.shape:
            raise ValueError("match arrays differ in shape")
        if not (np.all(np.isfinite(self.x1)) and np.all(np.isfinite(self.x2))):
            raise ValueError("correspondences must be finite")

    def __len__(self):
        return self.x1.shape[0]

    def subset(self, idx) -> "Correspondences":
        return Correspondences(self.x1[idx], self.x2[idx])


def _hartley_normalize(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Translate to the centroid and scale RMS distance to sqrt(2)."""
    c = pts.mean(axis=0)
    rms = np.sqrt(np.mean(np.sum((pts - c) ** 2, axis=1)))
    s = np.sqrt(2.0) / max(rms, 1e-12)
    T = np.array([[s, 0.0, -s * c[0]],
                  [0.0, s, -s * c[1]],
                  [0.0, 0.0, 1.0]])
    return (pts - c) * s, T


def _essential_constraints(E: np.ndarray) -> np.ndarray:
    """Project onto rank-2 with equal nonzero singular values."""
    U, S, Vt = np.linalg.svd(E)
    sigma = 0.5 * (S[0] + S[1])
    E = U @ np.diag([sigma, sigma, 0.0]) @ Vt
    return E / sigma  # singular values (1, 1, 0)


def eight_point(corr: Correspondences) -> np.ndarray:
    """Essential matrix from >= 8 matches via the normalized 8-point method."""
    n = len(corr)
    if n < 8:
        raise EstimationError(f"need at least 8 correspondences, got {n}")
    p1, T1 = _hartley_normalize(corr.x1)
    p2, T2 = _hartley_normalize(corr.x2)
    x1, y1 = p1[:, 0], p1[:, 1]
    x2, y2 = p2[:, 0], p2[:, 1]
    A = np.stack([x2 * x1, x2 * y1, x2, y2 * x1, y2 * y1, y2,
                  x1, y1, np.ones(n)], axis=1)
    _, s, Vt = np.linalg.svd(A)
    if s[7] < 1e-9 * s[0]:
        raise EstimationError("degenerate configuration (rank-deficient system)")
    En = Vt[-1].reshape(3, 3)
    E = T2.T @ En @ T1
    return _essential_constraints(E)


def sampson_distance(E: np.ndarray, corr: Correspondences) -> np.ndarray:
    """First-order squared epipolar distance per match."""
    ones = np.ones((len(corr), 1))
    x1 = np.hstack([corr.x1, ones])
    x2 = np.hstack([corr.x2, ones])
    Ex1 = x1 @ E.T
    Etx2 = x2 @ E
    num = np.sum(x2 * Ex1, axis=1) ** 2
    den = Ex1[:, 0] ** 2 + Ex1[:, 1] ** 2 + Etx2[:, 0] ** 2 + Etx2[:, 1] ** 2
    return num / np.maximum(den, 1e-30)


def ransac_essential(corr: Correspondences, threshold: float = 1e-4,
                     max_iters: int = 500, seed: int = 0
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Robust essential matrix; returns (E, inlier mask). Deterministic."""
    n = len(corr)
    if n < 8:
        raise EstimationError(f"need at least 8 correspondences, got {n}")
    rng = np.random.Generator(np.random.Philox(key=seed))
    best_mask = None
    best_count = -1
    best_score = np.inf
    for _ in range(max_iters):
        idx = rng.choice(n, size=8, replace=False)
        try:
            E = eight_point(corr.subset(idx))
        except EstimationError:
            continue
        d = sampson_distance(E, corr)
        mask = d < threshold
        count = int(mask.sum())
        score = float(d[mask].mean()) if count else np.inf
        if count > best_count or (count == best_count and score < best_score):
            best_count = count
            best_score = score
            best_mask = mask
    if best_mask is None or best_count < 8:
        raise EstimationError("no model with at least 8 inliers")
    E = eight_point(corr.subset(best_mask))
    return E, best_mask


def _triangulate_points(R: np.ndarray, t: np.ndarray, x1: np.ndarray,
                        x2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Midpoint triangulation of matched rays; returns depths (z1, z2)."""
    n = x1.shape[0]
    d1 = np.hstack([x1, np.ones((n, 1))])
    d2c = np.hstack([x2, np.ones((n, 1))])
    d2 = d2c @ R  # R^T applied to rows
    c2 = -R.T @ t
    a = np.sum(d1 * d1, axis=1)
    b = np.sum(d1 * d2, axis=1)
    c = np.sum(d2 * d2, axis=1)
    w0 = -c2
    d = d1 @ w0
    e = d2 @ w0
    denom = a * c - b * b
    ok = denom > 1e-14 * a * c
    denom = np.where(ok, denom, 1.0)
    s = (b * e - c * d) / denom
    q = (a * e - b * d) / denom
    P = 0.5 * (d1 * s[:, None] + c2 + d2 * q[:, None])
    z1 = np.where(ok, P[:, 2], -1.0)
    z2 = np.where(ok, (P @ R.T + t)[:, 2], -1.0)
    return z1, z2


def decompose_essential(E: np.ndarray, corr: Correspondences) -> CameraMotion:
    """Pick the (R, t) candidate with the best cheirality vote."""
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    R1 = U @ W @ Vt
    R2 = U @ W.T @ Vt
    tu = U[:, 2]
    candidates = [(R1, tu), (R1, -tu), (R2, tu), (R2, -tu)]
    counts = []
    for R, t in candidates:
        z1, z2 = _triangulate_points(R, t, corr.x1, corr.x2)
        counts.append(int(np.sum((z1 > 0) & (z2 > 0))))
    order = np.argsort(counts)
    if counts[order[-1]] == counts[order[-2]]:
        raise AmbiguousDecompositionError(
            f"cheirality tie between decompositions (votes {sorted(counts)})")
    R, t = candidates[int(order[-1])]
    return CameraMotion(angle_axis_from_rotation(R), t / np.linalg.norm(t))


def _tangent_basis(t: np.ndarray) -> np.ndarray:
    """Orthonormal (3, 2) basis of the plane perpendicular to unit t."""
    a = np.array([1.0, 0.0, 0.0])
    if abs(t[0]) > 0.9:
        a = np.array([0.0, 1.0, 0.0])
    b1 = np.cross(t, a)
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(t, b1)
    return np.stack([b1, b2], axis=1)


@dataclass
class RefineResult:
    motion: CameraMotion
    initial_cost: float
    final_cost: float
    iterations: int
    no_progress: bool


def _ba_residuals(R, t, a, xi, x1, x2):
    """Reprojection residuals in both images, (N, 4).

    A point is its (estimated) first-image position ``a`` at inverse
    depth ``xi``: P = (a, 1) / xi. Rows: res1 (2), res2 (2).
    """
    n = a.shape[0]
    ah = np.hstack([a, np.ones((n, 1))])
    P = ah / xi[:, None]
    Q = P @ R.T + t
    res = np.empty((n, 4))
    res[:, 0:2] = a - x1
    res[:, 2] = Q[:, 0] / Q[:, 2] - x2[:, 0]
    res[:, 3] = Q[:, 1] / Q[:, 2] - x2[:, 1]
    return res, Q


def _ba_jacobian_blocks(R, t, a, xi, Q, B):
    """Per-point Jacobian blocks for the two-frame adjustment.

    Returns (Jc, Jp): camera block (N, 4, 5) over (rotation update 3,
    translation tangent 2) and point block (N, 4, 3) over (a_x, a_y, xi).
    """
    n = a.shape[0]
    inv_z = 1.0 / Q[:, 2]
    A = np.zeros((n, 2, 3))
    A[:, 0, 0] = inv_z
    A[:, 1, 1] = inv_z
    A[:, 0, 2] = -Q[:, 0] * inv_z ** 2
    A[:, 1, 2] = -Q[:, 1] * inv_z ** 2
    RP = Q - t  # R @ P
    skew = np.zeros((n, 3, 3))
    skew[:, 0, 1] = -RP[:, 2]
    skew[:, 0, 2] = RP[:, 1]
    skew[:, 1, 0] = RP[:, 2]
    skew[:, 1, 2] = -RP[:, 0]
    skew[:, 2, 0] = -RP[:, 1]
    skew[:, 2, 1] = RP[:, 0]

    Jc = np.zeros((n, 4, 5))
    Jc[:, 2:4, 0:3] = -np.matmul(A, skew)
    Jc[:, 2:4, 3:5] = np.matmul(A, B)

    Jp = np.zeros((n, 4, 3))
    Jp[:, 0, 0] = 1.0
    Jp[:, 1, 1] = 1.0
    # dQ/da = R[:, :2] / xi ; dQ/dxi = -R (a,1)^T / xi^2 = -RP / xi
    dQ_da = R[None, :, :2] / xi[:, None, None]
    dQ_dxi = -RP / xi[:, None]
    Jp[:, 2:4, 0:2] = np.matmul(A, dQ_da)
    Jp[:, 2:4, 2] = np.einsum("nij,nj->ni", A, dQ_dxi)
    return Jc, Jp


def refine_motion(motion: CameraMotion, corr: Correspondences,
                  inliers: np.ndarray | None = None,
                  max_iters: int = 100) -> RefineResult:
    """Levenberg-Marquardt over (r, t on the unit sphere) and the points.

    Two-frame bundle adjustment: each point is parameterized by its
    first-image position and inverse depth, and the squared reprojection
    error in both images is minimized. The per-point blocks are
    eliminated by a Schur complement, so each step solves a 5x5 system.
    The translation stays unit norm via 2D tangent-plane updates. Stops
    on gradient norm < 1e-10, step norm < 1e-12 or the iteration cap; if
    no improving step exists the input is returned with ``no_progress``.
    """
    active = corr if inliers is None else corr.subset(inliers)
    n = len(active)
    if n < 8:
        raise EstimationError("refinement needs at least 8 matches")
    m = motion.normalized()
    R = rotation_from_angle_axis(m.r)
    t = m.t.copy()
    x1 = active.x1
    x2 = active.x2
    a = x1.copy()
    z1, _ = _triangulate_points(R, t, x1, x2)
    xi = 1.0 / np.clip(z1, 1e-6, None)

    res, Q = _ba_residuals(R, t, a, xi, x1, x2)
    cost = float(np.sum(res ** 2))
    initial_cost = cost
    lam = 1e-6
    accepted_any = False
    stalled = False
    iters = 0
    for iters in range(1, max_iters + 1):
        B = _tangent_basis(t)
        Jc, Jp = _ba_jacobian_blocks(R, t, a, xi, Q, B)
        # normal-equation blocks: U (5x5), V_k (3x3), W_k (5x3)
        U = np.einsum("nri,nrj->ij", Jc, Jc)
        V = np.einsum("nri,nrj->nij", Jp, Jp)
        W = np.einsum("nri,nrj->nij", Jc, Jp)
        gc = np.einsum("nri,nr->i", Jc, res)
        gp = np.einsum("nri,nr->ni", Jp, res)
        if max(np.abs(gc).max(), np.abs(gp).max()) < 1e-10:
            break
        improved = False
        tiny_step = False
        for _ in range(25):
            Ud = U + lam * np.diag(np.diag(U) + 1e-12)
            Vd = V + lam * (V * np.eye(3) + 1e-12 * np.eye(3))
            try:
                Vinv = np.linalg.inv(Vd)
            except np.linalg.LinAlgError:
                lam *= 4.0
                continue
            WVinv = np.matmul(W, Vinv)
            S = Ud - np.einsum("nij,nkj->ik", WVinv, W)
            rhs = -(gc - np.einsum("nij,nj->i", WVinv, gp))
            try:
                dc = np.linalg.solve(S, rhs)
            except np.linalg.LinAlgError:
                lam *= 4.0
                continue
            dp = -np.einsum("nij,nj->ni", Vinv,
                            gp + np.einsum("nji,j->ni", W, dc))
            step_norm = np.sqrt(float(dc @ dc) + float(np.sum(dp ** 2)))
            if step_norm < 1e-12:
                tiny_step = True
                break
            R_new = rotation_from_angle_axis(dc[0:3]) @ R
            t_new = t + B @ dc[3:5]
            t_new /= np.linalg.norm(t_new)
            a_new = a + dp[:, 0:2]
            xi_new = np.clip(xi + dp[:, 2], 1e-9, None)
            res_new, Q_new = _ba_residuals(R_new, t_new, a_new, xi_new,
                                           x1, x2)
            cost_new = float(np.sum(res_new ** 2))
            if cost_new < cost:
                R, t, a, xi = R_new, t_new, a_new, xi_new
                res, Q, cost = res_new, Q_new, cost_new
                lam = max(lam / 3.0, 1e-12)
                improved = True
                accepted_any = True
                break
            lam *= 4.0
        if not improved:
            stalled = not tiny_step
            break
    if stalled and not accepted_any:
        # damping escalation never found a downhill step
        return RefineResult(motion, initial_cost, initial_cost, iters, True)
    refined = CameraMotion(angle_axis_from_rotation(R), t)
    return RefineResult(refined, initial_cost, cost, iters, False)


def baseline_depth(flow: FlowField, motion: CameraMotion, K: Intrinsics
                   ) -> tuple[InverseDepthMap, np.ndarray]:
    """Dense depth by triangulating a flow field with a known motion."""
    return depth_from_flow_motion(flow, motion, K)


def sample_correspondences(flow: FlowField, mask: np.ndarray, n: int,
                           seed: int, K: Intrinsics) -> Correspondences:
    """Draw up to n valid-pixel matches from a flow field (seeded)."""
    H, W = flow.w.shape[:2]
    mask = np.asarray(mask, dtype=bool)
    ys, xs = np.nonzero(mask)
    count = ys.size
    if count == 0:
        raise EstimationError("no valid pixels to sample")
    if n < count:
        rng = np.random.Generator(np.random.Philox(key=seed))
        pick = rng.choice(count, size=n, replace=False)
        ys, xs = ys[pick], xs[pick]
    u1 = (xs + 0.5) / W
    v1 = (ys + 0.5) / H
    u2 = u1 + flow.w[ys, xs, 0]
    v2 = v1 + flow.w[ys, xs, 1]
    x1 = np.stack([(u1 - K.cx) / K.fx, (v1 - K.cy) / K.fy], axis=1)
    x2 = np.stack([(u2 - K.cx) / K.fx, (v2 - K.cy) / K.fy], axis=1)
    return Correspondences(x1, x2)


def estimate_motion_from_flow(flow: FlowField, mask: np.ndarray,
                              K: Intrinsics, n_samples: int = 400,
                              seed: int = 0, threshold: float = 1e-4,
                              max_iters: int = 500,
                              refine: bool = True) -> CameraMotion:
    """Full pipeline: sample matches, RANSAC 8-point, decompose, refine."""
    corr = sample_correspondences(flow, mask, n_samples, seed, K)
    E, inliers = ransac_essential(corr, threshold=threshold,
                                  max_iters=max_iters, seed=seed)
    motion = decompose_essential(E, corr.subset(inliers))
    if refine:
        motion = refine_motion(motion, corr, inliers).motion
    return motion
