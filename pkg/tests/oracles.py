"""Independent reference implementations used only by the test suite.

Everything here is written against the mathematical definitions, not
against the package internals, so the main code paths are checked by a
second route.
"""

from __future__ import annotations

import numpy as np


def quat_from_angle_axis(r):
    """Unit quaternion (w, x, y, z) for an angle-axis vector."""
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r)
    if theta < 1e-300:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = r / theta
    return np.concatenate([[np.cos(theta / 2)], np.sin(theta / 2) * axis])


def rotation_from_quat(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotation_oracle(r):
    """Rotation matrix via quaternions (independent of Rodrigues)."""
    return rotation_from_quat(quat_from_angle_axis(r))


def project_point(p, K):
    """Scalar pinhole projection of one 3D point to normalized (u, v)."""
    return (K.fx * p[0] / p[2] + K.cx, K.fy * p[1] / p[2] + K.cy)


def unproject_pixel(row, col, z, K):
    """Scalar unprojection of a pixel center at metric depth z."""
    u = (col + 0.5) / K.width
    v = (row + 0.5) / K.height
    return np.array([(u - K.cx) / K.fx * z, (v - K.cy) / K.fy * z, z])


def flow_at_pixel(row, col, z, R, t, K):
    """Scalar depth+motion -> flow for one pixel (independent path)."""
    p1 = unproject_pixel(row, col, z, K)
    p2 = R @ p1 + t
    u1 = (col + 0.5) / K.width
    v1 = (row + 0.5) / K.height
    u2, v2 = project_point(p2, K)
    return np.array([u2 - u1, v2 - v1])


def bilinear_sample_scalar(img, x, y):
    """Naive per-pixel bilinear sample; None when outside the support."""
    H, W = img.shape[:2]
    if x < 0 or x > W - 1 or y < 0 or y > H - 1:
        return None
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    x1, y1 = min(x0 + 1, W - 1), min(y0 + 1, H - 1)
    ax, ay = x - x0, y - y0
    return ((img[y0, x0] * (1 - ax) + img[y0, x1] * ax) * (1 - ay)
            + (img[y1, x0] * (1 - ax) + img[y1, x1] * ax) * ay)


def central_difference(f, x, step=1e-5):
    """Central finite-difference gradient of scalar f at flat vector x."""
    x = np.asarray(x, dtype=np.float64).ravel()
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += step
        xm[i] -= step
        g[i] = (f(xp) - f(xm)) / (2 * step)
    return g


def rel_error(a, b, floor=1e-8):
    """Max relative difference with an absolute floor for tiny entries."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


# --- brute-force evaluation metrics -------------------------------------

def sc_inv_bruteforce(z, z_gt, mask):
    ds = [np.log(z[i, j]) - np.log(z_gt[i, j])
          for i in range(z.shape[0]) for j in range(z.shape[1]) if mask[i, j]]
    n = len(ds)
    s1 = sum(ds)
    s2 = sum(d * d for d in ds)
    val = s2 / n - (s1 / n) ** 2
    return float(np.sqrt(max(val, 0.0)))


def l1_rel_bruteforce(z, z_gt, mask):
    vals = [abs(z[i, j] - z_gt[i, j]) / z_gt[i, j]
            for i in range(z.shape[0]) for j in range(z.shape[1]) if mask[i, j]]
    return float(sum(vals) / len(vals))


def l1_inv_bruteforce(z, z_gt, mask):
    vals = [abs(1.0 / z[i, j] - 1.0 / z_gt[i, j])
            for i in range(z.shape[0]) for j in range(z.shape[1]) if mask[i, j]]
    return float(sum(vals) / len(vals))


def epe_bruteforce(w, w_gt, mask):
    vals = [float(np.hypot(w[i, j, 0] - w_gt[i, j, 0], w[i, j, 1] - w_gt[i, j, 1]))
            for i in range(w.shape[0]) for j in range(w.shape[1]) if mask[i, j]]
    return float(sum(vals) / len(vals))


def rotation_angle_deg_bruteforce(Ra, Rb):
    """Angle between two rotations through the quaternion dot product."""
    # trace(Ra Rb^T) = 1 + 2 cos(angle)
    c = (np.trace(Ra @ Rb.T) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))
