"""Evaluation measures for depth, camera motion and optical flow.

Depth metrics consume metric depth z; for network outputs the evaluator
converts via z = 1/(s*xi) on valid pixels first. All reductions are
means over the intersection of the supplied validity masks.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .geometry import CameraMotion, rotation_from_angle_axis

CSV_FIELDS = ["dataset", "method", "l1_inv", "sc_inv", "l1_rel",
              "rot_deg", "trans_deg", "epe"]


@dataclass
class DepthErrorReport:
    l1_inv: float
    sc_inv: float
    l1_rel: float
    n_valid: int


@dataclass
class MotionErrorReport:
    rot_deg: float
    trans_deg: float


def _masked(z, z_gt, mask):
    z = np.asarray(z, dtype=np.float64)
    z_gt = np.asarray(z_gt, dtype=np.float64)
    if z.shape != z_gt.shape:
        raise ValueError("shapes differ")
    if mask is None:
        mask = np.ones(z.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != z.shape:
            raise ValueError("mask shape differs")
    if not mask.any():
        raise ValueError("no valid pixels")
    return z[mask], z_gt[mask]


def sc_inv(z, z_gt, mask=None) -> float:
    """Scale-invariant log-depth error: std of log z - log z_gt."""
    zv, gv = _masked(z, z_gt, mask)
    if np.any(zv <= 0) or np.any(gv <= 0):
        raise ValueError("depths must be positive on valid pixels")
    d = np.log(zv) - np.log(gv)
    n = d.size
    val = float(np.sum(d * d) / n - (np.sum(d) / n) ** 2)
    return float(np.sqrt(max(val, 0.0)))


def l1_rel(z, z_gt, mask=None) -> float:
    """Mean absolute depth error relative to the ground truth depth."""
    zv, gv = _masked(z, z_gt, mask)
    if np.any(gv <= 0):
        raise ValueError("ground-truth depths must be positive")
    return float(np.mean(np.abs(zv - gv) / gv))


def l1_inv(z, z_gt, mask=None) -> float:
    """Mean absolute inverse-depth error."""
    zv, gv = _masked(z, z_gt, mask)
    if np.any(zv <= 0) or np.any(gv <= 0):
        raise ValueError("depths must be positive on valid pixels")
    return float(np.mean(np.abs(1.0 / zv - 1.0 / gv)))


def depth_error_report(z, z_gt, mask=None) -> DepthErrorReport:
    zv, _ = _masked(z, z_gt, mask)
    return DepthErrorReport(
        l1_inv=l1_inv(z, z_gt, mask),
        sc_inv=sc_inv(z, z_gt, mask),
        l1_rel=l1_rel(z, z_gt, mask),
        n_valid=int(zv.size),
    )


def endpoint_error(flow, flow_gt, mask=None) -> float:
    """Mean Euclidean flow difference in normalized image units."""
    w = np.asarray(flow, dtype=np.float64)
    w_gt = np.asarray(flow_gt, dtype=np.float64)
    if w.shape != w_gt.shape:
        raise ValueError("shapes differ")
    if mask is None:
        mask = np.ones(w.shape[:2], dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != w.shape[:2]:
            raise ValueError("mask shape differs")
    if not mask.any():
        raise ValueError("no valid pixels")
    d = np.linalg.norm(w - w_gt, axis=-1)
    return float(np.mean(d[mask]))


def motion_angular_errors(pred: CameraMotion, gt: CameraMotion) -> MotionErrorReport:
    """Angles in degrees between predicted and true translation / rotation."""
    for t in (pred.t, gt.t):
        if abs(np.linalg.norm(t) - 1.0) > 1e-6:
            raise ValueError("translations must be unit norm")
    cos_t = float(np.clip(np.dot(pred.t, gt.t), -1.0, 1.0))
    trans_deg = float(np.degrees(np.arccos(cos_t)))
    R_rel = rotation_from_angle_axis(pred.r) @ rotation_from_angle_axis(gt.r).T
    cos_r = float(np.clip((np.trace(R_rel) - 1.0) / 2.0, -1.0, 1.0))
    rot_deg = float(np.degrees(np.arccos(cos_r)))
    return MotionErrorReport(rot_deg=rot_deg, trans_deg=trans_deg)


def log_scale_align(z, z_gt, mask=None) -> float:
    """Optimal global scale: exp(mean(log z_gt - log z)).

    Rescaling z by the returned factor zeroes the mean log-depth error
    and leaves sc_inv unchanged.
    """
    zv, gv = _masked(z, z_gt, mask)
    if np.any(zv <= 0) or np.any(gv <= 0):
        raise ValueError("depths must be positive on valid pixels")
    return float(np.exp(np.mean(np.log(gv) - np.log(zv))))


def csv_row(dataset: str, method: str, depth: DepthErrorReport | None,
            motion: MotionErrorReport | None, epe: float | None) -> dict:
    """One row of the shared report schema; missing parts stay empty."""
    row = {k: "" for k in CSV_FIELDS}
    row["dataset"] = dataset
    row["method"] = method
    if depth is not None:
        row["l1_inv"] = f"{depth.l1_inv:.9g}"
        row["sc_inv"] = f"{depth.sc_inv:.9g}"
        row["l1_rel"] = f"{depth.l1_rel:.9g}"
    if motion is not None:
        row["rot_deg"] = f"{motion.rot_deg:.9g}"
        row["trans_deg"] = f"{motion.trans_deg:.9g}"
    if epe is not None:
        row["epe"] = f"{epe:.9g}"
    return row


def write_csv(rows: list[dict], path: str | None = None) -> str:
    """Serialize rows; returns the CSV text (and writes it when given a path)."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    text = buf.getvalue()
    if path is not None:
        with open(path, "w") as f:
            f.write(text)
    return text
