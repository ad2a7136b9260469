"""Evaluation metrics: MPJPE and Procrustes-aligned MPJPE in millimeters,
bbox-normalized PCK, coordinate MSE, OKS-based AP/AR, and DLT triangulation
for closing the 2D -> 3D loop across calibrated views.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .synthdata import CameraModel

OKS_THRESHOLDS = tuple(np.arange(0.50, 0.951, 0.05).round(2))


class DegeneracyError(ValueError):
    """Input geometry does not determine the requested quantity."""


def _check_same_shape(a: np.ndarray, b: np.ndarray, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def mpjpe(pred3d: np.ndarray, gt3d: np.ndarray) -> float:
    """Mean Euclidean distance per joint, in the units of the inputs (mm)."""
    pred3d = np.asarray(pred3d, dtype=np.float64)
    gt3d = np.asarray(gt3d, dtype=np.float64)
    _check_same_shape(pred3d, gt3d, "mpjpe")
    return float(np.linalg.norm(pred3d - gt3d, axis=-1).mean())


def procrustes_align(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Best-fit similarity transform of pred onto gt: s R pred + t with a
    proper rotation (reflections sign-corrected), minimizing the Frobenius
    residual. pred, gt: (J, 3) with J >= 3 and non-degenerate geometry."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_same_shape(pred, gt, "procrustes_align")
    if pred.shape[0] < 3:
        raise DegeneracyError(f"need >= 3 points, got {pred.shape[0]}")
    mu_p = pred.mean(axis=0)
    mu_g = gt.mean(axis=0)
    pc = pred - mu_p
    gc = gt - mu_g
    norm_p = np.linalg.norm(pc)
    if norm_p < 1e-12:
        raise DegeneracyError("prediction points are coincident")
    if np.linalg.matrix_rank(gc, tol=1e-10) < 2:
        raise DegeneracyError("ground-truth points are collinear or coincident")
    h = pc.T @ gc
    u, s, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    corr = np.ones(3)
    corr[-1] = d
    rot = vt.T @ np.diag(corr) @ u.T
    scale = float((s * corr).sum()) / float((pc * pc).sum())
    t = mu_g - scale * rot @ mu_p
    return scale * pred @ rot.T + t


def p_mpjpe(pred3d: np.ndarray, gt3d: np.ndarray) -> float:
    """MPJPE after per-frame Procrustes alignment. Inputs (f, J, 3) or (J, 3)."""
    pred3d = np.asarray(pred3d, dtype=np.float64)
    gt3d = np.asarray(gt3d, dtype=np.float64)
    _check_same_shape(pred3d, gt3d, "p_mpjpe")
    if pred3d.ndim == 2:
        pred3d = pred3d[None]
        gt3d = gt3d[None]
    dists = []
    for f in range(pred3d.shape[0]):
        aligned = procrustes_align(pred3d[f], gt3d[f])
        dists.append(np.linalg.norm(aligned - gt3d[f], axis=-1))
    return float(np.concatenate(dists).mean())


def _bbox_diag(gt_pose: np.ndarray) -> float:
    span = gt_pose.max(axis=0) - gt_pose.min(axis=0)
    return float(np.linalg.norm(span))


def pck(pred2d: np.ndarray, gt2d: np.ndarray, alpha: float = 0.05) -> float:
    """Fraction of joints with error < alpha x ground-truth bbox diagonal.

    Accepts (J, 2) single poses or (..., J, 2) stacks (per-pose bbox)."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    pred2d = np.asarray(pred2d, dtype=np.float64)
    gt2d = np.asarray(gt2d, dtype=np.float64)
    _check_same_shape(pred2d, gt2d, "pck")
    pred = pred2d.reshape(-1, *pred2d.shape[-2:])
    gt = gt2d.reshape(-1, *gt2d.shape[-2:])
    correct = 0
    total = 0
    for pose_p, pose_g in zip(pred, gt):
        diag = _bbox_diag(pose_g)
        if diag <= 0:
            raise DegeneracyError("ground-truth bounding box has zero size")
        err = np.linalg.norm(pose_p - pose_g, axis=-1)
        correct += int((err < alpha * diag).sum())
        total += err.size
    return correct / total


def mse(pred2d: np.ndarray, gt2d: np.ndarray) -> float:
    """Mean squared coordinate difference over all entries."""
    pred2d = np.asarray(pred2d, dtype=np.float64)
    gt2d = np.asarray(gt2d, dtype=np.float64)
    _check_same_shape(pred2d, gt2d, "mse")
    return float(((pred2d - gt2d) ** 2).mean())


def oks(pred_pose: np.ndarray, gt_pose: np.ndarray, sigma: float = 0.05) -> float:
    """Object keypoint similarity: mean over joints of
    exp(-e^2 / (2 sigma^2 scale^2)) with scale the gt bbox diagonal."""
    scale = _bbox_diag(gt_pose)
    if scale <= 0:
        raise DegeneracyError("ground-truth bounding box has zero size")
    e2 = ((pred_pose - gt_pose) ** 2).sum(axis=-1)
    return float(np.exp(-e2 / (2.0 * sigma * sigma * scale * scale)).mean())


def oks_ap_ar(pred2d: np.ndarray, gt2d: np.ndarray, sigma: float = 0.05,
              thresholds: tuple[float, ...] = OKS_THRESHOLDS) -> tuple[float, float]:
    """Single-person AP/AR: one prediction per ground truth, no ranking step.

    A pose counts as detected at threshold t when its OKS exceeds t; AP and AR
    both average the detection rate over the threshold set, so they coincide
    under this protocol."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if any(not (0 < t < 1) for t in thresholds) or list(thresholds) != sorted(thresholds):
        raise ValueError(f"thresholds must be sorted within (0, 1): {thresholds}")
    pred2d = np.asarray(pred2d, dtype=np.float64)
    gt2d = np.asarray(gt2d, dtype=np.float64)
    _check_same_shape(pred2d, gt2d, "oks_ap_ar")
    pred = pred2d.reshape(-1, *pred2d.shape[-2:])
    gt = gt2d.reshape(-1, *gt2d.shape[-2:])
    scores = np.array([oks(p, g, sigma) for p, g in zip(pred, gt)])
    rates = [(scores > t).mean() for t in thresholds]
    ap = float(np.mean(rates))
    return ap, ap


def triangulate_dlt(obs: np.ndarray, cams: list[CameraModel]) -> tuple[np.ndarray, float]:
    """Homogeneous least-squares 3D point from pixel observations.

    obs: (V, 2) pixels, one row per camera. Returns (point3d, rms reprojection
    error in pixels). Raises DegeneracyError for rank-deficient geometry."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape != (len(cams), 2):
        raise ValueError(f"obs {obs.shape} vs {len(cams)} cameras")
    if len(cams) < 2:
        raise DegeneracyError("triangulation needs at least two views")
    rows = []
    for (u, v), cam in zip(obs, cams):
        p = cam.projection_matrix()
        rows.append(u * p[2] - p[0])
        rows.append(v * p[2] - p[1])
    a = np.stack(rows)
    _, s, vt = np.linalg.svd(a)
    if s[2] <= s[0] * 1e-10:
        raise DegeneracyError("rank-deficient triangulation system "
                              "(parallel or coincident rays)")
    x = vt[-1]
    if abs(x[3]) < 1e-12 * np.linalg.norm(x):
        raise DegeneracyError("triangulated point at infinity")
    point = x[:3] / x[3]
    errs = []
    for (u, v), cam in zip(obs, cams):
        p = cam.projection_matrix()
        proj = p @ np.append(point, 1.0)
        errs.append((proj[0] / proj[2] - u, proj[1] / proj[2] - v))
    rms = float(np.sqrt(np.mean(np.square(errs))))
    return point, rms


def triangulate_poses(pred2d_norm: np.ndarray,
                      cams: list[CameraModel]) -> np.ndarray:
    """Triangulate (f, V, J, 2) normalized poses into (f, J, 3) meters."""
    f, v, j, _ = pred2d_norm.shape
    sizes = np.array([[c.width, c.height] for c in cams], dtype=np.float64)
    pixels = pred2d_norm * sizes[None, :, None, :]
    out = np.zeros((f, j, 3))
    for fi in range(f):
        for ji in range(j):
            out[fi, ji], _ = triangulate_dlt(pixels[fi, :, ji], cams)
    return out


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

RATE_METRICS = ("AP", "AR", "PCK")
METRIC_ORDER = ("AP", "AR", "PCK", "MSE", "MPJPE", "P-MPJPE")


@dataclass
class MetricReport:
    """Per-action and aggregate values; MPJPE entries present only when 3D
    ground truth was available."""

    per_action: dict[str, dict[str, float]] = field(default_factory=dict)
    overall: dict[str, float] = field(default_factory=dict)

    def validate(self):
        for name, values in list(self.per_action.items()) + [("overall", self.overall)]:
            for k in RATE_METRICS:
                if k in values and not (0.0 <= values[k] <= 1.0):
                    raise ValueError(f"{name}: rate {k}={values[k]} outside [0, 1]")
            if "MPJPE" in values and "P-MPJPE" in values:
                if values["P-MPJPE"] > values["MPJPE"] + 1e-9:
                    raise ValueError(
                        f"{name}: P-MPJPE {values['P-MPJPE']} exceeds MPJPE "
                        f"{values['MPJPE']}")

    def to_dict(self) -> dict:
        return {"per_action": self.per_action, "overall": self.overall}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(per_action=d["per_action"], overall=d["overall"])

    def to_csv(self) -> str:
        """Actions as columns plus a trailing Average column, one metric per row."""
        actions = sorted(self.per_action)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["metric"] + actions + ["Average"])
        for metric in METRIC_ORDER:
            if metric not in self.overall:
                continue
            row = [metric]
            for a in actions:
                row.append(f"{self.per_action[a].get(metric, float('nan')):.6g}")
            row.append(f"{self.overall[metric]:.6g}")
            writer.writerow(row)
        return buf.getvalue()
