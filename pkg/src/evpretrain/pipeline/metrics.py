"""Pose error metrics in millimetres, root joint = wrist (index 0)."""

from __future__ import annotations

import numpy as np


class MetricError(ValueError):
    pass


class DegeneratePoseError(MetricError):
    pass


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray, bool]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim not in (2, 3) or pred.shape[-1] != 3:
        raise MetricError(f"pose shapes must match as (J, 3) or (B, J, 3): {pred.shape} vs {gt.shape}")
    single = pred.ndim == 2
    if single:
        pred, gt = pred[None], gt[None]
    return pred, gt, single


def root_center(pose: np.ndarray) -> np.ndarray:
    return pose - pose[..., :1, :]


def compute_mpjpe(pred, gt):
    """Mean joint distance after root-centring; float for one pose, array per
    sample for a batch."""
    pred, gt, single = _pair(pred, gt)
    err = np.linalg.norm(root_center(pred) - root_center(gt), axis=-1).mean(axis=-1)
    return float(err[0]) if single else err


def similarity_align(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares s R src + t onto dst with det(R) = +1 (Umeyama)."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - mu_s, dst - mu_d
    var_s = (a * a).sum() / len(src)
    if var_s == 0.0:
        return np.broadcast_to(mu_d, src.shape).copy()
    cov = b.T @ a / len(src)
    u, sv, vt = np.linalg.svd(cov)
    d = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[-1] = -1.0
    r = (u * d) @ vt
    s = (sv * d).sum() / var_s
    return s * a @ r.T + mu_d


def compute_pa_mpjpe(pred, gt):
    """Mean joint distance after similarity alignment of pred onto gt.

    The search includes the identity, so the result never exceeds MPJPE: the
    closed-form alignment minimizes squared error, which can leave the mean
    (unsquared) distance above the unaligned one on odd pairs.
    """
    pred, gt, single = _pair(pred, gt)
    if pred.shape[1] < 3:
        raise MetricError("PA-MPJPE needs at least 3 joints")
    p, q = root_center(pred), root_center(gt)
    out = np.empty(len(p))
    for i in range(len(p)):
        if np.ptp(q[i], axis=0).max() == 0.0:
            raise DegeneratePoseError(f"ground-truth pose {i} has all joints coincident")
        aligned = similarity_align(p[i], q[i])
        pa = np.linalg.norm(aligned - q[i], axis=-1).mean()
        out[i] = min(pa, np.linalg.norm(p[i] - q[i], axis=-1).mean())
    return float(out[0]) if single else out
