"""Pose evaluation: MPJPE, Procrustes-aligned MPJPE, PCK and AUC.

All functions take arrays shaped [..., J, 3] in millimetres.
"""

import numpy as np

AUC_THRESHOLDS = tuple(range(5, 155, 5))


class DegeneratePoseError(ValueError):
    pass


def _check(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return pred, gt


def joint_errors(pred, gt):
    pred, gt = _check(pred, gt)
    return np.linalg.norm(pred - gt, axis=-1)


def mpjpe(pred, gt):
    """Mean per-joint Euclidean distance (Protocol 1)."""
    return float(joint_errors(pred, gt).mean())


def procrustes_align(pred, gt):
    """Similarity transform of ``pred`` onto ``gt`` (proper rotation, scale >= 0, translation).

    Returns the aligned copy of ``pred``; batched over leading axes.
    """
    pred, gt = _check(pred, gt)
    if pred.shape[-2] < 3:
        raise ValueError("procrustes_align needs at least 3 joints")
    mu_p = pred.mean(axis=-2, keepdims=True)
    mu_g = gt.mean(axis=-2, keepdims=True)
    p0 = pred - mu_p
    g0 = gt - mu_g
    g_norm = np.sqrt((g0 ** 2).sum(axis=(-2, -1)))
    if np.any(g_norm <= 1e-12):
        raise DegeneratePoseError("ground truth has all joints coincident")
    p_var = (p0 ** 2).sum(axis=(-2, -1))
    # H = P^T G; R = V diag(1, 1, d) U^T maps centred pred rows onto gt rows via p @ R
    h = np.swapaxes(p0, -1, -2) @ g0
    u, s, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(u @ vt))
    d = np.where(d == 0, 1.0, d)
    corr = np.ones(s.shape)
    corr[..., -1] = d
    rot = (u * corr[..., None, :]) @ vt
    tr = (s * corr).sum(axis=-1)
    scale = np.where(p_var > 0, tr / np.where(p_var > 0, p_var, 1.0), 0.0)
    return scale[..., None, None] * (p0 @ rot) + mu_g


def p_mpjpe(pred, gt):
    """MPJPE after optimal similarity alignment (Protocol 2)."""
    return mpjpe(procrustes_align(pred, gt), gt)


def pck(preds, gts, threshold=150.0):
    """Percentage of joints whose error is strictly below ``threshold`` mm."""
    err = joint_errors(preds, gts)
    if err.size == 0:
        raise ValueError("pck of an empty set")
    return float(100.0 * (err < threshold).mean())


def auc(preds, gts, thresholds=AUC_THRESHOLDS):
    """Mean PCK over a threshold grid (default 5..150 mm, step 5)."""
    thresholds = list(thresholds)
    if not thresholds:
        raise ValueError("empty threshold grid")
    err = joint_errors(preds, gts)
    if err.size == 0:
        raise ValueError("auc of an empty set")
    return float(np.mean([100.0 * (err < t).mean() for t in thresholds]))


def evaluate(preds, gts, config=None, pck_threshold=150.0, thresholds=AUC_THRESHOLDS):
    """Report dict ``{count, mpjpe_mm, p_mpjpe_mm, pck150, auc, config}`` over center-frame poses [S, J, 3]."""
    preds, gts = _check(preds, gts)
    return {
        "count": int(preds.shape[0]),
        "mpjpe_mm": mpjpe(preds, gts),
        "p_mpjpe_mm": p_mpjpe(preds, gts),
        "pck150": pck(preds, gts, pck_threshold),
        "auc": auc(preds, gts, thresholds),
        "config": dict(config or {}, pck_threshold_mm=pck_threshold, auc_thresholds_mm=list(thresholds)),
    }
