"""One-pass evaluation metrics: centre-error precision and overlap success."""
import numpy as np

from prunekit.tracker import iou

PRECISION_THRESHOLDS = np.arange(0, 51)
SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 21)


def _check(pred, gt):
    if len(pred) != len(gt):
        raise ValueError(f"sequence lengths differ: {len(pred)} predictions, {len(gt)} ground-truth boxes")
    if len(pred) == 0:
        raise ValueError("empty sequence")


def center_errors(pred, gt):
    _check(pred, gt)
    return np.array([np.hypot(p.cx - g.cx, p.cy - g.cy) for p, g in zip(pred, gt)])


def precision_curve(pred, gt, thresholds=PRECISION_THRESHOLDS):
    """Return (precision at 20 px, precision for each threshold in pixels)."""
    err = center_errors(pred, gt)
    curve = (err[None, :] <= np.asarray(thresholds, dtype=np.float64)[:, None]).mean(axis=1)
    at20 = float((err <= 20).mean())
    return at20, curve


def overlaps(pred, gt):
    _check(pred, gt)
    return np.array([iou(p, g) for p, g in zip(pred, gt)])


def success_curve(pred, gt, thresholds=SUCCESS_THRESHOLDS):
    ov = overlaps(pred, gt)
    return (ov[None, :] > np.asarray(thresholds)[:, None]).mean(axis=1)


def success_auc(pred, gt):
    """Mean success rate over IoU thresholds 0.00, 0.05, ..., 1.00."""
    return float(success_curve(pred, gt).mean())
