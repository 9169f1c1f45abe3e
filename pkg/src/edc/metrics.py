"""Segmentation and reconstruction metrics.

Confusion-matrix based mIoU/mPA, and PSNR/SSIM/MAE/MSE for cloud removal.
SSIM uses global per-band statistics (mean/variance/covariance over the whole
band), averaged over bands. All functions are pure numpy.
"""

import warnings

import numpy as np

VOID_LABEL = 255


class ConfusionMatrix:
    """K x K count matrix; rows = ground truth, cols = prediction."""

    def __init__(self, num_classes, counts=None):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.counts = counts

    def add(self, other):
        self.counts += other.counts
        return self


def confusion(pred, gt, num_classes):
    """Accumulate a confusion matrix over non-void pixels."""
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    valid = gt != VOID_LABEL
    p, g = pred[valid].astype(np.int64), gt[valid].astype(np.int64)
    if p.size and (p.max() >= num_classes or g.max() >= num_classes):
        raise ValueError("label id >= num_classes and != 255")
    counts = np.bincount(g * num_classes + p, minlength=num_classes ** 2)
    return ConfusionMatrix(num_classes, counts.reshape(num_classes, num_classes))


def _per_class(cm):
    counts = cm.counts
    tp = np.diag(counts).astype(np.float64)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    # Classes absent from both prediction and ground truth are excluded.
    present = (tp + fp + fn) > 0
    return tp, fp, fn, present


def miou(cm):
    tp, fp, fn, present = _per_class(cm)
    if not present.any():
        warnings.warn("mIoU undefined: no class present")
        return float("nan")
    iou = tp[present] / (tp + fp + fn)[present]
    return float(iou.mean())


def mpa(cm):
    tp, fp, fn, present = _per_class(cm)
    # Per-class pixel accuracy needs ground-truth pixels of that class.
    gt_present = (tp + fn) > 0
    if not gt_present.any():
        warnings.warn("mPA undefined: no class present in ground truth")
        return float("nan")
    pa = tp[gt_present] / (tp + fn)[gt_present]
    return float(pa.mean())


def mse(recon, target):
    recon = np.asarray(recon, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if recon.shape != target.shape:
        raise ValueError("shape mismatch")
    return float(np.mean((recon - target) ** 2))


def mae(recon, target):
    recon = np.asarray(recon, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if recon.shape != target.shape:
        raise ValueError("shape mismatch")
    return float(np.mean(np.abs(recon - target)))


def psnr(recon, target, max_val=1.0):
    e = mse(recon, target)
    if e == 0.0:
        return float("inf")
    return float(10.0 * np.log10(max_val ** 2 / e))


def ssim(recon, target, max_val=1.0):
    """Global-statistics SSIM, computed per band and averaged."""
    recon = np.asarray(recon, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if recon.shape != target.shape:
        raise ValueError("shape mismatch")
    if recon.ndim == 2:
        recon = recon[..., None]
        target = target[..., None]
    c1 = (0.01 * max_val) ** 2
    c2 = (0.03 * max_val) ** 2
    vals = []
    for b in range(recon.shape[-1]):
        x, y = recon[..., b], target[..., b]
        mx, my = x.mean(), y.mean()
        vx, vy = ((x - mx) ** 2).mean(), ((y - my) ** 2).mean()
        cxy = ((x - mx) * (y - my)).mean()
        vals.append(((2 * mx * my + c1) * (2 * cxy + c2))
                    / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))
