"""Dataset-level evaluation: per-subset (all / clear / cloudy) segmentation,
reconstruction, and calibration metrics, assembled into a report block."""

import numpy as np
import torch

from . import diagnostics, metrics

SUBSETS = ("all", "clear", "cloudy")


def model_predictor(model):
    """Wrap a trained model as sample -> (probs H x W x K, recon H x W x 4)."""
    model.eval()

    def predict(sample):
        opt = torch.from_numpy(sample.cloudy_opt).double().permute(2, 0, 1)[None]
        sar = torch.from_numpy(sample.sar).double().permute(2, 0, 1)[None]
        with torch.no_grad():
            out = model(opt, sar)
        probs = torch.softmax(out.logits[0], dim=0).permute(1, 2, 0).numpy()
        recon = out.recon[0].permute(1, 2, 0).numpy()
        return probs, recon

    return predict


def oracle_predictor(num_classes):
    """Testing mode: echoes ground truth as a one-hot prediction and the
    cloud-free image as the reconstruction."""

    def predict(sample):
        labels = sample.labels
        safe = np.where(labels == metrics.VOID_LABEL, 0, labels)
        probs = np.eye(num_classes, dtype=np.float64)[safe]
        return probs, sample.cloudfree_opt.astype(np.float64)

    return predict


def _masked_ssim(recon, target, mask):
    """Global-statistics SSIM with moments restricted to masked pixels."""
    if not mask.any():
        return float("nan")
    # (N, C) pixel lists -> (N, 1, C) so the band axis stays last
    return metrics.ssim(recon[mask][:, None, :], target[mask][:, None, :])


def _subset_mask(sample, subset):
    if subset == "all":
        return np.ones_like(sample.cloudmask, dtype=bool)
    if subset == "clear":
        return sample.cloudmask == 0
    return sample.cloudmask == 1


def evaluate_dataset(samples, predict, num_classes, bins=diagnostics.DEFAULT_BINS):
    """Run `predict` over every sample and compute per-subset metrics.

    Segmentation subsets restrict the valid pixel set by the cloud mask;
    reconstruction errors are averaged over subset pixels; SSIM statistics
    are taken over subset pixels per band.
    """
    cms = {s: metrics.ConfusionMatrix(num_classes) for s in SUBSETS}
    sq = {s: 0.0 for s in SUBSETS}
    ab = {s: 0.0 for s in SUBSETS}
    npx = {s: 0 for s in SUBSETS}
    ssims = {s: [] for s in SUBSETS}
    all_probs, all_gt, all_cloud = [], [], []

    for sample in samples:
        probs, recon = predict(sample)
        pred = probs.argmax(axis=-1).astype(np.int64)
        target = sample.cloudfree_opt.astype(np.float64)
        for s in SUBSETS:
            mask = _subset_mask(sample, s)
            gt = np.where(mask, sample.labels, metrics.VOID_LABEL)
            cms[s].add(metrics.confusion(pred, gt, num_classes))
            d = recon[mask] - target[mask]
            sq[s] += float((d ** 2).sum())
            ab[s] += float(np.abs(d).sum())
            npx[s] += d.size
            v = _masked_ssim(recon, target, mask)
            if np.isfinite(v):
                ssims[s].append(v)
        all_probs.append(probs.reshape(-1, num_classes))
        all_gt.append(sample.labels.reshape(-1))
        all_cloud.append(sample.cloudmask.reshape(-1))

    probs = np.concatenate(all_probs)
    gt = np.concatenate(all_gt)
    cloud = np.concatenate(all_cloud)
    subset_masks = {"all": np.ones_like(cloud, dtype=bool),
                    "clear": cloud == 0, "cloudy": cloud == 1}

    blocks = {}
    for s in SUBSETS:
        e_mse = sq[s] / npx[s] if npx[s] else float("nan")
        e_mae = ab[s] / npx[s] if npx[s] else float("nan")
        if e_mse == 0.0:
            e_psnr = float("inf")
        else:
            e_psnr = float(10.0 * np.log10(1.0 / e_mse)) if npx[s] else float("nan")
        ece_val, cal_bins = diagnostics.ece(probs, gt, bins, subset_masks[s])
        blocks[s] = {
            "miou": metrics.miou(cms[s]),
            "mpa": metrics.mpa(cms[s]),
            "mse": e_mse,
            "mae": e_mae,
            "psnr": e_psnr,
            "ssim": float(np.mean(ssims[s])) if ssims[s] else float("nan"),
            "ece": ece_val,
            "calibration_bins": cal_bins.to_records(),
            "residual_curve": diagnostics.residual_curve(cal_bins),
        }
    return blocks
