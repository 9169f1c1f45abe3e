"""Training losses: masked cross-entropy, cloud-reweighted generalized
Charbonnier reconstruction, clear-pixel feature distillation, weighted total."""

from dataclasses import dataclass

import torch

VOID_LABEL = 255


@dataclass
class LossWeights:
    beta: float = 1.0    # reconstruction weight
    gamma: float = 1.0   # distillation weight
    lam: float = 5.0     # extra weight on cloudy pixels in the CR loss
    p: float = 0.45      # Charbonnier exponent
    eps: float = 1e-3    # Charbonnier smoothing


@dataclass
class MaskSet:
    valid: torch.Tensor  # bool H x W (or B x H x W): labels != 255
    cloud: torch.Tensor  # bool, 1 = cloudy
    clear: torch.Tensor  # complement of cloud

    @classmethod
    def from_labels(cls, labels, cloudmask):
        valid = labels != VOID_LABEL
        cloud = cloudmask.bool()
        return cls(valid=valid, cloud=cloud, clear=~cloud)


def seg_loss(logits, labels, masks):
    """Mean cross-entropy over valid (non-void) pixels; 0 if none.

    logits: [..., K, H, W]; labels: [..., H, W] integer ids.
    """
    k = logits.shape[-3]
    labels = labels.long()
    bad = (labels >= k) & (labels != VOID_LABEL)
    if bad.any():
        raise ValueError("label id >= num_classes and != 255")
    valid = masks.valid
    if not valid.any():
        return logits.sum() * 0.0
    # stable log-softmax cross-entropy
    lse = torch.logsumexp(logits, dim=-3)
    safe = labels.clamp(0, k - 1).unsqueeze(-3)
    picked = logits.gather(-3, safe).squeeze(-3)
    ce = lse - picked
    return ce[valid].mean()


def charbonnier(d, p, eps):
    return (d * d + eps * eps) ** p


def cr_loss(recon, target, cloud, w):
    """Cloud-mask-reweighted generalized Charbonnier reconstruction loss.

    recon/target: [..., C, H, W]; cloud: [..., H, W] in {0,1}. The per-pixel
    weight (1 + lam * M) is not renormalized; the sum is divided by C*H*W.
    """
    if recon.shape != target.shape:
        raise ValueError("recon/target shape mismatch")
    rho = charbonnier(recon - target, w.p, w.eps)
    weight = (1.0 + w.lam * cloud.to(recon.dtype)).unsqueeze(-3)
    # sum of weighted penalties over C*H*W (weights not renormalized)
    return (weight * rho).mean()


def kd_loss(student_feat, teacher_feat, masks):
    """Mean squared L2 feature distance over clear pixels; 0 if all cloudy.

    Features: [..., C, H, W], resolutions already aligned.
    """
    if student_feat.shape != teacher_feat.shape:
        raise ValueError("student/teacher feature shape mismatch")
    clear = masks.clear
    if not clear.any():
        return student_feat.sum() * 0.0
    d2 = ((student_feat - teacher_feat) ** 2).sum(dim=-3)
    return d2[clear].mean()


def total_loss(l_seg, l_cr, l_kd, w):
    """l_seg + beta * l_cr + gamma * l_kd; rejects non-finite components."""
    total = l_seg + w.beta * l_cr + w.gamma * l_kd
    if not torch.isfinite(torch.as_tensor(total)).all():
        raise FloatingPointError(
            f"non-finite loss: seg={float(l_seg)}, cr={float(l_cr)}, kd={float(l_kd)}")
    return total
