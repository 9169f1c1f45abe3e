"""Discrepancy-conditioned hybrid fusion.

Per stage: the optical/SAR feature difference drives a spatial gate whose
sigmoid output A marks cross-modal inconsistency (R_opt = 1 - A is optical
reliability). Branch descriptors are built by reliability-weighted global
average pooling, mixed by a 1-D channel-gating convolution, and injected into
residual gating paths that refine all three streams.
"""

import math
from dataclasses import dataclass

import torch
from torch import nn

EPS_W = 1e-6


@dataclass
class DiscrepancyAttention:
    A: torch.Tensor      # [B, 1, H, W], values strictly in (0, 1)
    R_opt: torch.Tensor  # 1 - A
    D: torch.Tensor      # raw discrepancy map, [B, C, H, W]


def discrepancy(f_opt, f_sar):
    """Elementwise difference; SAR must already be projected to C_opt."""
    if f_opt.shape != f_sar.shape:
        raise ValueError("discrepancy requires identical shapes")
    return f_opt - f_sar


class SpatialGate(nn.Module):
    """CBAM-style spatial gate: channel max/mean pooling -> 7x7 conv -> sigmoid."""

    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, 7, padding=3)

    def forward(self, d):
        pooled = torch.cat([d.max(dim=1, keepdim=True).values,
                            d.mean(dim=1, keepdim=True)], dim=1)
        a = torch.sigmoid(self.conv(pooled))
        return DiscrepancyAttention(A=a, R_opt=1.0 - a, D=d)


def wgap(f, w, eps_w=EPS_W):
    """Weighted global average pooling.

    f: [B, C, H, W]; w: [B, 1, H, W] nonnegative weights (or scalar 1 for a
    unit weight). Returns [B, C] per-channel descriptors.
    """
    if isinstance(w, (int, float)):
        w = torch.ones_like(f[:, :1])
    if (w < 0).any():
        raise ValueError("wgap weights must be nonnegative")
    num = (w * f).sum(dim=(-2, -1))
    den = w.sum(dim=(-2, -1)) + eps_w
    return num / den


def eca_kernel_size(channels):
    """ECA convention: nearest odd integer to (log2(C) + 1) / 2, floor 3."""
    k = int(round((math.log2(channels) + 1) / 2))
    if k % 2 == 0:
        k += 1
    return max(k, 3)


class ChannelGate(nn.Module):
    """ECA-style 1-D conv over the channel axis followed by sigmoid."""

    def __init__(self, k):
        super().__init__()
        if k % 2 == 0 or k < 3:
            raise ValueError("kernel size must be odd and >= 3")
        self.conv = nn.Conv1d(1, 1, k, padding=k // 2)

    def forward(self, z):
        # z: [B, C_cat]
        return torch.sigmoid(self.conv(z.unsqueeze(1)).squeeze(1))


class DchfFuse(nn.Module):
    """One fusion stage.

    Wiring: (1) project SAR to C_opt, compute discrepancy and spatial gate;
    (2) suppress unreliable optical, O~ = R_opt * opt (SAR left spatially
    unmodified); (3) descriptors z_opt = wgap(O~, R_opt), z_sar = wgap(sar, A),
    z_cm = wgap(cm, 1) when a cross-modal input exists; (4) channel gate s over
    the concatenation, split per branch; (5) cm_out = 1x1 conv of the gated
    concat (+ cm residual when present); (6) opt_out = opt + s_o * O~,
    sar_out = sar + s_s * sar.
    """

    def __init__(self, c_opt, c_sar, c_cm, first_stage=False):
        super().__init__()
        self.c_opt, self.c_sar, self.c_cm = c_opt, c_sar, c_cm
        self.first_stage = first_stage
        self.sar_proj = nn.Conv2d(c_sar, c_opt, 1)
        self.spatial_gate = SpatialGate()
        c_cat = c_opt + c_sar + (0 if first_stage else c_cm)
        self.channel_gate = ChannelGate(eca_kernel_size(c_cat))
        self.cm_proj = nn.Conv2d(c_cat, c_cm, 1)

    def forward(self, opt_prev, sar_prev, cm_prev=None):
        if self.first_stage != (cm_prev is None):
            raise ValueError("cross-modal input must be EMPTY exactly at stage 1")
        gate = self.spatial_gate(discrepancy(opt_prev, self.sar_proj(sar_prev)))
        a, r_opt = gate.A, gate.R_opt

        opt_tilde = r_opt * opt_prev
        sar_tilde = sar_prev

        z = [wgap(opt_tilde, r_opt), wgap(sar_tilde, a)]
        if cm_prev is not None:
            z.append(wgap(cm_prev, 1))
        s = self.channel_gate(torch.cat(z, dim=1))
        s_o = s[:, :self.c_opt, None, None]
        s_s = s[:, self.c_opt:self.c_opt + self.c_sar, None, None]

        gated = [s_o * opt_tilde, s_s * sar_tilde]
        if cm_prev is not None:
            s_c = s[:, self.c_opt + self.c_sar:, None, None]
            gated.append(s_c * cm_prev)
        cm_out = self.cm_proj(torch.cat(gated, dim=1))
        if cm_prev is not None:
            cm_out = cm_out + cm_prev

        opt_out = opt_prev + s_o * opt_tilde
        sar_out = sar_prev + s_s * sar_tilde
        return opt_out, sar_out, cm_out, gate
