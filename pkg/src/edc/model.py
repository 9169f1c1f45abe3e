"""Full network: tri-stream encoder, stage-wise fusion, dual-task decoding.

The optical and SAR streams encode their images; at every stage the fusion
block refines both and emits a fused cross-modal feature that the cross-modal
stream deepens. The cloud-removal decoder aggregates the refined optical
pyramid, the segmentation decoder the fused cross-modal pyramid. Teacher and
student share this architecture; they differ only in which optical image they
are fed and how they are trained.
"""

import math
from dataclasses import dataclass, field, asdict

import torch
from torch import nn

from .dchf import DchfFuse, ChannelGate, eca_kernel_size, wgap
from .decoder import UnetDecoder, SegHead, CrHead, DecodedFeatures
from .eome import (StreamEncoder, ConvBlock, HatBlock, CarrierInit, Pyramid,
                   make_pretrained_stem, adapt_stem, pad_to_stride,
                   run_attn_stage)

PROBE_STAGE4_CM = "stage4_cm"
PROBE_CM_DECODER_OUT = "cm_decoder_out"


@dataclass
class ModelConfig:
    num_classes: int = 5
    sar_pols: int = 2
    widths: tuple = (32, 64, 128, 256)
    window: int = 2
    heads: int = 4
    conv_depth: int = 1
    attn_depth: int = 1
    c_d: int = 32
    fusion: str = "dchf"  # "dchf" or "naive" (plain-GAP SE-style ablation)
    stem_seed: int = 42
    init_seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


def seed_parameters(module, seed):
    """Deterministic re-initialization of every parameter, by sorted name."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in sorted(module.named_parameters()):
            if p.dim() >= 2:
                fan_in = p.shape[1] * (p[0, 0].numel() if p.dim() > 2 else 1)
                bound = 1.0 / math.sqrt(max(fan_in, 1))
                p.copy_(torch.empty_like(p).uniform_(-bound, bound, generator=g))
            elif name.endswith("pos_bias"):
                p.zero_()
            elif name.endswith("bias"):
                p.zero_()
            else:  # norm scales
                p.fill_(1.0)


class NaiveFuse(nn.Module):
    """Ablation fusion: plain GAP descriptors and channel gating only (no
    discrepancy map, no spatial suppression)."""

    def __init__(self, c_opt, c_sar, c_cm, first_stage=False):
        super().__init__()
        self.c_opt, self.c_sar, self.c_cm = c_opt, c_sar, c_cm
        self.first_stage = first_stage
        c_cat = c_opt + c_sar + (0 if first_stage else c_cm)
        self.channel_gate = ChannelGate(eca_kernel_size(c_cat))
        self.cm_proj = nn.Conv2d(c_cat, c_cm, 1)

    def forward(self, opt_prev, sar_prev, cm_prev=None):
        if self.first_stage != (cm_prev is None):
            raise ValueError("cross-modal input must be EMPTY exactly at stage 1")
        z = [wgap(opt_prev, 1), wgap(sar_prev, 1)]
        if cm_prev is not None:
            z.append(wgap(cm_prev, 1))
        s = self.channel_gate(torch.cat(z, dim=1))
        s_o = s[:, :self.c_opt, None, None]
        s_s = s[:, self.c_opt:self.c_opt + self.c_sar, None, None]
        gated = [s_o * opt_prev, s_s * sar_prev]
        if cm_prev is not None:
            gated.append(s[:, self.c_opt + self.c_sar:, None, None] * cm_prev)
        cm_out = self.cm_proj(torch.cat(gated, dim=1))
        if cm_prev is not None:
            cm_out = cm_out + cm_prev
        return opt_prev + s_o * opt_prev, sar_prev + s_s * sar_prev, cm_out, None


class CrossModalEncoder(nn.Module):
    """Deep stages of the cross-modal stream; consumes fused features only."""

    def __init__(self, widths, window=2, heads=4, conv_depth=1, attn_depth=1):
        super().__init__()
        c1, c2, c3, c4 = widths
        self.down2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.stage2 = nn.Sequential(*[ConvBlock(c2) for _ in range(conv_depth)])
        self.down3 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        self.carrier3 = CarrierInit(c3)
        self.stage3 = nn.ModuleList(
            [HatBlock(c3, heads, window) for _ in range(attn_depth)])
        self.down4 = nn.Conv2d(c3, c4, 3, stride=2, padding=1)
        self.carrier4 = CarrierInit(c4)
        self.stage4 = nn.ModuleList(
            [HatBlock(c4, heads, window) for _ in range(attn_depth)])
        self.window = window

    def forward_stage(self, i, x):
        if i == 2:
            return self.stage2(self.down2(x))
        if i == 3:
            return run_attn_stage(self.down3(x), self.stage3, self.carrier3,
                                  self.window)
        if i == 4:
            return run_attn_stage(self.down4(x), self.stage4, self.carrier4,
                                  self.window)
        raise ValueError(f"invalid cross-modal stage {i}")


@dataclass
class ModelOutput:
    logits: torch.Tensor      # [B, K, H, W]
    recon: torch.Tensor       # [B, 4, H, W] in [0, 1]
    decoded: DecodedFeatures
    probes: dict = field(default_factory=dict)
    gates: list = field(default_factory=list)  # per-stage DiscrepancyAttention


class EdcModel(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        c1 = cfg.widths[0]
        kw = dict(widths=cfg.widths, window=cfg.window, heads=cfg.heads,
                  conv_depth=cfg.conv_depth, attn_depth=cfg.attn_depth)
        self.opt_stream = StreamEncoder(4, **kw)
        self.sar_stream = StreamEncoder(cfg.sar_pols, **kw)
        self.cm_stream = CrossModalEncoder(**kw)

        fuse_cls = DchfFuse if cfg.fusion == "dchf" else NaiveFuse
        if cfg.fusion not in ("dchf", "naive"):
            raise ValueError(f"unknown fusion mode: {cfg.fusion!r}")
        self.fuse = nn.ModuleList([
            fuse_cls(c, c, c, first_stage=(i == 0))
            for i, c in enumerate(cfg.widths)])

        self.ss_decoder = UnetDecoder(cfg.widths, cfg.c_d)
        self.cr_decoder = UnetDecoder(cfg.widths, cfg.c_d)
        self.seg_head = SegHead(cfg.c_d, cfg.num_classes)
        self.cr_head = CrHead(cfg.c_d)

        seed_parameters(self, cfg.init_seed)
        pretrained = make_pretrained_stem(c1, seed=cfg.stem_seed)
        self.opt_stream.set_stem(adapt_stem(pretrained, "optical4"))
        self.sar_stream.set_stem(adapt_stem(pretrained, f"sar{cfg.sar_pols}"))
        self.double()

    def forward(self, opt_img, sar_img):
        """opt_img: [B, 4, H, W]; sar_img: [B, P, H, W]."""
        h, w = opt_img.shape[-2:]
        opt_img = pad_to_stride(opt_img)
        sar_img = pad_to_stride(sar_img)

        o = self.opt_stream.forward_stage(1, opt_img)
        s = self.sar_stream.forward_stage(1, sar_img)
        opt_i, sar_i, cm_i, gate = self.fuse[0](o, s, None)
        opt_pyr, cm_pyr, gates = [opt_i], [cm_i], [gate]
        for i in (2, 3, 4):
            o = self.opt_stream.forward_stage(i, opt_i)
            s = self.sar_stream.forward_stage(i, sar_i)
            c = self.cm_stream.forward_stage(i, cm_i)
            opt_i, sar_i, cm_i, gate = self.fuse[i - 1](o, s, c)
            opt_pyr.append(opt_i)
            cm_pyr.append(cm_i)
            gates.append(gate)

        cm_pyramid = Pyramid(cm_pyr, (h, w))
        opt_pyramid = Pyramid(opt_pyr, (h, w))
        ss_feat = self.ss_decoder(cm_pyramid)
        cr_feat = self.cr_decoder(opt_pyramid)
        decoded = DecodedFeatures(ss_feat=ss_feat, cr_feat=cr_feat)
        return ModelOutput(
            logits=self.seg_head(ss_feat),
            recon=self.cr_head(cr_feat),
            decoded=decoded,
            probes={PROBE_STAGE4_CM: cm_pyr[3], PROBE_CM_DECODER_OUT: ss_feat},
            gates=gates,
        )

    def parameter_count(self):
        return sum(p.numel() for p in self.parameters())
