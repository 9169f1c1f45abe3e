"""U-Net-style decoder over a four-stage pyramid plus the two task heads."""

import math
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F


def _up2(x):
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class DecoderBlock(nn.Module):
    """Two conv+norm+activation blocks after upsample/concat."""

    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm1 = nn.GroupNorm(math.gcd(c_out, 8), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(math.gcd(c_out, 8), c_out)
        self.act = nn.GELU()

    def forward(self, x):
        x = self.act(self.norm1(self.conv1(x)))
        return self.act(self.norm2(self.conv2(x)))


class UnetDecoder(nn.Module):
    """Top-down pathway: upsample, concat skip, two conv blocks; after the
    shallowest skip (stride 4), two more upsample+conv blocks reach full
    resolution, then a 1x1 projection to the pre-logit width C_d."""

    def __init__(self, widths, c_d=32):
        super().__init__()
        c1, c2, c3, c4 = widths
        d3, d2, d1 = max(c3 // 2, 4), max(c2 // 2, 4), max(c1 // 2, 4)
        self.c_d = c_d
        self.block3 = DecoderBlock(c4 + c3, d3)
        self.block2 = DecoderBlock(d3 + c2, d2)
        self.block1 = DecoderBlock(d2 + c1, d1)
        self.up_a = DecoderBlock(d1, d1)
        self.up_b = DecoderBlock(d1, d1)
        self.proj = nn.Conv2d(d1, c_d, 1)

    def forward(self, pyramid):
        f1, f2, f3, f4 = pyramid.stages
        x = self.block3(torch.cat([_up2(f4), f3], dim=1))
        x = self.block2(torch.cat([_up2(x), f2], dim=1))
        x = self.block1(torch.cat([_up2(x), f1], dim=1))
        x = self.up_a(_up2(x))
        x = self.up_b(_up2(x))
        x = self.proj(x)
        h, w = pyramid.origin_shape
        return x[..., :h, :w]


@dataclass
class DecodedFeatures:
    ss_feat: torch.Tensor  # [B, C_d, H, W], feeds the segmentation head
    cr_feat: torch.Tensor  # [B, C_d, H, W], feeds the cloud-removal head


def unet_decode(pyramid, module):
    return module(pyramid)


class SegHead(nn.Module):
    """1x1 convolution to raw class logits."""

    def __init__(self, c_d, num_classes):
        super().__init__()
        self.conv = nn.Conv2d(c_d, num_classes, 1)

    def forward(self, feat):
        return self.conv(feat)


class CrHead(nn.Module):
    """1x1 convolution + sigmoid reconstructing the 4-band optical image."""

    def __init__(self, c_d, bands=4):
        super().__init__()
        self.conv = nn.Conv2d(c_d, bands, 1)

    def forward(self, feat):
        return torch.sigmoid(self.conv(feat))
