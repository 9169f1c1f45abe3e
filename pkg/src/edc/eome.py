"""Efficiency-oriented multi-scale encoder.

Three identical-architecture streams (optical / SAR / cross-modal) share this
module: a modality-adaptive stem, two convolutional residual stages, and two
deep stages built from carrier-token hierarchical attention blocks. Windows
attend locally; one carrier token per window mediates global exchange, so a
layer costs M*(n+1)^2 + M^2 score evaluations instead of (H*W)^2.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

STEM_KERNEL = 4
STEM_STRIDE = 4
TOTAL_STRIDE = 32

MODALITY_CHANNELS = {"optical4": 4, "sar2": 2, "sar1": 1}
RED_INDEX = 0  # band order (R, G, B); NIR replicates the red kernel


@dataclass
class StemKernel:
    weights: np.ndarray  # [C_out, C_in, k, k]

    @property
    def in_channels(self):
        return self.weights.shape[1]


def make_pretrained_stem(c_out, k=STEM_KERNEL, seed=0):
    """Fixed-seed synthetic 3-channel stem standing in for ImageNet weights."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    bound = 1.0 / math.sqrt(3 * k * k)
    return StemKernel(rng.uniform(-bound, bound, size=(c_out, 3, k, k)))


def adapt_stem(pretrained, modality):
    """Adapt a pretrained 3-channel stem kernel to a modality's input bands.

    optical4 keeps all three channels and replicates the red kernel for NIR;
    sar2/sar1 retain the first two / first pretrained channel kernels.
    Retained slices are copied bit-exactly.
    """
    w = pretrained.weights
    if w.shape[1] != 3:
        raise ValueError("pretrained stem must have exactly 3 input channels")
    if modality == "optical4":
        out = np.concatenate([w, w[:, RED_INDEX:RED_INDEX + 1]], axis=1)
    elif modality == "sar2":
        out = w[:, 0:2]
    elif modality == "sar1":
        out = w[:, 0:1]
    else:
        raise ValueError(f"unknown modality tag: {modality!r}")
    return StemKernel(out.copy())


# ---------------------------------------------------------------------------
# Window bookkeeping

@dataclass
class WindowedTokens:
    windows: torch.Tensor  # [B, M, n, C]
    window_size: int
    origin_shape: tuple    # (H, W) before padding
    batched: bool = True


def window_partition(f, window):
    """Split an (H, W, C) or (B, H, W, C) map into non-overlapping windows.

    Spatial dims are zero-padded up to a multiple of `window`; window_merge
    crops back, so merge(partition(f)) == f bit-exactly.
    """
    if window <= 0:
        raise ValueError("window must be positive")
    batched = f.dim() == 4
    if not batched:
        f = f.unsqueeze(0)
    b, h, w, c = f.shape
    ph = (window - h % window) % window
    pw = (window - w % window) % window
    if ph or pw:
        f = torch.nn.functional.pad(f, (0, 0, 0, pw, 0, ph))
    hp, wp = h + ph, w + pw
    f = f.view(b, hp // window, window, wp // window, window, c)
    f = f.permute(0, 1, 3, 2, 4, 5).reshape(
        b, (hp // window) * (wp // window), window * window, c)
    return WindowedTokens(f, window, (h, w), batched)


def window_merge(wt):
    """Inverse of window_partition (padding cropped away)."""
    x = wt.windows
    b, m, n, c = x.shape
    s = wt.window_size
    h, w = wt.origin_shape
    hp = ((h + s - 1) // s) * s
    wp = ((w + s - 1) // s) * s
    x = x.view(b, hp // s, wp // s, s, s, c)
    x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, hp, wp, c)
    x = x[:, :h, :w]
    return x if wt.batched else x.squeeze(0)


def attention_cost(h, w, window=None, mode="dense"):
    """Query-key score evaluations per attention layer under this artifact's
    counting convention: dense = S^2 with S = H*W; carrier = M*(n+1)^2 + M^2."""
    s = h * w
    if mode == "dense":
        return s * s
    if mode == "carrier":
        if window is None or h % window or w % window:
            raise ValueError("window must divide H and W in carrier mode")
        m = (h // window) * (w // window)
        n = window * window
        return m * (n + 1) ** 2 + m * m
    raise ValueError(f"unknown mode: {mode!r}")


# ---------------------------------------------------------------------------
# Attention blocks

class SelfAttention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, bias=None):
        # x: [B*, T, C]; bias: [heads, T, T] or None
        bsz, t, c = x.shape
        qkv = self.qkv(x).reshape(bsz, t, 3, self.heads, c // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        if bias is not None:
            attn = attn + bias.unsqueeze(0)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bsz, t, c)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim, ratio=2):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * ratio)
        self.fc2 = nn.Linear(dim * ratio, dim)
        self.act = nn.GELU()

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class CarrierInit(nn.Module):
    """Per-window mean of tokens followed by a learned linear projection."""

    def __init__(self, dim):
        super().__init__()
        self.proj = nn.Linear(dim, dim)

    def forward(self, wt):
        return self.proj(wt.windows.mean(dim=2))  # [B, M, C]


def carrier_init(wt, module):
    return module(wt)


class HatBlock(nn.Module):
    """Carrier-token hierarchical attention block.

    Global step: self-attention + MLP over the M carrier tokens. Local step:
    each window attends over its n tokens concatenated with its updated
    carrier (n+1 tokens, learned relative positional bias); the carrier takes
    the (n+1)-th output token.
    """

    def __init__(self, dim, heads, window):
        super().__init__()
        n = window * window
        self.norm_c1 = nn.LayerNorm(dim)
        self.attn_c = SelfAttention(dim, heads)
        self.norm_c2 = nn.LayerNorm(dim)
        self.mlp_c = Mlp(dim)
        self.norm_w1 = nn.LayerNorm(dim)
        self.attn_w = SelfAttention(dim, heads)
        self.norm_w2 = nn.LayerNorm(dim)
        self.mlp_w = Mlp(dim)
        self.pos_bias = nn.Parameter(torch.zeros(heads, n + 1, n + 1))

    def forward(self, wt, t):
        # t: [B, M, C] carriers; wt.windows: [B, M, n, C]
        x = wt.windows
        b, m, n, c = x.shape
        if t.shape != (b, m, c):
            raise ValueError("carrier/window shape mismatch")

        t = t + self.attn_c(self.norm_c1(t))
        t = t + self.mlp_c(self.norm_c2(t))

        tok = torch.cat([x, t.unsqueeze(2)], dim=2).reshape(b * m, n + 1, c)
        tok = tok + self.attn_w(self.norm_w1(tok), bias=self.pos_bias)
        tok = tok + self.mlp_w(self.norm_w2(tok))
        tok = tok.reshape(b, m, n + 1, c)
        out = WindowedTokens(tok[:, :, :n].contiguous(), wt.window_size,
                             wt.origin_shape, wt.batched)
        return out, tok[:, :, n]


class ConvBlock(nn.Module):
    """Residual conv block: GN -> 3x3 conv -> GELU -> 3x3 conv, skip add."""

    def __init__(self, dim):
        super().__init__()
        self.norm = nn.GroupNorm(math.gcd(dim, 8), dim)
        self.conv1 = nn.Conv2d(dim, dim, 3, padding=1)
        self.conv2 = nn.Conv2d(dim, dim, 3, padding=1)
        self.act = nn.GELU()

    def forward(self, x):
        return x + self.conv2(self.act(self.conv1(self.norm(x))))


def run_attn_stage(x, blocks, carrier, window):
    """[B, C, H, W] -> windowed tokens -> HAT stack -> [B, C, H, W]."""
    f = x.permute(0, 2, 3, 1)
    wt = window_partition(f, window)
    t = carrier(wt)
    for blk in blocks:
        wt, t = blk(wt, t)
    return window_merge(wt).permute(0, 3, 1, 2)


@dataclass
class Pyramid:
    stages: list           # four [B, C_i, H_i, W_i] tensors, strides 4/8/16/32
    origin_shape: tuple    # unpadded input (H, W)


class StreamEncoder(nn.Module):
    """One stream of the tri-stream hierarchy: stem + conv stages 1-2 +
    carrier-token attention stages 3-4, yielding a four-stage pyramid."""

    def __init__(self, in_channels, widths=(32, 64, 128, 256), window=2,
                 heads=4, conv_depth=1, attn_depth=1):
        super().__init__()
        c1, c2, c3, c4 = widths
        self.in_channels = in_channels
        self.window = window
        self.stem = nn.Conv2d(in_channels, c1, STEM_KERNEL, stride=STEM_STRIDE)
        self.stage1 = nn.Sequential(*[ConvBlock(c1) for _ in range(conv_depth)])
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

    def set_stem(self, kernel):
        if kernel.in_channels != self.in_channels:
            raise ValueError(
                f"stem has {kernel.in_channels} input channels, "
                f"stream expects {self.in_channels}")
        with torch.no_grad():
            self.stem.weight.copy_(torch.as_tensor(
                kernel.weights, dtype=self.stem.weight.dtype))
            self.stem.bias.zero_()

    def _attn_stage(self, x, blocks, carrier):
        return run_attn_stage(x, blocks, carrier, self.window)

    def forward_stage(self, i, x):
        """Run one stage: i=1 consumes the (pre-padded) image, i in 2..4
        consume the previous stage's (possibly fusion-refined) feature."""
        if i == 1:
            if x.shape[1] != self.in_channels:
                raise ValueError("input channel count does not match stem")
            return self.stage1(self.stem(x))
        if i == 2:
            return self.stage2(self.down2(x))
        if i == 3:
            return self._attn_stage(self.down3(x), self.stage3, self.carrier3)
        if i == 4:
            return self._attn_stage(self.down4(x), self.stage4, self.carrier4)
        raise ValueError(f"invalid stage {i}")

    def forward(self, x):
        """Encode [B, C_in, H, W] (H, W padded up to a multiple of 32)."""
        h, w = x.shape[-2:]
        x = pad_to_stride(x)
        f = x
        stages = []
        for i in range(1, 5):
            f = self.forward_stage(i, f)
            stages.append(f)
        return Pyramid(stages, (h, w))


def pad_to_stride(x, stride=TOTAL_STRIDE):
    h, w = x.shape[-2:]
    ph = (stride - h % stride) % stride
    pw = (stride - w % stride) % stride
    if ph or pw:
        x = torch.nn.functional.pad(x, (0, pw, 0, ph))
    return x


def encode_stream(x, encoder):
    return encoder(x)
