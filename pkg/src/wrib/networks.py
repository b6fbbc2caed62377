"""Image context encoder/decoder and the full blending generator.

Layer plan (256×256 input, full widths):

    stem    4×4/2 conv        3 -> 64     128×128   skip /2
    stage1  bottleneck x3   64 -> 128      64×64    skip /4
    stage2  bottleneck x4  128 -> 256      32×32    skip /8
    stage3  bottleneck x6  256 -> 512      16×16    skip /16
    stage4  bottleneck x3  512 -> 1024      8×8     bottleneck

Instance norm sits only on the last three encoder convs and on the first
three decoder transpose-convs.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .attention import SkipAttention
from .bct import BCT, BCTOutput
from .config import ModelConfig
from .errors import ShapeMismatch

LEVELS = (2, 4, 8, 16)


def conv(cin, cout, k=3, stride=1, padding=None, dilation=1, norm=False, act=True):
    if padding is None:
        padding = dilation * (k - 1) // 2
    layers = [nn.Conv2d(cin, cout, k, stride, padding, dilation=dilation)]
    if norm:
        layers.append(nn.InstanceNorm2d(cout, affine=True))
    if act:
        layers.append(nn.LeakyReLU(0.2))
    return nn.Sequential(*layers)


def upconv(cin, cout, norm=False):
    layers = [nn.ConvTranspose2d(cin, cout, 4, 2, 1)]
    if norm:
        layers.append(nn.InstanceNorm2d(cout, affine=True))
    layers.append(nn.LeakyReLU(0.2))
    return nn.Sequential(*layers)


class Bottleneck(nn.Module):
    """ResNet-50 bottleneck (1×1, 3×3, 1×1), projection shortcut when shape changes."""

    def __init__(self, cin, cout, stride=1, norm=False):
        super().__init__()
        mid = max(cout // 4, 1)
        self.body = nn.Sequential(
            conv(cin, mid, 1, norm=norm),
            conv(mid, mid, 3, stride, norm=norm),
            conv(mid, cout, 1, norm=norm, act=False),
        )
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Conv2d(cin, cout, 1, stride)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x):
        skip = x if self.shortcut is None else self.shortcut(x)
        return self.act(self.body(x) + skip)


def stage(cin, cout, n_blocks, norm_last=False):
    blocks = [Bottleneck(cin, cout, stride=2)]
    for i in range(1, n_blocks):
        blocks.append(Bottleneck(cout, cout, norm=norm_last and i == n_blocks - 1))
    if norm_last and n_blocks == 1:
        blocks.append(Bottleneck(cout, cout, norm=True))
    return nn.Sequential(*blocks)


class SHC(nn.Module):
    """Skip horizontal connection: decoder + conv3x3([decoder, conv1x1(encoder)])."""

    def __init__(self, dec_channels, enc_channels):
        super().__init__()
        self.proj = nn.Conv2d(enc_channels, dec_channels, 1)
        self.fuse = nn.Conv2d(2 * dec_channels, dec_channels, 3, padding=1)

    def forward(self, decoder_feat, encoder_feat):
        if decoder_feat.shape[-2:] != encoder_feat.shape[-2:]:
            raise ShapeMismatch(
                f"SHC spatial sizes differ: {tuple(decoder_feat.shape)} vs {tuple(encoder_feat.shape)}"
            )
        return decoder_feat + self.fuse(torch.cat([decoder_feat, self.proj(encoder_feat)], 1))


class GRB(nn.Module):
    """Residual block with two dilated 3×3 branches (dilation 2 and 4)."""

    def __init__(self, channels, dilations=(2, 4)):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Sequential(
                conv(channels, channels, 3, dilation=d),
                nn.Conv2d(channels, channels, 3, padding=d, dilation=d),
            )
            for d in dilations
        )

    def forward(self, x):
        return x + sum(branch(x) for branch in self.branches)


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w, n = cfg.widths, cfg.blocks
        self.image_size = cfg.image_size
        self.stem = conv(3, w[0], 4, 2, 1)
        self.stages = nn.ModuleList([
            stage(w[0], w[1], n[0]),
            stage(w[1], w[2], n[1]),
            stage(w[2], w[3], n[2]),
            stage(w[3], w[4], n[3], norm_last=True),
        ])

    def forward(self, image):
        """Returns (bottleneck, skips) with skips ordered /2, /4, /8, /16."""
        if image.dim() != 4 or image.shape[1:] != (3, self.image_size, self.image_size):
            raise ShapeMismatch(f"encoder expects B×3×{self.image_size}×{self.image_size}, got {tuple(image.shape)}")
        x = self.stem(image)
        skips = [x]
        for st in self.stages:
            x = st(x)
            skips.append(x)
        return x, skips[:4]


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.widths
        self.attention_level = cfg.attention_level
        self.grb = GRB(w[4])
        # deepest first: /32->/16, /16->/8, /8->/4, /4->/2, /2->/1
        self.ups = nn.ModuleList([
            upconv(w[4], w[3], norm=True),
            upconv(w[3], w[2], norm=True),
            upconv(w[2], w[1], norm=True),
            upconv(w[1], w[0]),
            upconv(w[0], w[0]),
        ])
        self.shcs = nn.ModuleList([SHC(w[3], w[3]), SHC(w[2], w[2]), SHC(w[1], w[1]), SHC(w[0], w[0])])
        level_channels = dict(zip(LEVELS, w[:4]))
        self.attention = SkipAttention(level_channels[cfg.attention_level], cfg.attention_patch, cfg.attention_scale)
        self.to_rgb = nn.Sequential(conv(w[0], w[0], 3), nn.Conv2d(w[0], 3, 3, padding=1), nn.Tanh())

    def forward(self, f_concat, skips_left, skips_right, use_attention=True):
        h, wd = f_concat.shape[-2:]
        if wd != 3 * h:
            raise ShapeMismatch(f"decoder input width {wd} is not 3× its height {h}")
        x = self.grb(f_concat)
        for i, level in enumerate(reversed(LEVELS)):
            x = self.ups[i](x)
            sl, sr = skips_left[3 - i], skips_right[3 - i]
            if sl.shape[-1] * 3 != x.shape[-1] or sl.shape[-2] != x.shape[-2]:
                raise ShapeMismatch(f"skip at /{level} has shape {tuple(sl.shape)}, decoder {tuple(x.shape)}")
            third = sl.shape[-1]
            if use_attention and level == self.attention_level:
                mid = self.attention(x[..., third:2 * third], sl, sr)
            else:
                mid = torch.zeros_like(sl)
            x = self.shcs[i](x, torch.cat([sl, mid, sr], -1))
        x = self.ups[4](x)
        return self.to_rgb(x)


@dataclass
class BlendOutput:
    image: torch.Tensor
    f_left: torch.Tensor
    f_right: torch.Tensor
    bct: BCTOutput


class Generator(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        b = cfg.bottleneck_size
        self.bct = BCT(cfg.widths[4], b, b, cfg.k_slices, cfg.token_channels, cfg.lstm_hidden)
        self.decoder = Decoder(cfg)

    def encode(self, image):
        return self.encoder(image)

    def decode(self, f_concat, skips_left, skips_right, use_attention=None):
        if use_attention is None:
            use_attention = self.cfg.use_attention
        return self.decoder(f_concat, skips_left, skips_right, use_attention)

    def forward(self, left, right) -> BlendOutput:
        n = left.shape[0]
        f, skips = self.encoder(torch.cat([left, right], 0))
        f_left, f_right = f[:n], f[n:]
        skips_left = [s[:n] for s in skips]
        skips_right = [s[n:] for s in skips]
        out = self.bct(f_left, f_right)
        f_concat = torch.cat([f_left, out.fused_mid, f_right], -1)
        image = self.decode(f_concat, skips_left, skips_right)
        return BlendOutput(image, f_left, f_right, out)
