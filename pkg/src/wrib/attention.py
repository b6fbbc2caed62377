"""Contextual attention on the skip connection.

The decoder's middle-region feature is rebuilt from patches of the two
encoder feature maps: cosine-similarity matching, a scaled softmax over
all key patches, weighted patch sums, and overlap-averaged folding.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ChannelMismatch, EmptyKeys, PatchTooLarge, ShapeMismatch

_EPS = 1e-8


@dataclass
class PatchSet:
    patches: torch.Tensor  # (B, L, C, p, p)
    origins: torch.Tensor  # (L, 2) as (row, col)

    @property
    def size(self) -> int:
        return self.patches.shape[-1]

    def __len__(self) -> int:
        return self.patches.shape[1]

    def cat(self, other: "PatchSet") -> "PatchSet":
        if self.patches.shape[2:] != other.patches.shape[2:]:
            raise ChannelMismatch("patch sets differ in channel count or patch size")
        return PatchSet(torch.cat([self.patches, other.patches], 1), torch.cat([self.origins, other.origins], 0))


def _batched(feat: torch.Tensor) -> torch.Tensor:
    if feat.dim() == 3:
        return feat.unsqueeze(0)
    if feat.dim() != 4:
        raise ShapeMismatch(f"expected C×H×W or B×C×H×W, got {tuple(feat.shape)}")
    return feat


def _positions(n: int, p: int, stride: int) -> list[int]:
    return list(range(0, n - p + 1, stride))


def extract_patches(feat: torch.Tensor, p: int = 3, stride: int = 1) -> PatchSet:
    """All p×p windows at ``stride``, row-major, with their top-left origins."""
    feat = _batched(feat)
    b, c, h, w = feat.shape
    if p < 1 or p > min(h, w):
        raise PatchTooLarge(f"patch size {p} does not fit a {h}×{w} map")
    cols = F.unfold(feat, kernel_size=p, stride=stride)  # (B, C*p*p, L)
    patches = cols.transpose(1, 2).reshape(b, -1, c, p, p)
    rows = _positions(h, p, stride)
    cs = _positions(w, p, stride)
    origins = torch.tensor([(r, q) for r in rows for q in cs], dtype=torch.long)
    return PatchSet(patches, origins)


def attention_weights(query: torch.Tensor, keys: PatchSet, scale: float = 10.0, stride: int = 1) -> torch.Tensor:
    """Softmax-normalized cosine matches, shape (B, L_query, L_key)."""
    query = _batched(query)
    if len(keys) == 0:
        raise EmptyKeys("no key patches")
    if query.shape[1] != keys.patches.shape[2]:
        raise ChannelMismatch(f"query has {query.shape[1]} channels, keys have {keys.patches.shape[2]}")
    q = extract_patches(query, keys.size, stride).patches.flatten(2)
    k = keys.patches.flatten(2)
    if q.shape[0] != k.shape[0]:
        raise ShapeMismatch("query and key batch sizes differ")
    qn = q / (q.norm(dim=-1, keepdim=True) + _EPS)
    kn = k / (k.norm(dim=-1, keepdim=True) + _EPS)
    cos = torch.bmm(qn, kn.transpose(1, 2))
    return torch.softmax(cos * scale, dim=-1)


def contextual_attention(
    query: torch.Tensor,
    keys: PatchSet,
    scale: float = 10.0,
    stride: int = 1,
    return_weights: bool = False,
):
    """Rebuild ``query`` from key patches; output has the query's shape.

    Each query patch becomes the attention-weighted sum of the raw key
    patches, and overlapping reconstructions are averaged per pixel.
    """
    unbatched = query.dim() == 3
    query = _batched(query)
    b, c, h, w = query.shape
    p = keys.size
    weights = attention_weights(query, keys, scale, stride)
    recon = torch.bmm(weights, keys.patches.flatten(2))  # (B, Lq, C*p*p)
    summed = F.fold(recon.transpose(1, 2), (h, w), kernel_size=p, stride=stride)
    ones = torch.ones(1, c * p * p, recon.shape[1], dtype=query.dtype, device=query.device)
    counts = F.fold(ones, (h, w), kernel_size=p, stride=stride)
    # pixels left uncovered by a coarse stride keep the query value
    out = torch.where(counts > 0, summed / counts.clamp_min(1), query)
    if unbatched:
        out = out[0]
        weights = weights[0]
    return (out, weights) if return_weights else out


class SkipAttention(nn.Module):
    """Attention-rebuilt middle feature merged with the decoder's own by a 1×1 conv."""

    def __init__(self, channels: int, patch: int = 3, scale: float = 10.0):
        super().__init__()
        self.patch = patch
        self.scale = scale
        self.merge = nn.Conv2d(2 * channels, channels, kernel_size=1)

    def forward(self, decoder_mid, enc_left, enc_right):
        if not (decoder_mid.shape == enc_left.shape == enc_right.shape):
            raise ShapeMismatch(
                f"attend_skip needs equal shapes, got {tuple(decoder_mid.shape)}, "
                f"{tuple(enc_left.shape)}, {tuple(enc_right.shape)}"
            )
        keys = extract_patches(enc_left, self.patch).cat(extract_patches(enc_right, self.patch))
        attended = contextual_attention(decoder_mid, keys, self.scale)
        return self.merge(torch.cat([decoder_mid, attended], 1))

