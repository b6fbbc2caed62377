"""Bidirectional content transfer: predicting the middle bottleneck feature.

A single LSTM encoder summarizes one side's slice sequence into a latent
condition; a single conditional LSTM decoder, started from that condition,
reads the other side's slices and extrapolates 2K slices. The same two
networks serve both directions; the right-to-left pass is the left-to-right
pass run on index-reversed sequences.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import IndivisibleWidth, ShapeMismatch


def split_vertical(f: torch.Tensor, k: int) -> list[torch.Tensor]:
    """K equal-width column slices of ``f`` (…×H×W), left to right."""
    w = f.shape[-1]
    if k < 1 or w % k:
        raise IndivisibleWidth(f"K={k} does not divide width {w}")
    return list(torch.split(f, w // k, dim=-1))


def join_vertical(slices: list[torch.Tensor]) -> torch.Tensor:
    return torch.cat(slices, dim=-1)


@dataclass
class BCTOutput:
    fwd_mid: list[torch.Tensor]
    bwd_mid: list[torch.Tensor]
    fwd_right: list[torch.Tensor]
    bwd_left: list[torch.Tensor]
    fused_mid: torch.Tensor


class BCT(nn.Module):
    def __init__(self, channels: int = 1024, height: int = 8, width: int = 8, k: int = 4,
                 token_channels: int = 64, hidden: int = 1024):
        super().__init__()
        if width % k:
            raise IndivisibleWidth(f"K={k} does not divide width {width}")
        self.channels, self.height, self.width, self.k = channels, height, width, k
        self.token_channels = token_channels
        self.slice_width = width // k
        self.token_size = token_channels * height * self.slice_width
        self.hidden = hidden

        self.reduce = nn.Conv2d(channels, token_channels, kernel_size=1)
        self.expand = nn.Conv2d(token_channels, channels, kernel_size=1)
        self.lstm_enc = nn.LSTM(self.token_size, hidden, batch_first=True)
        self.lstm_dec = nn.LSTM(self.token_size, hidden, batch_first=True)
        self.init_h = nn.Linear(hidden, hidden)
        self.init_c = nn.Linear(hidden, hidden)
        self.readout = nn.Identity() if hidden == self.token_size else nn.Linear(hidden, self.token_size)
        self.fuse = nn.Conv2d(2 * channels, channels, kernel_size=1)

    # slices <-> tokens
    def _tokens(self, seq: list[torch.Tensor]) -> torch.Tensor:
        x = torch.stack(seq, 1)  # (B, K, C, H, w)
        b, k = x.shape[:2]
        if x.shape[2:] != (self.channels, self.height, self.slice_width):
            raise ShapeMismatch(f"slice shape {tuple(x.shape[2:])} does not match BCT config")
        t = self.reduce(x.flatten(0, 1))
        return t.reshape(b, k, self.token_size)

    def _slices(self, tokens: torch.Tensor) -> list[torch.Tensor]:
        b, n = tokens.shape[:2]
        t = tokens.reshape(b * n, self.token_channels, self.height, self.slice_width)
        x = self.expand(t).reshape(b, n, self.channels, self.height, self.slice_width)
        return list(x.unbind(1))

    def encode_condition(self, seq: list[torch.Tensor]) -> torch.Tensor:
        """Final LSTM hidden state after reading ``seq`` in the given order."""
        _, (h, _) = self.lstm_enc(self._tokens(seq))
        return h[-1]

    def decode_conditional(self, input_seq: list[torch.Tensor], condition: torch.Tensor):
        """K warm-up steps on ``input_seq``, then 2K self-fed steps.

        Returns (mid_seq, far_seq), K slices each, in the walking order.
        """
        k = len(input_seq)
        h0 = self.init_h(condition).unsqueeze(0)
        c0 = self.init_c(condition).unsqueeze(0)
        out, state = self.lstm_dec(self._tokens(input_seq), (h0.contiguous(), c0.contiguous()))
        prev = self.readout(out[:, -1:])
        preds = []
        for _ in range(2 * k):
            out, state = self.lstm_dec(prev, state)
            prev = self.readout(out)
            preds.append(prev)
        slices = self._slices(torch.cat(preds, 1))
        return slices[:k], slices[k:]

    def directional(self, source_seq: list[torch.Tensor], target_seq: list[torch.Tensor]):
        """One direction: walk from ``source_seq`` towards ``target_seq``."""
        cond = self.encode_condition(target_seq)
        return self.decode_conditional(source_seq, cond)

    def fuse_mid(self, fwd_mid: list[torch.Tensor], bwd_mid: list[torch.Tensor]) -> torch.Tensor:
        a, b = join_vertical(fwd_mid), join_vertical(bwd_mid)
        if a.shape != b.shape:
            raise ShapeMismatch(f"fwd {tuple(a.shape)} vs bwd {tuple(b.shape)}")
        return self.fuse(torch.cat([a, b], 1))

    def forward(self, f_left: torch.Tensor, f_right: torch.Tensor) -> BCTOutput:
        if f_left.shape != f_right.shape:
            raise ShapeMismatch(f"left {tuple(f_left.shape)} vs right {tuple(f_right.shape)}")
        left = split_vertical(f_left, self.k)
        right = split_vertical(f_right, self.k)
        fwd_mid, fwd_right = self.directional(left, right)
        bwd_mid_rev, bwd_left_rev = self.directional(right[::-1], left[::-1])
        bwd_mid, bwd_left = bwd_mid_rev[::-1], bwd_left_rev[::-1]
        return BCTOutput(
            fwd_mid=fwd_mid,
            bwd_mid=bwd_mid,
            fwd_right=fwd_right,
            bwd_left=bwd_left,
            fused_mid=self.fuse_mid(fwd_mid, bwd_mid),
        )
