"""Panorama discriminator and relativistic-average least-squares losses."""
from __future__ import annotations

import torch
import torch.nn as nn
from torch.nn.utils import spectral_norm

from .config import ModelConfig
from .errors import EmptyBatch, ShapeMismatch


class Discriminator(nn.Module):
    """Six spectral-normalized stride-2 convs, then a linear map to one score."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.height = cfg.image_size
        self.width = 3 * cfg.image_size
        layers = []
        cin = 3
        for cout in cfg.disc_widths:
            layers += [spectral_norm(nn.Conv2d(cin, cout, 4, 2, 1)), nn.LeakyReLU(0.2)]
            cin = cout
        self.features = nn.Sequential(*layers)
        down = 2 ** len(cfg.disc_widths)
        self.head = spectral_norm(nn.Linear(cin * (self.height // down) * (self.width // down), 1))

    def forward(self, images):
        if images.dim() != 4 or images.shape[1:] != (3, self.height, self.width):
            raise ShapeMismatch(f"discriminator expects B×3×{self.height}×{self.width}, got {tuple(images.shape)}")
        return self.head(self.features(images).flatten(1)).squeeze(1)


def relativistic_avg(scores_x, scores_y):
    """D_Ra(x, y) = D(x) - mean_y D(y), per element of ``scores_x``."""
    scores_x = torch.as_tensor(scores_x)
    scores_y = torch.as_tensor(scores_y)
    if scores_y.numel() == 0:
        raise EmptyBatch("relativistic average over an empty batch")
    return scores_x - scores_y.mean()


def adv_losses(real_scores, fake_scores):
    """Returns (discriminator loss, generator loss), each a batch mean."""
    real_scores = torch.as_tensor(real_scores)
    fake_scores = torch.as_tensor(fake_scores)
    if real_scores.numel() == 0 or fake_scores.numel() == 0:
        raise EmptyBatch("adversarial losses need nonempty real and fake batches")
    real_vs_fake = relativistic_avg(real_scores, fake_scores)
    fake_vs_real = relativistic_avg(fake_scores, real_scores)
    loss_d = ((real_vs_fake - 1) ** 2).mean() + ((fake_vs_real + 1) ** 2).mean()
    loss_g = (fake_vs_real ** 2).mean()
    return loss_d, loss_g
