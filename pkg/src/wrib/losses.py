"""Non-adversarial objectives: border-weighted pixel losses, feature
reconstruction and consistency, and the IDMRF texture loss.

All ``‖·‖`` terms are per-element mean squared errors.
"""
from __future__ import annotations

import logging
import math
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

from .bct import BCTOutput, join_vertical
from .errors import InvalidWidth, ShapeMismatch

log = logging.getLogger(__name__)

IDMRF_EPS = 1e-5
IDMRF_BANDWIDTH = 0.5
IDMRF_PATCH = 3

# indices into torchvision's vgg19().features
VGG_LAYERS = {"relu3_2": 13, "relu4_2": 22}
MRF_LAYERS = ("relu3_2", "relu4_2")


def weight_mask(d_total: int, dtype=torch.float64) -> torch.Tensor:
    """Column weights for the middle third; heaviest at both borders.

    M(d) = exp(-½(d/σ)²) + exp(-½((d-d_total)/σ)²), σ = d_total/4, d = 0..d_total-1.
    """
    if d_total < 2:
        raise InvalidWidth(f"d_total must be >= 2, got {d_total}")
    sigma = d_total / 4
    d = torch.arange(d_total, dtype=dtype)
    return torch.exp(-0.5 * (d / sigma) ** 2) + torch.exp(-0.5 * ((d - d_total) / sigma) ** 2)


def thirds(image: torch.Tensor):
    w = image.shape[-1]
    if w % 3:
        raise ShapeMismatch(f"panorama width {w} is not divisible by 3")
    t = w // 3
    return image[..., :t], image[..., t:2 * t], image[..., 2 * t:]


def _check(a, b, what):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{what}: {tuple(a.shape)} vs {tuple(b.shape)}")


def pixel_loss_ft(pred, left, right):
    """Outer-thirds reconstruction only."""
    p_left, _, p_right = thirds(pred)
    _check(p_left, left, "left third")
    _check(p_right, right, "right third")
    return F.mse_loss(p_left, left) + F.mse_loss(p_right, right)


def pixel_loss_sr(pred, left, mid, right, mask=None):
    p_left, p_mid, p_right = thirds(pred)
    _check(p_mid, mid, "middle third")
    if mask is None:
        mask = weight_mask(mid.shape[-1])
    mask = mask.to(dtype=pred.dtype, device=pred.device)
    mid_term = ((mask * (p_mid - mid)) ** 2).mean()
    return pixel_loss_ft(pred, left, right) + mid_term


def feat_rec_loss(f_mid, image_mid, encoder):
    """MSE to the encoder's feature of the true middle; the target carries no gradient."""
    with torch.no_grad():
        target, _ = encoder(image_mid)
    _check(f_mid, target, "feature reconstruction")
    return F.mse_loss(f_mid, target)


def feat_con_loss(bct_out: BCTOutput, f_left, f_right):
    bwd_left = join_vertical(bct_out.bwd_left)
    fwd_mid = join_vertical(bct_out.fwd_mid)
    bwd_mid = join_vertical(bct_out.bwd_mid)
    fwd_right = join_vertical(bct_out.fwd_right)
    _check(f_left, bwd_left, "left consistency")
    _check(fwd_right, f_right, "right consistency")
    _check(fwd_mid, bwd_mid, "mid consistency")
    return F.mse_loss(bwd_left, f_left) + F.mse_loss(fwd_mid, bwd_mid) + F.mse_loss(fwd_right, f_right)


class VGGFeatures(nn.Module):
    """Frozen VGG19 trunk up to relu4_2.

    ``weights`` is a torchvision ``vgg19`` state dict file. Without one the
    trunk is randomly initialized from a fixed seed, which keeps the loss
    well defined and deterministic but not perceptual.
    """

    mean = (0.485, 0.456, 0.406)
    std = (0.229, 0.224, 0.225)

    def __init__(self, weights: str | Path | None = None, layers=MRF_LAYERS):
        super().__init__()
        self.layers = tuple(layers)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(0)
            vgg = torchvision.models.vgg19(weights=None)
        if weights is not None:
            state = torch.load(weights, map_location="cpu", weights_only=True)
            vgg.load_state_dict(state)
            self.pretrained = True
        else:
            log.warning("no VGG19 weights given; IDMRF uses a randomly initialized extractor")
            self.pretrained = False
        last = max(VGG_LAYERS[n] for n in self.layers)
        trunk = vgg.features[: last + 1]
        for m in trunk:
            if isinstance(m, nn.ReLU):
                m.inplace = False
        self.trunk = trunk
        self.register_buffer("_mean", torch.tensor(self.mean).view(1, 3, 1, 1))
        self.register_buffer("_std", torch.tensor(self.std).view(1, 3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode=True):
        # always frozen
        return super().train(False)

    def forward(self, image) -> dict[str, torch.Tensor]:
        x = ((image + 1) / 2 - self._mean.to(image.dtype)) / self._std.to(image.dtype)
        want = {VGG_LAYERS[n]: n for n in self.layers}
        out = {}
        for i, m in enumerate(self.trunk):
            x = m(x)
            if i in want:
                out[want[i]] = x
        return out


def _patch_vectors(feat, p):
    # (B, C, H, W) -> (B, L, C*p*p)
    return F.unfold(feat, kernel_size=p).transpose(1, 2)


def mrf_layer_loss(pred_feat, target_feat, patch=IDMRF_PATCH, h=IDMRF_BANDWIDTH, eps=IDMRF_EPS):
    """IDMRF term for one feature layer, averaged over the batch.

    μ(v,s) is cosine similarity between generated patch v and target patch s;
    RS(v,s) = exp(μ(v,s) / (max_r μ(v,r) + ε) / h), normalized over target
    patches r; loss = -log(mean_s max_v RS̄(v,s)).
    """
    _check(pred_feat, target_feat, "IDMRF features")
    target_feat = target_feat.detach()
    v = F.normalize(_patch_vectors(pred_feat, patch), dim=-1, eps=1e-12)
    s = F.normalize(_patch_vectors(target_feat, patch), dim=-1, eps=1e-12)
    mu = torch.bmm(v, s.transpose(1, 2))  # (B, Lv, Ls)
    rel = mu / (mu.max(dim=2, keepdim=True).values + eps)
    rs_bar = torch.softmax(rel / h, dim=2)
    best = rs_bar.max(dim=1).values  # (B, Ls)
    return (-torch.log(best.mean(dim=1))).mean()


def idmrf_loss(pred, target, extractor: VGGFeatures, layer_weights=None):
    _check(pred, target, "IDMRF images")
    with torch.no_grad():
        tf = extractor(target)
    pf = extractor(pred)
    total = pred.new_zeros(())
    for name in extractor.layers:
        w = 1.0 if layer_weights is None else layer_weights[name]
        total = total + w * mrf_layer_loss(pf[name], tf[name])
    return total


def psnr(pred, target, data_range: float = 2.0) -> float:
    mse = F.mse_loss(pred.double(), target.double()).item()
    if mse == 0:
        return math.inf
    return 10 * math.log10(data_range ** 2 / mse)
