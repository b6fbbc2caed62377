"""FID / KID under the 256×512 center-crop protocol."""
from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

from .config import PROTOCOL_TAG
from .errors import DegenerateInput, EmptyInput, ShapeMismatch, SubsetTooLarge

log = logging.getLogger(__name__)

EVAL_H, EVAL_W = 256, 512
FULL_W = 768
EVAL_LEFT = (FULL_W - EVAL_W) // 2


def center_crop_eval(panorama: torch.Tensor) -> torch.Tensor:
    """Columns [128, 640) of a …×256×768 panorama."""
    if panorama.shape[-2:] != (EVAL_H, FULL_W):
        raise ShapeMismatch(f"evaluation crop needs …×{EVAL_H}×{FULL_W}, got {tuple(panorama.shape)}")
    return panorama[..., EVAL_LEFT:EVAL_LEFT + EVAL_W]


class EvalCrops:
    """Marker type: only center-cropped panoramas are accepted by the metric harness."""

    def __init__(self, panoramas: torch.Tensor):
        self.images = center_crop_eval(panoramas)

    def __len__(self):
        return self.images.shape[0]


class InceptionFeatures(nn.Module):
    """2048-d final-pool features of InceptionV3.

    ``weights`` is a torchvision ``inception_v3`` state dict; without it the
    network is randomly initialized from a fixed seed (deterministic, but
    scores are then not comparable to published numbers).
    """

    mean = (0.485, 0.456, 0.406)
    std = (0.229, 0.224, 0.225)

    def __init__(self, weights: str | Path | None = None):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(0)
            net = torchvision.models.inception_v3(weights=None, aux_logits=False, init_weights=True)
        if weights is not None:
            state = torch.load(weights, map_location="cpu", weights_only=True)
            state = {k: v for k, v in state.items() if not k.startswith("AuxLogits")}
            net.load_state_dict(state)
        else:
            log.warning("no InceptionV3 weights given; FID/KID use a randomly initialized network")
        net.fc = nn.Identity()
        if weights is None:
            self._calibrate(net)
        self.net = net.eval()
        self.register_buffer("_mean", torch.tensor(self.mean).view(1, 3, 1, 1))
        self.register_buffer("_std", torch.tensor(self.std).view(1, 3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)

    @staticmethod
    @torch.no_grad()
    def _calibrate(net: nn.Module, n: int = 8) -> None:
        # Untrained BN layers carry unit running stats and let activations
        # grow by orders of magnitude; estimate them once from seeded noise.
        g = torch.Generator().manual_seed(0)
        for m in net.modules():
            if isinstance(m, nn.BatchNorm2d):
                m.reset_running_stats()
                m.momentum = None
        net.train()
        net(torch.randn(n, 3, 299, 299, generator=g))
        net.eval()

    @torch.no_grad()
    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(images.float(), size=(299, 299), mode="bilinear", align_corners=False)
        x = ((x + 1) / 2 - self._mean) / self._std
        return self.net(x)


def inception_features(images, extractor: InceptionFeatures | None = None, batch_size: int = 16) -> np.ndarray:
    """N×2048 float64 feature matrix for a batch (or list) of images in [-1, 1]."""
    if isinstance(images, EvalCrops):
        images = images.images
    if isinstance(images, (list, tuple)):
        if not images:
            raise EmptyInput("no images")
        images = torch.stack(list(images))
    if images.shape[0] == 0:
        raise EmptyInput("no images")
    extractor = extractor or InceptionFeatures()
    extractor.eval()
    feats = [extractor(images[i:i + batch_size]) for i in range(0, images.shape[0], batch_size)]
    return torch.cat(feats).double().numpy()


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def _as_samples(feats) -> np.ndarray:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    if feats.shape[0] < 2:
        raise DegenerateInput(f"need at least 2 samples, got {feats.shape[0]}")
    return feats


def _trace_sqrt_product(xa: np.ndarray, xb: np.ndarray, cov_a: np.ndarray, cov_b: np.ndarray) -> float:
    """Tr((C_a C_b)^½) for centered samples ``xa``, ``xb``.

    With fewer samples than dimensions the covariances are rank deficient and
    clipping thousands of near-zero eigenvalues accumulates error. There the
    nonzero eigenvalues of C_a C_b are the squared singular values of the
    small cross-Gram matrix xa xbᵀ / √((n_a-1)(n_b-1)), so the trace is its
    nuclear norm. Otherwise the symmetric form √C_a C_b √C_a is used.
    """
    na, nb = len(xa), len(xb)
    if min(na, nb) < xa.shape[1]:
        gram = xa @ xb.T / np.sqrt((na - 1) * (nb - 1))
        return float(np.linalg.svd(gram, compute_uv=False).sum())
    root_a = _sqrtm_psd(cov_a)
    inner = root_a @ cov_b @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    return float(np.sqrt(np.clip(vals, 0, None)).sum())


def compute_fid(a: np.ndarray, b: np.ndarray) -> float:
    """Fréchet distance between Gaussians fitted to two feature sets."""
    a, b = _as_samples(a), _as_samples(b)
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    mu_a, mu_b = a.mean(0), b.mean(0)
    xa, xb = a - mu_a, b - mu_b
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * _trace_sqrt_product(xa, xb, cov_a, cov_b))


def _poly_kernel(x, y):
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    """Unbiased squared MMD with the cubic polynomial kernel."""
    m, n = x.shape[0], y.shape[0]
    kxx, kyy, kxy = _poly_kernel(x, x), _poly_kernel(y, y), _poly_kernel(x, y)
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sxx + syy - 2 * kxy.mean())


def compute_kid(a: np.ndarray, b: np.ndarray, n_subsets: int = 100, subset_size: int = 100,
                seed: int = 0) -> tuple[float, float]:
    """Mean and std of the unbiased MMD² over random equal-size subsets."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a, b = a[:, None], np.asarray(b, dtype=np.float64).reshape(-1, 1)
    if subset_size > min(len(a), len(b)):
        raise SubsetTooLarge(f"subset_size {subset_size} exceeds sample counts {len(a)}, {len(b)}")
    if subset_size < 2:
        raise DegenerateInput("subset_size must be >= 2")
    rng = np.random.default_rng(seed)
    vals = np.empty(n_subsets)
    for i in range(n_subsets):
        xa = a[rng.choice(len(a), subset_size, replace=False)]
        xb = b[rng.choice(len(b), subset_size, replace=False)]
        vals[i] = mmd2_unbiased(xa, xb)
    return float(vals.mean()), float(vals.std())


def metrics_report(fake: EvalCrops, real: EvalCrops, extractor: InceptionFeatures | None = None,
                   n_subsets: int = 100, subset_size: int = 100, seed: int = 0) -> dict:
    """FID/KID between center-cropped generated and real panoramas."""
    if not isinstance(fake, EvalCrops) or not isinstance(real, EvalCrops):
        raise TypeError("metrics are computed on EvalCrops (256×512 center crops) only")
    extractor = extractor or InceptionFeatures()
    fa = inception_features(fake, extractor)
    fb = inception_features(real, extractor)
    size = min(subset_size, len(fa), len(fb))
    if size < subset_size:
        log.warning("KID subset size reduced from %d to %d (only %d/%d images)", subset_size, size, len(fa), len(fb))
    kid_mean, kid_std = compute_kid(fa, fb, n_subsets, size, seed)
    return {
        "fid": compute_fid(fa, fb),
        "kid_mean": kid_mean,
        "kid_std": kid_std,
        "n_images": len(fake),
        "protocol_tag": PROTOCOL_TAG,
    }


def write_report(report: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
