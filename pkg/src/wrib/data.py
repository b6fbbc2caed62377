"""Dataset scanning, self-reconstruction crops, LPIPS pair mining, pixel ranges."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .errors import BadImage, EmptyDataset, ImageTooSmall, InsufficientCandidates, MissingDirectory

log = logging.getLogger(__name__)

PANEL = 256
CROP_H, CROP_W = PANEL, 3 * PANEL


@dataclass(frozen=True)
class Entry:
    image_id: str
    path: Path
    width: int
    height: int


@dataclass
class DatasetIndex:
    split: str
    entries: list[Entry]

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def by_id(self, image_id: str) -> Entry:
        for e in self.entries:
            if e.image_id == image_id:
                return e
        raise KeyError(image_id)


@dataclass
class SelfReconSample:
    left: torch.Tensor
    mid: torch.Tensor
    right: torch.Tensor
    source_id: str
    box: tuple[int, int] = (0, 0)  # (top, left) of the 256×768 window

    @property
    def panorama(self) -> torch.Tensor:
        return torch.cat([self.left, self.mid, self.right], -1)


@dataclass
class CrossPairSample:
    left: torch.Tensor
    right: torch.Tensor
    source_ids: tuple[str, str]
    lpips_distance: float


def scan_dataset(root_dir: str | Path, split: str = "train") -> DatasetIndex:
    """Index decodable images under ``root_dir/split``, sorted by filename."""
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    folder = Path(root_dir) / split
    if not folder.is_dir():
        raise MissingDirectory(f"{folder} does not exist")
    entries = []
    for path in sorted(p for p in folder.iterdir() if p.is_file()):
        try:
            with Image.open(path) as im:
                im.verify()
            with Image.open(path) as im:
                w, h = im.size
        except (UnidentifiedImageError, OSError, SyntaxError):
            continue
        entries.append(Entry(path.name, path, w, h))
    if not entries:
        raise EmptyDataset(f"no decodable images in {folder}")
    return DatasetIndex(split, entries)


def fit_size(height: int, width: int, min_h: int = CROP_H, min_w: int = CROP_W) -> tuple[int, int]:
    """Smallest aspect-preserving upscale with height >= min_h and width >= min_w."""
    if height <= 0 or width <= 0:
        raise ImageTooSmall(f"degenerate image size {height}×{width}")
    scale = max(min_h / height, min_w / width, 1.0)
    if scale == 1.0:
        return height, width
    return max(min_h, math.ceil(height * scale)), max(min_w, math.ceil(width * scale))


def load_image(path: str | Path, fit: bool = True) -> np.ndarray:
    """Decode to an H×W×3 uint8 array, upscaled to fit one 256×768 window if ``fit``."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if fit:
                h, w = fit_size(im.height, im.width)
                if (h, w) != (im.height, im.width):
                    im = im.resize((w, h), Image.BICUBIC)
            return np.asarray(im, dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError) as e:
        raise BadImage(f"cannot decode {path}: {e}") from e


def to_model_range(image_u8) -> torch.Tensor:
    """H×W×3 uint8 -> 3×H×W float32 in [-1, 1]."""
    arr = np.asarray(image_u8)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise BadImage(f"expected H×W×3, got {arr.shape}")
    t = torch.from_numpy(arr.astype(np.float32)).permute(2, 0, 1)
    return t / 127.5 - 1.0


def from_model_range(image: torch.Tensor) -> np.ndarray:
    """3×H×W in [-1, 1] -> H×W×3 uint8, clamped and rounded."""
    x = ((image.detach().float().cpu() + 1.0) * 127.5).round().clamp(0, 255)
    return x.to(torch.uint8).permute(1, 2, 0).numpy()


def _upscale_tensor(image: torch.Tensor) -> torch.Tensor:
    _, h, w = image.shape
    nh, nw = fit_size(h, w)
    if (nh, nw) == (h, w):
        return image
    return F.interpolate(image[None], size=(nh, nw), mode="bicubic", align_corners=False)[0].clamp(-1, 1)


def make_self_recon_sample(image: torch.Tensor, rng: np.random.Generator, source_id: str = "") -> SelfReconSample:
    """Uniformly random 256×768 window split into left/mid/right 256×256 panels."""
    if image.dim() != 3 or image.shape[0] != 3:
        raise ImageTooSmall(f"expected 3×H×W image, got {tuple(image.shape)}")
    image = _upscale_tensor(image)
    _, h, w = image.shape
    top = int(rng.integers(0, h - CROP_H + 1))
    lft = int(rng.integers(0, w - CROP_W + 1))
    crop = image[:, top:top + CROP_H, lft:lft + CROP_W]
    return SelfReconSample(
        crop[..., :PANEL].clone(),
        crop[..., PANEL:2 * PANEL].clone(),
        crop[..., 2 * PANEL:].clone(),
        source_id,
        (top, lft),
    )


# --- cross-image pair mining ---------------------------------------------

def crop_id(image_id: str, top: int, left: int) -> str:
    return f"{image_id}@{top},{left}"


def parse_crop_id(cid: str) -> tuple[str, int, int]:
    image_id, _, box = cid.rpartition("@")
    top, left = box.split(",")
    return image_id, int(top), int(left)


def random_panels(image: torch.Tensor, n: int, rng: np.random.Generator, size: int = PANEL):
    """``n`` random size×size crops; returns [(top, left, crop)]."""
    _, h, w = image.shape
    if h < size or w < size:
        raise ImageTooSmall(f"{h}×{w} image cannot hold a {size}×{size} crop")
    out = []
    for _ in range(n):
        top = int(rng.integers(0, h - size + 1))
        lft = int(rng.integers(0, w - size + 1))
        out.append((top, lft, image[:, top:top + size, lft:lft + size]))
    return out


class LPIPSDistance:
    """LPIPS (AlexNet variant) with per-crop feature caching.

    ``backbone_weights`` is a torchvision ``alexnet`` state dict; without it
    the backbone is random (the learned linear heads still load from the
    lpips package).
    """

    def __init__(self, backbone_weights: str | Path | None = None, device="cpu"):
        import warnings

        import lpips

        with warnings.catch_warnings(), torch.random.fork_rng(devices=[]):
            warnings.simplefilter("ignore")
            torch.manual_seed(0)
            self.model = lpips.LPIPS(net="alex", pnet_rand=True, verbose=False)
        if backbone_weights is not None:
            state = torch.load(backbone_weights, map_location="cpu", weights_only=True)
            net = self.model.net
            mapped = {}
            for key in net.state_dict():
                # slice{n}.{idx}.weight <- features.{idx}.weight
                _, idx, kind = key.split(".")
                mapped[key] = state[f"features.{idx}.{kind}"]
            net.load_state_dict(mapped)
        else:
            log.warning("no AlexNet weights given; LPIPS uses a random backbone")
        self.model.eval().to(device)
        self.device = device

    @torch.no_grad()
    def features(self, crops: torch.Tensor) -> list[torch.Tensor]:
        import lpips

        x = self.model.scaling_layer(crops.to(self.device))
        return [lpips.normalize_tensor(f) for f in self.model.net(x)]

    @torch.no_grad()
    def from_features(self, fa: list[torch.Tensor], fb: list[torch.Tensor]) -> torch.Tensor:
        """Distances between row-aligned feature batches (broadcasting allowed)."""
        total = 0.0
        for lin, a, b in zip(self.model.lins, fa, fb):
            total = total + lin((a - b) ** 2).mean(dim=(2, 3))
        return total.flatten()

    def __call__(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        return self.from_features(self.features(a), self.features(b))


def _pairwise(distance, crops: torch.Tensor, batch: int = 32) -> torch.Tensor:
    n = crops.shape[0]
    out = torch.empty(n, n, dtype=torch.float64)
    if hasattr(distance, "features"):
        feats = [distance.features(crops[i:i + batch]) for i in range(0, n, batch)]
        feats = [torch.cat(level, 0) for level in zip(*feats)]
        for i in range(n):
            fa = [f[i:i + 1] for f in feats]
            out[i] = distance.from_features(fa, feats).double()
    else:
        for i in range(n):
            out[i] = torch.as_tensor(distance(crops[i:i + 1].expand_as(crops), crops)).double().flatten()
    return out


def mine_cross_pairs(
    crops: Sequence[tuple[str, torch.Tensor]],
    k: int = 3,
    distance: Callable | None = None,
) -> list[CrossPairSample]:
    """For each crop, its ``k`` nearest crops from other images, nearest first.

    ``crops`` holds (image_id, 3×256×256 tensor). Crop identity in the
    returned samples is the image id; ``mine_crop_pairs`` keeps crop ids.
    """
    records = mine_crop_pairs([(iid, iid, t) for iid, t in crops], k, distance)
    return [
        CrossPairSample(crops[q][1], crops[n][1], (crops[q][0], crops[n][0]), dist)
        for q, n, dist in records
    ]


def mine_crop_pairs(
    crops: Sequence[tuple[str, str, torch.Tensor]],
    k: int = 3,
    distance: Callable | None = None,
) -> list[tuple[int, int, float]]:
    """Index-level mining over (crop_id, image_id, tensor) triples.

    Returns (query_index, neighbor_index, distance) rows grouped by query,
    ascending distance within each group.
    """
    if not crops:
        raise InsufficientCandidates("empty crop pool")
    if k < 1:
        raise ValueError("k must be >= 1")
    image_ids = [c[1] for c in crops]
    for i, iid in enumerate(image_ids):
        others = sum(1 for j in image_ids if j != iid)
        if others < k:
            raise InsufficientCandidates(f"crop {crops[i][0]} has {others} candidates from other images, need {k}")
    if distance is None:
        distance = LPIPSDistance()
    stack = torch.stack([c[2] for c in crops])
    dmat = _pairwise(distance, stack)
    rows = []
    for i, iid in enumerate(image_ids):
        cand = [j for j in range(len(crops)) if image_ids[j] != iid]
        cand.sort(key=lambda j: (float(dmat[i, j]), j))
        rows.extend((i, j, max(float(dmat[i, j]), 0.0)) for j in cand[:k])
    return rows


def build_crop_pool(index: DatasetIndex, per_image: int, rng: np.random.Generator, loader=None):
    """Random 256×256 crops from every image: [(crop_id, image_id, tensor)]."""
    loader = loader or (lambda e: to_model_range(load_image(e.path)))
    pool = []
    for entry in index:
        image = loader(entry)
        for top, lft, crop in random_panels(image, per_image, rng):
            pool.append((crop_id(entry.image_id, top, lft), entry.image_id, crop.clone()))
    return pool


def write_pair_cache(path: str | Path, rows: Iterable[tuple[str, str, float]]) -> None:
    with open(path, "w") as fh:
        for q, n, d in rows:
            fh.write(f"{q}\t{n}\t{d!r}\n")


def read_pair_cache(path: str | Path) -> list[tuple[str, str, float]]:
    rows = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{line_no}: expected 3 tab-separated fields")
            rows.append((parts[0], parts[1], float(parts[2])))
    return rows


def mine_dataset_pairs(index: DatasetIndex, cache_path: str | Path, k: int = 3, per_image: int = 4,
                       seed: int = 0, distance: Callable | None = None, loader=None) -> list[tuple[str, str, float]]:
    """Build the crop pool, mine neighbors, and write the pair cache."""
    rng = np.random.default_rng(seed)
    pool = build_crop_pool(index, per_image, rng, loader)
    rows = mine_crop_pairs(pool, k, distance)
    named = [(pool[q][0], pool[n][0], d) for q, n, d in rows]
    write_pair_cache(cache_path, named)
    return named
