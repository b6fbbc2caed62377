"""Command line: blend, cyclic, train, eval, mine-pairs.

Exit codes: 0 success, 2 bad input, 3 bad checkpoint or config.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import data
from .config import load_config, save_config
from .errors import (
    BadCheckpoint,
    BadImage,
    ConfigError,
    EmptyDataset,
    InsufficientCandidates,
    MissingDirectory,
)
from .evaluation import EvalCrops, InceptionFeatures, metrics_report, write_report
from .networks import Generator
from .training import SampleSource, Trainer, load_generator, run_stage, save_checkpoint

log = logging.getLogger("wrib")

EXIT_OK, EXIT_BAD_INPUT, EXIT_BAD_CHECKPOINT = 0, 2, 3


def load_square(path: str | Path, size: int = 256) -> np.ndarray:
    """Center-crop to a square, then resize to size×size; uint8 H×W×3."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            w, h = im.size
            s = min(w, h)
            left, top = (w - s) // 2, (h - s) // 2
            im = im.crop((left, top, left + s, top + s))
            if s != size:
                im = im.resize((size, size), Image.BICUBIC)
            return np.asarray(im, dtype=np.uint8).copy()
    except (OSError, ValueError) as e:
        raise BadImage(f"cannot read image {path}: {e}") from e


@torch.no_grad()
def blend_arrays(generator: Generator, left_u8: np.ndarray, right_u8: np.ndarray, paste_inputs: bool = False) -> np.ndarray:
    left = data.to_model_range(left_u8)[None]
    right = data.to_model_range(right_u8)[None]
    out = data.from_model_range(generator(left, right).image[0])
    if paste_inputs:
        s = left_u8.shape[1]
        out[:, :s] = left_u8
        out[:, 2 * s:] = right_u8
    return out


def _save_png(arr: np.ndarray, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def _generator(checkpoint) -> Generator:
    try:
        return load_generator(checkpoint)
    except FileNotFoundError as e:
        raise BadCheckpoint(f"checkpoint {checkpoint} not found") from e


def cmd_blend(path_a, path_b, checkpoint, output, arrangement="a-left", paste_inputs=False) -> np.ndarray:
    if arrangement not in ("a-left", "a-right"):
        raise ValueError(f"arrangement must be a-left or a-right, got {arrangement!r}")
    g = _generator(checkpoint)
    size = g.cfg.image_size
    a, b = load_square(path_a, size), load_square(path_b, size)
    left, right = (a, b) if arrangement == "a-left" else (b, a)
    pano = blend_arrays(g, left, right, paste_inputs)
    _save_png(pano, output)
    return pano


def cmd_cyclic(path_a, path_b, checkpoint, output, paste_inputs=False) -> np.ndarray:
    """[A' | M1 | B' | M2]: wrapping past the right edge returns to A'."""
    g = _generator(checkpoint)
    size = g.cfg.image_size
    a, b = load_square(path_a, size), load_square(path_b, size)
    p1 = blend_arrays(g, a, b, paste_inputs)
    p2 = blend_arrays(g, b, a, paste_inputs)
    pano = np.concatenate([p1, p2[:, size:2 * size]], axis=1)
    _save_png(pano, output)
    return pano


def cmd_mine_pairs(dataset_root, output=None, k=3, per_image=4, seed=0, lpips_weights=None) -> Path:
    index = data.scan_dataset(dataset_root, "train")
    output = Path(output) if output else Path(dataset_root) / "pairs_train.tsv"
    distance = data.LPIPSDistance(lpips_weights)
    rows = data.mine_dataset_pairs(index, output, k=k, per_image=per_image, seed=seed, distance=distance)
    log.info("wrote %d pairs to %s", len(rows), output)
    return output


def cmd_train(config_path, device="cpu", seed=None) -> Path:
    """Both stages, SR strictly before FT; returns the final checkpoint path."""
    config = load_config(config_path)
    if seed is not None:
        config.seed = seed
    run_dir = Path(config.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, run_dir / "config.yaml")
    index = data.scan_dataset(config.dataset_root, "train")
    source = SampleSource(index, seed=config.seed, cache_images=config.cache_images)
    trainer = Trainer(config, device)
    save_checkpoint(trainer.checkpoint(source.rng_state()), run_dir / "init.pt")
    if config.iters_sr == 0 and config.iters_ft == 0:
        return run_dir / "init.pt"
    run_stage("SR", config, source, trainer=trainer, run_dir=run_dir)
    if config.iters_ft == 0:
        return run_dir / "SR.pt"
    cache = run_dir / "pairs_train.tsv"
    if not cache.exists():
        data.mine_dataset_pairs(index, cache, k=config.k_pairs, per_image=config.crops_per_image,
                                seed=config.seed, distance=data.LPIPSDistance(config.lpips_backbone_weights),
                                loader=lambda e: source.image(e.image_id))
    source.pairs = data.read_pair_cache(cache)
    run_stage("FT", config, source, trainer=trainer, run_dir=run_dir)
    return run_dir / "FT.pt"


def eval_pairs(index: data.DatasetIndex, seed: int = 0, mode: str = "cross"):
    """Test pairs plus the matching real panoramas.

    One seeded 256×768 crop per test image gives the real reference. In
    ``cross`` mode pair i joins crop i's left panel to crop i+1's right panel
    (cyclically); in ``self`` mode both panels come from crop i.
    """
    rng = np.random.default_rng(seed)
    samples = []
    for e in index:
        img = data.to_model_range(data.load_image(e.path))
        samples.append(data.make_self_recon_sample(img, rng, e.image_id))
    n = len(samples)
    lefts = torch.stack([s.left for s in samples])
    if mode == "cross":
        rights = torch.stack([samples[(i + 1) % n].right for i in range(n)])
    elif mode == "self":
        rights = torch.stack([s.right for s in samples])
    else:
        raise ValueError(f"pair mode must be 'cross' or 'self', got {mode!r}")
    real = torch.stack([s.panorama for s in samples])
    return lefts, rights, real


@torch.no_grad()
def cmd_eval(checkpoint, dataset_root, output=None, mode="cross", seed=0, inception_weights=None,
             n_subsets=100, subset_size=100, batch_size=4) -> dict:
    g = _generator(checkpoint)
    index = data.scan_dataset(dataset_root, "test")
    lefts, rights, real = eval_pairs(index, seed, mode)
    fakes = torch.cat([g(lefts[i:i + batch_size], rights[i:i + batch_size]).image
                       for i in range(0, len(lefts), batch_size)])
    report = metrics_report(EvalCrops(fakes), EvalCrops(real), InceptionFeatures(inception_weights),
                            n_subsets=n_subsets, subset_size=subset_size, seed=seed)
    if output:
        write_report(report, output)
    print(json.dumps(report, sort_keys=True))
    return report


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wrib", description="Wide-range image blending")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("blend", help="blend two photos into a 256×768 panorama")
    b.add_argument("image_a")
    b.add_argument("image_b")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--output", required=True)
    b.add_argument("--arrangement", choices=("a-left", "a-right"), default="a-left")
    b.add_argument("--paste-inputs", action="store_true")

    c = sub.add_parser("cyclic", help="stitch both arrangements into a 256×1024 cyclic panorama")
    c.add_argument("image_a")
    c.add_argument("image_b")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--output", required=True)
    c.add_argument("--paste-inputs", action="store_true")

    t = sub.add_parser("train", help="run self-reconstruction then fine-tuning")
    t.add_argument("--config", required=True)
    t.add_argument("--device", default="cpu")
    t.add_argument("--seed", type=int)

    e = sub.add_parser("eval", help="FID/KID on 256×512 center crops of test panoramas")
    e.add_argument("dataset_root")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--output")
    e.add_argument("--pairs", choices=("cross", "self"), default="cross")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--inception-weights")
    e.add_argument("--kid-subsets", type=int, default=100)
    e.add_argument("--kid-subset-size", type=int, default=100)

    m = sub.add_parser("mine-pairs", help="LPIPS nearest-neighbour cross-image pairs")
    m.add_argument("dataset_root")
    m.add_argument("--output")
    m.add_argument("--k", type=int, default=3)
    m.add_argument("--crops-per-image", type=int, default=4)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--lpips-weights")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "blend":
            cmd_blend(args.image_a, args.image_b, args.checkpoint, args.output, args.arrangement, args.paste_inputs)
        elif args.command == "cyclic":
            cmd_cyclic(args.image_a, args.image_b, args.checkpoint, args.output, args.paste_inputs)
        elif args.command == "train":
            print(cmd_train(args.config, args.device, args.seed))
        elif args.command == "eval":
            cmd_eval(args.checkpoint, args.dataset_root, args.output, args.pairs, args.seed, args.inception_weights,
                     args.kid_subsets, args.kid_subset_size)
        elif args.command == "mine-pairs":
            print(cmd_mine_pairs(args.dataset_root, args.output, args.k, args.crops_per_image, args.seed,
                                 args.lpips_weights))
    except (BadCheckpoint, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_CHECKPOINT
    except (BadImage, MissingDirectory, EmptyDataset, InsufficientCandidates) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
