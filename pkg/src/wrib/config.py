"""Model/training configuration, named profiles, and the evaluation protocol constants."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError

# Full-scale protocol. CI asserts these constants; the scores are targets, not tests.
PROTOCOL = {
    "dataset": "scenery outpainting benchmark",
    "n_train_images": 5040,
    "n_test_images": 1000,
    "panel_size": 256,
    "crop_size": (256, 768),
    "eval_crop_size": (256, 512),
    "eval_columns": (128, 640),
    "cross_pair_neighbors": 3,
    "kid_n_subsets": 100,
    "kid_subset_size": 100,
    "target_fid": 36.13,
    "target_kid_mean": 0.0116,
    "target_kid_std": 0.0005,
    "target_fid_sr_only": 46.30,
    "target_kid_sr_only": 0.0218,
}

PROTOCOL_TAG = "center256x512-v1"


@dataclass
class ModelConfig:
    image_size: int = 256
    # encoder stem, stage1..stage4 output channels; last entry is the bottleneck width
    widths: tuple[int, ...] = (64, 128, 256, 512, 1024)
    blocks: tuple[int, ...] = (3, 4, 6, 3)
    k_slices: int = 4
    token_channels: int = 64
    lstm_hidden: int = 1024
    attention_level: int = 8
    use_attention: bool = True
    attention_patch: int = 3
    attention_scale: float = 10.0
    disc_widths: tuple[int, ...] = (64, 128, 256, 512, 512, 512)

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.blocks = tuple(self.blocks)
        self.disc_widths = tuple(self.disc_widths)
        if len(self.widths) != 5 or len(self.blocks) != 4:
            raise ConfigError("widths needs 5 entries and blocks 4")
        if self.image_size % 32:
            raise ConfigError("image_size must be a multiple of 32")
        if (self.image_size // 32) % self.k_slices:
            raise ConfigError(f"k_slices={self.k_slices} does not divide bottleneck width {self.image_size // 32}")
        if self.attention_level not in (2, 4, 8, 16):
            raise ConfigError("attention_level must be one of 2, 4, 8, 16")

    @property
    def bottleneck_size(self) -> int:
        return self.image_size // 32


@dataclass
class TrainConfig:
    lambda_pixel: float = 5.0
    lambda_feat_rec: float = 1.0
    lambda_mrf: float = 0.05
    lambda_feat_con: float = 1.0
    lambda_adv: float = 0.01
    lr_g: float = 1e-4
    lr_d: float = 4e-4
    betas: tuple[float, float] = (0.5, 0.9)
    batch_size: int = 4
    iters_sr: int = 200_000
    iters_ft: int = 100_000
    seed: int = 0
    checkpoint_every: int = 5000
    log_every: int = 1
    crops_per_image: int = 4
    k_pairs: int = 3
    dataset_root: str = "data"
    run_dir: str = "runs/default"
    vgg_weights: str | None = None
    lpips_backbone_weights: str | None = None
    cache_images: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        self.betas = tuple(self.betas)
        for name in ("lambda_pixel", "lambda_feat_rec", "lambda_mrf", "lambda_feat_con", "lambda_adv"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ConfigError("learning rates must be positive")
        if self.iters_sr < 0 or self.iters_ft < 0:
            raise ConfigError("iteration counts must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        return _plain(d)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "model" in d:
            mknown = {f.name for f in fields(ModelConfig)}
            bad = set(d["model"]) - mknown
            if bad:
                raise ConfigError(f"unknown model config keys: {sorted(bad)}")
            d["model"] = ModelConfig(**d["model"])
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def desk_config(**overrides) -> TrainConfig:
    """CPU-sized profile: narrow widths, short stages, batch 2."""
    model = ModelConfig(
        widths=(16, 32, 64, 128, 256),
        blocks=(1, 1, 1, 2),
        token_channels=16,
        lstm_hidden=256,
        disc_widths=(16, 32, 64, 128, 128, 128),
    )
    base = dict(
        batch_size=2,
        iters_sr=500,
        iters_ft=200,
        lr_g=1e-3,
        lr_d=1e-3,
        lambda_mrf=0.0,
        checkpoint_every=250,
        cache_images=True,
        model=model,
    )
    base.update(overrides)
    return TrainConfig(**base)


def full_config(**overrides) -> TrainConfig:
    return TrainConfig(**overrides)


PROFILES = {"full": full_config, "desk": desk_config}


def load_config(path: str | Path) -> TrainConfig:
    """Read a YAML config. An optional ``profile`` key selects the base profile."""
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} is not a mapping")
    profile = raw.pop("profile", "full")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    base = PROFILES[profile]().to_dict()
    model_over = raw.pop("model", {}) or {}
    base["model"].update(model_over)
    base.update(raw)
    return TrainConfig.from_dict(base)


def save_config(config: TrainConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=True)


def config_diff(a: dict, b: dict, prefix: str = "") -> list[str]:
    """Flat list of ``key: a -> b`` lines for keys whose values differ."""
    out = []
    for key in sorted(set(a) | set(b)):
        va, vb = a.get(key), b.get(key)
        name = f"{prefix}{key}"
        if isinstance(va, dict) and isinstance(vb, dict):
            out.extend(config_diff(va, vb, prefix=name + "."))
        elif va != vb:
            out.append(f"{name}: {va!r} -> {vb!r}")
    return out
