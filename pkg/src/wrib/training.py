"""Two-stage training: self-reconstruction, then mixed self/cross fine-tuning."""
from __future__ import annotations

import io
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from . import data
from .adversarial import Discriminator, adv_losses
from .config import TrainConfig, config_diff
from .errors import (
    CorruptCheckpoint,
    InsufficientCandidates,
    MissingSRCheckpoint,
    StageBatchMismatch,
    VersionMismatch,
    VersionMismatchWarning,
)
from .losses import (
    VGGFeatures,
    feat_con_loss,
    feat_rec_loss,
    idmrf_loss,
    pixel_loss_ft,
    pixel_loss_sr,
    thirds,
    weight_mask,
)
from .networks import Generator

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "wrib-v1"

SR, FT_SELF, FT_CROSS = "SR", "FT-self", "FT-cross"

# loss terms each step kind may report
STAGE_TERMS = {
    SR: {"pixel_sr", "feat_rec", "mrf", "feat_con", "adv_g", "adv_d"},
    FT_SELF: {"pixel_sr", "feat_rec", "mrf", "feat_con", "adv_g", "adv_d"},
    FT_CROSS: {"pixel_ft", "feat_con", "adv_g", "adv_d"},
}


@dataclass
class SelfReconBatch:
    left: torch.Tensor
    mid: torch.Tensor
    right: torch.Tensor
    real: torch.Tensor


@dataclass
class CrossPairBatch:
    left: torch.Tensor
    right: torch.Tensor
    real: torch.Tensor


@dataclass
class LossReport:
    stage: str
    iteration: int
    losses: dict[str, float]
    total_g: float

    def to_json(self) -> str:
        return json.dumps({"stage": self.stage, "iteration": self.iteration, "total_g": self.total_g, **self.losses})


@dataclass
class Checkpoint:
    config: dict[str, Any]
    generator: dict[str, torch.Tensor]
    discriminator: dict[str, torch.Tensor]
    opt_g: dict[str, Any]
    opt_d: dict[str, Any]
    iteration: int = 0
    stage: str = "init"
    sr_done: bool = False
    rng_state: dict[str, Any] = field(default_factory=dict)
    version: str = CHECKPOINT_VERSION

    def to_archive(self) -> dict[str, Any]:
        return {
            "version": self.version,
            "config": self.config,
            "generator": self.generator,
            "discriminator": self.discriminator,
            "opt_g": self.opt_g,
            "opt_d": self.opt_d,
            "iteration": self.iteration,
            "stage": self.stage,
            "sr_done": self.sr_done,
            "rng_state": self.rng_state,
        }


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # serialize in memory so the bytes do not depend on the file name
    buf = io.BytesIO()
    torch.save(ckpt.to_archive(), buf)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, expected_config: TrainConfig | None = None) -> Checkpoint:
    """Load and validate an archive.

    A different version tag is an error; a different config snapshot only
    warns, listing the differing keys.
    """
    try:
        raw = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as e:  # torch raises RuntimeError/EOFError/UnpicklingError for damaged files
        raise CorruptCheckpoint(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(raw, dict) or "version" not in raw:
        raise CorruptCheckpoint(f"{path} is not a checkpoint archive")
    if raw["version"] != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {raw['version']!r}, expected {CHECKPOINT_VERSION!r}")
    missing = {"config", "generator", "discriminator", "opt_g", "opt_d", "iteration"} - set(raw)
    if missing:
        raise CorruptCheckpoint(f"checkpoint {path} lacks {sorted(missing)}")
    if expected_config is not None:
        diffs = config_diff(raw["config"], expected_config.to_dict())
        if diffs:
            warnings.warn("checkpoint config differs: " + "; ".join(diffs), VersionMismatchWarning, stacklevel=2)
    return Checkpoint(
        config=raw["config"],
        generator=raw["generator"],
        discriminator=raw["discriminator"],
        opt_g=raw["opt_g"],
        opt_d=raw["opt_d"],
        iteration=raw["iteration"],
        stage=raw.get("stage", "init"),
        sr_done=raw.get("sr_done", False),
        rng_state=raw.get("rng_state", {}),
        version=raw["version"],
    )


def load_generator(path: str | Path) -> Generator:
    """Generator in eval mode from a checkpoint file."""
    ckpt = load_checkpoint(path)
    cfg = TrainConfig.from_dict(ckpt.config)
    g = Generator(cfg.model)
    try:
        g.load_state_dict(ckpt.generator)
    except RuntimeError as e:
        raise CorruptCheckpoint(f"generator weights do not match the stored config: {e}") from e
    return g.eval()


class Trainer:
    def __init__(self, config: TrainConfig, device: str = "cpu"):
        self.config = config
        self.device = torch.device(device)
        torch.manual_seed(config.seed)
        self.generator = Generator(config.model).to(self.device)
        self.discriminator = Discriminator(config.model).to(self.device)
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=config.lr_g, betas=config.betas)
        self.opt_d = torch.optim.Adam(self.discriminator.parameters(), lr=config.lr_d, betas=config.betas)
        self.mask = weight_mask(config.model.image_size, dtype=torch.float32).to(self.device)
        self.iteration = 0
        self.stage = "init"
        self.sr_done = False
        self._extractor = None

    @property
    def extractor(self) -> VGGFeatures:
        if self._extractor is None:
            self._extractor = VGGFeatures(self.config.vgg_weights).to(self.device)
        return self._extractor

    # --- checkpoint plumbing -------------------------------------------------
    def checkpoint(self, rng_state: dict | None = None) -> Checkpoint:
        return Checkpoint(
            config=self.config.to_dict(),
            generator={k: v.detach().clone().cpu() for k, v in self.generator.state_dict().items()},
            discriminator={k: v.detach().clone().cpu() for k, v in self.discriminator.state_dict().items()},
            opt_g=self.opt_g.state_dict(),
            opt_d=self.opt_d.state_dict(),
            iteration=self.iteration,
            stage=self.stage,
            sr_done=self.sr_done,
            rng_state=rng_state or {},
        )

    def restore(self, ckpt: Checkpoint) -> None:
        self.generator.load_state_dict(ckpt.generator)
        self.discriminator.load_state_dict(ckpt.discriminator)
        self.opt_g.load_state_dict(ckpt.opt_g)
        self.opt_d.load_state_dict(ckpt.opt_d)
        self.iteration = ckpt.iteration
        self.stage = ckpt.stage
        self.sr_done = ckpt.sr_done

    # --- one optimization step -------------------------------------------------
    def _update_d(self, real, fake) -> float:
        self.discriminator.train()
        loss_d, _ = adv_losses(self.discriminator(real), self.discriminator(fake))
        self.opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        self.opt_d.step()
        return loss_d.item()

    def _generator_terms(self, batch, out, stage) -> dict[str, torch.Tensor]:
        cfg = self.config
        terms = {}
        if stage == FT_CROSS:
            terms["pixel_ft"] = pixel_loss_ft(out.image, batch.left, batch.right)
        else:
            terms["pixel_sr"] = pixel_loss_sr(out.image, batch.left, batch.mid, batch.right, self.mask)
            terms["feat_rec"] = feat_rec_loss(out.bct.fused_mid, batch.mid, self.generator.encoder)
            # IDMRF needs the perceptual network; a zero weight skips it entirely
            if cfg.lambda_mrf > 0:
                terms["mrf"] = idmrf_loss(thirds(out.image)[1], batch.mid, self.extractor)
        terms["feat_con"] = feat_con_loss(out.bct, out.f_left, out.f_right)
        # eval mode: spectral-norm power iteration only advances on D's own step
        self.discriminator.requires_grad_(False)
        self.discriminator.eval()
        try:
            with torch.no_grad():
                real_scores = self.discriminator(batch.real)
            _, terms["adv_g"] = adv_losses(real_scores, self.discriminator(out.image))
        finally:
            self.discriminator.requires_grad_(True)
            self.discriminator.train()
        return terms

    def _update_g(self, batch, out, stage) -> tuple[dict[str, float], float]:
        cfg = self.config
        weights = {
            "pixel_sr": cfg.lambda_pixel,
            "pixel_ft": cfg.lambda_pixel,
            "feat_rec": cfg.lambda_feat_rec,
            "mrf": cfg.lambda_mrf,
            "feat_con": cfg.lambda_feat_con,
            "adv_g": cfg.lambda_adv,
        }
        terms = self._generator_terms(batch, out, stage)
        total = sum(weights[k] * v for k, v in terms.items())
        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        self.opt_g.step()
        return {k: v.item() for k, v in terms.items()}, total.item()

    def training_step(self, batch, stage: str) -> LossReport:
        if stage in (SR, FT_SELF):
            if not isinstance(batch, SelfReconBatch):
                raise StageBatchMismatch(f"{stage} step needs a SelfReconBatch, got {type(batch).__name__}")
        elif stage == FT_CROSS:
            if not isinstance(batch, CrossPairBatch):
                raise StageBatchMismatch(f"{stage} step needs a CrossPairBatch, got {type(batch).__name__}")
        else:
            raise ValueError(f"unknown stage {stage!r}")
        batch = type(batch)(**{k: v.to(self.device) for k, v in vars(batch).items()})
        self.generator.train()
        out = self.generator(batch.left, batch.right)
        loss_d = self._update_d(batch.real, out.image.detach())
        losses, total = self._update_g(batch, out, stage)
        losses["adv_d"] = loss_d
        self.iteration += 1
        return LossReport(stage, self.iteration, losses, total)


class SampleSource:
    """Deterministic batch sampler over a dataset index (and optional pair cache)."""

    def __init__(self, index: data.DatasetIndex, seed: int = 0, cache_images: bool = False,
                 pairs: list[tuple[str, str, float]] | None = None):
        self.index = index
        self.rng = np.random.default_rng(seed)
        self.cache_images = cache_images
        self._cache: dict[str, torch.Tensor] = {}
        self.pairs = pairs

    def image(self, image_id: str) -> torch.Tensor:
        if image_id in self._cache:
            return self._cache[image_id]
        t = data.to_model_range(data.load_image(self.index.by_id(image_id).path))
        if self.cache_images:
            self._cache[image_id] = t
        return t

    def _random_image(self) -> tuple[str, torch.Tensor]:
        e = self.index.entries[int(self.rng.integers(len(self.index)))]
        return e.image_id, self.image(e.image_id)

    def _real(self, n: int) -> torch.Tensor:
        out = []
        for _ in range(n):
            iid, img = self._random_image()
            out.append(data.make_self_recon_sample(img, self.rng, iid).panorama)
        return torch.stack(out)

    def self_batch(self, n: int) -> SelfReconBatch:
        samples = []
        for _ in range(n):
            iid, img = self._random_image()
            samples.append(data.make_self_recon_sample(img, self.rng, iid))
        return SelfReconBatch(
            torch.stack([s.left for s in samples]),
            torch.stack([s.mid for s in samples]),
            torch.stack([s.right for s in samples]),
            self._real(n),
        )

    def _crop(self, cid: str) -> torch.Tensor:
        iid, top, lft = data.parse_crop_id(cid)
        img = self.image(iid)
        return img[:, top:top + data.PANEL, lft:lft + data.PANEL]

    def cross_batch(self, n: int) -> CrossPairBatch:
        if not self.pairs:
            raise InsufficientCandidates("no mined cross pairs available for fine-tuning")
        picks = self.rng.integers(len(self.pairs), size=n)
        lefts, rights = [], []
        for i in picks:
            q, nb, _ = self.pairs[int(i)]
            lefts.append(self._crop(q))
            rights.append(self._crop(nb))
        return CrossPairBatch(torch.stack(lefts), torch.stack(rights), self._real(n))

    def rng_state(self) -> dict:
        return self.rng.bit_generator.state

    def set_rng_state(self, state: dict) -> None:
        if state:
            self.rng.bit_generator.state = state


def run_stage(stage: str, config: TrainConfig, source: SampleSource, trainer: Trainer | None = None,
              checkpoint: Checkpoint | str | Path | None = None, run_dir: str | Path | None = None,
              device: str = "cpu") -> Checkpoint:
    """Run one training stage and return its final checkpoint.

    FT requires a warm start from a finished SR checkpoint (or a trainer
    that has finished SR). FT alternates self and cross batches 1:1.
    """
    if stage not in (SR, "FT"):
        raise ValueError(f"stage must be 'SR' or 'FT', got {stage!r}")
    if trainer is None:
        trainer = Trainer(config, device)
        if checkpoint is not None:
            ckpt = load_checkpoint(checkpoint, config) if isinstance(checkpoint, (str, Path)) else checkpoint
            trainer.restore(ckpt)
            source.set_rng_state(ckpt.rng_state)
    if stage == "FT" and not trainer.sr_done:
        raise MissingSRCheckpoint("fine-tuning needs a completed self-reconstruction checkpoint")

    run_dir = Path(run_dir or config.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    log_path = run_dir / "losses.jsonl"
    iters = config.iters_sr if stage == SR else config.iters_ft
    trainer.stage = stage
    with open(log_path, "a") as log_fh:
        for i in range(iters):
            if stage == SR or i % 2 == 0:
                report = trainer.training_step(source.self_batch(config.batch_size), SR if stage == SR else FT_SELF)
            else:
                report = trainer.training_step(source.cross_batch(config.batch_size), FT_CROSS)
            if config.log_every and (i % config.log_every == 0 or i == iters - 1):
                log_fh.write(report.to_json() + "\n")
            if config.checkpoint_every and (i + 1) % config.checkpoint_every == 0 and i + 1 < iters:
                save_checkpoint(trainer.checkpoint(source.rng_state()), run_dir / f"{stage}_{i + 1:07d}.pt")
    if stage == SR:
        trainer.sr_done = True
    ckpt = trainer.checkpoint(source.rng_state())
    save_checkpoint(ckpt, run_dir / f"{stage}.pt")
    return ckpt
