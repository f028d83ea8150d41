"""Adversarial losses, the alternating D/G loop, EMA and checkpointing."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import torch
import torch.nn.functional as F

from .augment import AugmentationPolicy, FeatureAugmenter, augment_batch
from .data import ImageMaskPair, RunConfig, save_checkpoint, to_one_hot
from .discmodel import Discriminator, balancing_weights, build_discriminator
from .genmodel import Generator, build_generator

log = logging.getLogger(__name__)

LOWLEVEL_WEIGHT = 2.0


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_checkpoint: Path | None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


# ------------------------------------------------------------------------ losses


@dataclass
class ObjectLossCounters:
    empty_real: int = 0
    empty_fake: int = 0


def d_object_loss(real_logits, real_present, alpha, fake_logits, fake_present,
                  fake_term: str = "fake_class", counters: ObjectLossCounters | None = None):
    """Object-discriminator loss.

    Real vectors are pushed to their own identity and weighted by ``alpha``;
    fake vectors are pushed to the extra fake class (index N). With
    ``fake_term="literal"`` the fake side is ``-log(1 - p_fake)`` instead.
    All logits are (B, N, N+1); results are summed over vectors and averaged
    over the batch.
    """
    n = real_logits.shape[1]
    idx = torch.arange(n)
    logp_real = F.log_softmax(real_logits, dim=-1)[:, idx, idx]  # (B, N)
    w = alpha.to(logp_real.dtype) * real_present
    real = -(w * logp_real).sum(dim=1).mean()

    logits = fake_logits
    if fake_term == "fake_class":
        per_vec = -F.log_softmax(logits, dim=-1)[..., n]
    elif fake_term == "literal":
        # log(1 - p_fake) = logsumexp(real classes) - logsumexp(all)
        per_vec = -(torch.logsumexp(logits[..., :n], -1) - torch.logsumexp(logits, -1))
    else:
        raise ValueError(f"unknown fake_term {fake_term!r}")
    fake = (per_vec * fake_present).sum(dim=1).mean()

    if counters is not None:
        counters.empty_real += int((~real_present.any(dim=1)).sum())
        counters.empty_fake += int((~fake_present.any(dim=1)).sum())
    return real + fake


def g_object_loss(fake_logits, fake_present, counters: ObjectLossCounters | None = None):
    """Non-saturating generator loss: region i should be recognised as identity i."""
    n = fake_logits.shape[1]
    idx = torch.arange(n)
    logp = F.log_softmax(fake_logits, dim=-1)[:, idx, idx]
    if counters is not None:
        counters.empty_fake += int((~fake_present.any(dim=1)).sum())
    return -(logp * fake_present).sum(dim=1).mean()


def binary_multilayer_loss(maps: list[torch.Tensor], target: str) -> torch.Tensor:
    """Mean over layers of the per-pixel mean BCE toward ``target`` ('real' or 'fake')."""
    if not maps:
        raise ValueError("need at least one logit map")
    if target not in ("real", "fake"):
        raise ValueError(f"target must be 'real' or 'fake', got {target!r}")
    value = 1.0 if target == "real" else 0.0
    losses = [F.binary_cross_entropy_with_logits(m, torch.full_like(m, value)) for m in maps]
    return torch.stack(losses).mean()


def combine(obj, layout, lowlevel):
    return obj + layout + LOWLEVEL_WEIGHT * lowlevel


@dataclass
class LossReport:
    epoch: int
    mode: str
    d_object: float
    d_layout: float
    d_lowlevel: float
    d_total: float
    g_object: float
    g_layout: float
    g_lowlevel: float
    g_total: float

    HEADER = ("epoch", "mode", "d_object", "d_layout", "d_lowlevel", "d_total",
              "g_object", "g_layout", "g_lowlevel", "g_total")

    def to_line(self) -> str:
        return "\t".join(repr(getattr(self, k)) if isinstance(getattr(self, k), float)
                         else str(getattr(self, k)) for k in self.HEADER)

    @classmethod
    def from_line(cls, line: str) -> "LossReport":
        parts = line.rstrip("\n").split("\t")
        kw = dict(zip(cls.HEADER, parts))
        return cls(epoch=int(kw.pop("epoch")), mode=kw.pop("mode"), **{k: float(v) for k, v in kw.items()})


def read_loss_log(path: str | Path) -> list[LossReport]:
    lines = Path(path).read_text().splitlines()
    return [LossReport.from_line(line) for line in lines[1:] if line.strip()]


def mask_mode(epoch: int, p0: int) -> str:
    return "bernoulli" if epoch < p0 else "hard"


# ---------------------------------------------------------------------------- EMA


class EMA:
    """Exponential moving average of generator parameters."""

    def __init__(self, model: torch.nn.Module, decay: float):
        self.decay = decay
        self.shadow = copy.deepcopy(model)
        self.shadow.requires_grad_(False)
        self.shadow.eval()

    @torch.no_grad()
    def update(self, model: torch.nn.Module) -> None:
        for s, p in zip(self.shadow.parameters(), model.parameters()):
            s.mul_(self.decay).add_(p.detach(), alpha=1 - self.decay)
        for s, b in zip(self.shadow.buffers(), model.buffers()):
            s.copy_(b)


# ------------------------------------------------------------------------ training


def image_pyramid(image: torch.Tensor, levels: int = 4) -> list[torch.Tensor]:
    """(B, 3, H, W) -> list of box-filtered halvings, full resolution first."""
    out = [image]
    for _ in range(levels - 1):
        out.append(F.avg_pool2d(out[-1], 2))
    return out


@dataclass
class Trainer:
    """Holds models, optimizers and the single random stream of a run."""

    pair: ImageMaskPair
    config: RunConfig
    generator: Generator = field(init=False)
    discriminator: Discriminator = field(init=False)

    def __post_init__(self):
        cfg = self.config
        if tuple(self.pair.size) != tuple(cfg.resolution):
            raise ValueError(f"pair size {self.pair.size} does not match resolution {cfg.resolution}")
        torch.manual_seed(cfg.seed)
        n = self.pair.num_classes
        self.generator = build_generator(cfg, n)
        self.discriminator = build_discriminator(cfg, n)
        self.ema = EMA(self.generator, cfg.ema_decay)
        betas = (cfg.beta1, cfg.beta2)
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=cfg.learning_rate, betas=betas)
        self.opt_d = torch.optim.Adam(self.discriminator.parameters(), lr=cfg.learning_rate, betas=betas)
        self.rng = torch.Generator().manual_seed(cfg.seed)
        self.policy = AugmentationPolicy.from_config(cfg)
        self.feature_aug = FeatureAugmenter(cfg.fa_probability, self.rng)
        self.counters = ObjectLossCounters()
        b = cfg.batch_size
        self.real_images = image_pyramid(self.pair.image[None].expand(b, -1, -1, -1).contiguous())
        self.real_mask = to_one_hot(self.pair.mask, n)[None].expand(b, -1, -1, -1).contiguous()
        self.epoch = 0

    @property
    def num_classes(self) -> int:
        return self.pair.num_classes

    def _latents(self):
        return torch.randn(self.config.batch_size, self.config.latent_dim, generator=self.rng)

    def d_losses(self, real_images, real_mask, fake_images, fake_mask, feature_aug=True):
        d = self.discriminator
        hook = self.feature_aug if feature_aug and self.config.fa_probability > 0 else None
        real = d(real_images, real_mask, hook)
        fake = d(fake_images, fake_mask, hook)
        alpha = balancing_weights(real.fmask, self.num_classes)
        obj = d_object_loss(real.object_logits, real.present, alpha, fake.object_logits, fake.present,
                            self.config.object_fake_term, self.counters)
        layout = binary_multilayer_loss(real.layout, "real") + binary_multilayer_loss(fake.layout, "fake")
        lowlevel = binary_multilayer_loss(real.lowlevel, "real") + binary_multilayer_loss(fake.lowlevel, "fake")
        return obj, layout, lowlevel, combine(obj, layout, lowlevel)

    def g_losses(self, fake_images, fake_mask):
        out = self.discriminator(fake_images, fake_mask, None)
        obj = g_object_loss(out.object_logits, out.present, self.counters)
        layout = binary_multilayer_loss(out.layout, "real")
        lowlevel = binary_multilayer_loss(out.lowlevel, "real")
        return obj, layout, lowlevel, combine(obj, layout, lowlevel)

    def step(self) -> LossReport:
        mode = mask_mode(self.epoch, self.config.p0_epochs)
        g, d = self.generator, self.discriminator

        # discriminator step
        with torch.no_grad():
            fake = g(self._latents(), mode, self.rng)
        real_imgs, real_mask, _ = augment_batch(self.real_images, self.real_mask, self.policy, self.rng)
        fake_imgs, fake_mask, _ = augment_batch(fake.images, fake.hard_mask, self.policy, self.rng)
        d.requires_grad_(True)
        self.opt_d.zero_grad(set_to_none=True)
        d_obj, d_lay, d_low, d_tot = self.d_losses(real_imgs, real_mask, fake_imgs, fake_mask)
        d_tot.backward()
        self.opt_d.step()

        # generator step
        d.requires_grad_(False)
        self.opt_g.zero_grad(set_to_none=True)
        fake = g(self._latents(), mode, self.rng)
        fake_imgs, fake_mask, _ = augment_batch(fake.images, fake.hard_mask, self.policy, self.rng)
        g_obj, g_lay, g_low, g_tot = self.g_losses(fake_imgs, fake_mask)
        g_tot.backward()
        self.opt_g.step()
        self.ema.update(g)

        values = [v.item() for v in (d_obj, d_lay, d_low, d_tot, g_obj, g_lay, g_low, g_tot)]
        report = LossReport(self.epoch, mode, *values)
        self.epoch += 1
        return report

    def state(self) -> dict[str, dict[str, torch.Tensor]]:
        return {
            "generator": self.generator.state_dict(),
            "generator_ema": self.ema.shadow.state_dict(),
            "discriminator": self.discriminator.state_dict(),
        }

    def meta(self) -> dict:
        return {
            "epoch": self.epoch,
            "num_classes": self.num_classes,
            "generator_plan": self.generator.plan.describe(),
            "discriminator_plan": self.discriminator.plan.describe(),
            "empty_real_events": self.counters.empty_real,
            "empty_fake_events": self.counters.empty_fake,
        }

    def save(self, path: Path) -> None:
        save_checkpoint(path, self.state(), self.config, self.meta())


def checkpoint_name(epoch: int) -> str:
    return f"ckpt_{epoch:07d}.pt"


@dataclass
class TrainResult:
    trainer: Trainer
    reports: list[LossReport]
    checkpoints: list[Path]


def train(pair: ImageMaskPair, config: RunConfig, out_dir: str | Path | None = None,
          callback: Callable[[Trainer, LossReport], None] | None = None) -> TrainResult:
    """Train on a single pair for ``config.total_epochs`` iterations.

    With ``out_dir`` set, a ``losses.tsv`` log is appended per epoch and
    checkpoints with raw and EMA weights are written every
    ``config.checkpoint_every`` epochs and at the end. A non-finite loss
    stops training with :class:`TrainingDiverged`; the last good checkpoint
    is kept on disk.
    """
    trainer = Trainer(pair, config)
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    checkpoints: list[Path] = []
    reports: list[LossReport] = []
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "losses.tsv", "w", encoding="utf-8")
        log_fh.write("\t".join(LossReport.HEADER) + "\n")
    try:
        for _ in range(config.total_epochs):
            report = trainer.step()
            values = [getattr(report, f.name) for f in fields(report) if isinstance(getattr(report, f.name), float)]
            if not all(math.isfinite(v) for v in values):
                last = checkpoints[-1] if checkpoints else None
                raise TrainingDiverged(f"non-finite loss at epoch {report.epoch}", last)
            reports.append(report)
            if log_fh is not None:
                log_fh.write(report.to_line() + "\n")
            if callback is not None:
                callback(trainer, report)
            if out is not None and (trainer.epoch % config.checkpoint_every == 0
                                    or trainer.epoch == config.total_epochs):
                path = out / "checkpoints" / checkpoint_name(trainer.epoch)
                trainer.save(path)
                checkpoints.append(path)
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(trainer, reports, checkpoints)
