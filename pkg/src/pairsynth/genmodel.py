"""Upsampling ResNet generator with multi-scale image heads and a mask branch."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import RunConfig

NORM_LAYER = "pixelnorm"
MODES = ("bernoulli", "hard")


def _width(channels: int, scale: float) -> int:
    return max(1, int(round(channels * scale)))


@dataclass(frozen=True)
class GeneratorPlan:
    """Static layer plan; shapes are (channels, height, width) without batch."""

    latent_dim: int
    base_grid: tuple[int, int]
    stages: tuple[tuple[int, int, tuple[int, int]], ...]  # (in_ch, out_ch, out_size)
    num_classes: int

    @classmethod
    def from_config(cls, config: RunConfig, num_classes: int) -> "GeneratorPlan":
        n_up = config.upsampling_stages
        n_blocks = n_up + 1
        # last block 64 ch, the one before 128 ch, everything earlier 256 ch
        full = [256] * n_blocks
        full[-1], full[-2] = 64, 128
        widths = [_width(c, config.channel_scale) for c in full]
        h, w = config.base_grid
        stem = _width(256, config.channel_scale)
        stages = []
        in_ch = stem
        for i, out_ch in enumerate(widths):
            if i > 0:
                h, w = h * 2, w * 2
            stages.append((in_ch, out_ch, (h, w)))
            in_ch = out_ch
        return cls(config.latent_dim, tuple(config.base_grid), tuple(stages), num_classes)

    @property
    def stem_channels(self) -> int:
        return self.stages[0][0]

    @property
    def image_sizes(self) -> list[tuple[int, int]]:
        """Image head sizes, full resolution first."""
        return [self.stages[-1 - k][2] for k in range(4)]

    def describe(self) -> dict:
        return {
            "latent_dim": self.latent_dim,
            "base_grid": list(self.base_grid),
            "stages": [[a, b, list(s)] for a, b, s in self.stages],
            "num_classes": self.num_classes,
            "norm": NORM_LAYER,
        }


class PixelNorm(nn.Module):
    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(dim=1, keepdim=True) + 1e-8)


class ResBlockUp(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, upsample: bool):
        super().__init__()
        self.upsample = upsample
        self.norm1 = PixelNorm()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = PixelNorm()
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def _up(self, x):
        return F.interpolate(x, scale_factor=2, mode="nearest") if self.upsample else x

    def forward(self, x):
        h = self._up(F.leaky_relu(self.norm1(x), 0.2))
        h = self.conv1(h)
        h = self.conv2(F.leaky_relu(self.norm2(h), 0.2))
        return h + self.skip(self._up(x))


def mask_argmax(y: torch.Tensor, mode: str = "hard", generator: torch.Generator | None = None) -> torch.Tensor:
    """Discretize a soft mask (B, N, H, W) while passing gradients straight to ``y``.

    ``hard`` takes the per-pixel argmax (lowest channel wins ties); ``bernoulli``
    draws every channel and pixel independently with success probability ``y``.
    The forward value is exactly the discrete map, the backward pass is the
    identity on ``y``.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    with torch.no_grad():
        if y.numel() and (float(y.min()) < 0.0 or float(y.max()) > 1.0):
            raise ValueError("soft mask values must lie in [0, 1]")
        if mode == "hard":
            discrete = F.one_hot(y.argmax(dim=1), y.shape[1]).movedim(-1, 1).to(y.dtype)
        else:
            discrete = torch.bernoulli(y.detach(), generator=generator)
    # written as discrete + (y - sg[y]) so the forward value is bit-exact
    return discrete + (y - y.detach())


@dataclass
class SynthesisOutput:
    images: list[torch.Tensor]  # full resolution first
    soft_mask: torch.Tensor
    hard_mask: torch.Tensor
    features: torch.Tensor | None = None


class Generator(nn.Module):
    """Latent (B, latent_dim) -> 4 image scales plus an N-channel mask."""

    def __init__(self, plan: GeneratorPlan):
        super().__init__()
        self.plan = plan
        self.stem = nn.ConvTranspose2d(plan.latent_dim, plan.stem_channels, kernel_size=plan.base_grid)
        self.blocks = nn.ModuleList(
            ResBlockUp(i, o, upsample=k > 0) for k, (i, o, _) in enumerate(plan.stages)
        )
        # heads on the last four blocks, full resolution first
        self.image_heads = nn.ModuleList(
            nn.Conv2d(plan.stages[-1 - k][1], 3, 3, padding=1) for k in range(4)
        )
        self.head_norm = PixelNorm()
        self.mask_head = nn.Conv2d(plan.stages[-1][1], plan.num_classes, 3, padding=1)

    def reset_parameters(self, seed: int) -> None:
        """Seeded re-initialization; the mask head starts near-uniform."""
        gen = torch.Generator().manual_seed(seed)
        for module in self.modules():
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
                fan_in = module.weight[0].numel() if isinstance(module, nn.Conv2d) else \
                    module.weight.shape[0] * module.weight[0, 0].numel()
                bound = (3.0 / fan_in) ** 0.5
                with torch.no_grad():
                    module.weight.copy_(torch.rand(module.weight.shape, generator=gen) * 2 * bound - bound)
                    if module.bias is not None:
                        module.bias.zero_()
        with torch.no_grad():
            self.mask_head.weight.copy_(torch.randn(self.mask_head.weight.shape, generator=gen) * 1e-3)
            self.mask_head.bias.zero_()

    def forward(self, z: torch.Tensor, mode: str = "hard", generator: torch.Generator | None = None) -> SynthesisOutput:
        if z.ndim != 2 or z.shape[1] != self.plan.latent_dim:
            raise ValueError(f"latent must have shape (B, {self.plan.latent_dim}), got {tuple(z.shape)}")
        h = self.stem(z[:, :, None, None])
        taps = []
        for block in self.blocks:
            h = block(h)
            taps.append(h)
        images = [
            torch.tanh(head(F.leaky_relu(self.head_norm(taps[-1 - k]), 0.2)))
            for k, head in enumerate(self.image_heads)
        ]
        last = F.leaky_relu(self.head_norm(taps[-1]), 0.2)
        soft = torch.softmax(self.mask_head(last), dim=1)
        hard = mask_argmax(soft, mode, generator)
        return SynthesisOutput(images, soft, hard, taps[-1])


def build_generator(config: RunConfig, num_classes: int, seed: int | None = None) -> Generator:
    g = Generator(GeneratorPlan.from_config(config, num_classes))
    g.reset_parameters(config.seed if seed is None else seed)
    return g


def generate(generator: Generator, z: torch.Tensor, mode: str = "hard",
             rng: torch.Generator | None = None) -> SynthesisOutput:
    """Inference helper: no autograd graph."""
    with torch.no_grad():
        return generator(z, mode, rng)


def sample_latents(n: int, latent_dim: int, rng: torch.Generator) -> torch.Tensor:
    return torch.randn(n, latent_dim, generator=rng)
