"""Low-level trunk, masked content attention, object and layout discriminators."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm

from .data import RunConfig, downsample_mask, to_one_hot

CONTENT_DIM = 256
HEAD_BLOCKS = 4


def _width(channels: int, scale: float) -> int:
    return max(1, int(round(channels * scale)))


def _halve(size: tuple[int, int]) -> tuple[int, int]:
    """Halve both sides when both are even, otherwise keep the size."""
    h, w = size
    return (h // 2, w // 2) if h % 2 == 0 and w % 2 == 0 else (h, w)


@dataclass(frozen=True)
class DiscriminatorPlan:
    resolution: tuple[int, int]
    input_channels: int
    lowlevel: tuple[tuple[int, int, tuple[int, int]], ...]  # (in_ch, out_ch, out_size)
    side_channels: tuple[int, ...]  # for image scales 1/2, 1/4, 1/8
    content_dim: int
    num_classes: int
    layout_sizes: tuple[tuple[int, int], ...]

    @classmethod
    def from_config(cls, config: RunConfig, num_classes: int) -> "DiscriminatorPlan":
        s = config.channel_scale
        h, w = config.resolution
        side = tuple(_width(c, s) for c in (8, 16, 32))
        in_ch = _width(32, s)
        blocks = []
        prev = in_ch
        for k in range(config.n_lowlevel_blocks):
            h, w = h // 2, w // 2
            out = _width(min(64 * 2 ** k, 256), s)
            extra = side[k - 1] if 1 <= k <= 3 else 0
            blocks.append((prev + extra, out, (h, w)))
            prev = out
        content = blocks[-1][1]
        sizes = [(h, w)]
        for _ in range(HEAD_BLOCKS):
            sizes.append(_halve(sizes[-1]))
        return cls(tuple(config.resolution), in_ch, tuple(blocks), side, content, num_classes, tuple(sizes))

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        c = self.lowlevel[-1][1]
        h, w = self.lowlevel[-1][2]
        return c, h, w

    def describe(self) -> dict:
        return {
            "resolution": list(self.resolution),
            "lowlevel": [[a, b, list(sz)] for a, b, sz in self.lowlevel],
            "side_channels": list(self.side_channels),
            "num_classes": self.num_classes,
            "layout_sizes": [list(sz) for sz in self.layout_sizes],
        }


class ResBlockDown(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, downsample: bool = True):
        super().__init__()
        self.downsample = downsample
        self.conv1 = spectral_norm(nn.Conv2d(in_ch, out_ch, 3, padding=1))
        self.conv2 = spectral_norm(nn.Conv2d(out_ch, out_ch, 3, padding=1))
        self.skip = spectral_norm(nn.Conv2d(in_ch, out_ch, 1))

    def _down(self, x):
        return F.avg_pool2d(x, 2) if self.downsample else x

    def forward(self, x):
        h = self.conv1(F.leaky_relu(x, 0.2))
        h = self.conv2(F.leaky_relu(h, 0.2))
        return self._down(h) + self._down(self.skip(x))


class VectorResBlock(nn.Module):
    """ResBlock on (C, 1, 1) inputs, i.e. a residual MLP block."""

    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = spectral_norm(nn.Linear(dim, dim))
        self.fc2 = spectral_norm(nn.Linear(dim, dim))

    def forward(self, x):
        return x + self.fc2(F.leaky_relu(self.fc1(F.leaky_relu(x, 0.2)), 0.2))


@dataclass
class ContentVectorSet:
    """Per-class pooled features.

    Attributes:
        vectors: (B, N, C); rows of absent classes are zero.
        present: (B, N) bool, True where the class region is nonempty.
        areas: (B, N) region areas in feature-map pixels.
    """

    vectors: torch.Tensor
    present: torch.Tensor
    areas: torch.Tensor


def _as_channels(mask: torch.Tensor, num_classes: int | None) -> torch.Tensor:
    if mask.is_floating_point():
        return mask
    if num_classes is None:
        raise ValueError("num_classes is required for label-map masks")
    return to_one_hot(mask, num_classes)


def mca(features: torch.Tensor, mask: torch.Tensor, num_classes: int | None = None) -> ContentVectorSet:
    """Masked mean of ``features`` (B, C, h, w) over every class region.

    ``mask`` is either a label map (B, h, w) or indicator channels (B, N, h, w)
    at the feature resolution. Each vector is averaged over its own region's
    area; empty regions are flagged absent and left at zero.
    """
    channels = _as_channels(mask, num_classes).to(features.dtype)
    if channels.shape[-2:] != features.shape[-2:]:
        raise ValueError(
            f"mask size {tuple(channels.shape[-2:])} does not match feature size {tuple(features.shape[-2:])}"
        )
    areas = channels.sum(dim=(-2, -1))
    sums = torch.einsum("bchw,bnhw->bnc", features, channels)
    present = areas.detach() > 0
    safe = torch.where(present, areas, torch.ones_like(areas))
    vectors = sums / safe[..., None] * present[..., None]
    return ContentVectorSet(vectors, present, areas)


def balancing_weights(mask: torch.Tensor, num_classes: int) -> torch.Tensor:
    """Inverse-area class weights normalized over the classes that are present.

    Accepts a label map (..., H, W) or indicator channels (..., N, H, W);
    returns (..., N) float64 weights, zero for absent classes.
    """
    channels = _as_channels(mask, num_classes).detach().double()
    areas = channels.sum(dim=(-2, -1))
    inv = torch.where(areas > 0, 1.0 / areas.clamp_min(1e-300), torch.zeros_like(areas))
    total = inv.sum(dim=-1, keepdim=True)
    return inv / total.clamp_min(1e-300)


class Discriminator(nn.Module):
    def __init__(self, plan: DiscriminatorPlan):
        super().__init__()
        self.plan = plan
        self.from_rgb = spectral_norm(nn.Conv2d(3, plan.input_channels, 3, padding=1))
        self.side_convs = nn.ModuleList(
            spectral_norm(nn.Conv2d(3, c, 3, padding=1)) for c in plan.side_channels
        )
        self.lowlevel = nn.ModuleList(ResBlockDown(i, o) for i, o, _ in plan.lowlevel)
        self.lowlevel_heads = nn.ModuleList(
            spectral_norm(nn.Conv2d(o, 1, 1)) for _, o, _ in plan.lowlevel
        )
        c = plan.content_dim
        self.object_blocks = nn.Sequential(*[VectorResBlock(c) for _ in range(HEAD_BLOCKS)])
        self.object_out = spectral_norm(nn.Linear(c, plan.num_classes + 1))
        self.layout_squeeze = spectral_norm(nn.Conv2d(c, 1, 3, padding=1))
        sizes = plan.layout_sizes
        self.layout_blocks = nn.ModuleList(
            ResBlockDown(1, 1, downsample=sizes[k + 1] != sizes[k]) for k in range(HEAD_BLOCKS)
        )

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in sorted(self.named_parameters(), key=lambda kv: kv[0]):
                if name.endswith("bias"):
                    p.zero_()
                else:
                    fan_in = p[0].numel() if p.ndim > 1 else p.numel()
                    bound = (3.0 / fan_in) ** 0.5
                    p.copy_(torch.rand(p.shape, generator=gen) * 2 * bound - bound)
            for name, buf in sorted(self.named_buffers(), key=lambda kv: kv[0]):
                # spectral-norm power-iteration vectors
                if name.endswith("_u") or name.endswith("_v"):
                    buf.copy_(F.normalize(torch.randn(buf.shape, generator=gen), dim=0, eps=1e-12))

    def lowlevel_features(self, images: list[torch.Tensor]) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Run the low-level trunk; returns F and the per-block binary logit maps."""
        if len(images) != 4:
            raise ValueError(f"expected 4 image scales, got {len(images)}")
        expected = [(self.plan.resolution[0] >> k, self.plan.resolution[1] >> k) for k in range(4)]
        for k, (img, size) in enumerate(zip(images, expected)):
            if tuple(img.shape[-2:]) != size:
                raise ValueError(f"image scale {k} has size {tuple(img.shape[-2:])}, expected {size}")
        h = self.from_rgb(images[0])
        maps = []
        for k, (block, head) in enumerate(zip(self.lowlevel, self.lowlevel_heads)):
            if k > 0 and k <= 3:
                h = torch.cat([h, self.side_convs[k - 1](images[k])], dim=1)
            h = block(h)
            maps.append(head(F.leaky_relu(h, 0.2)))
        return h, maps

    def object_head(self, vectors: torch.Tensor) -> torch.Tensor:
        """(..., C) content vectors -> (..., N+1) logits, applied per vector."""
        return self.object_out(F.leaky_relu(self.object_blocks(vectors), 0.2))

    def layout_logits(self, features: torch.Tensor) -> list[torch.Tensor]:
        h = self.layout_squeeze(F.leaky_relu(features, 0.2))
        maps = [h]
        for block in self.layout_blocks:
            h = block(h)
            maps.append(h)
        return maps

    def feature_mask(self, mask_channels: torch.Tensor) -> torch.Tensor:
        return downsample_mask(mask_channels, self.plan.feature_shape[1:])

    def forward(self, images, mask_channels, feature_aug=None) -> "DiscriminatorOutput":
        """Score a batch.

        Args:
            images: list of 4 tensors, full resolution first.
            mask_channels: (B, N, H, W) indicator channels at full resolution.
            feature_aug: optional callable ``(F, fmask, vectors) -> (F, vectors)``
                hook applied to the layout features and the content vectors.
        """
        feats, lowlevel_maps = self.lowlevel_features(images)
        fmask = self.feature_mask(mask_channels)
        content = mca(feats, fmask)
        layout_in = feats
        vectors = content.vectors
        if feature_aug is not None:
            layout_in, vectors = feature_aug(feats, fmask, content)
        return DiscriminatorOutput(
            object_logits=self.object_head(vectors),
            present=content.present,
            layout=self.layout_logits(layout_in),
            lowlevel=lowlevel_maps,
            fmask=fmask,
        )


@dataclass
class DiscriminatorOutput:
    object_logits: torch.Tensor  # (B, N, N+1)
    present: torch.Tensor  # (B, N)
    layout: list[torch.Tensor]
    lowlevel: list[torch.Tensor]
    fmask: torch.Tensor


def object_logits(disc: Discriminator, content: ContentVectorSet) -> list[torch.Tensor]:
    """Per-sample logit rows for present vectors only: list of (n_present, N+1)."""
    logits = disc.object_head(content.vectors)
    return [logits[b][content.present[b]] for b in range(logits.shape[0])]


def build_discriminator(config: RunConfig, num_classes: int, seed: int | None = None) -> Discriminator:
    d = Discriminator(DiscriminatorPlan.from_config(config, num_classes))
    d.reset_parameters((config.seed if seed is None else seed) + 1)
    return d
