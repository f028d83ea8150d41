"""InceptionV3 feature taps used by SIFID and the perceptual distance.

Weights are read from the file named by ``PAIRSYNTH_EXTRACTOR_WEIGHTS`` (a
torchvision ``inception_v3`` state dict). Without it the network is built with
a fixed-seed initialization whose batch-norm statistics are calibrated on a
fixed-seed noise batch, which keeps deep activations at unit scale. Metrics
stay reproducible either way; reports carry the weights hash and whether the
weights were pretrained.
"""

from __future__ import annotations

import functools
import hashlib
import logging
import os
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

log = logging.getLogger(__name__)

WEIGHTS_ENV = "PAIRSYNTH_EXTRACTOR_WEIGHTS"
INPUT_SIZE = (299, 299)
RESIZE_METHOD = "bilinear"
FALLBACK_SEED = 0
CALIBRATION_BATCH = 4
TAP_NAMES = ("pool1", "pool2", "pre_aux", "final")


@dataclass(frozen=True)
class ExtractorInfo:
    name: str
    pretrained: bool
    weights_sha256: str
    resize: str = RESIZE_METHOD
    input_size: tuple[int, int] = INPUT_SIZE

    def describe(self) -> str:
        origin = "pretrained" if self.pretrained else f"seeded-init(seed={FALLBACK_SEED})"
        return f"{self.name} {origin} sha256={self.weights_sha256[:16]} resize={self.resize}"


def _state_sha256(module: nn.Module) -> str:
    h = hashlib.sha256()
    for key, value in sorted(module.state_dict().items()):
        h.update(key.encode())
        h.update(value.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class FeatureExtractor(nn.Module):
    """Returns the four tap feature maps for images in [-1, 1].

    Taps: after the first max-pool (64 ch), after the second max-pool (192 ch),
    before the auxiliary classifier (768 ch) and the final block (2048 ch).
    """

    def __init__(self, net: nn.Module, info: ExtractorInfo):
        super().__init__()
        self.net = net.eval()
        self.info = info
        self.requires_grad_(False)

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        n = self.net
        x = F.interpolate(images, size=self.info.input_size, mode=RESIZE_METHOD, align_corners=False)
        x = n.Conv2d_2b_3x3(n.Conv2d_2a_3x3(n.Conv2d_1a_3x3(x)))
        x = n.maxpool1(x)
        taps = [x]
        x = n.maxpool2(n.Conv2d_4a_3x3(n.Conv2d_3b_1x1(x)))
        taps.append(x)
        for name in ("Mixed_5b", "Mixed_5c", "Mixed_5d", "Mixed_6a", "Mixed_6b", "Mixed_6c", "Mixed_6d", "Mixed_6e"):
            x = getattr(n, name)(x)
        taps.append(x)
        x = n.Mixed_7c(n.Mixed_7b(n.Mixed_7a(x)))
        taps.append(x)
        return taps


def calibration_images(seed: int = FALLBACK_SEED, n: int = CALIBRATION_BATCH) -> torch.Tensor:
    """Smooth multi-scale noise in [-1, 1] at the network input size."""
    gen = torch.Generator().manual_seed(seed)
    out = torch.zeros(n, 3, *INPUT_SIZE)
    for cells in (4, 16, 64):
        coarse = torch.randn(n, 3, cells, cells, generator=gen)
        out += F.interpolate(coarse, size=INPUT_SIZE, mode="bilinear", align_corners=False)
    return torch.tanh(out / 2)


@torch.no_grad()
def calibrate_batchnorm(net: nn.Module, images: torch.Tensor) -> None:
    """Set every batch-norm running statistic from one train-mode pass over ``images``."""
    for m in net.modules():
        if isinstance(m, nn.BatchNorm2d):
            m.reset_running_stats()
            m.momentum = None  # cumulative average: one pass gives the batch statistics
    net.train()
    net(images)
    net.eval()


def build_extractor(weights_path: str | None = None) -> FeatureExtractor:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(FALLBACK_SEED)
        net = torchvision.models.inception_v3(weights=None, aux_logits=False, init_weights=True)
    if weights_path:
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        state = {k.removeprefix("module."): v for k, v in state.items() if not k.startswith("AuxLogits.")}
        net.load_state_dict(state, strict=False)
        info = ExtractorInfo("inception_v3", True, _state_sha256(net))
    else:
        calibrate_batchnorm(net, calibration_images())
        info = ExtractorInfo("inception_v3", False, _state_sha256(net))
        log.warning("%s not set; using seeded-init extractor weights", WEIGHTS_ENV)
    return FeatureExtractor(net, info)


@functools.lru_cache(maxsize=4)
def _cached(weights_path: str | None) -> FeatureExtractor:
    return build_extractor(weights_path)


def default_extractor() -> FeatureExtractor:
    return _cached(os.environ.get(WEIGHTS_ENV) or None)


@torch.no_grad()
def extract(images: torch.Tensor, extractor: FeatureExtractor | None = None,
            batch_size: int = 8) -> list[torch.Tensor]:
    """Tap features for a (B, 3, H, W) batch, concatenated over sub-batches."""
    extractor = extractor or default_extractor()
    if images.ndim == 3:
        images = images[None]
    chunks = [extractor(images[i:i + batch_size].float()) for i in range(0, len(images), batch_size)]
    return [torch.cat([c[k] for c in chunks]) for k in range(len(TAP_NAMES))]
