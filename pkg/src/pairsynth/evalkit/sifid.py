"""Single-image Fréchet distance at four extractor taps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .extractor import FeatureExtractor, default_extractor, extract
from .frechet import frechet_from_features

N_LAYERS = 4


@dataclass
class SifidReport:
    per_layer: tuple[float, float, float, float]
    regularized: tuple[bool, bool, bool, bool]
    sample_id: str = ""


def patch_features(feature_map: torch.Tensor) -> np.ndarray:
    """(C, h, w) map -> (h*w, C) matrix of spatial patch features."""
    c = feature_map.shape[0]
    return feature_map.reshape(c, -1).T.double().cpu().numpy()


class SifidScorer:
    """Scores many fakes against one real image, caching the real features."""

    def __init__(self, real: torch.Tensor, extractor: FeatureExtractor | None = None):
        self.extractor = extractor or default_extractor()
        self.real_feats = [patch_features(f[0]) for f in extract(real, self.extractor)]

    def score_features(self, taps: list[torch.Tensor], sample_id: str = "") -> SifidReport:
        values, flags = [], []
        for real, fake in zip(self.real_feats, taps):
            v, reg = frechet_from_features(real, patch_features(fake))
            values.append(v)
            flags.append(reg)
        return SifidReport(tuple(values), tuple(flags), sample_id)

    def score(self, fakes: torch.Tensor, sample_ids: list[str] | None = None) -> list[SifidReport]:
        if fakes.ndim == 3:
            fakes = fakes[None]
        ids = sample_ids or [str(i) for i in range(len(fakes))]
        taps = extract(fakes, self.extractor)
        return [self.score_features([t[i] for t in taps], ids[i]) for i in range(len(fakes))]


def sifid(real: torch.Tensor, fake: torch.Tensor, layer: int = 1,
          extractor: FeatureExtractor | None = None) -> float:
    """SIFID between two (3, H, W) images in [-1, 1] at tap ``layer`` (1..4)."""
    if not 1 <= layer <= N_LAYERS:
        raise ValueError("layer must be in 1..4")
    extractor = extractor or default_extractor()
    a = extract(real, extractor)[layer - 1][0]
    b = extract(fake, extractor)[layer - 1][0]
    return frechet_from_features(patch_features(a), patch_features(b))[0]
