"""Pairwise perceptual diversity over generated samples.

The distance follows the LPIPS recipe with unit layer weights: channel-normalize
each tap, take squared differences, average spatially and sum over taps.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import torch

from .extractor import FeatureExtractor, extract


def _normalize(f: torch.Tensor) -> torch.Tensor:
    return f / (f.pow(2).sum(dim=1, keepdim=True).sqrt() + 1e-10)


def tap_embeddings(images: torch.Tensor, extractor: FeatureExtractor | None = None) -> list[torch.Tensor]:
    return [_normalize(t.double()) for t in extract(images, extractor)]


def distance_from_embeddings(emb: list[torch.Tensor], i: int, j: int) -> float:
    return float(sum((e[i] - e[j]).pow(2).sum(dim=0).mean() for e in emb))


def perceptual_distance(a: torch.Tensor, b: torch.Tensor, extractor: FeatureExtractor | None = None) -> float:
    emb = tap_embeddings(torch.stack([a, b]), extractor)
    return distance_from_embeddings(emb, 0, 1)


@dataclass
class DiversityResult:
    value: float
    pairs: int
    exhaustive: bool


def lpips_diversity(samples, max_pairs: int = 4950, seed: int = 0,
                    extractor: FeatureExtractor | None = None) -> DiversityResult:
    """Mean perceptual distance over unordered sample pairs.

    All pairs are used when there are at most ``max_pairs`` of them, otherwise
    ``max_pairs`` distinct pairs are drawn with a seeded generator.
    """
    images = torch.stack(list(samples)) if not isinstance(samples, torch.Tensor) else samples
    n = len(images)
    if n < 2:
        raise ValueError("need at least 2 samples")
    pairs = list(itertools.combinations(range(n), 2))
    exhaustive = len(pairs) <= max_pairs
    if not exhaustive:
        gen = torch.Generator().manual_seed(seed)
        pick = torch.randperm(len(pairs), generator=gen)[:max_pairs].sort().values.tolist()
        pairs = [pairs[k] for k in pick]
    emb = tap_embeddings(images, extractor)
    total = sum(distance_from_embeddings(emb, i, j) for i, j in pairs)
    return DiversityResult(total / len(pairs), len(pairs), exhaustive)


def mean_distance_to_others(images: torch.Tensor, extractor: FeatureExtractor | None = None) -> list[float]:
    emb = tap_embeddings(images, extractor)
    n = len(images)
    return [sum(distance_from_embeddings(emb, i, j) for j in range(n) if j != i) / max(n - 1, 1)
            for i in range(n)]
