"""Quality, diversity and alignment metrics."""

from .extractor import WEIGHTS_ENV, FeatureExtractor, build_extractor, default_extractor
from .frechet import frechet_distance, frechet_from_features, gaussian_stats
from .perceptual import DiversityResult, lpips_diversity, perceptual_distance
from .segmenter import AlignmentScore, SegmenterDiverged, alignment_miou
from .sifid import SifidReport, SifidScorer, sifid

__all__ = [
    "WEIGHTS_ENV", "FeatureExtractor", "build_extractor", "default_extractor",
    "frechet_distance", "frechet_from_features", "gaussian_stats",
    "DiversityResult", "lpips_diversity", "perceptual_distance",
    "AlignmentScore", "SegmenterDiverged", "alignment_miou",
    "SifidReport", "SifidScorer", "sifid",
]
