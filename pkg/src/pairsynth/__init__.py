"""One-shot synthesis of aligned image-mask pairs from a single annotated image."""

__version__ = "0.1.0"

from .data import ImageMaskPair, RunConfig, load_config, load_pair, to_one_hot  # noqa: E402

__all__ = ["ImageMaskPair", "RunConfig", "load_config", "load_pair", "to_one_hot", "__version__"]
