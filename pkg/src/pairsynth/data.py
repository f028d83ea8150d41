"""Image-mask pairs, run configuration, and checkpoint containers."""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
from PIL import Image

CHECKPOINT_FORMAT = "pairsynth-checkpoint/1"


class DataError(ValueError):
    """Raised when an input pair, mask, or config is malformed."""


@dataclass
class ImageMaskPair:
    """A single RGB image in [-1, 1] with its integer label map.

    Attributes:
        image: float tensor of shape (3, H, W).
        mask: int64 tensor of shape (H, W) with values in ``[0, num_classes)``.
        num_classes: number of classes N, background (id 0) included.
        class_names: optional names, one per class.
    """

    image: torch.Tensor
    mask: torch.Tensor
    num_classes: int
    class_names: list[str] | None = None

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DataError(f"image must have shape (3, H, W), got {tuple(self.image.shape)}")
        if self.mask.ndim != 2:
            raise DataError(f"mask must have shape (H, W), got {tuple(self.mask.shape)}")
        if tuple(self.image.shape[1:]) != tuple(self.mask.shape):
            raise DataError(
                f"image/mask size mismatch: image {tuple(self.image.shape[1:])} "
                f"vs mask {tuple(self.mask.shape)}"
            )
        if self.num_classes < 2:
            raise DataError("mask contains only background")
        if int(self.mask.max()) >= self.num_classes or int(self.mask.min()) < 0:
            raise DataError(f"mask labels must lie in [0, {self.num_classes})")
        if self.class_names is not None and len(self.class_names) != self.num_classes:
            raise DataError("class_names must have one entry per class")

    @property
    def size(self) -> tuple[int, int]:
        return int(self.mask.shape[0]), int(self.mask.shape[1])


def _parse_pair(text: str) -> tuple[int, int]:
    parts = text.lower().replace("×", "x").split("x")
    if len(parts) != 2:
        raise DataError(f"expected HxW, got {text!r}")
    return int(parts[0]), int(parts[1])


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise DataError(f"expected a boolean, got {text!r}")


DA_TRANSFORMS = (
    "xflip", "rotate90", "int_translation", "scaling", "frac_translation",
    "brightness", "contrast", "saturation", "hue", "noise", "cutout",
)


@dataclass
class RunConfig:
    """All knobs of a training / evaluation run.

    Every field is addressable by its name in a ``key = value`` config file and
    by ``--key-name`` on the command line.
    """

    resolution: tuple[int, int] = (384, 640)
    base_grid: tuple[int, int] = (3, 5)
    latent_dim: int = 64
    channel_scale: float = 1.0
    n_lowlevel_blocks: int = 4
    p0_epochs: int = 15000
    total_epochs: int = 150000
    learning_rate: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 3
    ema_decay: float = 0.9999
    da_probability: float = 0.3
    da_transforms: tuple[str, ...] = DA_TRANSFORMS
    fa_probability: float = 0.5
    object_fake_term: str = "fake_class"
    checkpoint_every: int = 1000
    pool_size: int = 100
    filter_fraction: float = 0.15
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def upsampling_stages(self) -> int:
        """Number of 2x upsampling steps between the base grid and the output."""
        h, w = self.resolution
        h0, w0 = self.base_grid
        if h % h0 or w % w0 or h // h0 != w // w0:
            raise DataError(
                f"resolution {h}x{w} is not base_grid {h0}x{w0} times a common power of two"
            )
        factor = h // h0
        stages = int(round(math.log2(factor))) if factor > 0 else -1
        if stages < 0 or 2 ** stages != factor:
            raise DataError(f"resolution/base_grid ratio {factor} is not a power of two")
        return stages

    def validate(self) -> None:
        stages = self.upsampling_stages
        if stages < 3:
            raise DataError("need at least 3 upsampling stages to emit 4 image scales")
        if not 1 <= self.n_lowlevel_blocks <= 5:
            raise DataError("n_lowlevel_blocks must be in 1..5")
        if self.n_lowlevel_blocks > stages:
            raise DataError("n_lowlevel_blocks exceeds the number of upsampling stages")
        if not 0 <= self.filter_fraction < 1:
            raise DataError("filter_fraction must satisfy 0 <= eta < 1")
        if not 0 <= self.da_probability <= 1 or not 0 <= self.fa_probability <= 1:
            raise DataError("augmentation probabilities must lie in [0, 1]")
        if self.p0_epochs > self.total_epochs:
            raise DataError("p0_epochs must not exceed total_epochs")
        if self.batch_size < 1 or self.latent_dim < 1 or self.pool_size < 0:
            raise DataError("batch_size, latent_dim must be positive and pool_size >= 0")
        if not 0 < self.ema_decay < 1:
            raise DataError("ema_decay must lie in (0, 1)")
        if self.channel_scale <= 0:
            raise DataError("channel_scale must be positive")
        if self.checkpoint_every < 1:
            raise DataError("checkpoint_every must be >= 1")
        if self.object_fake_term not in ("fake_class", "literal"):
            raise DataError("object_fake_term must be 'fake_class' or 'literal'")
        unknown = set(self.da_transforms) - set(DA_TRANSFORMS)
        if unknown:
            raise DataError(f"unknown augmentation transforms: {sorted(unknown)}")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["resolution"] = list(self.resolution)
        d["base_grid"] = list(self.base_grid)
        d["da_transforms"] = list(self.da_transforms)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        d = dict(d)
        for key in ("resolution", "base_grid", "da_transforms"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


CONFIG_KEYS = {f.name: f for f in dataclasses.fields(RunConfig)}


def parse_config_value(key: str, text: str) -> Any:
    """Convert the textual value of config ``key`` into its field type."""
    if key not in CONFIG_KEYS:
        raise DataError(f"unknown config key {key!r}")
    text = text.strip()
    if key in ("resolution", "base_grid"):
        return _parse_pair(text)
    if key == "da_transforms":
        return tuple(t.strip() for t in text.split(",") if t.strip())
    if key == "object_fake_term":
        return text
    default = CONFIG_KEYS[key].default
    try:
        if isinstance(default, bool):
            return _parse_bool(text)
        if isinstance(default, int):
            return int(text)
        return float(text)
    except ValueError as exc:
        raise DataError(f"bad value for {key}: {text!r}") from exc


def parse_config_text(text: str) -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = parse_config_value(key, value)
    return values


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Read a ``key = value`` config file and apply already-typed overrides."""
    values: dict[str, Any] = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
    if overrides:
        for key in overrides:
            if key not in CONFIG_KEYS:
                raise DataError(f"unknown config key {key!r}")
        values.update(overrides)
    return RunConfig(**values)


def format_config(config: RunConfig) -> str:
    lines = []
    for name, value in config.to_dict().items():
        if name in ("resolution", "base_grid"):
            value = f"{value[0]}x{value[1]}"
        elif name == "da_transforms":
            value = ",".join(value)
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"


def nearest_compatible_resolution(height: int, width: int, stages: int) -> tuple[int, int]:
    """Closest (H, W) that is an integer base grid times ``2**stages``."""
    step = 2 ** stages
    return max(1, round(height / step)) * step, max(1, round(width / step)) * step


# --------------------------------------------------------------------------- I/O


def image_to_tensor(arr: np.ndarray) -> torch.Tensor:
    """uint8 (H, W, 3) -> float (3, H, W) in [-1, 1]; 0 maps to -1 and 255 to +1."""
    return torch.from_numpy(arr.astype(np.float32) / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    arr = ((t.detach().float().clamp(-1, 1) + 1) * 127.5).round()
    return arr.permute(1, 2, 0).to(torch.uint8).cpu().numpy()


def read_mask(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path)
    else:
        with Image.open(path) as im:
            if im.mode not in ("L", "P", "I", "I;16"):
                raise DataError(f"mask {path} must be a single-channel indexed image, got mode {im.mode}")
            arr = np.asarray(im)
    if arr.ndim != 2:
        raise DataError(f"mask {path} must be single-channel, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
            raise DataError(f"mask {path} contains non-integer values")
    if arr.min() < 0:
        raise DataError(f"mask {path} contains negative labels")
    return arr.astype(np.int64)


def load_pair(image_path: str | Path, mask_path: str | Path, config: RunConfig | None = None) -> ImageMaskPair:
    """Load an RGB image and its indexed label map.

    ``N`` is inferred as ``max label + 1``. When ``config`` is given, the
    spatial size must equal ``config.resolution``.
    """
    with Image.open(image_path) as im:
        rgb = np.asarray(im.convert("RGB"))
    mask = read_mask(mask_path)
    if rgb.shape[:2] != mask.shape:
        raise DataError(
            f"image/mask size mismatch: image {rgb.shape[0]}x{rgb.shape[1]} "
            f"vs mask {mask.shape[0]}x{mask.shape[1]}"
        )
    n = int(mask.max()) + 1
    if n < 2:
        raise DataError("mask contains only background")
    if config is not None and tuple(mask.shape) != tuple(config.resolution):
        raise DataError(
            f"pair size {mask.shape[0]}x{mask.shape[1]} does not match configured "
            f"resolution {config.resolution[0]}x{config.resolution[1]}"
        )
    return ImageMaskPair(image_to_tensor(rgb), torch.from_numpy(mask), n)


def save_image(image: torch.Tensor, path: str | Path) -> None:
    Image.fromarray(tensor_to_image(image)).save(path)


def save_mask(mask: torch.Tensor | np.ndarray, path: str | Path) -> None:
    arr = np.asarray(mask.cpu() if isinstance(mask, torch.Tensor) else mask)
    if arr.max() > 255:
        raise DataError("8-bit mask files hold at most 256 classes")
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path)


def save_pair(pair: ImageMaskPair, image_path: str | Path, mask_path: str | Path) -> None:
    save_image(pair.image, image_path)
    save_mask(pair.mask, mask_path)


# ----------------------------------------------------------------- mask encoding


def to_one_hot(mask: torch.Tensor, num_classes: int) -> torch.Tensor:
    """Label map (..., H, W) -> float indicator channels (..., N, H, W)."""
    if mask.numel() and (int(mask.max()) >= num_classes or int(mask.min()) < 0):
        raise DataError(f"label out of range for N={num_classes}")
    onehot = torch.nn.functional.one_hot(mask.long(), num_classes)
    return onehot.movedim(-1, -3).float()


def mask_stride(source: Sequence[int], target: Sequence[int]) -> int:
    sh, sw = source
    th, tw = target
    if th <= 0 or tw <= 0 or sh % th or sw % tw or sh // th != sw // tw:
        raise DataError(f"cannot downsample {sh}x{sw} to {th}x{tw} by an integer factor")
    s = sh // th
    if s & (s - 1):
        raise DataError(f"downsampling factor {s} is not a power of two")
    return s


def downsample_mask(mask: torch.Tensor, target: Sequence[int]) -> torch.Tensor:
    """Nearest-neighbour downsampling anchored at the top-left pixel of each cell.

    Works on label maps (..., H, W) and on channel stacks alike; strided
    selection keeps gradients for float inputs.
    """
    s = mask_stride(mask.shape[-2:], target)
    return mask[..., ::s, ::s]


# ------------------------------------------------------------------ checkpoints


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(path: str | Path, arrays: dict[str, dict[str, torch.Tensor]],
                    config: RunConfig, meta: dict[str, Any] | None = None) -> None:
    """Write named state dicts plus the config snapshot in a versioned container."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": config.to_dict(),
        "meta": dict(meta or {}),
        "arrays": {name: {k: v.detach().cpu().clone() for k, v in sd.items()}
                   for name, sd in arrays.items()},
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> dict[str, Any]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        found = payload.get("format") if isinstance(payload, dict) else type(payload).__name__
        raise DataError(f"unsupported checkpoint format {found!r}, expected {CHECKPOINT_FORMAT!r}")
    payload["config"] = RunConfig.from_dict(payload["config"])
    return payload
