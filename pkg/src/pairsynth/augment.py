"""Differentiable augmentation of image-mask pairs and mask-aware feature augmentation.

Geometric transforms are sampled once per batch element as a single affine map
and applied identically to every image scale (bilinear) and to the mask
channels (nearest). Appearance transforms touch images only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .data import DA_TRANSFORMS

GEOMETRIC = ("xflip", "rotate90", "int_translation", "scaling", "frac_translation")
APPEARANCE = ("brightness", "contrast", "saturation", "hue", "noise", "cutout")

# transform strengths (ADA defaults)
TRANSLATE_INT_MAX = 0.125
SCALE_STD = 0.2
TRANSLATE_FRAC_STD = 0.125
BRIGHTNESS_STD = 0.2
CONTRAST_STD = 0.5
SATURATION_STD = 1.0
HUE_MAX = 1.0
NOISE_STD = 0.1
CUTOUT_SIZE = 0.5


@dataclass
class AugmentationPolicy:
    """Which transforms run and how often.

    Attributes:
        transforms: enabled transform names, a subset of ``DA_TRANSFORMS``.
        probability: per-transform application probability.
    """

    transforms: tuple[str, ...] = DA_TRANSFORMS
    probability: float = 0.3
    geometric: dict[str, bool] = field(default_factory=lambda: {t: t in GEOMETRIC for t in DA_TRANSFORMS})

    def __post_init__(self):
        unknown = set(self.transforms) - set(DA_TRANSFORMS)
        if unknown:
            raise ValueError(f"unknown transforms: {sorted(unknown)}")

    @classmethod
    def from_config(cls, config) -> "AugmentationPolicy":
        return cls(tuple(config.da_transforms), config.da_probability)

    def enabled(self, name: str) -> bool:
        return name in self.transforms and self.probability > 0


@dataclass
class AugmentParams:
    """Per-element random draws; shared across all scales of one sample."""

    matrix: torch.Tensor  # (B, 3, 3) output pixel -> input pixel, centred coords
    geometric: torch.Tensor  # (B,) bool, element needs resampling
    brightness: torch.Tensor
    contrast: torch.Tensor
    saturation: torch.Tensor
    hue: torch.Tensor
    noise_std: torch.Tensor
    cutout: torch.Tensor  # (B,) bool
    cutout_center: torch.Tensor  # (B, 2) in [0, 1), (y, x)


def _gate(policy: AugmentationPolicy, name: str, batch: int, rng: torch.Generator) -> torch.Tensor:
    draw = torch.rand(batch, generator=rng)
    if not policy.enabled(name):
        return torch.zeros(batch, dtype=torch.bool)
    return draw < policy.probability


def _translate(tx, ty):
    m = torch.eye(3, dtype=torch.float64).repeat(len(tx), 1, 1)
    m[:, 0, 2] = tx
    m[:, 1, 2] = ty
    return m


def _scale(sx, sy):
    m = torch.eye(3, dtype=torch.float64).repeat(len(sx), 1, 1)
    m[:, 0, 0] = sx
    m[:, 1, 1] = sy
    return m


def _rotate(theta):
    m = torch.eye(3, dtype=torch.float64).repeat(len(theta), 1, 1)
    c, s = torch.cos(theta), torch.sin(theta)
    # snap quarter turns to exact 0/+-1
    c = torch.where((c - c.round()).abs() < 1e-12, c.round(), c)
    s = torch.where((s - s.round()).abs() < 1e-12, s.round(), s)
    m[:, 0, 0], m[:, 0, 1], m[:, 1, 0], m[:, 1, 1] = c, -s, s, c
    return m


def sample_params(policy: AugmentationPolicy, batch: int, size: tuple[int, int],
                  rng: torch.Generator) -> AugmentParams:
    """Draw one set of augmentation parameters per element.

    A fixed number of draws is consumed regardless of which transforms are
    enabled, so toggling a transform does not shift the other streams.
    """
    h, w = size
    eye = torch.eye(3, dtype=torch.float64).repeat(batch, 1, 1)
    geo = torch.zeros(batch, dtype=torch.bool)
    # each geometric matrix maps output coords to input coords (inverse warp)
    m = eye.clone()

    g = _gate(policy, "xflip", batch, rng)
    sx = torch.where(g, -torch.ones(batch, dtype=torch.float64), torch.ones(batch, dtype=torch.float64))
    m = m @ _scale(sx, torch.ones(batch, dtype=torch.float64))
    geo |= g

    g = _gate(policy, "rotate90", batch, rng)
    k = torch.randint(1, 4, (batch,), generator=rng)
    theta = torch.where(g, k.double() * (math.pi / 2), torch.zeros(batch, dtype=torch.float64))
    m = m @ _rotate(theta)
    geo |= g

    g = _gate(policy, "int_translation", batch, rng)
    t = (torch.rand(batch, 2, generator=rng, dtype=torch.float64) * 2 - 1) * TRANSLATE_INT_MAX
    tx = torch.where(g, (t[:, 0] * w).round(), torch.zeros(batch, dtype=torch.float64))
    ty = torch.where(g, (t[:, 1] * h).round(), torch.zeros(batch, dtype=torch.float64))
    m = m @ _translate(tx, ty)
    geo |= g & ((tx != 0) | (ty != 0))

    g = _gate(policy, "scaling", batch, rng)
    s = torch.exp2(torch.randn(batch, generator=rng, dtype=torch.float64) * SCALE_STD)
    s = torch.where(g, s, torch.ones_like(s))
    m = m @ _scale(1 / s, 1 / s)
    geo |= g

    g = _gate(policy, "frac_translation", batch, rng)
    t = torch.randn(batch, 2, generator=rng, dtype=torch.float64) * TRANSLATE_FRAC_STD
    tx = torch.where(g, t[:, 0] * w, torch.zeros(batch, dtype=torch.float64))
    ty = torch.where(g, t[:, 1] * h, torch.zeros(batch, dtype=torch.float64))
    m = m @ _translate(tx, ty)
    geo |= g

    def _colour(name, draw):
        gate = _gate(policy, name, batch, rng)
        return gate, draw()

    gb, b = _colour("brightness", lambda: torch.randn(batch, generator=rng) * BRIGHTNESS_STD)
    gc, c = _colour("contrast", lambda: torch.exp2(torch.randn(batch, generator=rng) * CONTRAST_STD))
    gs, s = _colour("saturation", lambda: torch.exp2(torch.randn(batch, generator=rng) * SATURATION_STD))
    gh, hue = _colour("hue", lambda: (torch.rand(batch, generator=rng) * 2 - 1) * math.pi * HUE_MAX)
    gn, ns = _colour("noise", lambda: torch.randn(batch, generator=rng).abs() * NOISE_STD)
    gcut, centre = _colour("cutout", lambda: torch.rand(batch, 2, generator=rng))

    return AugmentParams(
        matrix=m,
        geometric=geo,
        brightness=torch.where(gb, b, torch.zeros_like(b)),
        contrast=torch.where(gc, c, torch.ones_like(c)),
        saturation=torch.where(gs, s, torch.ones_like(s)),
        hue=torch.where(gh, hue, torch.zeros_like(hue)),
        noise_std=torch.where(gn, ns, torch.zeros_like(ns)),
        cutout=gcut,
        cutout_center=centre,
    )


def _grid(matrix: torch.Tensor, size: tuple[int, int], full: tuple[int, int]) -> torch.Tensor:
    """Sampling grid at ``size`` for a warp defined in full-resolution pixels."""
    h, w = size
    fh, fw = full
    # normalized coords -> full-res centred pixels -> warp -> normalized coords
    to_pix = torch.diag(torch.tensor([fw / 2, fh / 2, 1.0], dtype=torch.float64))
    to_norm = torch.diag(torch.tensor([2 / fw, 2 / fh, 1.0], dtype=torch.float64))
    theta = (to_norm @ matrix @ to_pix)[:, :2, :]
    return F.affine_grid(theta.float(), [len(matrix), 1, h, w], align_corners=False)


def warp_images(images: torch.Tensor, matrix: torch.Tensor, active: torch.Tensor,
                full: tuple[int, int]) -> torch.Tensor:
    """Bilinear inverse warp of the ``active`` elements; outside pixels become 0."""
    idx = active.nonzero().flatten()
    if len(idx) == 0:
        return images
    grid = _grid(matrix[idx], tuple(images.shape[-2:]), full)
    warped = F.grid_sample(images[idx], grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return images.index_copy(0, idx, warped)


def warp_mask(mask: torch.Tensor, matrix: torch.Tensor, active: torch.Tensor,
              full: tuple[int, int]) -> torch.Tensor:
    """Nearest inverse warp of indicator channels (B, N, H, W); revealed pixels become background."""
    idx = active.nonzero().flatten()
    if len(idx) == 0:
        return mask
    grid = _grid(matrix[idx], tuple(mask.shape[-2:]), full)
    sub = mask[idx]
    ones = torch.ones_like(sub[:, :1])
    warped = F.grid_sample(torch.cat([sub, ones], 1), grid, mode="nearest",
                           padding_mode="zeros", align_corners=False)
    channels, valid = warped[:, :-1], warped[:, -1:]
    invalid = (1 - valid).detach()
    background = channels[:, :1] * valid + invalid
    channels = torch.cat([background, channels[:, 1:] * valid], 1)
    return mask.index_copy(0, idx, channels)


def affine_matrix(flip: bool = False, angle: float = 0.0, zoom: float = 1.0,
                  shift: tuple[float, float] = (0.0, 0.0)) -> torch.Tensor:
    """Inverse-warp matrix (1, 3, 3) in centred full-resolution pixel coordinates.

    ``zoom > 1`` magnifies, ``angle`` is in radians, ``shift`` is (dx, dy) in pixels.
    """
    one = torch.ones(1, dtype=torch.float64)
    m = _scale(-one if flip else one, one)
    m = m @ _rotate(torch.tensor([angle], dtype=torch.float64))
    m = m @ _translate(torch.tensor([-shift[0]], dtype=torch.float64), torch.tensor([-shift[1]], dtype=torch.float64))
    return m @ _scale(one / zoom, one / zoom)


def _luma_axis(dtype):
    return torch.full((3,), 1 / math.sqrt(3), dtype=dtype)


def colour_transform(x: torch.Tensor, params: AugmentParams) -> torch.Tensor:
    b = params.brightness.to(x)[:, None, None, None]
    c = params.contrast.to(x)[:, None, None, None]
    x = x * c + b
    v = _luma_axis(x.dtype).to(x.device)
    luma = torch.einsum("bchw,c->bhw", x, v)[:, None] * v[None, :, None, None]
    chroma = x - luma
    # hue: rotate chroma around the luma axis (Rodrigues; chroma is orthogonal to v)
    theta = params.hue.to(x)[:, None, None, None]
    cross = torch.cross(v[None, :, None, None].expand_as(chroma), chroma, dim=1)
    chroma = chroma * torch.cos(theta) + cross * torch.sin(theta)
    chroma = chroma * params.saturation.to(x)[:, None, None, None]
    return luma + chroma


def cutout(x: torch.Tensor, params: AugmentParams) -> torch.Tensor:
    if not bool(params.cutout.any()):
        return x
    h, w = x.shape[-2:]
    ys = (torch.arange(h, dtype=torch.float32) + 0.5) / h
    xs = (torch.arange(w, dtype=torch.float32) + 0.5) / w
    cy = params.cutout_center[:, 0][:, None, None]
    cx = params.cutout_center[:, 1][:, None, None]
    inside = ((ys[None, :, None] - cy).abs() < CUTOUT_SIZE / 2) & ((xs[None, None, :] - cx).abs() < CUTOUT_SIZE / 2)
    inside &= params.cutout[:, None, None]
    return x * (~inside)[:, None].to(x)


def augment_batch(images: list[torch.Tensor], mask: torch.Tensor, policy: AugmentationPolicy,
                  rng: torch.Generator, params: AugmentParams | None = None):
    """Augment a multi-scale image batch and its mask channels consistently.

    Args:
        images: list of (B, 3, h_k, w_k), full resolution first.
        mask: (B, N, H, W) indicator channels at full resolution.
        policy: transform set and probability.
        rng: random stream; all draws come from it.
        params: reuse pre-drawn parameters instead of sampling.

    Returns:
        (images, mask, params)
    """
    full = tuple(images[0].shape[-2:])
    if params is None:
        params = sample_params(policy, images[0].shape[0], full, rng)
    out = []
    for x in images:
        x = warp_images(x, params.matrix, params.geometric, full)
        if bool((params.brightness != 0).any() | (params.contrast != 1).any()
                | (params.saturation != 1).any() | (params.hue != 0).any()):
            x = colour_transform(x, params)
        if bool((params.noise_std > 0).any()):
            x = x + torch.randn(x.shape, generator=rng) * params.noise_std[:, None, None, None].to(x)
        x = cutout(x, params)
        out.append(x)
    return out, warp_mask(mask, params.matrix, params.geometric, full), params


def augment_pair(image: torch.Tensor, mask: torch.Tensor, policy: AugmentationPolicy, seed: int):
    """Augment one (3, H, W) image and its (N, H, W) one-hot mask."""
    rng = torch.Generator().manual_seed(seed)
    images, masks, _ = augment_batch([image[None]], mask[None], policy, rng)
    return images[0][0], masks[0]


# --------------------------------------------------------------- feature augmentation


def mix_background(vectors: torch.Tensor, present: torch.Tensor, partner: torch.Tensor,
                   weight: torch.Tensor) -> torch.Tensor:
    """Replace background vector ``a`` by ``(1 - w) a + w b`` with ``b`` from ``partner``."""
    bg = vectors[:, 0]
    mixed = (1 - weight[:, None]) * bg + weight[:, None] * bg[partner]
    ok = present[:, 0] & present[partner, 0]
    new_bg = torch.where(ok[:, None], mixed, bg)
    return torch.cat([new_bg[:, None], vectors[:, 1:]], dim=1)


def content_fa(vectors: torch.Tensor, present: torch.Tensor, rng: torch.Generator) -> torch.Tensor:
    """Mix each background vector with another element's; objects pass through."""
    batch = vectors.shape[0]
    if batch < 2:
        return vectors
    offset = torch.randint(1, batch, (batch,), generator=rng)
    partner = (torch.arange(batch) + offset) % batch
    weight = torch.rand(batch, generator=rng).to(vectors)
    return mix_background(vectors, present, partner, weight)


def swap_regions(features: torch.Tensor, region: torch.Tensor, a: int, b: int) -> torch.Tensor:
    """Exchange the ``region`` (h, w) bool area of elements ``a`` and ``b``."""
    r = region.to(features.dtype)[None]
    out = list(features.unbind(0))
    fa, fb = features[a], features[b]
    out[a] = fa * (1 - r) + fb * r
    out[b] = fb * (1 - r) + fa * r
    return torch.stack(out, 0)


def object_closed_region(seed_region: torch.Tensor, labels: list[torch.Tensor]) -> torch.Tensor:
    """Grow ``seed_region`` until no object (label >= 1) of any label map is cut."""
    region = seed_region.clone()
    while True:
        grown = region.clone()
        for lab in labels:
            hit = torch.unique(lab[region])
            for c in hit[hit > 0].tolist():
                grown |= lab == c
        if torch.equal(grown, region):
            return region
        region = grown


def sample_layout_region(labels_a: torch.Tensor, labels_b: torch.Tensor, rng: torch.Generator) -> torch.Tensor:
    h, w = labels_a.shape
    frac = 0.25 + 0.5 * torch.rand(2, generator=rng)
    rh, rw = max(1, int(h * frac[0])), max(1, int(w * frac[1]))
    y0 = int(torch.randint(0, h - rh + 1, (1,), generator=rng))
    x0 = int(torch.randint(0, w - rw + 1, (1,), generator=rng))
    rect = torch.zeros(h, w, dtype=torch.bool)
    rect[y0:y0 + rh, x0:x0 + rw] = True
    return object_closed_region(rect, [labels_a, labels_b])


def layout_fa(features: torch.Tensor, labels: torch.Tensor, rng: torch.Generator) -> torch.Tensor:
    """Swap object-respecting regions between randomly paired batch elements.

    Args:
        features: (B, C, h, w).
        labels: (B, h, w) label maps at feature resolution.
    """
    batch = features.shape[0]
    if batch < 2:
        return features
    order = torch.randperm(batch, generator=rng).tolist()
    out = features
    for a, b in zip(order[0::2], order[1::2]):
        region = sample_layout_region(labels[a], labels[b], rng)
        out = swap_regions(out, region, a, b)
    return out


class FeatureAugmenter:
    """Discriminator hook applying content and layout FA with probability ``p``."""

    def __init__(self, probability: float, rng: torch.Generator):
        self.probability = probability
        self.rng = rng

    def __call__(self, features, fmask, content):
        do_content, do_layout = (torch.rand(2, generator=self.rng) < self.probability).tolist()
        vectors = content.vectors
        if do_content:
            vectors = content_fa(vectors, content.present, self.rng)
        if do_layout:
            labels = fmask.detach().argmax(dim=1)
            features = layout_fa(features, labels, self.rng)
        return features, vectors
