"""Image-mask alignment score: train a small UNet on generated pairs, test on the real one."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..augment import affine_matrix, warp_images, warp_mask
from ..data import ImageMaskPair, to_one_hot

UNET_WIDTH = 16
UNET_LR = 1e-3
UNET_BATCH = 4
UNET_DEPTH = 4

# geometric test views of the reference: (flip, angle_deg, zoom)
REFERENCE_VIEWS = (
    (False, 0.0, 1.0),
    (True, 0.0, 1.0),
    (False, 0.0, 1.25),
    (False, 0.0, 0.8),
    (False, 15.0, 1.0),
    (False, -15.0, 1.0),
)


class SegmenterDiverged(RuntimeError):
    def __init__(self, last_loss: float):
        super().__init__(f"segmenter loss became non-finite (last finite loss {last_loss:.6g})")
        self.last_loss = last_loss


@dataclass
class AlignmentScore:
    miou: float
    per_class_iou: list[float]  # NaN where a class never appears in prediction or reference


def _double_conv(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    def __init__(self, num_classes: int, width: int = UNET_WIDTH, depth: int = UNET_DEPTH):
        super().__init__()
        chans = [width * 2 ** k for k in range(depth + 1)]
        self.inc = _double_conv(3, chans[0])
        self.downs = nn.ModuleList(_double_conv(chans[k], chans[k + 1]) for k in range(depth))
        self.ups = nn.ModuleList(nn.ConvTranspose2d(chans[k + 1], chans[k], 2, stride=2) for k in reversed(range(depth)))
        self.dec = nn.ModuleList(_double_conv(2 * chans[k], chans[k]) for k in reversed(range(depth)))
        self.out = nn.Conv2d(chans[0], num_classes, 1)
        self.depth = depth

    def forward(self, x):
        h, w = x.shape[-2:]
        m = 2 ** self.depth
        ph, pw = (-h) % m, (-w) % m
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        skips = [self.inc(x)]
        for down in self.downs:
            skips.append(down(F.max_pool2d(skips[-1], 2)))
        y = skips.pop()
        for up, dec in zip(self.ups, self.dec):
            y = dec(torch.cat([up(y), skips.pop()], 1))
        return self.out(y)[..., :h, :w]


def reference_views(reference: ImageMaskPair) -> tuple[torch.Tensor, torch.Tensor]:
    """Real pair under the pinned flip / zoom / rotation set; returns images and label maps."""
    n = len(REFERENCE_VIEWS)
    full = reference.size
    images = reference.image[None].expand(n, -1, -1, -1).contiguous()
    masks = to_one_hot(reference.mask, reference.num_classes)[None].expand(n, -1, -1, -1).contiguous()
    matrix = torch.cat([affine_matrix(f, math.radians(a), z) for f, a, z in REFERENCE_VIEWS])
    active = torch.tensor([bool(f) or a != 0 or z != 1 for f, a, z in REFERENCE_VIEWS])
    images = warp_images(images, matrix, active, full)
    masks = warp_mask(masks, matrix, active, full)
    return images, masks.argmax(1)


def iou_counts(pred: torch.Tensor, target: torch.Tensor, num_classes: int) -> tuple[torch.Tensor, torch.Tensor]:
    inter = torch.zeros(num_classes, dtype=torch.float64)
    union = torch.zeros(num_classes, dtype=torch.float64)
    for c in range(num_classes):
        p, t = pred == c, target == c
        inter[c] = (p & t).sum()
        union[c] = (p | t).sum()
    return inter, union


def score_predictions(pred: torch.Tensor, target: torch.Tensor, num_classes: int) -> AlignmentScore:
    """Per-class IoU pooled over all views; mIoU over classes present in ``target``."""
    inter, union = iou_counts(pred, target, num_classes)
    per_class = [float(i / u) if u > 0 else float("nan") for i, u in zip(inter, union)]
    present = [c for c in range(num_classes) if bool((target == c).any())]
    miou = sum(per_class[c] for c in present) / len(present)
    return AlignmentScore(miou, per_class)


def train_segmenter(pairs: list[ImageMaskPair], num_classes: int, epochs: int, seed: int) -> UNet:
    images = torch.stack([p.image for p in pairs])
    masks = torch.stack([p.mask for p in pairs])
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = UNet(num_classes)
    opt = torch.optim.Adam(net.parameters(), lr=UNET_LR)
    gen = torch.Generator().manual_seed(seed)
    last = float("nan")
    net.train()
    for _ in range(epochs):
        order = torch.randperm(len(images), generator=gen)
        for start in range(0, len(order), UNET_BATCH):
            idx = order[start:start + UNET_BATCH]
            x, y = images[idx], masks[idx]
            flip = torch.rand(len(idx), generator=gen) < 0.5
            x = torch.where(flip[:, None, None, None], x.flip(-1), x)
            y = torch.where(flip[:, None, None], y.flip(-1), y)
            loss = F.cross_entropy(net(x), y)
            if not math.isfinite(loss.item()):
                raise SegmenterDiverged(last)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            last = loss.item()
    return net.eval()


def alignment_miou(generated: list[ImageMaskPair], reference: ImageMaskPair, epochs: int = 500,
                   seed: int = 0) -> AlignmentScore:
    """Train a UNet from scratch on ``generated`` and score it on augmented views of ``reference``."""
    if not generated:
        raise ValueError("need at least one generated pair")
    n = reference.num_classes
    for p in generated:
        if p.num_classes != n:
            raise ValueError(f"class count mismatch: generated N={p.num_classes}, reference N={n}")
        if p.size != reference.size:
            raise ValueError(f"size mismatch: generated {p.size}, reference {reference.size}")
    net = train_segmenter(generated, n, epochs, seed)
    images, targets = reference_views(reference)
    with torch.no_grad():
        pred = net(images).argmax(1)
    return score_predictions(pred, targets, n)
