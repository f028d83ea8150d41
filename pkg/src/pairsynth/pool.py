"""Sample pools from a trained generator, SIFID rank filtering, and export."""

from __future__ import annotations

import math
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data import DataError, ImageMaskPair, image_to_tensor, load_checkpoint, read_mask, save_image, save_mask
from .evalkit.sifid import N_LAYERS, SifidReport, SifidScorer
from .genmodel import Generator, GeneratorPlan, build_generator

GENERATE_BATCH = 8
POOL_SOURCE_FILE = "source.tsv"


def load_generator(checkpoint, ema: bool = True) -> Generator:
    """Rebuild the (EMA) generator stored in a checkpoint path or payload."""
    payload = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, Path)) else checkpoint
    config = payload["config"]
    n = int(payload["meta"]["num_classes"])
    plan = GeneratorPlan.from_config(config, n)
    stored = payload["meta"].get("generator_plan")
    if stored is not None and stored != plan.describe():
        raise DataError("checkpoint generator plan does not match its config")
    g = build_generator(config, n)
    key = "generator_ema" if ema else "generator"
    try:
        g.load_state_dict(payload["arrays"][key])
    except (KeyError, RuntimeError) as exc:
        raise DataError(f"checkpoint does not match the generator plan: {exc}") from exc
    return g.eval()


def build_pool(checkpoint, n: int, seed: int) -> list[ImageMaskPair]:
    """Generate ``n`` pairs from ``n`` seeded latents with the EMA generator in hard mode.

    Sample ``k`` of the returned list gets sample id ``k + 1``; id 0 is reserved
    for the real pair.
    """
    if n <= 0:
        raise ValueError("pool size must be positive")
    g = load_generator(checkpoint) if not isinstance(checkpoint, Generator) else checkpoint.eval()
    rng = torch.Generator().manual_seed(seed)
    z = torch.randn(n, g.plan.latent_dim, generator=rng)
    pairs = []
    with torch.no_grad():
        for start in range(0, n, GENERATE_BATCH):
            out = g(z[start:start + GENERATE_BATCH], "hard")
            labels = out.hard_mask.argmax(1)
            for img, lab in zip(out.images[0], labels):
                pairs.append(ImageMaskPair(img.clone(), lab.clone(), g.plan.num_classes))
    return pairs


def id_width(max_id: int) -> int:
    return max(4, len(str(max_id)))


def save_pool(pairs: list[ImageMaskPair], out_dir: str | Path, checkpoint_sha256: str = "") -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    width = id_width(len(pairs))
    for k, pair in enumerate(pairs, 1):
        save_image(pair.image, out / "images" / f"{k:0{width}d}.png")
        save_mask(pair.mask, out / "masks" / f"{k:0{width}d}.png")
    n = pairs[0].num_classes if pairs else 0
    (out / POOL_SOURCE_FILE).write_text(
        f"checkpoint_sha256\t{checkpoint_sha256}\nnum_classes\t{n}\nsize\t{len(pairs)}\n", encoding="utf-8"
    )
    return out


def read_pool_source(pool_dir: str | Path) -> dict[str, str]:
    path = Path(pool_dir) / POOL_SOURCE_FILE
    if not path.exists():
        return {}
    return dict(line.split("\t", 1) for line in path.read_text(encoding="utf-8").splitlines() if "\t" in line)


def load_pool(pool_dir: str | Path) -> dict[int, ImageMaskPair]:
    """Read a pool directory back as ``{sample_id: pair}``."""
    pool_dir = Path(pool_dir)
    source = read_pool_source(pool_dir)
    n_classes = int(source["num_classes"]) if "num_classes" in source else None
    pairs = {}
    for img_path in sorted((pool_dir / "images").glob("*.png")):
        mask_path = pool_dir / "masks" / img_path.name
        sid = int(img_path.stem)
        if not mask_path.exists():
            raise DataError(f"pool sample {img_path.name} has no mask")
        with Image.open(img_path) as im:
            image = image_to_tensor(np.asarray(im.convert("RGB")))
        mask = torch.from_numpy(read_mask(mask_path))
        pairs[sid] = ImageMaskPair(image, mask, n_classes if n_classes else max(int(mask.max()) + 1, 2))
    if not pairs:
        raise DataError(f"no samples found in {pool_dir}")
    return pairs


@dataclass
class RankEntry:
    sample_id: int
    sifid: SifidReport
    ranks: tuple[int, ...]
    avg_rank: float
    kept: bool


@dataclass
class PoolRanking:
    entries: list[RankEntry]
    eta: float

    @property
    def kept_ids(self) -> list[int]:
        return [e.sample_id for e in self.entries if e.kept]

    @property
    def dropped_ids(self) -> list[int]:
        return [e.sample_id for e in self.entries if not e.kept]

    HEADER = ("sample_id", "sifid_1", "sifid_2", "sifid_3", "sifid_4",
              "rank_1", "rank_2", "rank_3", "rank_4", "avg_rank", "kept")

    def to_tsv(self) -> str:
        lines = ["\t".join(self.HEADER)]
        for e in self.entries:
            row = [str(e.sample_id), *(repr(v) for v in e.sifid.per_layer), *(str(r) for r in e.ranks),
                   repr(e.avg_rank), "1" if e.kept else "0"]
            lines.append("\t".join(row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_tsv(cls, text: str, eta: float = float("nan")) -> "PoolRanking":
        entries = []
        for line in text.splitlines()[1:]:
            if not line.strip():
                continue
            p = line.split("\t")
            sifids = tuple(float(v) for v in p[1:5])
            entries.append(RankEntry(int(p[0]), SifidReport(sifids, (False,) * 4, p[0]),
                                     tuple(int(v) for v in p[5:9]), float(p[9]), p[10] == "1"))
        return cls(entries, eta)


def drop_count(n: int, eta: float) -> int:
    """ceil(eta * n), robust to binary rounding such as 0.15 * 100."""
    if not 0 <= eta < 1:
        raise ValueError("eta must satisfy 0 <= eta < 1")
    return math.ceil(round(eta * n, 9))


def rank_reports(reports: dict[int, SifidReport], eta: float) -> PoolRanking:
    """Rank by each SIFID layer (ascending, sample-id ties), average ranks, drop the worst."""
    ids = sorted(reports)
    if not ids:
        raise ValueError("empty pool")
    ranks = {sid: [0] * N_LAYERS for sid in ids}
    for layer in range(N_LAYERS):
        order = sorted(ids, key=lambda sid: (reports[sid].per_layer[layer], sid))
        for r, sid in enumerate(order, 1):
            ranks[sid][layer] = r
    avg = {sid: sum(ranks[sid]) / N_LAYERS for sid in ids}
    order = sorted(ids, key=lambda sid: (avg[sid], sid))
    keep = set(order[: len(ids) - drop_count(len(ids), eta)])
    entries = [RankEntry(sid, reports[sid], tuple(ranks[sid]), avg[sid], sid in keep) for sid in order]
    return PoolRanking(entries, eta)


def filter_pool(pool, real: torch.Tensor, eta: float, scorer: SifidScorer | None = None) -> PoolRanking:
    """Score every pool image against ``real`` at all 4 taps and drop ``ceil(eta*n)`` samples.

    Args:
        pool: ``{sample_id: ImageMaskPair or image tensor}`` or a list (ids 1..n).
        real: (3, H, W) real image in [-1, 1].
        eta: fraction to drop, ``0 <= eta < 1``.
    """
    if isinstance(pool, dict):
        items = sorted(pool.items())
    else:
        items = list(enumerate(pool, 1))
    if not items:
        raise ValueError("empty pool")
    scorer = scorer or SifidScorer(real)
    images = torch.stack([p.image if isinstance(p, ImageMaskPair) else p for _, p in items])
    ids = [sid for sid, _ in items]
    reports = scorer.score(images, [str(sid) for sid in ids])
    return rank_reports(dict(zip(ids, reports)), eta)


def export_augmentation(ranking: PoolRanking, pool: dict[int, ImageMaskPair], real: ImageMaskPair,
                        out_dir: str | Path, checkpoint_sha256: str = "", overwrite: bool = False) -> list[dict]:
    """Write the real pair (id 0) and every kept sample plus ``manifest.tsv``."""
    kept = [e for e in ranking.entries if e.kept]
    if not kept:
        raise ValueError("ranking keeps no samples")
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise FileExistsError(f"{out} is not empty; pass overwrite to replace it")
        for sub in ("images", "masks"):
            shutil.rmtree(out / sub, ignore_errors=True)
        (out / "manifest.tsv").unlink(missing_ok=True)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    width = id_width(max(e.sample_id for e in kept))
    rows = [{"id": 0, "source": "real", "avg_rank": "", "checkpoint_sha256": checkpoint_sha256}]
    rows += [{"id": e.sample_id, "source": "synthetic", "avg_rank": repr(e.avg_rank),
              "checkpoint_sha256": checkpoint_sha256} for e in kept]
    for row in rows:
        pair = real if row["id"] == 0 else pool[row["id"]]
        name = f"{row['id']:0{width}d}.png"
        save_image(pair.image, out / "images" / name)
        save_mask(pair.mask, out / "masks" / name)
    header = ("id", "source", "avg_rank", "checkpoint_sha256")
    lines = ["\t".join(header)] + [
        "\t".join(f"{r['id']:0{width}d}" if k == "id" else str(r[k]) for k in header) for r in rows
    ]
    (out / "manifest.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return rows
