"""Command-line entry point: ``pairsynth <command> [options]``.

Commands:
    train        fit a generator/discriminator pair to one image-mask pair
    generate     sample a pool from a checkpoint, plus grid and overlay figures
    evaluate     SIFID / LPIPS / alignment mIoU of a sample directory
    filter-pool  rank a pool by multi-layer SIFID and drop the worst fraction
    export-aug   write the kept samples and the real pair as an augmentation set
    report       compare evaluated runs as text, TSV and figures
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__
from .data import (CONFIG_KEYS, DataError, RunConfig, file_sha256, format_config, image_to_tensor,
                   load_checkpoint, load_config, load_pair, nearest_compatible_resolution, parse_config_value,
                   read_mask)
from .evalkit.extractor import RESIZE_METHOD, WEIGHTS_ENV

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
SIFID_COLUMNS = ("sifid_1", "sifid_2", "sifid_3", "sifid_4")
SAMPLE_COLUMNS = ("sample_id", *SIFID_COLUMNS, "lpips", "miou")
SUMMARY_METRICS = (*SIFID_COLUMNS, "lpips", "miou")


class CommandError(Exception):
    """A failure reported to the user as one line."""


# ------------------------------------------------------------------------ helpers


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def _add_common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--out", type=Path, required=out_required, help="output directory")
    p.add_argument("--dry-run", action="store_true", help="print the plan and write nothing")
    group = p.add_argument_group("config overrides")
    for key in CONFIG_KEYS:
        group.add_argument(_flag(key), dest=f"cfg_{key}", metavar=key.upper(), default=None)


def _config(args) -> RunConfig:
    overrides = {}
    for key in CONFIG_KEYS:
        text = getattr(args, f"cfg_{key}", None)
        if text is not None:
            overrides[key] = parse_config_value(key, text)
    return load_config(args.config, overrides)


def _explicit(args, key: str) -> bool:
    return getattr(args, f"cfg_{key}", None) is not None


def _read_image(path: Path) -> torch.Tensor:
    try:
        with Image.open(path) as im:
            return image_to_tensor(np.asarray(im.convert("RGB")))
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def _sample_files(directory: Path) -> list[Path]:
    root = directory / "images" if (directory / "images").is_dir() else directory
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not files:
        raise DataError(f"no images found in {root}")
    return files


def _sample_id(path: Path) -> str:
    return path.stem


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6g}"
    return str(v)


def _write_tsv(path: Path, header, rows) -> None:
    lines = ["\t".join(header)] + ["\t".join(_fmt(r[k]) for k in header) for r in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_tsv(path: Path) -> list[dict[str, str]]:
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    header = lines[0].split("\t")
    return [dict(zip(header, ln.split("\t"))) for ln in lines[1:]]


def _plan(title: str, items: dict) -> None:
    print(f"plan: {title}")
    for k, v in items.items():
        print(f"  {k}: {v}")


def _ensure_out(out: Path) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CommandError(f"cannot create {out}: {exc.strerror or exc}") from exc


# ----------------------------------------------------------------------- commands


def cmd_train(args) -> int:
    from .plotting import plot_losses
    from .training import train

    config = _config(args)
    pair = load_pair(args.image, args.mask)
    if not _explicit(args, "resolution") and (args.config is None or "resolution" not in
                                              Path(args.config).read_text(encoding="utf-8")):
        config = config.replace(resolution=pair.size)
    if tuple(pair.size) != tuple(config.resolution):
        hint = nearest_compatible_resolution(*pair.size, config.upsampling_stages)
        raise DataError(f"pair size {pair.size[0]}x{pair.size[1]} does not match resolution "
                        f"{config.resolution[0]}x{config.resolution[1]} (nearest compatible {hint[0]}x{hint[1]})")
    if args.dry_run:
        _plan("train", {"pair": f"{args.image} + {args.mask} (N={pair.num_classes})",
                        "epochs": config.total_epochs, "p0": config.p0_epochs,
                        "checkpoints": f"{args.out}/checkpoints every {config.checkpoint_every}",
                        "log": f"{args.out}/losses.tsv"})
        print(format_config(config), end="")
        return EXIT_OK
    _ensure_out(args.out)
    (args.out / "config.cfg").write_text(format_config(config), encoding="utf-8")
    result = train(pair, config, args.out)
    plot_losses(result.reports, args.out / "losses.png")
    print(f"trained {config.total_epochs} epochs; {len(result.checkpoints)} checkpoints in {args.out / 'checkpoints'}")
    return EXIT_OK


def cmd_generate(args) -> int:
    from .plotting import overlay_grid, sample_grid
    from .pool import build_pool, load_generator, save_pool

    payload = load_checkpoint(args.checkpoint)
    n = args.n if args.n is not None else _config(args).pool_size
    seed = _config(args).seed
    if n <= 0:
        raise DataError("number of samples must be positive")
    if args.dry_run:
        _plan("generate", {"checkpoint": args.checkpoint, "samples": n, "seed": seed,
                           "pool": f"{args.out}/images, {args.out}/masks",
                           "figures": f"{args.out}/samples.png, {args.out}/overlays.png"})
        return EXIT_OK
    generator = load_generator(payload)
    pairs = build_pool(generator, n, seed)
    _ensure_out(args.out)
    save_pool(pairs, args.out, file_sha256(args.checkpoint))
    shown = pairs[: args.grid]
    images = torch.stack([p.image for p in shown])
    masks = torch.stack([p.mask for p in shown])
    Image.fromarray(sample_grid(images)).save(args.out / "samples.png")
    Image.fromarray(overlay_grid(images, masks)).save(args.out / "overlays.png")
    print(f"wrote {n} samples to {args.out}")
    return EXIT_OK


def evaluate_directory(samples: Path, real_image: Path, real_mask: Path | None, miou_epochs: int,
                       seed: int = 0) -> tuple[list[dict], dict]:
    """Per-sample SIFID at 4 taps, perceptual distance to the rest of the set, and segmenter IoU."""
    from .data import ImageMaskPair
    from .evalkit.perceptual import lpips_diversity, mean_distance_to_others
    from .evalkit.segmenter import alignment_miou, score_predictions, train_segmenter
    from .evalkit.sifid import SifidScorer

    files = _sample_files(samples)
    real = _read_image(real_image)
    images = torch.stack([_read_image(f) for f in files])
    if images.shape[-2:] != real.shape[-2:]:
        raise DataError(f"sample size {tuple(images.shape[-2:])} differs from real image {tuple(real.shape[-2:])}")
    ids = [_sample_id(f) for f in files]
    reports = SifidScorer(real).score(images, ids)
    per_lpips = mean_distance_to_others(images) if len(files) > 1 else [float("nan")]
    diversity = lpips_diversity(images, seed=seed).value if len(files) > 1 else float("nan")

    mask_dir = samples / "masks"
    per_miou = [float("nan")] * len(files)
    set_miou = float("nan")
    if real_mask is not None and mask_dir.is_dir():
        ref_mask = torch.from_numpy(read_mask(real_mask))
        n = int(ref_mask.max()) + 1
        masks = [torch.from_numpy(read_mask(mask_dir / f.name)) for f in files]
        n = max(n, *(int(m.max()) + 1 for m in masks))
        pairs = [ImageMaskPair(im, m, n) for im, m in zip(images, masks)]
        reference = ImageMaskPair(real, ref_mask, n)
        set_miou = alignment_miou(pairs, reference, epochs=miou_epochs, seed=seed).miou
        net = train_segmenter(pairs, n, miou_epochs, seed)
        with torch.no_grad():
            preds = net(images).argmax(1)
        per_miou = [score_predictions(p, m, n).miou for p, m in zip(preds, masks)]
    rows = [dict(sample_id=sid, **dict(zip(SIFID_COLUMNS, r.per_layer)), lpips=lp, miou=mi)
            for sid, r, lp, mi in zip(ids, reports, per_lpips, per_miou)]
    summary = {c: float(np.mean([r[c] for r in rows])) for c in SIFID_COLUMNS}
    summary.update(lpips=diversity, miou=set_miou, samples=len(rows))
    return rows, summary


def cmd_evaluate(args) -> int:
    if args.dry_run:
        _plan("evaluate", {"samples": args.samples, "real": args.real_image, "mask": args.real_mask,
                           "extractor resize": RESIZE_METHOD, "weights env": WEIGHTS_ENV,
                           "outputs": f"{args.out}/samples.tsv, {args.out}/summary.tsv, {args.out}/summary.txt"})
        return EXIT_OK
    rows, summary = evaluate_directory(args.samples, args.real_image, args.real_mask, args.miou_epochs,
                                       _config(args).seed)
    _ensure_out(args.out)
    _write_tsv(args.out / "samples.tsv", SAMPLE_COLUMNS, rows)
    _write_tsv(args.out / "summary.tsv", ("metric", "value"),
               [{"metric": k, "value": v} for k, v in summary.items()])
    text = [f"samples: {summary['samples']}", f"resize: {RESIZE_METHOD}"]
    text += [f"{k}: {_fmt(summary[k])}" for k in SUMMARY_METRICS]
    (args.out / "summary.txt").write_text("\n".join(text) + "\n", encoding="utf-8")
    print("\n".join(text))
    return EXIT_OK


def cmd_filter_pool(args) -> int:
    from .pool import filter_pool, load_pool

    eta = args.eta if args.eta is not None else _config(args).filter_fraction
    if not 0 <= eta < 1:
        raise DataError("eta must satisfy 0 <= eta < 1")
    out = args.out if args.out is not None else args.pool
    if args.dry_run:
        _plan("filter-pool", {"pool": args.pool, "real": args.real, "eta": eta, "ranking": out / "ranking.tsv"})
        return EXIT_OK
    pool = load_pool(args.pool)
    ranking = filter_pool(pool, _read_image(args.real), eta)
    _ensure_out(out)
    (out / "ranking.tsv").write_text(ranking.to_tsv(), encoding="utf-8")
    print(f"kept {len(ranking.kept_ids)} of {len(ranking.entries)} (eta={eta}); ranking in {out / 'ranking.tsv'}")
    return EXIT_OK


def cmd_export_aug(args) -> int:
    from .pool import PoolRanking, export_augmentation, load_pool, read_pool_source

    ranking_path = args.ranking if args.ranking is not None else args.pool / "ranking.tsv"
    ranking = PoolRanking.from_tsv(ranking_path.read_text(encoding="utf-8"))
    if args.dry_run:
        _plan("export-aug", {"kept": len(ranking.kept_ids), "out": args.out, "overwrite": args.overwrite})
        return EXIT_OK
    real = load_pair(args.real_image, args.real_mask)
    pool = load_pool(args.pool)
    missing = [sid for sid in ranking.kept_ids if sid not in pool]
    if missing:
        raise DataError(f"ranking refers to samples missing from the pool: {missing[:5]}")
    sha = read_pool_source(args.pool).get("checkpoint_sha256", "")
    rows = export_augmentation(ranking, pool, real, args.out, sha, overwrite=args.overwrite)
    print(f"exported {len(rows)} pairs (real pair as id 0) to {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .plotting import plot_losses, plot_metric_bars
    from .training import read_loss_log

    runs = {}
    for run in args.runs:
        summary = run / "summary.tsv"
        if not summary.exists():
            raise DataError(f"{run} has no summary.tsv; run evaluate first")
        runs[run.name] = {r["metric"]: float(r["value"]) for r in _read_tsv(summary)}
    if args.dry_run:
        _plan("report", {"runs": ", ".join(runs), "outputs": f"{args.out}/report.txt, report.tsv, metrics.png"})
        return EXIT_OK
    _ensure_out(args.out)
    width = max(len(n) for n in runs) + 2
    lines = ["run".ljust(width) + "".join(m.rjust(12) for m in SUMMARY_METRICS)]
    for name, vals in runs.items():
        lines.append(name.ljust(width) + "".join(_fmt(vals.get(m, float("nan"))).rjust(12) for m in SUMMARY_METRICS))
    (args.out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_tsv(args.out / "report.tsv", ("run", *SUMMARY_METRICS),
               [{"run": n, **{m: v.get(m, float("nan")) for m in SUMMARY_METRICS}} for n, v in runs.items()])
    plot_metric_bars(runs, list(SUMMARY_METRICS), args.out / "metrics.png")
    for run in args.runs:
        log = run / "losses.tsv"
        if log.exists():
            plot_losses(read_loss_log(log), args.out / f"losses_{run.name}.png")
    print("\n".join(lines))
    return EXIT_OK


# ------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pairsynth", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on one image-mask pair")
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--mask", type=Path, required=True)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample pairs from a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--n", type=int, default=None, help="number of samples (default: pool_size)")
    p.add_argument("--grid", type=int, default=16, help="samples shown in the figures")
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score a directory of samples against the real pair")
    p.add_argument("--samples", type=Path, required=True)
    p.add_argument("--real-image", type=Path, required=True)
    p.add_argument("--real-mask", type=Path, default=None)
    p.add_argument("--miou-epochs", type=int, default=500)
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("filter-pool", help="rank a pool by SIFID and drop the worst fraction")
    p.add_argument("--pool", type=Path, required=True)
    p.add_argument("--real", type=Path, required=True)
    p.add_argument("--eta", type=float, default=None, help="fraction to drop (default: filter_fraction)")
    _add_common(p, out_required=False)
    p.set_defaults(func=cmd_filter_pool)

    p = sub.add_parser("export-aug", help="export kept samples plus the real pair")
    p.add_argument("--pool", type=Path, required=True)
    p.add_argument("--ranking", type=Path, default=None, help="default: <pool>/ranking.tsv")
    p.add_argument("--real-image", type=Path, required=True)
    p.add_argument("--real-mask", type=Path, required=True)
    p.add_argument("--overwrite", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_export_aug)

    p = sub.add_parser("report", help="compare evaluated runs")
    p.add_argument("runs", type=Path, nargs="+", help="directories holding summary.tsv")
    _add_common(p)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _config(args)  # validate the config subset before any side effect
        return args.func(args)
    except (CommandError, DataError, FileExistsError, FileNotFoundError, ValueError, RuntimeError, OSError) as exc:
        message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"pairsynth {args.command}: error: {message}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
