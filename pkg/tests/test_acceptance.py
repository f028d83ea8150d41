"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criterion 6 trains the reduced disc-scene configuration for 3000 epochs per
seed. On a single CPU core that is about half an hour per seed; seeds stop
being run once the 4-of-5 verdict is settled.
"""

import math
import time

import numpy as np
import pytest
import torch

from pairsynth.data import RunConfig, to_one_hot
from pairsynth.discmodel import Discriminator, DiscriminatorPlan, balancing_weights, mca
from pairsynth.evalkit import SifidScorer, alignment_miou, frechet_distance, lpips_diversity, sifid
from pairsynth.genmodel import Generator, GeneratorPlan, build_generator
from pairsynth.pool import build_pool, filter_pool, rank_reports, save_pool
from pairsynth.scenes import colour_threshold_mask, desk_config, disc_scene, pooled_iou
from pairsynth.training import TrainingDiverged, combine, d_object_loss, g_object_loss, train

from oracles import mca_pixel_loop, record, straight_through_fd_check, trace_shapes


def test_criterion_1_straight_through_gradient():
    start = time.perf_counter()
    gen = torch.Generator().manual_seed(1)
    worst = 0.0
    for k in range(100):
        n = 2 + k % 4
        logits = torch.randn(1, n, 3, 4, generator=gen, dtype=torch.float64) * 2
        y = torch.softmax(logits, 1)
        w = torch.randn(1, n, 3, 4, generator=gen, dtype=torch.float64)
        mode = "hard" if k % 2 == 0 else "bernoulli"
        worst = max(worst, straight_through_fd_check(y, w, mode))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-4 and elapsed < 10
    record(1, ok, f"max |autograd - FD| = {worst:.2e} (tol 1e-4), {elapsed:.1f}s")
    assert worst <= 1e-4
    assert elapsed < 10


def test_criterion_2_mca_oracle():
    start = time.perf_counter()
    gen = torch.Generator().manual_seed(2)
    worst = 0.0
    exact = True
    for k in range(50):
        b, n, c = 1 + k % 3, 2 + k % 5, 8
        h, w = 3 + k % 6, 4 + k % 7
        feats = torch.randn(b, c, h, w, generator=gen, dtype=torch.float64)
        labels = torch.randint(0, n, (b, h, w), generator=gen)
        got = mca(feats, labels, n)
        ref_v, ref_p = mca_pixel_loop(feats, labels, n)
        assert np.array_equal(got.present.numpy(), ref_p)
        worst = max(worst, float(np.abs(got.vectors.numpy() - ref_v).max()))
        perm = torch.randperm(n, generator=gen)
        permuted = mca(feats, perm[labels], n)
        exact &= torch.equal(permuted.vectors[:, perm], got.vectors)
        exact &= torch.equal(permuted.present[:, perm], got.present)
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-6 and exact and elapsed < 10
    record(2, ok, f"max |mca - pixel loop| = {worst:.1e} (tol 1e-6), permutation exact={exact}, {elapsed:.1f}s")
    assert ok


def test_criterion_3_balancing_weights():
    m = torch.zeros(8, 8, dtype=torch.long)
    m[:2] = 1
    a = balancing_weights(m, 2)
    m3 = torch.zeros(8, 8, dtype=torch.long)
    m3[4:, :4] = 1
    m3[4:, 4:] = 2
    b = balancing_weights(m3, 3)
    gen = torch.Generator().manual_seed(3)
    sums = [float(balancing_weights(torch.randint(0, 4, (1, 9, 9), generator=gen), 4).sum()) for _ in range(20)]
    err_a = max(abs(x - y) for x, y in zip(a.tolist(), (0.25, 0.75)))
    err_b = max(abs(x - y) for x, y in zip(b.tolist(), (0.2, 0.4, 0.4)))
    sum_exact = float(a.sum()) == 1.0 and float(b.sum()) == 1.0
    sum_err = max(abs(s - 1) for s in sums)
    ok = err_a <= 1e-9 and err_b <= 1e-9 and sum_exact and sum_err <= 1e-15
    record(3, ok, f"75/25 -> {a.tolist()}, 1/2,1/4,1/4 -> {b.tolist()}, max |sum-1| = {sum_err:.1e}")
    assert ok


def test_criterion_4_loss_closed_forms():
    results = []
    for n in (2, 3, 5):
        b = 2
        logits = torch.zeros(b, n, n + 1)
        present = torch.ones(b, n)
        g = g_object_loss(logits, present).item() / n
        alpha = torch.full((b, n), 1 / n, dtype=torch.float64)
        d_real = d_object_loss(logits, present, alpha, logits, torch.zeros(b, n)).item()
        d_fake = (d_object_loss(logits, present, alpha, logits, present).item() - d_real) / n
        results += [abs(v - math.log(n + 1)) for v in (g, d_real, d_fake)]
    gen = torch.Generator().manual_seed(4)
    parts = torch.rand(20, 3, generator=gen)
    exact = all(torch.equal(combine(o, la, lo), o + la + 2 * lo) for o, la, lo in parts)
    worst = max(results)
    ok = worst <= 1e-6 and exact
    record(4, ok, f"max |per-vector loss - log(N+1)| = {worst:.1e}, d_total weighting exact={exact}")
    assert ok


def test_criterion_5_shape_plan():
    cfg = RunConfig()
    n = 3
    g = Generator(GeneratorPlan.from_config(cfg, n)).eval()
    names = [f"blocks.{k}" for k in range(8)]
    z = torch.randn(1, 64)
    with torch.no_grad():
        shapes = trace_shapes(g, ["stem", *names], lambda: g(z))
        out = g(torch.randn(1, 64))
    expected_g = [(256, 3, 5), (256, 3, 5), (256, 6, 10), (256, 12, 20), (256, 24, 40), (256, 48, 80),
                  (256, 96, 160), (128, 192, 320), (64, 384, 640)]
    got_g = [shapes["stem"]] + [shapes[k] for k in names]
    images = [tuple(x.shape[1:]) for x in out.images]
    d = Discriminator(DiscriminatorPlan.from_config(cfg, n)).eval()
    mask = to_one_hot(torch.zeros(1, 384, 640, dtype=torch.long), n)
    with torch.no_grad():
        dout = d(out.images, mask)
        feats, _ = d.lowlevel_features(out.images)
    layout = [tuple(m.shape[1:]) for m in dout.layout]
    ok_g = got_g == expected_g and images == [(3, 384, 640), (3, 192, 320), (3, 96, 160), (3, 48, 80)]
    ok_d = tuple(feats.shape[1:]) == (256, 24, 40) and layout == [(1, 24, 40), (1, 12, 20), (1, 6, 10),
                                                                   (1, 3, 5), (1, 3, 5)]
    ok_o = tuple(dout.object_logits.shape) == (1, n, n + 1)
    knob = [DiscriminatorPlan.from_config(RunConfig(n_lowlevel_blocks=k), n).feature_shape[1:] for k in range(1, 6)]
    ok_k = knob == [(384 >> k, 640 >> k) for k in range(1, 6)]
    ok = ok_g and ok_d and ok_o and ok_k
    record(5, ok, f"G {got_g[0]}->{got_g[-1]}, F {tuple(feats.shape[1:])}, layout down to {layout[-1]}, "
                  f"F sizes for N_low 1..5 {knob}")
    assert ok


def _desk_eval(generator, latents, scorer):
    with torch.no_grad():
        out = generator(latents, "hard")
    images = out.images[0]
    s1 = float(np.mean([r.per_layer[0] for r in scorer.score(images)]))
    iou = pooled_iou(out.hard_mask.argmax(1), colour_threshold_mask(images))
    return s1, iou


@pytest.mark.slow
def test_criterion_6_desk_overfit(tmp_path):
    pair = disc_scene(96, 160)
    scorer = SifidScorer(pair.image)
    latents = torch.randn(8, 64, generator=torch.Generator().manual_seed(1234))
    passes, fails, lines = 0, 0, []
    for seed in range(5):
        if passes >= 4 or fails >= 2:
            break
        cfg = desk_config(seed)
        base, _ = _desk_eval(build_generator(cfg, pair.num_classes), latents, scorer)
        start = time.perf_counter()
        try:
            result = train(pair, cfg, tmp_path / f"seed{seed}")
            finite = True
        except TrainingDiverged as exc:  # divergence counts as a failed seed
            finite, result = False, None
            lines.append(f"seed {seed}: {exc}")
        if finite:
            s1, iou = _desk_eval(result.trainer.ema.shadow, latents, scorer)
            drop = 1 - s1 / base
            ok = drop >= 0.5 and iou >= 0.8
            lines.append(f"seed {seed}: SIFID-1 {base:.3f}->{s1:.3f} (drop {drop:.0%}), IoU {iou:.3f}, "
                         f"{time.perf_counter() - start:.0f}s {'ok' if ok else 'fail'}")
        else:
            ok = False
        passes += ok
        fails += not ok
        print(lines[-1], flush=True)
    verdict = passes >= 4
    record(6, verdict, f"{passes} seeds passed, {fails} failed; " + "; ".join(lines))
    assert verdict


def test_criterion_7_filtering(tmp_path):
    pair = disc_scene(96, 160)
    scorer = SifidScorer(pair.image)
    g = build_generator(desk_config(0), pair.num_classes)
    pool = build_pool(g, 100, seed=0)
    ranking = filter_pool(pool, pair.image, 0.15, scorer)
    kept = len(ranking.kept_ids)

    reports = {e.sample_id: e.sifid for e in ranking.entries}
    sweep = [0.05, 0.10, 0.15, 0.25, 0.50]
    kept_sets = [set(rank_reports(reports, eta).kept_ids) for eta in sweep]
    counts = [len(s) for s in kept_sets]
    monotone = all(b <= a for a, b in zip(kept_sets, kept_sets[1:]))

    dropped = 0
    for seed in range(5):
        gen = torch.Generator().manual_seed(seed)
        n = 10
        noise_id = int(torch.randint(1, n + 1, (1,), generator=gen))
        noise = torch.rand(3, 96, 160, generator=gen) * 2 - 1
        images = {k: (noise if k == noise_id else pair.image) for k in range(1, n + 1)}
        result = filter_pool(images, pair.image, 1 / n, scorer)
        dropped += result.dropped_ids == [noise_id]
    ok = kept == 85 and counts == [95, 90, 85, 75, 50] and monotone and dropped == 5
    record(7, ok, f"n=100 eta=0.15 kept {kept}; sweep kept {counts} monotone={monotone}; "
                  f"noise dropped on {dropped}/5 seeds")
    assert ok


def test_criterion_8_metric_sanity():
    pair = disc_scene(96, 160)
    x = pair.image
    report = SifidScorer(x).score(x)[0]
    s_max = max(abs(v) for v in report.per_layer)
    div = lpips_diversity(torch.stack([x] * 5)).value
    # closed form for commuting covariances: ||mu1-mu2||^2 + sum (sqrt a - sqrt b)^2
    rng = np.random.default_rng(8)
    errs = []
    for d in (4, 16, 64):
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        a, b = rng.uniform(0.1, 3, d), rng.uniform(0.1, 3, d)
        mu1, mu2 = rng.standard_normal(d), rng.standard_normal(d)
        s1, s2 = q @ np.diag(a) @ q.T, q @ np.diag(b) @ q.T
        expected = float(((mu1 - mu2) ** 2).sum() + ((np.sqrt(a) - np.sqrt(b)) ** 2).sum())
        errs.append(abs(frechet_distance(mu1, s1, mu2, s2) - expected))
    align = alignment_miou([pair], pair, epochs=500, seed=0).miou
    single = sifid(x, x, layer=1)
    ok = s_max <= 1e-6 and single <= 1e-6 and div <= 1e-6 and max(errs) <= 1e-4 and align >= 0.95
    record(8, ok, f"sifid(x,x) max {s_max:.1e}, lpips identical {div:.1e}, Frechet closed-form err "
                  f"{max(errs):.1e}, alignment mIoU of ground truth {align:.3f}")
    assert ok


def test_criterion_9_determinism(tmp_path):
    pair = disc_scene(96, 160)
    cfg = desk_config(0, total_epochs=100, p0_epochs=50, checkpoint_every=50)
    outputs = []
    for run in ("a", "b"):
        res = train(pair, cfg, tmp_path / run)
        pool = build_pool(res.checkpoints[-1], 6, seed=11)
        save_pool(pool, tmp_path / run / "pool")
        ranking = filter_pool(pool, pair.image, 0.15)
        outputs.append((res, ranking.to_tsv()))
    log_a = (tmp_path / "a" / "losses.tsv").read_bytes()
    log_b = (tmp_path / "b" / "losses.tsv").read_bytes()
    ckpt_same = all((tmp_path / "a" / "checkpoints" / p.name).read_bytes() == p.read_bytes()
                    for p in outputs[1][0].checkpoints)
    files_a = sorted((tmp_path / "a" / "pool").rglob("*.png"))
    pool_same = bool(files_a) and all(
        f.read_bytes() == (tmp_path / "b" / "pool" / f.relative_to(tmp_path / "a" / "pool")).read_bytes()
        for f in files_a)
    rank_same = outputs[0][1] == outputs[1][1]
    ok = log_a == log_b and ckpt_same and pool_same and rank_same
    record(9, ok, f"losses.tsv identical={log_a == log_b}, checkpoints identical={ckpt_same}, "
                  f"pool files identical={pool_same}, rankings identical={rank_same}")
    assert ok
