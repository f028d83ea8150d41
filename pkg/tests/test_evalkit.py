import numpy as np
import pytest
import scipy.linalg
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pairsynth.data import ImageMaskPair
from pairsynth.evalkit import (SifidScorer, alignment_miou, default_extractor, frechet_distance,
                               frechet_from_features, lpips_diversity, perceptual_distance, sifid)
from pairsynth.evalkit.extractor import TAP_NAMES, build_extractor, extract
from pairsynth.evalkit.segmenter import reference_views, score_predictions
from pairsynth.scenes import disc_scene


def _scipy_frechet(mu1, s1, mu2, s2):
    covmean = scipy.linalg.sqrtm(s1 @ s2).real
    d = mu1 - mu2
    return float(d @ d + np.trace(s1 + s2 - 2 * covmean))


def _random_spd(rng, d):
    a = rng.standard_normal((d, d))
    return a @ a.T / d + 0.1 * np.eye(d)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 12), st.integers(0, 10_000))
def test_frechet_matches_scipy(d, seed):
    rng = np.random.default_rng(seed)
    mu1, mu2 = rng.standard_normal(d), rng.standard_normal(d)
    s1, s2 = _random_spd(rng, d), _random_spd(rng, d)
    assert frechet_distance(mu1, s1, mu2, s2) == pytest.approx(_scipy_frechet(mu1, s1, mu2, s2), abs=1e-8)


def test_frechet_diagonal_closed_form():
    mu1, mu2 = np.array([0.0, 1.0, 2.0]), np.array([1.0, 1.0, 0.0])
    a, b = np.array([1.0, 4.0, 9.0]), np.array([4.0, 1.0, 1.0])
    expected = 1 + 0 + 4 + (1 - 2) ** 2 + (2 - 1) ** 2 + (3 - 1) ** 2
    assert frechet_distance(mu1, np.diag(a), mu2, np.diag(b)) == pytest.approx(expected, abs=1e-10)


def test_low_rank_path_matches_dense_regularized():
    rng = np.random.default_rng(0)
    f1, f2 = rng.standard_normal((5, 12)), rng.standard_normal((7, 12)) + 0.3
    eps = 1e-3
    value, regularized = frechet_from_features(f1, f2, eps=eps)
    assert regularized
    eye = np.eye(12)
    dense = _scipy_frechet(f1.mean(0), np.cov(f1, rowvar=False) + eps * eye,
                           f2.mean(0), np.cov(f2, rowvar=False) + eps * eye)
    assert value == pytest.approx(dense, rel=1e-7, abs=1e-9)


def test_frechet_symmetric_nonnegative_zero_at_identity():
    rng = np.random.default_rng(1)
    f1, f2 = rng.standard_normal((40, 6)), rng.standard_normal((50, 6))
    assert frechet_from_features(f1, f2)[0] == frechet_from_features(f2, f1)[0]
    assert frechet_from_features(f1, f1)[0] == pytest.approx(0.0, abs=1e-9)
    few = rng.standard_normal((3, 20))
    assert 0 <= frechet_from_features(few, few)[0] < 1e-9
    with pytest.raises(ValueError):
        frechet_from_features(f1[:1], f2)


def test_extractor_taps_and_determinism():
    e = default_extractor()
    taps = extract(torch.zeros(1, 3, 48, 80), e)
    assert [t.shape[1] for t in taps] == [64, 192, 768, 2048]
    assert len(taps) == len(TAP_NAMES)
    assert build_extractor().info.weights_sha256 == e.info.weights_sha256
    assert "bilinear" in e.info.describe()


def test_sifid_zero_at_identity_all_layers():
    x = disc_scene(48, 80).image
    report = SifidScorer(x).score(x)[0]
    assert all(abs(v) < 1e-6 for v in report.per_layer)
    assert sifid(x, x, layer=2) < 1e-6
    with pytest.raises(ValueError):
        sifid(x, x, layer=5)


def test_sifid_increases_with_noise():
    x = disc_scene(48, 80).image
    scorer = SifidScorer(x)
    for seed in range(5):
        gen = torch.Generator().manual_seed(seed)
        mild = (x + 0.05 * torch.randn(x.shape, generator=gen)).clamp(-1, 1)
        strong = (x + 0.8 * torch.randn(x.shape, generator=gen)).clamp(-1, 1)
        a, b = scorer.score(torch.stack([mild, strong]))
        assert b.per_layer[0] > a.per_layer[0]


def test_lpips_diversity():
    x = disc_scene(48, 80).image
    same = lpips_diversity(torch.stack([x] * 4))
    assert same.value < 1e-6 and same.pairs == 6 and same.exhaustive
    y = disc_scene(48, 80, radius=6).image
    assert perceptual_distance(x, y) > 0
    sub = lpips_diversity(torch.stack([x, y, x, y]), max_pairs=3)
    assert sub.pairs == 3 and not sub.exhaustive
    with pytest.raises(ValueError):
        lpips_diversity(x[None])


def test_reference_views_identity_first():
    pair = disc_scene(48, 80)
    images, labels = reference_views(pair)
    assert images.shape == (6, 3, 48, 80)
    assert torch.equal(images[0], pair.image) and torch.equal(labels[0], pair.mask)
    assert torch.equal(labels[1], pair.mask.flip(-1))


def test_all_background_prediction_scores_zero_for_objects():
    target = torch.zeros(2, 4, 4, dtype=torch.long)
    target[:, :2] = 1
    score = score_predictions(torch.zeros_like(target), target, 2)
    assert score.per_class_iou[1] == 0.0
    assert score.miou == pytest.approx(0.25)


def test_alignment_rejects_mismatch():
    ref = disc_scene(48, 80)
    three = ImageMaskPair(ref.image, ref.mask, 3)
    with pytest.raises(ValueError, match="class count"):
        alignment_miou([three], ref, epochs=1)
    with pytest.raises(ValueError, match="size"):
        alignment_miou([disc_scene(96, 160)], ref, epochs=1)


def test_alignment_deterministic():
    ref = disc_scene(48, 80)
    a = alignment_miou([ref], ref, epochs=3, seed=2)
    b = alignment_miou([ref], ref, epochs=3, seed=2)
    assert a == b
