import pytest
import torch

from pairsynth.data import DataError, load_pair, read_mask
from pairsynth.evalkit.sifid import SifidReport, SifidScorer
from pairsynth.genmodel import build_generator
from pairsynth.pool import (PoolRanking, build_pool, drop_count, export_augmentation, filter_pool, load_pool,
                            rank_reports, save_pool)
from pairsynth.scenes import disc_scene
from pairsynth.training import train


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    from pairsynth.data import RunConfig

    cfg = RunConfig(resolution=(48, 80), channel_scale=0.125, n_lowlevel_blocks=3, p0_epochs=1,
                    total_epochs=2, checkpoint_every=2)
    out = tmp_path_factory.mktemp("run")
    return train(disc_scene(48, 80), cfg, out).checkpoints[-1]


def _reports(values):
    return {sid: SifidReport(tuple(v), (False,) * 4, str(sid)) for sid, v in values.items()}


def test_drop_count_rounding():
    assert drop_count(100, 0.15) == 15
    assert drop_count(100, 0.0) == 0
    assert drop_count(7, 0.15) == 2
    assert drop_count(10, 0.1) == 1
    with pytest.raises(ValueError):
        drop_count(10, 1.0)


def test_rank_reports_example():
    reports = _reports({1: [1, 1, 1, 1], 2: [2, 2, 2, 2], 3: [3, 0, 3, 3], 4: [4, 4, 4, 4]})
    r = rank_reports(reports, 0.25)
    by_id = {e.sample_id: e for e in r.entries}
    assert by_id[3].ranks == (3, 1, 3, 3) and by_id[3].avg_rank == 2.5
    assert by_id[1].ranks == (1, 2, 1, 1)
    assert r.dropped_ids == [4]
    assert len(r.kept_ids) == 3


def test_rank_ties_broken_by_id():
    r = rank_reports(_reports({5: [0.0] * 4, 2: [0.0] * 4, 9: [0.0] * 4}), 0.33)
    assert [e.sample_id for e in r.entries] == [2, 5, 9]
    assert r.dropped_ids == [9]
    for layer in range(4):
        assert sorted(e.ranks[layer] for e in r.entries) == [1, 2, 3]


def test_eta_zero_keeps_all_and_monotone_sweep():
    gen = torch.Generator().manual_seed(0)
    reports = _reports({k: torch.rand(4, generator=gen).tolist() for k in range(1, 41)})
    assert len(rank_reports(reports, 0.0).kept_ids) == 40
    kept = [set(rank_reports(reports, eta).kept_ids) for eta in (0.05, 0.10, 0.15, 0.25, 0.50)]
    for a, b in zip(kept, kept[1:]):
        assert b <= a


def test_ranking_permutation_invariant():
    gen = torch.Generator().manual_seed(1)
    values = {k: torch.rand(4, generator=gen).tolist() for k in range(1, 21)}
    a = rank_reports(_reports(values), 0.15)
    perm = torch.randperm(20, generator=gen).add(1).tolist()
    shuffled = {perm[k - 1]: v for k, v in values.items()}
    b = rank_reports(_reports(shuffled), 0.15)
    kept_a = {tuple(values[k]) for k in a.kept_ids}
    kept_b = {tuple(shuffled[k]) for k in b.kept_ids}
    assert kept_a == kept_b


def test_ranking_tsv_roundtrip():
    r = rank_reports(_reports({1: [0.5, 0.25, 1 / 3, 2.0], 2: [1.0, 1.0, 1.0, 1.0]}), 0.5)
    back = PoolRanking.from_tsv(r.to_tsv())
    assert back.to_tsv() == r.to_tsv()


def test_noise_sample_dropped():
    real = disc_scene(48, 80).image
    scorer = SifidScorer(real)
    noise = torch.rand(real.shape, generator=torch.Generator().manual_seed(0)) * 2 - 1
    pool = {k: real.clone() for k in range(1, 6)}
    pool[3] = noise
    ranking = filter_pool(pool, real, 0.2, scorer)
    assert ranking.dropped_ids == [3]


def test_build_pool(checkpoint):
    pairs = build_pool(checkpoint, 5, seed=3)
    assert len(pairs) == 5
    assert all(p.image.shape == (3, 48, 80) and p.num_classes == 2 for p in pairs)
    again = build_pool(checkpoint, 5, seed=3)
    assert all(torch.equal(a.image, b.image) and torch.equal(a.mask, b.mask) for a, b in zip(pairs, again))
    with pytest.raises(ValueError):
        build_pool(checkpoint, 0, seed=0)


def test_build_pool_rejects_plan_mismatch(checkpoint, tmp_path):
    payload = torch.load(checkpoint, weights_only=True)
    payload["config"]["channel_scale"] = 0.25
    torch.save(payload, tmp_path / "bad.pt")
    with pytest.raises(DataError):
        build_pool(tmp_path / "bad.pt", 2, seed=0)


def test_generator_object_accepted(tiny_config):
    g = build_generator(tiny_config, 2)
    assert len(build_pool(g, 3, seed=0)) == 3


def test_export_roundtrip_and_overwrite(checkpoint, tmp_path):
    real = disc_scene(48, 80)
    pairs = build_pool(checkpoint, 4, seed=0)
    save_pool(pairs, tmp_path / "pool", "abc")
    pool = load_pool(tmp_path / "pool")
    assert sorted(pool) == [1, 2, 3, 4]
    assert all(torch.equal(pool[k].mask, pairs[k - 1].mask) for k in pool)
    ranking = rank_reports(_reports({k: [float(k)] * 4 for k in pool}), 0.25)
    rows = export_augmentation(ranking, pool, real, tmp_path / "aug", "abc")
    assert len(rows) == len(ranking.kept_ids) + 1
    lines = (tmp_path / "aug" / "manifest.tsv").read_text().splitlines()
    assert lines[0].split("\t") == ["id", "source", "avg_rank", "checkpoint_sha256"]
    assert len(lines) == 1 + 4
    assert lines[1].startswith("0000\treal")
    back = load_pair(tmp_path / "aug" / "images" / "0000.png", tmp_path / "aug" / "masks" / "0000.png")
    assert torch.equal(back.mask, real.mask)
    for sid in ranking.kept_ids:
        m = read_mask(tmp_path / "aug" / "masks" / f"{sid:04d}.png")
        assert torch.equal(torch.from_numpy(m), pool[sid].mask)
    with pytest.raises(FileExistsError):
        export_augmentation(ranking, pool, real, tmp_path / "aug", "abc")
    export_augmentation(ranking, pool, real, tmp_path / "aug", "abc", overwrite=True)
