import numpy as np
import pytest

from dnsmos.audio import CLIP_SAMPLES, load_wav
from dnsmos.datasim import (
    CATEGORIES,
    RatingConfig,
    SynthSpec,
    clip_metadata,
    gen_clip,
    make_dataset,
    oracle_mos,
    rate_clip,
    simulate_ratings,
)
from dnsmos.evaluation import read_manifest


def _snr(g):
    return 10 * np.log10(np.mean(g.speech ** 2) / np.mean(g.noise ** 2))


def test_generation_is_deterministic():
    spec = SynthSpec(n_clips=4, seed=3)
    a, b = gen_clip(spec, 2), gen_clip(spec, 2)
    assert np.array_equal(a.clip.samples, b.clip.samples)
    assert a.metadata == b.metadata == clip_metadata(spec, 2)
    assert len(a.clip) == CLIP_SAMPLES
    assert not np.array_equal(a.clip.samples, gen_clip(SynthSpec(n_clips=4, seed=4), 2).clip.samples)


def test_requested_snr_and_level():
    spec = SynthSpec(n_clips=3, seed=1)
    g = gen_clip(spec, 0, snr_db=10.0)
    assert abs(_snr(g) - 10.0) < 1.0
    np.testing.assert_allclose(g.clip.samples, g.speech + g.noise_gain * g.noise, atol=1e-12)
    peak_dbfs = 20 * np.log10(np.max(np.abs(g.clip.samples)))
    assert peak_dbfs == pytest.approx(g.metadata["level_dbfs"], abs=1e-9)
    assert -30 <= peak_dbfs <= -10


def test_infinite_snr_is_clean():
    g = gen_clip(SynthSpec(n_clips=1), 0, snr_db=float("inf"))
    noise_db = 10 * np.log10(max(np.mean((g.clip.samples - g.speech) ** 2), 1e-300) / np.mean(g.speech ** 2))
    assert noise_db < -60
    assert g.metadata["oracle_mos"] == pytest.approx(5.0)


def test_oracle_shape():
    assert oracle_mos(10.0, 0.0) == pytest.approx(3.0)
    snr = np.linspace(-10, 40, 51)
    q = np.linspace(0, 1, 11)
    grid = oracle_mos(snr[:, None], q[None, :])
    assert np.all((grid > 1) & (grid < 5))
    assert np.all(np.diff(grid, axis=0) > 0) and np.all(np.diff(grid, axis=1) > 0)


def test_suppressors_and_categories():
    spec = SynthSpec(n_clips=200, n_suppressors=20, seed=9)
    np.testing.assert_allclose(np.sort(spec.suppressor_qualities()), np.linspace(0, 1, 20))
    metas = [clip_metadata(spec, i) for i in range(200)]
    assert {m["suppressor_id"] for m in metas} == {f"ns{j:03d}" for j in range(20)}
    assert {m["category"] for m in metas} == set(CATEGORIES)
    with pytest.raises(IndexError):
        clip_metadata(spec, 200)
    with pytest.raises(ValueError):
        SynthSpec(snr_range_db=(5, 5))


def test_rating_examples():
    exact = simulate_ratings(3.0, 5, 0.0, 0.0, seed=0)
    assert exact.votes == (3.0,) * 5 and exact.std == 0.0
    high = simulate_ratings(4.8, 200, 1.0, 0.0, seed=1)
    assert max(high.votes) == 5.0 and min(high.votes) >= 1.0
    one = simulate_ratings(3.0, 1, 1.0, 0.25, seed=2)
    assert one.num_votes == 1 and one.std == 0.0
    with pytest.raises(ValueError):
        simulate_ratings(3.0, 0, 1.0, 0.25, seed=0)


def test_run_bias_is_shared_within_a_run():
    a = simulate_ratings(3.0, 3, 1.0, 0.25, seed=5, run_id="runA", clip_id="x")
    b = simulate_ratings(2.0, 3, 1.0, 0.25, seed=5, run_id="runA", clip_id="y")
    c = simulate_ratings(2.0, 3, 1.0, 0.25, seed=5, run_id="runB", clip_id="y")
    assert a.run_bias == b.run_bias != c.run_bias
    assert a.votes != simulate_ratings(3.0, 3, 1.0, 0.25, seed=5, run_id="runA", clip_id="z").votes


def test_vote_noise_statistics():
    cfg = RatingConfig(votes_range=(5, 10), rater_sigma=1.0, seed=0)
    spec = SynthSpec(n_clips=400)
    ratings = [rate_clip(clip_metadata(spec, i), cfg, i) for i in range(400)]
    assert all(5 <= r.num_votes <= 10 for r in ratings)
    assert np.mean([r.std > 0.5 for r in ratings]) > 0.5


def test_dataset_files_are_reproducible(tmp_path):
    spec, cfg = SynthSpec(n_clips=4, seed=2), RatingConfig(seed=2)
    a = make_dataset(spec, cfg, tmp_path / "a")
    b = make_dataset(spec, cfg, tmp_path / "b")
    assert a.manifest_path.read_bytes() == b.manifest_path.read_bytes()
    assert a.oracle_path.read_bytes() == b.oracle_path.read_bytes()
    for row in a.rows:
        assert (tmp_path / "a" / row["path"]).read_bytes() == (tmp_path / "b" / row["path"]).read_bytes()
    records = read_manifest(a.manifest_path)
    assert [r.clip_id for r in records] == [f"clip{i:06d}" for i in range(4)]
    clip = load_wav(tmp_path / "a" / records[0].path)
    np.testing.assert_array_equal(clip.samples, gen_clip(spec, 0).clip.samples.astype(np.float32))
    assert "oracle_mos" not in a.manifest_path.read_text()
