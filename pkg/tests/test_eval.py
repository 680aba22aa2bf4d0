import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dnsmos.errors import DegenerateInput, GroupTooSmall, LengthMismatch, MissingColumn, MissingPrediction
from dnsmos.evaluation import (
    RatingRecord,
    aggregate_per_model,
    metric_comparison,
    pearson,
    per_category_report,
    read_manifest,
    read_predictions,
    spearman,
    write_report,
    write_scatter,
)


def pearson_oracle(x, y):
    n = len(x)
    mx, my = math.fsum(x) / n, math.fsum(y) / n
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = math.fsum((a - mx) ** 2 for a in x)
    syy = math.fsum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def ranks_oracle(x):
    # 1-based rank; a tie block shares the mean of the positions it spans
    return [sum(v < xi for v in x) + (sum(v == xi for v in x) + 1) / 2 for xi in x]


def spearman_oracle(x, y):
    return pearson_oracle(ranks_oracle(list(x)), ranks_oracle(list(y)))


def test_examples():
    assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert spearman([1, 2, 3, 4], [1, 4, 9, 16]) == 1.0
    with pytest.raises(DegenerateInput):
        pearson([3, 3, 3], [1, 2, 3])
    with pytest.raises(DegenerateInput):
        spearman([1], [1])
    with pytest.raises(LengthMismatch):
        pearson([1, 2], [1, 2, 3])


def test_against_brute_force_oracles():
    rng = np.random.default_rng(0)
    for i in range(10_000):
        n = int(rng.integers(3, 25))
        if i % 2:
            # small integer support forces ties
            x, y = rng.integers(0, 4, n).astype(float), rng.integers(0, 4, n).astype(float)
        else:
            x, y = rng.normal(size=n), rng.normal(size=n)
        if np.ptp(x) == 0 or np.ptp(y) == 0:
            continue
        assert abs(pearson(x, y) - pearson_oracle(x, y)) <= 1e-12
        assert abs(spearman(x, y) - spearman_oracle(x, y)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 60))
def test_symmetry_bounds_and_monotone_invariance(seed, n):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=n), rng.normal(size=n)
    assert pearson(x, y) == pytest.approx(pearson(y, x), abs=1e-15)
    assert -1.0 <= pearson(x, y) <= 1.0
    s = spearman(x, y)
    assert spearman(np.exp(x), y) == s
    assert spearman(np.arctan(x) * 7 + 2, y) == s
    assert spearman(-(x ** 3), y) == -s


def _records(n_sup=6, per=5, seed=0):
    rng = np.random.default_rng(seed)
    recs, preds = [], {}
    for j in range(n_sup):
        for k in range(per):
            cid = f"c{j:02d}_{k}"
            recs.append(RatingRecord(cid, float(np.clip(1 + 0.6 * j + rng.normal(0, 0.3), 1, 5)),
                                     num_votes=int(rng.integers(1, 4)) if k else 1,
                                     suppressor_id=f"ns{j}", category=("A", "B")[k % 2]))
            preds[cid] = 2 + 0.3 * j + rng.normal(0, 0.2)
    return recs, preds


def test_per_model_aggregation_matches_manual_means():
    recs, preds = _records()
    rep = aggregate_per_model(recs, preds)
    assert len(rep.per_suppressor) == 6
    mos = [np.mean([r.mos for r in recs if r.suppressor_id == f"ns{j}"]) for j in range(6)]
    prd = [np.mean([preds[r.clip_id] for r in recs if r.suppressor_id == f"ns{j}"]) for j in range(6)]
    assert rep.pcc == pytest.approx(pearson_oracle(mos, prd), abs=1e-12)
    assert rep.srcc == pytest.approx(spearman_oracle(mos, prd), abs=1e-12)


def test_permutation_invariance_is_bit_exact():
    recs, preds = _records()
    a = aggregate_per_model(recs, preds)
    idx = np.random.default_rng(1).permutation(len(recs))
    b = aggregate_per_model([recs[i] for i in idx], preds)
    assert (a.pcc, a.srcc) == (b.pcc, b.srcc)
    c = aggregate_per_model(recs, preds, grouping="per-clip")
    d = aggregate_per_model([recs[i] for i in idx], preds, grouping="per-clip")
    assert (c.pcc, c.srcc) == (d.pcc, d.srcc)


def test_grouping_weighting_and_errors():
    recs, preds = _records()
    clip = aggregate_per_model(recs, preds, grouping="per-clip")
    assert clip.n_clips == 30
    assert clip.pcc == pytest.approx(pearson_oracle([r.mos for r in recs], [preds[r.clip_id] for r in recs]))
    w = aggregate_per_model(recs, preds, weighted=True)
    j0 = [r for r in recs if r.suppressor_id == "ns0"]
    expected = sum(r.mos * r.num_votes for r in j0) / sum(r.num_votes for r in j0)
    assert w.per_suppressor[0].mean_mos == pytest.approx(expected)
    with pytest.raises(MissingPrediction):
        aggregate_per_model(recs, {})
    with pytest.raises(GroupTooSmall):
        aggregate_per_model(recs[:5], preds)
    with pytest.raises(ValueError):
        aggregate_per_model(recs, preds, grouping="per-thing")


def test_per_category_report():
    recs, preds = _records()
    rep = per_category_report(recs, preds)
    assert list(rep) == ["A", "B", "Overall"]
    assert rep["A"].n_clips + rep["B"].n_clips == rep["Overall"].n_clips == 30


def test_metric_comparison_uncorrelated_noise():
    rng = np.random.default_rng(7)
    recs, preds = [], {}
    for i in range(1000):
        recs.append(RatingRecord(f"c{i}", float(rng.uniform(1, 5)), suppressor_id=f"c{i}",
                                 external_scores={"noise": float(rng.normal())}))
        preds[f"c{i}"] = float(rng.normal())
    rows = metric_comparison(recs, preds, grouping="per-clip")
    assert [r[0] for r in rows] == ["noise", "model"]
    assert all(abs(pcc) < 0.1 and abs(srcc) < 0.1 for _, pcc, srcc in rows)
    with pytest.raises(MissingColumn):
        metric_comparison(recs, preds, metrics=["pesq"])


def test_record_validation():
    with pytest.raises(ValueError):
        RatingRecord("a", 5.5)
    with pytest.raises(ValueError):
        RatingRecord("a", 3.0, num_votes=0)
    with pytest.raises(ValueError):
        RatingRecord("a", 3.0, num_votes=1, std=0.5)


def test_manifest_io_and_reports(tmp_path):
    (tmp_path / "m.csv").write_text(
        "clip_id,path,mos,num_votes,std,suppressor_id,category,pesq\n"
        "a,a.wav,3.0,5,0.5,ns0,English,2.1\n"
        "b,b.wav,4.0,5,0.5,ns1,English,3.3\n"
        "c,c.wav,2.0,1,0,ns2,Tonal,1.2\n")
    recs = read_manifest(tmp_path / "m.csv")
    assert recs[0].external_scores == {"pesq": 2.1}
    (tmp_path / "p.csv").write_text("clip_id,mos\na,3.1\nb,3.9\nc,2.5\n")
    preds = read_predictions(tmp_path / "p.csv")
    rep = {"Overall": aggregate_per_model(recs, preds)}
    summary = write_report(rep, tmp_path / "r.csv", metric_comparison(recs, preds))
    text = summary.read_text()
    assert "Overall" in text and "pesq" in text and "model" in text
    write_scatter(recs, preds, tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "suppressor_id,mos,pred"
    (tmp_path / "bad.csv").write_text("clip,mos\n")
    with pytest.raises(MissingColumn):
        read_manifest(tmp_path / "bad.csv")
    with pytest.raises(MissingColumn):
        read_predictions(tmp_path / "bad.csv")
