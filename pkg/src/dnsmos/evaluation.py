"""Correlation statistics and per-suppressor (stack-ranking) evaluation."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from dnsmos.errors import DegenerateInput, GroupTooSmall, LengthMismatch, MissingColumn, MissingPrediction

MANIFEST_COLUMNS = ("clip_id", "path", "mos", "num_votes", "std", "suppressor_id", "category")
GROUPINGS = ("per-model", "per-clip")
OVERALL = "Overall"


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise LengthMismatch(f"inputs of shape {x.shape} and {y.shape}")
    if x.shape[0] < 2:
        raise DegenerateInput("correlation needs at least two points")
    return x, y


def pearson(x, y) -> float:
    x, y = _pair(x, y)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateInput("correlation is undefined for a constant vector")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def spearman(x, y) -> float:
    """Pearson correlation of average ranks (ties share their mean rank)."""
    x, y = _pair(x, y)
    return pearson(rankdata(x, method="average"), rankdata(y, method="average"))


@dataclass(frozen=True)
class RatingRecord:
    clip_id: str
    mos: float
    num_votes: int = 1
    std: float = 0.0
    suppressor_id: str = ""
    category: str = ""
    path: str = ""
    external_scores: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 1.0 <= self.mos <= 5.0:
            raise ValueError(f"{self.clip_id}: mos {self.mos} outside [1, 5]")
        if self.num_votes < 1:
            raise ValueError(f"{self.clip_id}: num_votes must be >= 1")
        if self.std < 0 or (self.num_votes == 1 and self.std != 0):
            raise ValueError(f"{self.clip_id}: inconsistent std {self.std} for {self.num_votes} votes")


@dataclass
class SuppressorRow:
    suppressor_id: str
    mean_mos: float
    mean_pred: float
    n_clips: int


@dataclass
class EvalReport:
    per_suppressor: list
    pcc: float
    srcc: float
    grouping: str = "per-model"
    category: str | None = None
    n_clips: int = 0


def read_manifest(path) -> list:
    """Parse the delimited manifest; columns past the standard set are external metrics."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ("clip_id", "mos", "suppressor_id") if c not in (reader.fieldnames or [])]
        if missing:
            raise MissingColumn(f"{path}: missing columns {missing}")
        extra = [c for c in reader.fieldnames if c not in MANIFEST_COLUMNS]
        records = []
        for row in reader:
            records.append(RatingRecord(
                clip_id=row["clip_id"],
                mos=float(row["mos"]),
                num_votes=int(row.get("num_votes") or 1),
                std=float(row.get("std") or 0.0),
                suppressor_id=row["suppressor_id"],
                category=row.get("category") or "",
                path=row.get("path") or "",
                external_scores={c: float(row[c]) for c in extra if row.get(c) not in (None, "")},
            ))
    return records


def read_predictions(path) -> dict:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or "clip_id" not in reader.fieldnames or "mos" not in reader.fieldnames:
            raise MissingColumn(f"{path}: expected columns clip_id,mos")
        return {row["clip_id"]: float(row["mos"]) for row in reader}


def _lookup(records, predictions):
    try:
        return [float(predictions[r.clip_id]) for r in records]
    except KeyError as exc:
        raise MissingPrediction(f"no prediction for clip {exc.args[0]!r}") from None


def _mean(values, weights=None) -> float:
    if weights is None:
        return math.fsum(values) / len(values)
    return math.fsum(v * w for v, w in zip(values, weights)) / math.fsum(weights)


def _group_means(records, values, weighted=False):
    """{suppressor_id: (mean_mos, mean_value, n)} with order-independent sums."""
    groups = defaultdict(list)
    for rec, v in zip(records, values):
        groups[rec.suppressor_id].append((rec, v))
    out = {}
    for sid, items in groups.items():
        w = [rec.num_votes for rec, _ in items] if weighted else None
        out[sid] = (_mean([rec.mos for rec, _ in items], w), _mean([v for _, v in items], w), len(items))
    return out


def aggregate_per_model(records, predictions, grouping: str = "per-model", weighted: bool = False,
                        category: str | None = None) -> EvalReport:
    """Average human MOS and predictions per suppressor, then correlate.

    ``grouping='per-clip'`` correlates clip-level values instead; the
    per-suppressor table is reported either way.
    """
    if grouping not in GROUPINGS:
        raise ValueError(f"grouping must be one of {GROUPINGS}")
    records = list(records)
    preds = _lookup(records, predictions)
    means = _group_means(records, preds, weighted)
    rows = [SuppressorRow(sid, m, p, n) for sid, (m, p, n) in sorted(means.items())]
    if grouping == "per-model":
        if len(rows) < 2:
            raise GroupTooSmall(f"{len(rows)} suppressor(s){' in ' + category if category else ''}; need >= 2")
        x = [row.mean_mos for row in rows]
        y = [row.mean_pred for row in rows]
    else:
        order = sorted(range(len(records)), key=lambda i: records[i].clip_id)
        x = [records[i].mos for i in order]
        y = [preds[i] for i in order]
    return EvalReport(rows, pearson(x, y), spearman(x, y), grouping, category, len(records))


def per_category_report(records, predictions, grouping: str = "per-model", weighted: bool = False) -> dict:
    records = list(records)
    by_cat = defaultdict(list)
    for rec in records:
        by_cat[rec.category].append(rec)
    report = {cat: aggregate_per_model(recs, predictions, grouping, weighted, category=cat)
              for cat, recs in sorted(by_cat.items())}
    report[OVERALL] = aggregate_per_model(records, predictions, grouping, weighted, category=OVERALL)
    return report


def metric_comparison(records, predictions, metrics=None, grouping: str = "per-model") -> list:
    """Rows of (metric, PCC, SRCC) against human MOS; the model's own row is ``"model"``."""
    records = list(records)
    if metrics is None:
        metrics = sorted({m for r in records for m in r.external_scores})
    columns = {}
    for m in metrics:
        try:
            columns[m] = {r.clip_id: r.external_scores[m] for r in records}
        except KeyError:
            raise MissingColumn(f"metric {m!r} missing for some clips") from None
    columns["model"] = predictions
    rows = []
    for name, values in columns.items():
        rep = aggregate_per_model(records, values, grouping)
        rows.append((name, rep.pcc, rep.srcc))
    return rows


def write_report(reports: dict, path, comparison=None) -> Path:
    """Delimited per-suppressor rows plus a sibling ``.txt`` human-readable summary."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["category", "grouping", "suppressor_id", "mean_mos", "mean_pred", "n_clips"])
        for cat, rep in reports.items():
            for row in rep.per_suppressor:
                w.writerow([cat, rep.grouping, row.suppressor_id, repr(row.mean_mos), repr(row.mean_pred), row.n_clips])
    lines = [f"{'category':<14}{'grouping':<11}{'n_clips':>8}{'PCC':>9}{'SRCC':>9}"]
    for cat, rep in reports.items():
        lines.append(f"{cat:<14}{rep.grouping:<11}{rep.n_clips:>8}{rep.pcc:>9.4f}{rep.srcc:>9.4f}")
    if comparison:
        lines += ["", f"{'metric':<14}{'PCC':>9}{'SRCC':>9}"]
        lines += [f"{name:<14}{pcc:>9.4f}{srcc:>9.4f}" for name, pcc, srcc in comparison]
    summary = path.with_suffix(".txt")
    summary.write_text("\n".join(lines) + "\n")
    return summary


def write_scatter(records, predictions, path, grouping: str = "per-model") -> None:
    """(human, predicted) pairs, one per suppressor or per clip."""
    records = list(records)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if grouping == "per-model":
            w.writerow(["suppressor_id", "mos", "pred"])
            for row in aggregate_per_model(records, predictions).per_suppressor:
                w.writerow([row.suppressor_id, repr(row.mean_mos), repr(row.mean_pred)])
        else:
            w.writerow(["clip_id", "mos", "pred"])
            for rec in sorted(records, key=lambda r: r.clip_id):
                w.writerow([rec.clip_id, repr(rec.mos), repr(float(predictions[rec.clip_id]))])
