"""Evaluation metrics: MSE, Spearman rank correlation, and the top-k
ranking-difference report.

Spearman assigns average ranks to ties and is the Pearson correlation of
the two rank vectors.  Constant inputs make the correlation undefined and
raise :class:`UndefinedMetricError` instead of returning a silent zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, UndefinedMetricError


def _vector(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ShapeError(f"{name}: empty vector")
    if not np.isfinite(arr).all():
        raise ShapeError(f"{name}: non-finite entries")
    return arr


def mse(predicted, true) -> float:
    """Mean squared difference between two equal-length vectors."""
    p = _vector(predicted, "predicted")
    t = _vector(true, "true")
    if p.size != t.size:
        raise ShapeError(f"length mismatch: {p.size} vs {t.size}")
    d = p - t
    return float(np.mean(d * d))


def average_ranks(x) -> np.ndarray:
    """1-based ranks in ascending order; tied values share their average rank."""
    a = _vector(x, "ranks")
    order = np.argsort(a, kind="stable")
    ranks = np.empty(a.size, dtype=np.float64)
    i = 0
    while i < a.size:
        j = i
        while j + 1 < a.size and a[order[j + 1]] == a[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(predicted, true) -> float:
    """Rank correlation in [-1, 1]; undefined for constant input or N < 2."""
    p = _vector(predicted, "predicted")
    t = _vector(true, "true")
    if p.size != t.size:
        raise ShapeError(f"length mismatch: {p.size} vs {t.size}")
    if p.size < 2:
        raise UndefinedMetricError("spearman needs at least two samples")
    if np.all(p == p[0]) or np.all(t == t[0]):
        raise UndefinedMetricError("spearman is undefined for constant input")
    rp = average_ranks(p)
    rt = average_ranks(t)
    rp -= rp.mean()
    rt -= rt.mean()
    denom = np.sqrt(float(np.sum(rp * rp)) * float(np.sum(rt * rt)))
    return float(np.sum(rp * rt) / denom)


@dataclass
class RankEntry:
    index: int
    entry_id: str
    predicted: float
    true: float
    predicted_rank: int
    true_rank: int
    rank_diff: int  # predicted_rank - true_rank

    def as_dict(self) -> dict:
        return {
            "id": self.entry_id,
            "predicted": self.predicted,
            "true": self.true,
            "predicted_rank": self.predicted_rank,
            "true_rank": self.true_rank,
            "rank_diff": self.rank_diff,
        }


@dataclass
class RankingReport:
    """Top-k entries by predicted score with their rank differences."""

    entries: list
    n: int
    k: int

    @property
    def diffs(self):
        return [e.rank_diff for e in self.entries]

    def as_dict(self) -> dict:
        return {"n": self.n, "k": self.k,
                "entries": [e.as_dict() for e in self.entries]}

    def lines(self):
        yield f"{'rank':>4} {'id':>12} {'pred':>10} {'true':>10} {'diff':>5}"
        for e in self.entries:
            yield (f"{e.predicted_rank:>4} {e.entry_id:>12} "
                   f"{e.predicted:>10.3f} {e.true:>10.3f} {e.rank_diff:>+5d}")


def _descending_order(values: np.ndarray):
    # stable: ties keep their original order
    return sorted(range(values.size), key=lambda i: (-values[i], i))


def ranking_report(predicted, true, k: int, ids=None) -> RankingReport:
    """Rank by predicted score (descending, stable ties) and compare each of
    the top-k entries' positions against the true ranking."""
    p = _vector(predicted, "predicted")
    t = _vector(true, "true")
    if p.size != t.size:
        raise ShapeError(f"length mismatch: {p.size} vs {t.size}")
    if not (1 <= k <= p.size):
        raise ConfigError(f"k must be in [1, {p.size}], got {k}")
    if ids is None:
        ids = [str(i) for i in range(p.size)]
    elif len(ids) != p.size:
        raise ShapeError(f"{len(ids)} ids for {p.size} scores")

    by_p = _descending_order(p)
    by_t = _descending_order(t)
    rank_in_p = {idx: pos + 1 for pos, idx in enumerate(by_p)}
    rank_in_t = {idx: pos + 1 for pos, idx in enumerate(by_t)}
    entries = []
    for idx in by_p[:k]:
        entries.append(RankEntry(
            index=idx,
            entry_id=str(ids[idx]),
            predicted=float(p[idx]),
            true=float(t[idx]),
            predicted_rank=rank_in_p[idx],
            true_rank=rank_in_t[idx],
            rank_diff=rank_in_p[idx] - rank_in_t[idx],
        ))
    return RankingReport(entries=entries, n=p.size, k=k)


@dataclass
class EvalReport:
    """Per-head MSE and Spearman over one evaluation split."""

    labels: tuple
    mse: list
    spearman: list
    n: int

    def as_dict(self) -> dict:
        return {
            "n": self.n,
            "per_head": {
                label: {"mse": self.mse[i], "spearman": self.spearman[i]}
                for i, label in enumerate(self.labels)
            },
        }

    def lines(self):
        yield f"{'head':>12} {'mse':>12} {'spearman':>10}   (n={self.n})"
        for i, label in enumerate(self.labels):
            yield f"{label:>12} {self.mse[i]:>12.6f} {self.spearman[i]:>10.4f}"


def evaluate_predictions(predicted, targets, labels) -> EvalReport:
    """Per-head metrics for an (N, K) prediction batch vs matching targets."""
    p = np.asarray(predicted, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 2:
        raise ShapeError(f"prediction {p.shape} vs target {t.shape}")
    if p.shape[1] != len(labels):
        raise ShapeError(f"{p.shape[1]} heads but {len(labels)} labels")
    return EvalReport(
        labels=tuple(labels),
        mse=[mse(p[:, i], t[:, i]) for i in range(p.shape[1])],
        spearman=[spearman(p[:, i], t[:, i]) for i in range(p.shape[1])],
        n=p.shape[0],
    )
