"""Rolling daily top-k evaluation: ranking, per-user metrics and temporal averages."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .dataio import Dataset

# scorer(day, users, candidates) -> scores of shape (len(users), len(candidates))
Scorer = Callable[[int, np.ndarray, np.ndarray], np.ndarray]

METRICS = ("mrr", "recall_at_k", "map", "ndcg_at_k")


class EvaluationError(RuntimeError):
    pass


@dataclass(frozen=True)
class MetricBundle:
    mrr: float
    recall_at_k: float
    map: float
    ndcg_at_k: float
    k: int = 50
    n_users: int = 1
    day: int | None = None
    n_days: int = 1

    def as_dict(self) -> dict:
        return asdict(self)


def rank_items(scores, candidates: np.ndarray | None = None):
    """Order candidates by descending score, ties by ascending key.

    ``scores`` may be a mapping ``{key: score}`` (returns a key list) or an
    array aligned with ``candidates`` (item indices, ascending index order
    being ascending key order; returns the ranked indices).
    """
    if isinstance(scores, Mapping):
        for key, s in scores.items():
            if not math.isfinite(s):
                raise EvaluationError(f"non-finite score {s} for item {key}")
        return sorted(scores, key=lambda key: (-scores[key], key))
    s = np.asarray(scores, dtype=np.float64)
    if candidates is None:
        candidates = np.arange(len(s))
    candidates = np.asarray(candidates)
    if not np.isfinite(s).all():
        n = int(np.flatnonzero(~np.isfinite(s))[0])
        raise EvaluationError(f"non-finite score {s[n]} for item {candidates[n]}")
    return candidates[np.lexsort((candidates, -s))]


def _idcg(n_rel: np.ndarray, k: int) -> np.ndarray:
    disc = np.cumsum(1.0 / np.log2(np.arange(2, k + 2)))
    return disc[np.minimum(n_rel, k) - 1]


def metrics_from_relevance(rel: np.ndarray, k: int, literal_map: bool = False) -> dict[str, np.ndarray]:
    """Per-row metrics for a boolean ``(n_users, L)`` relevance-by-rank matrix."""
    rel = np.atleast_2d(np.asarray(rel, dtype=bool))
    n_rel = rel.sum(axis=1)
    if (n_rel == 0).any():
        raise EvaluationError("a ranking has no relevant item")
    L = rel.shape[1]
    ranks = np.arange(1, L + 1, dtype=np.float64)
    relf = rel.astype(np.float64)
    first = rel.argmax(axis=1) + 1
    hits = np.cumsum(relf, axis=1)
    ap = (hits / ranks * relf).sum(axis=1)
    if not literal_map:
        ap = ap / n_rel
    top = relf[:, :k]
    dcg = (top / np.log2(ranks[:top.shape[1]] + 1)).sum(axis=1)
    return {
        "mrr": 1.0 / first,
        "recall_at_k": top.sum(axis=1) / n_rel,
        "map": ap,
        "ndcg_at_k": dcg / _idcg(n_rel, k),
    }


def compute_metrics(ranked: Sequence, relevant: Iterable, k: int = 50,
                    literal_map: bool = False) -> MetricBundle:
    """Metrics of one ranked list against its relevance set.

    Average precision is divided by the number of relevant items unless
    ``literal_map`` is set.
    """
    relevant = set(relevant)
    if not relevant:
        raise EvaluationError("empty relevance set")
    ranked = list(ranked)
    if not relevant <= set(ranked):
        raise EvaluationError("relevant items missing from the ranked list")
    rel = np.fromiter((x in relevant for x in ranked), dtype=bool, count=len(ranked))
    m = metrics_from_relevance(rel[None, :], k, literal_map)
    return MetricBundle(*(float(m[name][0]) for name in METRICS), k=k, n_users=1)


def evaluate_day(scorer: Scorer, dataset: Dataset, t: int, k: int = 50,
                 literal_map: bool = False) -> MetricBundle:
    """Rank every available item for each user active on day ``t``; average over users."""
    pos_u, pos_i = dataset.positives(t)
    if len(pos_u) == 0:
        raise EvaluationError(f"day {t} has no positive events")
    candidates = dataset.available_items(t)
    if len(candidates) == 0:
        raise EvaluationError(f"day {t}: no available items")
    users, row = np.unique(pos_u, return_inverse=True)
    col = np.searchsorted(candidates, pos_i)
    if (col >= len(candidates)).any() or (candidates[np.minimum(col, len(candidates) - 1)] != pos_i).any():
        raise EvaluationError(f"day {t}: a positive item is not available")
    relevance = np.zeros((len(users), len(candidates)), dtype=bool)
    relevance[row, col] = True

    scores = np.asarray(scorer(t, users, candidates), dtype=np.float64)
    if scores.shape != relevance.shape:
        raise EvaluationError(f"day {t}: scorer returned shape {scores.shape}, expected {relevance.shape}")
    bad = ~np.isfinite(scores)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise EvaluationError(f"non-finite score for user {dataset.user_keys[users[r]]}, "
                              f"day {t}, item {dataset.item_keys[candidates[c]]}")
    # candidates ascend by key, so a stable sort on -score breaks ties by key
    order = np.argsort(-scores, axis=1, kind="stable")
    rel = np.take_along_axis(relevance, order, axis=1)
    m = metrics_from_relevance(rel, k, literal_map)
    return MetricBundle(*(float(m[name].mean()) for name in METRICS), k=k, n_users=len(users), day=t)


def evaluate_range(scorer: Scorer, dataset: Dataset, lo: int, hi: int, k: int = 50,
                   literal_map: bool = False) -> list[MetricBundle]:
    return [evaluate_day(scorer, dataset, t, k, literal_map) for t in dataset.active_days(lo, hi)]


def aggregate_over_time(bundles: Sequence[MetricBundle]) -> MetricBundle:
    """Unweighted mean over days."""
    if not bundles:
        raise EvaluationError("no daily metrics to aggregate")
    means = [float(np.mean([getattr(b, name) for b in bundles])) for name in METRICS]
    return MetricBundle(*means, k=bundles[0].k, n_users=sum(b.n_users for b in bundles),
                        day=None, n_days=len(bundles))


def write_daily_metrics(bundles: Sequence[MetricBundle], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["day", "n_users", *METRICS])
        for b in bundles:
            w.writerow([b.day, b.n_users, *(f"{getattr(b, name):.6f}" for name in METRICS)])
