"""Top-K ranking metrics and the popularity-debiasing report."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .inference import RankingResult


@dataclass
class MetricsReport:
    recall_at_k: float
    precision_at_k: float
    ndcg_at_k: float
    num_users_evaluated: int
    k: int


@dataclass
class BiasReport:
    """How often the top-20%-by-count items occupy recommendation slots,
    against their share of the ground-truth test interactions."""

    popular_item_set: set[int]
    popular_ratio_recommended: float
    popular_ratio_ground_truth: float


def metrics(
    rankings: dict[int, RankingResult], truth: dict[int, set[int]], k: int
) -> MetricsReport:
    """User-averaged Recall@K, Precision@K and NDCG@K with binary relevance.

    Users with no test interactions are skipped; every remaining user must
    have a ranking.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    recalls, precisions, ndcgs = [], [], []
    for u, items in truth.items():
        if not items:
            continue
        if u not in rankings:
            raise ValueError(f"no ranking provided for user {u} with test items")
        ranked = rankings[u].ranked_items[:k]
        hit_ranks = [r for r, item in enumerate(ranked, start=1) if int(item) in items]
        hits = len(hit_ranks)
        recalls.append(hits / len(items))
        precisions.append(hits / k)
        dcg = sum(1.0 / math.log2(r + 1) for r in hit_ranks)
        idcg = sum(1.0 / math.log2(r + 1) for r in range(1, min(k, len(items)) + 1))
        ndcgs.append(dcg / idcg)
    n = len(recalls)
    if n == 0:
        return MetricsReport(0.0, 0.0, 0.0, 0, k)
    return MetricsReport(
        sum(recalls) / n, sum(precisions) / n, sum(ndcgs) / n, n, k
    )


def popular_items(global_counts: np.ndarray, fraction: float = 0.2) -> set[int]:
    """Top `fraction` of items by global count, ties broken by ascending id."""
    num_items = global_counts.size
    n_pop = max(1, int(num_items * fraction))
    order = np.lexsort((np.arange(num_items), -global_counts))
    return set(int(i) for i in order[:n_pop])


def bias_report(
    rankings: dict[int, RankingResult],
    global_counts: np.ndarray,
    truth: dict[int, set[int]],
) -> BiasReport:
    """Share of recommendation slots taken by popular items vs. their share
    of the ground-truth test interactions."""
    pop_set = popular_items(global_counts)
    slots = 0
    pop_slots = 0
    for result in rankings.values():
        slots += result.ranked_items.size
        pop_slots += sum(1 for i in result.ranked_items if int(i) in pop_set)
    truth_total = 0
    truth_pop = 0
    for items in truth.values():
        truth_total += len(items)
        truth_pop += sum(1 for i in items if i in pop_set)
    return BiasReport(
        popular_item_set=pop_set,
        popular_ratio_recommended=pop_slots / slots if slots else 0.0,
        popular_ratio_ground_truth=truth_pop / truth_total if truth_total else 0.0,
    )


def write_metrics(report: MetricsReport, path: str | Path, csv: bool = False) -> None:
    if csv:
        text = (
            "metric,value\n"
            f"recall_at_{report.k},{report.recall_at_k!r}\n"
            f"precision_at_{report.k},{report.precision_at_k!r}\n"
            f"ndcg_at_{report.k},{report.ndcg_at_k!r}\n"
            f"num_users_evaluated,{report.num_users_evaluated}\n"
        )
    else:
        text = (
            f"k={report.k}\n"
            f"recall_at_k={report.recall_at_k!r}\n"
            f"precision_at_k={report.precision_at_k!r}\n"
            f"ndcg_at_k={report.ndcg_at_k!r}\n"
            f"num_users_evaluated={report.num_users_evaluated}\n"
        )
    Path(path).write_text(text, encoding="utf-8")


def write_bias_report(report: BiasReport, path: str | Path, csv: bool = False) -> None:
    if csv:
        text = (
            "field,value\n"
            f"popular_ratio_recommended,{report.popular_ratio_recommended!r}\n"
            f"popular_ratio_ground_truth,{report.popular_ratio_ground_truth!r}\n"
            f"num_popular_items,{len(report.popular_item_set)}\n"
        )
    else:
        text = (
            f"popular_ratio_recommended={report.popular_ratio_recommended!r}\n"
            f"popular_ratio_ground_truth={report.popular_ratio_ground_truth!r}\n"
            f"num_popular_items={len(report.popular_item_set)}\n"
        )
    Path(path).write_text(text, encoding="utf-8")
