"""Scoring and top-K ranking, with or without the forecast intervention."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import ModelParams, PropagatedEmbeddings, mlp_forward, softplus
from .corpus import TimeGrid
from .forecast import InterventionPlan
from .popstats import PersonalPopularityTable, PopularityTable

NO_INTERVENTION = "none"
INTERVENED = "intervened"
ELIMINATE_P = "eliminate_p"
GRID_VALUES = "grid"

MODES = (NO_INTERVENTION, INTERVENED, ELIMINATE_P, GRID_VALUES)


@dataclass
class RankingResult:
    """Top-K recommendation for one user; scores are non-increasing and no
    training-interacted item appears. `short` flags fewer than K candidates."""

    user: int
    ranked_items: np.ndarray
    scores: np.ndarray
    short: bool = False


def eliminate_p_value(pop: PopularityTable) -> float:
    """Average local popularity over all training clicks: the single value
    substituted for every item in eliminate-p scoring."""
    total = pop.global_counts.sum()
    if total == 0:
        return 0.0
    return float(pop.global_counts @ pop.avg_local / total)


def _mode_values(
    u: int,
    pop: PopularityTable,
    pers: PersonalPopularityTable,
    grid: TimeGrid,
    mode: str,
    plan: InterventionPlan | None,
    grid_p: float | None,
    grid_s: float | None,
):
    """Resolve (personal value, per-item popularity vector) for a scoring mode."""
    T = grid.last_train_step
    if mode == NO_INTERVENTION:
        return float(pers.personal[u, T]), pop.avg_local
    if mode == INTERVENED:
        if plan is None:
            raise ValueError("intervened mode requires an InterventionPlan")
        return float(plan.s_star[u]), plan.p_star
    if mode == ELIMINATE_P:
        value = eliminate_p_value(pop)
        return float(pers.personal[u, T]), np.full(pop.avg_local.shape, value)
    if mode == GRID_VALUES:
        if grid_p is None or grid_s is None:
            raise ValueError("grid mode requires grid_p and grid_s")
        return float(grid_s), np.full(pop.avg_local.shape, float(grid_p))
    raise ValueError(f"unknown scoring mode {mode!r}")


def score_all(
    params: ModelParams,
    prop: PropagatedEmbeddings,
    u: int,
    pop: PopularityTable,
    pers: PersonalPopularityTable,
    grid: TimeGrid,
    mode: str = NO_INTERVENTION,
    plan: InterventionPlan | None = None,
    alpha: float = 0.5,
    grid_p: float | None = None,
    grid_s: float | None = None,
    score_kind: str = "deconfounded",
    no_quality: bool = False,
    no_consistency: bool = False,
) -> np.ndarray:
    """Score every item for user u under the given mode.

    Plain-backbone and IPS models rank the raw matching score. For the gated
    model, if the quality path is ablated and conformity vanishes everywhere,
    the gate drops out entirely so the ranking falls back to the matching
    score instead of collapsing to zero.
    """
    m = prop.user_final[u] @ prop.item_final.T
    if score_kind in ("plain", "ips"):
        return m
    s_value, p_vec = _mode_values(u, pop, pers, grid, mode, plan, grid_p, grid_s)
    if no_consistency or alpha == 0.0:
        consistency = np.ones_like(p_vec)
    else:
        consistency = np.exp(-alpha * np.abs(s_value - p_vec))
    mlp_out, _ = mlp_forward(params, np.arange(params.num_items))
    c = consistency * p_vec * mlp_out
    if no_quality:
        if not np.any(c):
            return softplus(m)
        gate_in = c
    else:
        gate_in = params.quality + c
    return np.tanh(gate_in) * softplus(m)


def top_k(user: int, scores: np.ndarray, exclude: set[int], k: int) -> RankingResult:
    """k highest-scoring non-excluded items, ties broken by ascending item id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    order = np.lexsort((np.arange(n), -scores))
    if exclude:
        keep = np.fromiter((i not in exclude for i in order), dtype=bool, count=n)
        order = order[keep]
    chosen = order[:k]
    return RankingResult(
        user=user,
        ranked_items=chosen,
        scores=scores[chosen],
        short=chosen.size < k,
    )


def rank_users(
    params: ModelParams,
    prop: PropagatedEmbeddings,
    users,
    pop: PopularityTable,
    pers: PersonalPopularityTable,
    grid: TimeGrid,
    mode: str = NO_INTERVENTION,
    plan: InterventionPlan | None = None,
    alpha: float = 0.5,
    k: int = 20,
    exclude: list[set[int]] | None = None,
    score_kind: str = "deconfounded",
    no_quality: bool = False,
    no_consistency: bool = False,
    grid_p: float | None = None,
    grid_s: float | None = None,
) -> dict[int, RankingResult]:
    """Top-K rankings for many users, sharing the item-side computation.

    Produces exactly the same scores as per-user score_all calls.
    """
    users = list(users)
    out: dict[int, RankingResult] = {}
    if not users:
        return out
    gated = score_kind not in ("plain", "ips")
    if gated:
        mlp_out, _ = mlp_forward(params, np.arange(params.num_items))
    m_block = prop.user_final[np.asarray(users)] @ prop.item_final.T
    for row, u in enumerate(users):
        m = m_block[row]
        if gated:
            s_value, p_vec = _mode_values(u, pop, pers, grid, mode, plan, grid_p, grid_s)
            if no_consistency or alpha == 0.0:
                consistency = np.ones_like(p_vec)
            else:
                consistency = np.exp(-alpha * np.abs(s_value - p_vec))
            c = consistency * p_vec * mlp_out
            if no_quality:
                scores = softplus(m) if not np.any(c) else np.tanh(c) * softplus(m)
            else:
                scores = np.tanh(params.quality + c) * softplus(m)
        else:
            scores = m
        seen = exclude[u] if exclude is not None else set()
        out[u] = top_k(u, scores, seen, k)
    return out


def write_recommendations(rankings: dict[int, RankingResult], path: str | Path) -> None:
    """TSV export: user_id, rank, item_id, score."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("user_id\trank\titem_id\tscore\n")
        for u in sorted(rankings):
            result = rankings[u]
            for rank, (item, score) in enumerate(
                zip(result.ranked_items, result.scores), start=1
            ):
                fh.write(f"{u}\t{rank}\t{int(item)}\t{float(score)!r}\n")
