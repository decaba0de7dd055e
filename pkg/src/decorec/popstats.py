"""Popularity statistics: per-step local popularity, global counts, the
high-popularity quantile threshold, evolving personal popularity, and the
per-item average local popularity.

All tables are built from integer counts with a single final division, so
small datasets can be checked exactly against a brute-force recount.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Interaction, TimeGrid, interactions_to_arrays


@dataclass
class PopularityTable:
    """Per-item popularity series on a time grid.

    local: (num_items, num_steps), each column the item share of the recent
        window's interactions (columns sum to 1 where the window is nonempty).
    global_counts: (num_items,) total training interaction count per item.
    avg_local: (num_items,) mean local popularity over each item's own clicks.
    window_steps: window length in steps used to build `local`.
    """

    local: np.ndarray
    global_counts: np.ndarray
    avg_local: np.ndarray
    window_steps: int


@dataclass
class PersonalPopularityTable:
    """Per-user share of recent clicks that landed on high-popularity items.

    personal: (num_users, num_steps) values in [0, 1].
    threshold: (num_steps,) per-step high-popularity cutoff (+inf when the
        window holds no interactions, so nothing counts as popular).
    quantile: fraction of nonzero-popularity items treated as popular.
    """

    personal: np.ndarray
    threshold: np.ndarray
    quantile: float


def window_steps_from_seconds(grid: TimeGrid, seconds: float) -> int:
    """Convert a wall-clock window to steps on this grid, rounded up to >= 1."""
    return max(1, math.ceil(seconds / grid.step_duration))


def _steps_of(train: list[Interaction], grid: TimeGrid) -> np.ndarray:
    _, _, ts = interactions_to_arrays(train)
    steps = (ts - grid.origin) // grid.step_duration
    if steps.size and (steps.min() < 0 or steps.max() >= grid.num_steps):
        raise ValueError("training interactions fall outside the time grid")
    return steps


def local_popularity(
    train: list[Interaction],
    grid: TimeGrid,
    window_steps: int,
    num_items: int | None = None,
) -> PopularityTable:
    """Build the local-popularity table over a trailing window of steps.

    At step t the window covers steps (t - window_steps, t]; the popularity of
    item i is its share of all interactions in that window, and 0 everywhere
    when the window is empty.
    """
    if window_steps < 1:
        raise ValueError("window_steps must be >= 1")
    users, items, _ = interactions_to_arrays(train)
    steps = _steps_of(train, grid)
    if num_items is None:
        num_items = int(items.max()) + 1 if items.size else 0

    counts = np.zeros((num_items, grid.num_steps), dtype=np.int64)
    np.add.at(counts, (items, steps), 1)
    cum = counts.cumsum(axis=1)
    windowed = cum.copy()
    windowed[:, window_steps:] -= cum[:, :-window_steps]
    totals = windowed.sum(axis=0)

    local = np.zeros_like(windowed, dtype=np.float64)
    np.divide(windowed, totals, out=local, where=totals > 0)

    global_counts = np.bincount(items, minlength=num_items).astype(np.int64)
    table = PopularityTable(local, global_counts, np.zeros(num_items), window_steps)
    table.avg_local = avg_local_popularity(train, table, grid)
    return table


def high_pop_threshold(pop: PopularityTable, step: int, quantile: float) -> float:
    """Nearest-rank (1 - quantile) cutoff over the items with nonzero
    popularity at `step`; +inf when no item has nonzero popularity."""
    if not 0.0 < quantile < 1.0:
        raise ValueError("quantile must lie in (0, 1)")
    values = pop.local[:, step]
    nonzero = np.sort(values[values > 0.0])
    if nonzero.size == 0:
        return math.inf
    rank = max(1, math.ceil((1.0 - quantile) * nonzero.size - 1e-12))
    return float(nonzero[rank - 1])


def avg_local_popularity(
    train: list[Interaction], pop: PopularityTable, grid: TimeGrid
) -> np.ndarray:
    """Mean of p_i^t over the steps of item i's own interactions (0 if none)."""
    _, items, _ = interactions_to_arrays(train)
    steps = _steps_of(train, grid)
    num_items = pop.local.shape[0]
    sums = np.zeros(num_items, dtype=np.float64)
    np.add.at(sums, items, pop.local[items, steps])
    counts = np.bincount(items, minlength=num_items)
    out = np.zeros(num_items, dtype=np.float64)
    np.divide(sums, counts, out=out, where=counts > 0)
    return out


def personal_popularity(
    train: list[Interaction],
    pop: PopularityTable,
    grid: TimeGrid,
    window_steps: int,
    quantile: float = 0.20,
    num_users: int | None = None,
) -> PersonalPopularityTable:
    """Build the per-user, per-step high-popularity click ratio.

    At step t a user's value is the fraction of their window interactions
    whose item popularity at t strictly exceeds the step threshold. Users
    inactive in the window fall back to their lifetime ratio (each click
    judged against its own step's threshold); users with no history get 0.
    """
    users, items, _ = interactions_to_arrays(train)
    steps = _steps_of(train, grid)
    if not np.all(steps[:-1] <= steps[1:]):
        order = np.argsort(steps, kind="stable")
        users, items, steps = users[order], items[order], steps[order]
    if num_users is None:
        num_users = int(users.max()) + 1 if users.size else 0
    num_steps = grid.num_steps

    threshold = np.array(
        [high_pop_threshold(pop, t, quantile) for t in range(num_steps)]
    )

    # Lifetime fallback: every click judged at its own step.
    life_hits = np.zeros(num_users, dtype=np.int64)
    life_mask = pop.local[items, steps] > threshold[steps]
    np.add.at(life_hits, users[life_mask], 1)
    life_counts = np.bincount(users, minlength=num_users)
    fallback = np.zeros(num_users, dtype=np.float64)
    np.divide(life_hits, life_counts, out=fallback, where=life_counts > 0)

    personal = np.tile(fallback[:, None], (1, num_steps))
    for t in range(num_steps):
        lo = np.searchsorted(steps, t - window_steps + 1, side="left")
        hi = np.searchsorted(steps, t, side="right")
        if lo == hi:
            continue
        w_users = users[lo:hi]
        w_items = items[lo:hi]
        counts = np.bincount(w_users, minlength=num_users)
        popular = pop.local[w_items, t] > threshold[t]
        hits = np.bincount(w_users[popular], minlength=num_users)
        active = counts > 0
        personal[active, t] = hits[active] / counts[active]
    return PersonalPopularityTable(personal, threshold, quantile)


def write_stats_csv(
    pop: PopularityTable, pers: PersonalPopularityTable, outdir: str | Path
) -> None:
    """Export the tables as flat CSVs (dense over items/users x steps)."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    num_items, num_steps = pop.local.shape
    with open(outdir / "local_popularity.csv", "w", encoding="utf-8") as fh:
        fh.write("step,item_id,local_pop\n")
        for t in range(num_steps):
            for i in range(num_items):
                fh.write(f"{t},{i},{float(pop.local[i, t])!r}\n")
    num_users = pers.personal.shape[0]
    with open(outdir / "personal_popularity.csv", "w", encoding="utf-8") as fh:
        fh.write("step,user_id,personal_pop\n")
        for t in range(num_steps):
            for u in range(num_users):
                fh.write(f"{t},{u},{float(pers.personal[u, t])!r}\n")
    with open(outdir / "thresholds.csv", "w", encoding="utf-8") as fh:
        fh.write("step,threshold\n")
        for t in range(num_steps):
            fh.write(f"{t},{float(pers.threshold[t])!r}\n")
