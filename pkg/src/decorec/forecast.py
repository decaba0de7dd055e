"""Moving-average trend estimation and the forecast-based intervention values
used at inference time."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import TimeGrid
from .popstats import PersonalPopularityTable, PopularityTable


@dataclass
class InterventionPlan:
    """Forecasted popularity values substituted during intervened inference.

    p_star: (num_items,) forecasted local popularity, clamped to >= 0.
    s_star: (num_users,) forecasted personal popularity, clamped to [0, 1].
    delta_item / delta_user: extrapolation horizons in steps.
    ma_window: smoothing window length in steps.
    """

    p_star: np.ndarray
    s_star: np.ndarray
    delta_item: int
    delta_user: int
    ma_window: int


def moving_average(series, w2: int, t: int) -> float:
    """Mean of the last min(w2, t + 1) values of `series` ending at index t."""
    arr = np.asarray(series, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("series must be nonempty")
    if w2 < 1:
        raise ValueError("w2 must be >= 1")
    if not 0 <= t < arr.size:
        raise ValueError(f"t={t} outside series of length {arr.size}")
    lo = max(0, t - w2 + 1)
    return float(arr[lo : t + 1].mean())


def ma_slope(series, w2: int, t: int) -> float:
    """One-step backward difference of the moving-average line at index t."""
    arr = np.asarray(series, dtype=np.float64)
    if t == 0 or arr.size < 2:
        return 0.0
    return moving_average(arr, w2, t) - moving_average(arr, w2, t - 1)


def _ma_rows(matrix: np.ndarray, w2: int, t: int) -> np.ndarray:
    lo = max(0, t - w2 + 1)
    return matrix[:, lo : t + 1].mean(axis=1)


def _slope_rows(matrix: np.ndarray, w2: int, t: int, estimator: str) -> np.ndarray:
    """Trend of each row's moving-average line at step t."""
    if estimator == "diff":
        if t == 0:
            return np.zeros(matrix.shape[0])
        return _ma_rows(matrix, w2, t) - _ma_rows(matrix, w2, t - 1)
    if estimator == "regression":
        lo = max(0, t - w2 + 1)
        points = np.stack([_ma_rows(matrix, w2, k) for k in range(lo, t + 1)], axis=1)
        n = points.shape[1]
        if n < 2:
            return np.zeros(matrix.shape[0])
        x = np.arange(n, dtype=np.float64)
        xc = x - x.mean()
        yc = points - points.mean(axis=1, keepdims=True)
        return yc @ xc / (xc @ xc)
    raise ValueError(f"unknown slope estimator {estimator!r}")


def build_intervention(
    pop: PopularityTable,
    pers: PersonalPopularityTable,
    grid: TimeGrid,
    w2: int,
    delta_item: int = 5,
    delta_user: int = 10,
    estimator: str = "diff",
) -> InterventionPlan:
    """Extrapolate each popularity series past the last training step.

    Item forecasts are last value + trend * delta_item, clamped to >= 0; user
    forecasts use delta_user and clamp to [0, 1].
    """
    T = grid.last_train_step
    p_T = pop.local[:, T]
    s_T = pers.personal[:, T]
    p_slope = _slope_rows(pop.local[:, : T + 1], w2, T, estimator)
    s_slope = _slope_rows(pers.personal[:, : T + 1], w2, T, estimator)
    p_star = np.maximum(p_T + p_slope * delta_item, 0.0)
    s_star = np.clip(s_T + s_slope * delta_user, 0.0, 1.0)
    return InterventionPlan(p_star, s_star, delta_item, delta_user, w2)


def write_plan_csv(
    plan: InterventionPlan,
    pop: PopularityTable,
    pers: PersonalPopularityTable,
    grid: TimeGrid,
    outdir: str | Path,
    estimator: str = "diff",
) -> None:
    """Export the plan with the values it was derived from."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    T = grid.last_train_step
    p_slope = _slope_rows(pop.local[:, : T + 1], plan.ma_window, T, estimator)
    s_slope = _slope_rows(pers.personal[:, : T + 1], plan.ma_window, T, estimator)
    with open(outdir / "item_plan.csv", "w", encoding="utf-8") as fh:
        fh.write("item_id,p_T,slope,p_star\n")
        for i in range(plan.p_star.size):
            fh.write(
                f"{i},{float(pop.local[i, T])!r},{float(p_slope[i])!r},{float(plan.p_star[i])!r}\n"
            )
    with open(outdir / "user_plan.csv", "w", encoding="utf-8") as fh:
        fh.write("user_id,s_T,slope,s_star\n")
        for u in range(plan.s_star.size):
            fh.write(
                f"{u},{float(pers.personal[u, T])!r},{float(s_slope[u])!r},{float(plan.s_star[u])!r}\n"
            )
