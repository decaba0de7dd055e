"""Interaction-log ingestion, time grid construction, chronological splitting,
and a synthetic conformity-driven click generator used for verification."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ParseError(ValueError):
    """Raised when an input row cannot be parsed; message carries the line number."""


class EmptyDatasetError(ValueError):
    """Raised when filtering or splitting leaves no usable interactions."""


@dataclass(frozen=True)
class Interaction:
    """One (user, item, timestamp) click event; rating is carried but unused."""

    user: int
    item: int
    timestamp: int
    rating: float | None = None


@dataclass(frozen=True)
class TimeGrid:
    """Uniform binning of timestamps into discrete steps over the training range."""

    origin: int
    step_duration: int
    num_steps: int
    last_train_step: int

    def step_of(self, timestamp: int) -> int:
        return (timestamp - self.origin) // self.step_duration

    def clamped_step_of(self, timestamp: int) -> int:
        """Step index clamped to [0, last_train_step]; use for statistic lookups."""
        return min(max(self.step_of(timestamp), 0), self.last_train_step)


@dataclass
class SplitDataset:
    train: list[Interaction]
    validation: list[Interaction]
    test: list[Interaction]
    grid: TimeGrid
    num_users: int
    num_items: int


@dataclass
class SynthGroundTruth:
    """What the generator actually used, kept so tests can check against it.

    preference: (num_users, num_items) affinity in [0, 1].
    conformity_weight: (num_users, num_steps) mixing weight in [0, 1].
    item_quality_true: (num_items,) intrinsic item appeal scaled to [0, 1].
    """

    preference: np.ndarray
    conformity_weight: np.ndarray
    item_quality_true: np.ndarray


@dataclass
class SynthConfig:
    """Settings for the synthetic click generator.

    Each event at step t picks a user uniformly, then draws an item from
    (1 - w_u^t) * preference(u, .) + w_u^t * recent_popularity(., t).
    Optionally a block of tail items gets a linearly ramping appeal boost in
    the final steps, so their popularity trends upward into the test period.
    """

    num_users: int
    num_items: int
    num_steps: int = 100
    events_per_step: int = 200
    tail_exponent: float = 1.5
    preference_appeal: float = 0.3  # appeal damping inside preference rows
    taste_sharpness: float = 3.0  # higher -> sharper per-user niches
    conformity_kind: str = "constant"  # "constant" or "linear"
    conformity_value: float = 0.6
    conformity_end: float | None = None  # linear schedule endpoint
    conformity_user_spread: float = 0.0
    gen_window_steps: int = 10
    trend_items: int = 0
    trend_start: int = 80
    trend_boost: float = 1.0
    step_seconds: int = 86400
    num_parts: int = 10
    grid_steps: int | None = None  # defaults to num_steps


def _sniff_delimiter(line: str) -> str:
    return "\t" if "\t" in line else ","


def _looks_like_header(fields: list[str]) -> bool:
    try:
        int(fields[0])
        int(fields[1])
        int(fields[3])
    except (ValueError, IndexError):
        return True
    return False


def _parse_rows(path: str | Path) -> list[tuple[str, str, float | None, int]]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        delim = None
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if delim is None:
                delim = _sniff_delimiter(line)
                if _looks_like_header(line.split(delim)):
                    continue
            fields = [f.strip() for f in line.split(delim)]
            if len(fields) != 4:
                raise ParseError(
                    f"line {lineno}: expected 4 columns (user, item, rating, timestamp), got {len(fields)}"
                )
            try:
                rating = float(fields[2]) if fields[2] else None
                rows.append((fields[0], fields[1], rating, int(fields[3])))
            except ValueError as exc:
                raise ParseError(f"line {lineno}: {exc}") from exc
    return rows


def _k_core_filter(rows, k: int):
    """Repeatedly drop users/items with fewer than k interactions until stable."""
    if k <= 0:
        return rows
    while rows:
        user_deg = Counter(r[0] for r in rows)
        item_deg = Counter(r[1] for r in rows)
        kept = [r for r in rows if user_deg[r[0]] >= k and item_deg[r[1]] >= k]
        if len(kept) == len(rows):
            return kept
        rows = kept
    return rows


def load_interactions_mapped(
    path: str | Path, k_core: int = 5
) -> tuple[list[Interaction], dict[str, int], dict[str, int]]:
    """Load a raw interaction file and return (interactions, user_map, item_map).

    Rows are `user_id, item_id, rating, timestamp` separated by tab or comma,
    with an optional header. Ids are remapped to dense 0-based integers in
    order of first appearance after sorting by timestamp; k-core filtering is
    applied iteratively before remapping.
    """
    rows = _parse_rows(path)
    rows = _k_core_filter(rows, k_core)
    if not rows:
        raise EmptyDatasetError(f"no interactions remain after {k_core}-core filtering")
    rows.sort(key=lambda r: r[3])
    user_map: dict[str, int] = {}
    item_map: dict[str, int] = {}
    out = []
    for user, item, rating, ts in rows:
        u = user_map.setdefault(user, len(user_map))
        i = item_map.setdefault(item, len(item_map))
        out.append(Interaction(u, i, ts, rating))
    return out, user_map, item_map


def load_interactions(path: str | Path, k_core: int = 5) -> list[Interaction]:
    """Like load_interactions_mapped but returns only the interaction list."""
    interactions, _, _ = load_interactions_mapped(path, k_core)
    return interactions


def build_grid(train: list[Interaction], num_steps: int) -> TimeGrid:
    """Grid over the training time range; every train timestamp maps into
    [0, num_steps - 1]."""
    ts_min = train[0].timestamp
    ts_max = train[-1].timestamp
    span = ts_max - ts_min + 1
    step_duration = max(1, math.ceil(span / num_steps))
    last = (ts_max - ts_min) // step_duration
    return TimeGrid(origin=ts_min, step_duration=step_duration, num_steps=num_steps, last_train_step=last)


def chronological_split(
    interactions: list[Interaction], num_parts: int = 10, num_steps: int = 100
) -> SplitDataset:
    """Split timestamp-sorted interactions into train/validation/test by count.

    The first (num_parts - 1)/num_parts of events become training data; the
    final part is split evenly between validation and test, validation taking
    the odd extra event. The time grid covers the training range only.
    """
    n = len(interactions)
    if num_parts < 2:
        raise ValueError("num_parts must be >= 2")
    if n < num_parts:
        raise EmptyDatasetError(f"need at least {num_parts} interactions, got {n}")
    for a, b in zip(interactions, interactions[1:]):
        if a.timestamp > b.timestamp:
            raise ValueError("interactions must be sorted by timestamp ascending")

    train_count = (num_parts - 1) * n // num_parts
    rest = n - train_count
    val_count = rest - rest // 2
    train = interactions[:train_count]
    validation = interactions[train_count : train_count + val_count]
    test = interactions[train_count + val_count :]

    grid = build_grid(train, num_steps)
    num_users = max(x.user for x in interactions) + 1
    num_items = max(x.item for x in interactions) + 1
    return SplitDataset(train, validation, test, grid, num_users, num_items)


def interactions_to_arrays(interactions: list[Interaction]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(users, items, timestamps) as int64 arrays, in list order."""
    users = np.fromiter((x.user for x in interactions), dtype=np.int64, count=len(interactions))
    items = np.fromiter((x.item for x in interactions), dtype=np.int64, count=len(interactions))
    ts = np.fromiter((x.timestamp for x in interactions), dtype=np.int64, count=len(interactions))
    return users, items, ts


def _conformity_matrix(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    steps = np.arange(cfg.num_steps, dtype=np.float64)
    if cfg.conformity_kind == "constant":
        base = np.full(cfg.num_steps, cfg.conformity_value)
    elif cfg.conformity_kind == "linear":
        end = cfg.conformity_value if cfg.conformity_end is None else cfg.conformity_end
        denom = max(cfg.num_steps - 1, 1)
        base = cfg.conformity_value + (end - cfg.conformity_value) * steps / denom
    else:
        raise ValueError(f"unknown conformity_kind {cfg.conformity_kind!r}")
    weights = np.tile(base, (cfg.num_users, 1))
    if cfg.conformity_user_spread > 0:
        offsets = cfg.conformity_user_spread * (rng.uniform(size=cfg.num_users) * 2.0 - 1.0)
        weights = weights + offsets[:, None]
    return np.clip(weights, 0.0, 1.0)


def _trend_boost(cfg: SynthConfig, step: int, trend_idx: np.ndarray) -> np.ndarray | None:
    """Per-item appeal multiplier at `step`, or None when no boost applies."""
    if trend_idx.size == 0 or step < cfg.trend_start or cfg.trend_boost == 1.0:
        return None
    denom = max(cfg.num_steps - cfg.trend_start, 1)
    frac = (step - cfg.trend_start + 1) / denom
    boost = np.ones(cfg.num_items)
    boost[trend_idx] = 1.0 + (cfg.trend_boost - 1.0) * frac
    return boost


def generate_synthetic(cfg: SynthConfig, seed: int) -> tuple[SplitDataset, SynthGroundTruth]:
    """Generate a conformity-driven synthetic dataset plus its ground truth.

    Deterministic given (cfg, seed). Item base appeal follows a power law with
    exponent cfg.tail_exponent; each click mixes the user's preference row with
    the recent-window item popularity according to the user's conformity
    weight. When the popularity window is still empty the appeal distribution
    is used in its place.
    """
    if cfg.num_users <= 0 or cfg.num_items <= 0:
        raise ValueError("num_users and num_items must be positive")
    rng = np.random.default_rng(seed)

    ranks = np.arange(1, cfg.num_items + 1, dtype=np.float64)
    appeal = ranks ** (-cfg.tail_exponent)
    appeal = appeal[rng.permutation(cfg.num_items)]
    quality_true = appeal / appeal.max()

    # Preferences damp the global appeal and add sharp per-user niches, so
    # taste and popularity diverge; the conformity path below still follows
    # the full long tail.
    taste = rng.uniform(size=(cfg.num_users, cfg.num_items)) ** cfg.taste_sharpness
    preference = appeal[None, :] ** cfg.preference_appeal * (0.05 + 0.95 * taste)
    preference = preference / preference.max()

    weights = _conformity_matrix(cfg, rng)

    # Tail items (below-median appeal) are eligible for the ramping boost.
    trend_idx = np.empty(0, dtype=np.int64)
    if cfg.trend_items > 0:
        order = np.argsort(appeal)
        tail = order[: cfg.num_items // 2]
        trend_idx = rng.choice(tail, size=min(cfg.trend_items, tail.size), replace=False)

    appeal_cdf = np.cumsum(appeal / appeal.sum())
    pref_cdf = np.cumsum(preference / preference.sum(axis=1, keepdims=True), axis=1)

    step_counts = np.zeros((cfg.num_steps, cfg.num_items), dtype=np.int64)
    events: list[Interaction] = []
    for t in range(cfg.num_steps):
        boost = _trend_boost(cfg, t, trend_idx)
        if boost is None:
            step_pref_cdf = pref_cdf
            step_appeal_cdf = appeal_cdf
        else:
            boosted = preference * boost[None, :]
            step_pref_cdf = np.cumsum(boosted / boosted.sum(axis=1, keepdims=True), axis=1)
            boosted_appeal = appeal * boost
            step_appeal_cdf = np.cumsum(boosted_appeal / boosted_appeal.sum())

        lo = max(0, t - cfg.gen_window_steps)
        window = step_counts[lo:t].sum(axis=0)
        total = window.sum()
        pop_cdf = np.cumsum(window / total) if total > 0 else step_appeal_cdf

        for e in range(cfg.events_per_step):
            u = int(rng.integers(cfg.num_users))
            cdf = pop_cdf if rng.random() < weights[u, t] else step_pref_cdf[u]
            i = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
            i = min(i, cfg.num_items - 1)
            step_counts[t, i] += 1
            ts = t * cfg.step_seconds + e * cfg.step_seconds // cfg.events_per_step
            events.append(Interaction(u, i, ts, 1.0))

    grid_steps = cfg.grid_steps if cfg.grid_steps is not None else cfg.num_steps
    split = chronological_split(events, num_parts=cfg.num_parts, num_steps=grid_steps)
    # Config sizes are authoritative: rarely-clicked users/items still exist.
    split.num_users = cfg.num_users
    split.num_items = cfg.num_items
    truth = SynthGroundTruth(preference, weights, quality_true)
    return split, truth


# ---------------------------------------------------------------------------
# Split manifests: three data files plus a flat sidecar with grid parameters
# and (optionally) the original-to-dense id maps.
# ---------------------------------------------------------------------------

_SPLIT_FILES = {"train": "train.tsv", "validation": "validation.tsv", "test": "test.tsv"}
SIDECAR_NAME = "split_info.txt"


def _write_part(path: Path, interactions: list[Interaction]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for x in interactions:
            rating = "" if x.rating is None else repr(x.rating)
            fh.write(f"{x.user}\t{x.item}\t{rating}\t{x.timestamp}\n")


def write_split(
    split: SplitDataset,
    outdir: str | Path,
    user_map: dict[str, int] | None = None,
    item_map: dict[str, int] | None = None,
) -> None:
    """Write train/validation/test files plus the grid/id sidecar."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for name, fname in _SPLIT_FILES.items():
        _write_part(outdir / fname, getattr(split, name))
    lines = [
        f"num_users={split.num_users}",
        f"num_items={split.num_items}",
        f"grid.origin={split.grid.origin}",
        f"grid.step_duration={split.grid.step_duration}",
        f"grid.num_steps={split.grid.num_steps}",
        f"grid.last_train_step={split.grid.last_train_step}",
    ]
    for section, mapping in (("user_map", user_map), ("item_map", item_map)):
        if mapping:
            lines.append(f"[{section}]")
            lines.extend(f"{orig}\t{dense}" for orig, dense in mapping.items())
    (outdir / SIDECAR_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_part(path: Path) -> list[Interaction]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            u, i, rating, ts = line.split("\t")
            out.append(Interaction(int(u), int(i), int(ts), float(rating) if rating else None))
    return out


def read_split(indir: str | Path) -> SplitDataset:
    """Read a split previously written by write_split."""
    indir = Path(indir)
    meta: dict[str, str] = {}
    for line in (indir / SIDECAR_NAME).read_text(encoding="utf-8").splitlines():
        if line.startswith("["):
            break
        if "=" in line:
            key, value = line.split("=", 1)
            meta[key] = value
    grid = TimeGrid(
        origin=int(meta["grid.origin"]),
        step_duration=int(meta["grid.step_duration"]),
        num_steps=int(meta["grid.num_steps"]),
        last_train_step=int(meta["grid.last_train_step"]),
    )
    parts = {name: _read_part(indir / fname) for name, fname in _SPLIT_FILES.items()}
    return SplitDataset(
        parts["train"],
        parts["validation"],
        parts["test"],
        grid,
        int(meta["num_users"]),
        int(meta["num_items"]),
    )


def write_ground_truth(truth: SynthGroundTruth, path: str | Path) -> None:
    np.savez(
        path,
        preference=truth.preference,
        conformity_weight=truth.conformity_weight,
        item_quality_true=truth.item_quality_true,
    )


def read_ground_truth(path: str | Path) -> SynthGroundTruth:
    data = np.load(path)
    return SynthGroundTruth(
        data["preference"], data["conformity_weight"], data["item_quality_true"]
    )
