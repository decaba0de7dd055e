"""Command-line entry point: data preparation, statistics, training,
recommendation, evaluation, intervention sweeps, and plot-data export.

Commands read defaults from a flat key=value config file (path from --config
or the DECOREC_CONFIG environment variable); command-line flags override file
values, which override built-in defaults. Diagnostics go to stderr, data to
files; exit code 0 means the command completed.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import backbone, corpus, evaluation, forecast, inference, popstats, training

CONFIG_ENV = "DECOREC_CONFIG"
SECONDS_PER_MONTH = int(30.4375 * 86400)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def load_config_file(path: str | Path) -> dict[str, str]:
    """Flat key=value lines; blank lines and #-comments are ignored."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise corpus.ParseError(f"config line {lineno}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _apply_config_defaults(parsers, argv: list[str]) -> None:
    """Overlay config-file values as defaults on every (sub)parser, so the
    precedence ends up flags > file > built-in defaults."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv)
    path = known.config or os.environ.get(CONFIG_ENV)
    if not path:
        return
    raw = load_config_file(path)
    for parser in parsers:
        defaults = {}
        for action in parser._actions:
            if action.dest in raw:
                value = raw[action.dest]
                if action.type is not None:
                    value = action.type(value)
                elif isinstance(action.const, bool) or isinstance(action.default, bool):
                    value = value.lower() in ("1", "true", "yes")
                defaults[action.dest] = value
        parser.set_defaults(**defaults)


def _window_steps(args, grid) -> int:
    if getattr(args, "window_steps", None):
        return args.window_steps
    return popstats.window_steps_from_seconds(grid, args.window_months * SECONDS_PER_MONTH)


def _ma_window(args, grid) -> int:
    if getattr(args, "ma_window", None):
        return args.ma_window
    return max(1, round(args.ma_window_frac * grid.num_steps))


def _build_stats(split, window_steps: int, quantile: float):
    pop = popstats.local_popularity(split.train, split.grid, window_steps, split.num_items)
    pers = popstats.personal_popularity(
        split.train, pop, split.grid, window_steps, quantile, split.num_users
    )
    return pop, pers


def _synth_config(args) -> corpus.SynthConfig:
    return corpus.SynthConfig(
        num_users=args.synth_users,
        num_items=args.synth_items,
        num_steps=args.synth_steps,
        events_per_step=args.synth_events_per_step,
        tail_exponent=args.tail_exponent,
        conformity_kind=args.conformity_kind,
        conformity_value=args.conformity,
        conformity_end=args.conformity_end,
        conformity_user_spread=args.conformity_user_spread,
        trend_items=args.trend_items,
        trend_start=args.trend_start,
        trend_boost=args.trend_boost,
        num_parts=args.num_parts,
        grid_steps=args.num_steps,
    )


def cmd_prepare(args) -> int:
    outdir = Path(args.out)
    if args.synth:
        cfg = _synth_config(args)
        split, truth = corpus.generate_synthetic(cfg, args.seed)
        outdir.mkdir(parents=True, exist_ok=True)
        corpus.write_split(split, outdir)
        corpus.write_ground_truth(truth, outdir / "ground_truth.npz")
        _log(
            f"synthetic: {len(split.train)} train / {len(split.validation)} val / "
            f"{len(split.test)} test events"
        )
        return 0
    if not args.input:
        raise ValueError("prepare requires --input unless --synth is given")
    interactions, user_map, item_map = corpus.load_interactions_mapped(args.input, args.k_core)
    split = corpus.chronological_split(interactions, args.num_parts, args.num_steps)
    corpus.write_split(split, outdir, user_map, item_map)
    _log(
        f"prepared {split.num_users} users x {split.num_items} items: "
        f"{len(split.train)} train / {len(split.validation)} val / {len(split.test)} test"
    )
    return 0


def cmd_stats(args) -> int:
    split = corpus.read_split(args.data)
    window = _window_steps(args, split.grid)
    pop, pers = _build_stats(split, window, args.quantile)
    popstats.write_stats_csv(pop, pers, args.out)
    _log(f"stats written to {args.out} (window={window} steps)")
    return 0


def cmd_train(args) -> int:
    split = corpus.read_split(args.data)
    window = _window_steps(args, split.grid)
    pop, pers = _build_stats(split, window, args.quantile)
    cfg = training.TrainConfig(
        mode=args.mode,
        alpha=args.alpha,
        quality_weight=args.quality_weight,
        dim=args.dim,
        lr=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        negatives_per_positive=args.negatives,
        seed=args.seed,
        no_quality=args.no_quality,
        no_consistency=args.no_consistency,
        ips_cap=args.ips_cap,
        backbone_kind=args.backbone,
        num_layers=args.num_layers,
        eval_k=args.k,
        patience=args.patience,
    )
    params, report = training.train(split, pop, pers, cfg)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    extra = {
        "mode": cfg.mode,
        "no_quality": str(cfg.no_quality).lower(),
        "no_consistency": str(cfg.no_consistency).lower(),
        "window_steps": str(window),
        "quantile": repr(args.quantile),
        "seed": str(cfg.seed),
    }
    backbone.save_checkpoint(params, outdir / "model.ckpt", cfg.alpha, extra)
    training.write_report(report, outdir / "train_report.tsv")
    if cfg.mode == training.IPS:
        weights = training.ips_weights(pop.global_counts, cfg.ips_cap)
        _log(
            f"ips weights: min={weights.min():.4f} max={weights.max():.4f} cap={cfg.ips_cap}"
        )
    last = report.epochs[-1]
    _log(
        f"trained {len(report.epochs)} epochs in {report.wall_clock_seconds:.1f}s; "
        f"final loss {last.total_loss:.4f}, val recall@{cfg.eval_k} {last.val_recall:.4f}"
    )
    return 0


def _load_model(args, split):
    params, meta = backbone.load_checkpoint(args.checkpoint)
    window = int(meta.get("window_steps") or _window_steps(args, split.grid))
    quantile = float(meta.get("quantile", args.quantile))
    pop, pers = _build_stats(split, window, quantile)
    adj = None
    if params.backbone_kind == backbone.LIGHTGCN:
        adj = backbone.build_adjacency(split.train, split.num_users, split.num_items)
    prop = backbone.propagate(params, adj)
    setup = {
        "score_kind": meta.get("mode", training.DECONFOUNDED),
        "no_quality": meta.get("no_quality", "false") == "true",
        "no_consistency": meta.get("no_consistency", "false") == "true",
        "alpha": float(meta.get("alpha", "0.5")),
    }
    return params, prop, pop, pers, setup


def _plan_for(args, split, pop, pers):
    w2 = _ma_window(args, split.grid)
    return forecast.build_intervention(
        pop, pers, split.grid, w2, args.delta_item, args.delta_user, args.slope_estimator
    )


def _rank_for_users(args, split, users, mode, plan=None, alpha=None, delta=None):
    params, prop, pop, pers, setup = _load_model(args, split)
    if mode == inference.INTERVENED and plan is None:
        plan = _plan_for(args, split, pop, pers)
    exclude = training.interacted_sets(split)
    return inference.rank_users(
        params,
        prop,
        users,
        pop,
        pers,
        split.grid,
        mode=mode,
        plan=plan,
        alpha=alpha if alpha is not None else setup["alpha"],
        k=args.k,
        exclude=exclude,
        score_kind=setup["score_kind"],
        no_quality=setup["no_quality"],
        no_consistency=setup["no_consistency"],
        grid_p=args.grid_p,
        grid_s=args.grid_s,
    )


def _test_truth(split) -> dict[int, set[int]]:
    truth: dict[int, set[int]] = {}
    for x in split.test:
        truth.setdefault(x.user, set()).add(x.item)
    return truth


def cmd_recommend(args) -> int:
    split = corpus.read_split(args.data)
    users = range(split.num_users) if args.users is None else [
        int(u) for u in args.users.split(",")
    ]
    rankings = _rank_for_users(args, split, users, args.mode)
    inference.write_recommendations(rankings, args.out)
    _log(f"wrote rankings for {len(rankings)} users to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    split = corpus.read_split(args.data)
    truth = _test_truth(split)
    rankings = _rank_for_users(args, split, sorted(truth), args.mode)
    report = evaluation.metrics(rankings, truth, args.k)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    evaluation.write_metrics(report, outdir / ("metrics.csv" if args.csv else "metrics.txt"), args.csv)
    pop = popstats.local_popularity(split.train, split.grid, 1, split.num_items)
    bias = evaluation.bias_report(rankings, pop.global_counts, truth)
    evaluation.write_bias_report(
        bias, outdir / ("bias_report.csv" if args.csv else "bias_report.txt"), args.csv
    )
    _log(
        f"recall@{args.k}={report.recall_at_k:.4f} precision@{args.k}={report.precision_at_k:.4f} "
        f"ndcg@{args.k}={report.ndcg_at_k:.4f} popular_share={bias.popular_ratio_recommended:.3f}"
    )
    return 0


def cmd_bias_report(args) -> int:
    split = corpus.read_split(args.data)
    truth = _test_truth(split)
    rankings = _rank_for_users(args, split, sorted(truth), args.mode)
    pop = popstats.local_popularity(split.train, split.grid, 1, split.num_items)
    bias = evaluation.bias_report(rankings, pop.global_counts, truth)
    evaluation.write_bias_report(bias, args.out, args.csv)
    _log(
        f"popular_ratio_recommended={bias.popular_ratio_recommended:.4f} "
        f"ground_truth={bias.popular_ratio_ground_truth:.4f}"
    )
    return 0


def _parse_grid(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def cmd_sweep(args) -> int:
    split = corpus.read_split(args.data)
    truth = _test_truth(split)
    params, prop, pop, pers, setup = _load_model(args, split)
    exclude = training.interacted_sets(split)
    w2 = _ma_window(args, split.grid)
    rows = []
    for delta_item in _parse_grid(args.delta_items):
        for delta_user in _parse_grid(args.delta_users):
            plan = forecast.build_intervention(
                pop, pers, split.grid, w2, int(delta_item), int(delta_user), args.slope_estimator
            )
            for alpha in _parse_grid(args.alphas):
                rankings = inference.rank_users(
                    params,
                    prop,
                    sorted(truth),
                    pop,
                    pers,
                    split.grid,
                    mode=inference.INTERVENED,
                    plan=plan,
                    alpha=alpha,
                    k=args.k,
                    exclude=exclude,
                    score_kind=setup["score_kind"],
                    no_quality=setup["no_quality"],
                    no_consistency=setup["no_consistency"],
                )
                rep = evaluation.metrics(rankings, truth, args.k)
                rows.append(
                    f"{int(delta_item)},{int(delta_user)},{alpha!r},"
                    f"{rep.recall_at_k!r},{rep.precision_at_k!r},{rep.ndcg_at_k!r}"
                )
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("delta_item,delta_user,alpha,recall,precision,ndcg\n")
        fh.write("\n".join(rows) + "\n")
    _log(f"sweep wrote {len(rows)} cells to {args.out}")
    return 0


def cmd_plotdata(args) -> int:
    split = corpus.read_split(args.data)
    window = _window_steps(args, split.grid)
    pop, pers = _build_stats(split, window, args.quantile)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)

    num_items, num_steps = pop.local.shape
    with open(outdir / "popularity_timeline.csv", "w", encoding="utf-8") as fh:
        fh.write("step,item_id,local_pop\n")
        for t in range(num_steps):
            for i in range(num_items):
                fh.write(f"{t},{i},{float(pop.local[i, t])!r}\n")

    w2 = _ma_window(args, split.grid)
    with open(outdir / "popularity_ma.csv", "w", encoding="utf-8") as fh:
        fh.write("step,item_id,ma\n")
        for t in range(num_steps):
            for i in range(num_items):
                value = forecast.moving_average(pop.local[i], w2, t)
                fh.write(f"{t},{i},{value!r}\n")

    if args.checkpoint:
        params, _ = backbone.load_checkpoint(args.checkpoint)
        with open(outdir / "quality_scatter.csv", "w", encoding="utf-8") as fh:
            fh.write("item_id,global_count,quality\n")
            for i in range(params.num_items):
                count = int(pop.global_counts[i]) if i < pop.global_counts.size else 0
                fh.write(f"{i},{count},{float(params.quality[i])!r}\n")
        truth = _test_truth(split)
        rankings = _rank_for_users(args, split, sorted(truth), args.mode)
        bias = evaluation.bias_report(rankings, pop.global_counts, truth)
        with open(outdir / "bias_bars.csv", "w", encoding="utf-8") as fh:
            fh.write("segment,ratio\n")
            fh.write(f"recommended_popular,{bias.popular_ratio_recommended!r}\n")
            fh.write(f"recommended_other,{1.0 - bias.popular_ratio_recommended!r}\n")
            fh.write(f"ground_truth_popular,{bias.popular_ratio_ground_truth!r}\n")
            fh.write(f"ground_truth_other,{1.0 - bias.popular_ratio_ground_truth!r}\n")
    _log(f"plot data written to {outdir}")
    return 0


def _add_window_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--window-months", type=float, default=6.0, help="popularity window (wall clock)")
    p.add_argument("--window-steps", type=int, default=None, help="popularity window in steps (overrides months)")
    p.add_argument("--quantile", type=float, default=0.20, help="high-popularity quantile")


def _add_infer_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", default=inference.NO_INTERVENTION, choices=inference.MODES)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--ma-window", type=int, default=None, help="smoothing window in steps")
    p.add_argument("--ma-window-frac", type=float, default=0.10, help="smoothing window as a fraction of the grid")
    p.add_argument("--delta-item", type=int, default=5, help="item forecast horizon (steps)")
    p.add_argument("--delta-user", type=int, default=10, help="user forecast horizon (steps)")
    p.add_argument("--slope-estimator", default="diff", choices=("diff", "regression"))
    p.add_argument("--grid-p", type=float, default=None)
    p.add_argument("--grid-s", type=float, default=None)
    _add_window_args(p)


def _add_prepare_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--k-core", type=int, default=5)
    p.add_argument("--num-parts", type=int, default=10)
    p.add_argument("--num-steps", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--synth-users", type=int, default=200)
    p.add_argument("--synth-items", type=int, default=300)
    p.add_argument("--synth-steps", type=int, default=100)
    p.add_argument("--synth-events-per-step", type=int, default=200)
    p.add_argument("--tail-exponent", type=float, default=1.5)
    p.add_argument("--conformity", type=float, default=0.6)
    p.add_argument("--conformity-kind", default="constant", choices=("constant", "linear"))
    p.add_argument("--conformity-end", type=float, default=None)
    p.add_argument("--conformity-user-spread", type=float, default=0.0)
    p.add_argument("--trend-items", type=int, default=0)
    p.add_argument("--trend-start", type=int, default=80)
    p.add_argument("--trend-boost", type=float, default=1.0)


def build_parser() -> tuple[argparse.ArgumentParser, list[argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="decorec", description=__doc__)
    parser.add_argument("--config", default=None, help=f"key=value config file (or ${CONFIG_ENV})")
    sub = parser.add_subparsers(dest="command", required=True)
    parsers = [parser]

    p = sub.add_parser("prepare", help="split an interaction log (or generate synthetic data)")
    parsers.append(p)
    _add_prepare_args(p)
    p.add_argument("--synth", action="store_true")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="alias of prepare --synth")
    parsers.append(p)
    _add_prepare_args(p)
    p.set_defaults(func=cmd_prepare, synth=True)

    p = sub.add_parser("stats", help="export popularity statistics")
    parsers.append(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_window_args(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train a model")
    parsers.append(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", default=training.DECONFOUNDED, choices=(training.DECONFOUNDED, training.PLAIN, training.IPS))
    p.add_argument("--backbone", default=backbone.MF, choices=(backbone.MF, backbone.LIGHTGCN))
    p.add_argument("--num-layers", type=int, default=2)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=8192)
    p.add_argument("--negatives", type=int, default=1)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--quality-weight", type=float, default=0.2)
    p.add_argument("--no-quality", action="store_true")
    p.add_argument("--no-consistency", action="store_true")
    p.add_argument("--ips-cap", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--patience", type=int, default=10)
    _add_window_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("recommend", help="write top-K rankings")
    parsers.append(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--users", default=None, help="comma-separated user ids (default: all)")
    _add_infer_args(p)
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("evaluate", help="metrics plus bias report on the test split")
    parsers.append(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", action="store_true")
    _add_infer_args(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bias-report", help="popular-item recommendation share")
    parsers.append(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", action="store_true")
    _add_infer_args(p)
    p.set_defaults(func=cmd_bias_report)

    p = sub.add_parser("sweep", help="grid over forecast horizons and alpha")
    parsers.append(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--delta-items", default="5")
    p.add_argument("--delta-users", default="10")
    p.add_argument("--alphas", default="0.5")
    _add_infer_args(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plotdata", help="CSVs for timelines, smoothing, quality and bias plots")
    parsers.append(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", required=True)
    _add_infer_args(p)
    p.set_defaults(func=cmd_plotdata)

    return parser, parsers


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, parsers = build_parser()
    try:
        _apply_config_defaults(parsers, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        _log(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
