"""Deconfounded BPR training: negative sampling, the pairwise ranking loss on
gated prediction scores plus the quality-ordering loss, analytic gradients,
and Adam updates. Also covers the plain-backbone and IPS baseline modes and
the ablation switches."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .backbone import (
    LIGHTGCN,
    MF,
    ModelParams,
    PropagatedEmbeddings,
    build_adjacency,
    init_params,
    mlp_forward,
    param_dict,
    propagate,
    softplus,
    zeros_like_params,
)
from .corpus import SplitDataset, interactions_to_arrays
from .popstats import PersonalPopularityTable, PopularityTable

DECONFOUNDED = "deconfounded"
PLAIN = "plain"
IPS = "ips"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    mode: str = DECONFOUNDED
    alpha: float = 0.5
    quality_weight: float = 0.2
    dim: int = 64
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 8192
    negatives_per_positive: int = 1
    seed: int = 0
    no_quality: bool = False
    no_consistency: bool = False
    ips_cap: float = 10.0
    l2_reg: float = 1e-4
    backbone_kind: str = MF
    num_layers: int = 2
    eval_k: int = 20
    patience: int = 10

    def validate(self) -> None:
        if self.mode not in (DECONFOUNDED, PLAIN, IPS):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.alpha < 0 or self.quality_weight < 0:
            raise ValueError("alpha and quality_weight must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 1 or self.batch_size < 1 or self.negatives_per_positive < 1:
            raise ValueError("epochs, batch_size and negatives_per_positive must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    bpr_loss: float
    quality_loss: float
    total_loss: float
    val_recall: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    wall_clock_seconds: float = 0.0


@dataclass
class Batch:
    """One mini-batch of (user, positive, step, negative) index arrays."""

    users: np.ndarray
    pos_items: np.ndarray
    steps: np.ndarray
    neg_items: np.ndarray


def sample_negative(u: int, rng: np.random.Generator, interacted, num_items: int) -> int:
    """Uniform draw over the items user u has not interacted with."""
    seen = interacted[u]
    if len(seen) >= num_items:
        raise ValueError(f"user {u} has interacted with every item")
    while True:
        j = int(rng.integers(num_items))
        if j not in seen:
            return j


def _sample_negatives(
    users: np.ndarray, rng: np.random.Generator, interacted, num_items: int
) -> np.ndarray:
    """Vectorized rejection sampling; each entry uniform over the complement."""
    out = rng.integers(0, num_items, size=users.size)
    while True:
        bad = np.fromiter(
            (out[k] in interacted[users[k]] for k in range(users.size)),
            dtype=bool,
            count=users.size,
        )
        n_bad = int(bad.sum())
        if n_bad == 0:
            return out
        out[bad] = rng.integers(0, num_items, size=n_bad)


def interacted_sets(dataset: SplitDataset) -> list[set[int]]:
    sets: list[set[int]] = [set() for _ in range(dataset.num_users)]
    for x in dataset.train:
        sets[x.user].add(x.item)
    return sets


def ips_weights(global_counts: np.ndarray, cap: float) -> np.ndarray:
    """Inverse normalized-popularity weights with max-capping."""
    max_d = global_counts.max()
    weights = np.full(global_counts.shape, cap, dtype=np.float64)
    seen = global_counts > 0
    weights[seen] = np.minimum(max_d / global_counts[seen], cap)
    return weights


def _gate_side(params, cfg, items, s_values, avg_local):
    """Forward pass of one pair side through conformity and the tanh gate.

    Returns everything the backward pass reuses.
    """
    p = avg_local[items]
    if cfg.no_consistency or cfg.alpha == 0.0:
        consistency = np.ones_like(p)
    else:
        consistency = np.exp(-cfg.alpha * np.abs(s_values - p))
    mlp_out, hidden = mlp_forward(params, items)
    c = consistency * p * mlp_out
    gate_in = c if cfg.no_quality else params.quality[items] + c
    gate = np.tanh(gate_in)
    return p, consistency, mlp_out, hidden, gate


def bpr_quality_loss(
    params: ModelParams,
    prop: PropagatedEmbeddings,
    batch: Batch,
    pop: PopularityTable,
    pers: PersonalPopularityTable,
    cfg: TrainConfig,
) -> tuple[float, float, float, dict[str, np.ndarray]]:
    """Mean pairwise loss over the batch and its analytic gradients.

    Returns (bpr_loss, quality_loss, total_loss, grads); the quality loss is
    already the unweighted mean, so total = bpr + quality_weight * quality.
    Deconfounded mode scores tanh(q + conformity) * softplus(m); plain and IPS
    modes rank the raw matching score, IPS weighting each pair by the
    positive item's capped inverse popularity.
    """
    users, pos, steps, neg = batch.users, batch.pos_items, batch.steps, batch.neg_items
    n_pairs = users.size
    grads = zeros_like_params(params)
    u_vec = prop.user_final[users]
    v_pos = prop.item_final[pos]
    v_neg = prop.item_final[neg]
    m_pos = np.einsum("bd,bd->b", u_vec, v_pos)
    m_neg = np.einsum("bd,bd->b", u_vec, v_neg)

    grad_user_final = np.zeros_like(prop.user_final)
    grad_item_final = np.zeros_like(prop.item_final)

    if cfg.mode in (PLAIN, IPS):
        if cfg.mode == IPS:
            weights = ips_weights(pop.global_counts, cfg.ips_cap)[pos]
        else:
            weights = np.ones(n_pairs)
        x = m_pos - m_neg
        bpr = float(np.sum(weights * softplus(-x)) / n_pairs)
        g = weights * (expit(x) - 1.0) / n_pairs
        np.add.at(grad_user_final, users, g[:, None] * (v_pos - v_neg))
        np.add.at(grad_item_final, pos, g[:, None] * u_vec)
        np.add.at(grad_item_final, neg, -g[:, None] * u_vec)
        _backprop_embeddings(params, prop, grad_user_final, grad_item_final, grads)
        total = bpr + _l2_term(params, grads, cfg)
        if not np.isfinite(total):
            raise FloatingPointError(f"non-finite BPR loss {total}")
        return bpr, 0.0, total, grads

    s_values = pers.personal[users, steps]
    sides = {
        "pos": (pos, _gate_side(params, cfg, pos, s_values, pop.avg_local), m_pos),
        "neg": (neg, _gate_side(params, cfg, neg, s_values, pop.avg_local), m_neg),
    }
    y = {}
    soft = {}
    sig = {}
    for name, (_, (_, _, _, _, gate), m) in sides.items():
        soft[name] = softplus(m)
        sig[name] = expit(m)
        y[name] = gate * soft[name]

    x = y["pos"] - y["neg"]
    bpr = float(np.sum(softplus(-x)) / n_pairs)
    g = (expit(x) - 1.0) / n_pairs  # dL/dy_pos; negate for the negative side

    for name, upstream in (("pos", g), ("neg", -g)):
        items, (p, consistency, mlp_out, hidden, gate), m = sides[name]
        d_gate = upstream * soft[name]
        d_m = upstream * gate * sig[name]
        d_gate_in = d_gate * (1.0 - gate**2)
        if not cfg.no_quality:
            np.add.at(grads["quality"], items, d_gate_in)
        d_mlp = d_gate_in * consistency * p
        grads["mlp_w2"] += hidden.T @ d_mlp
        grads["mlp_b2"][0] += d_mlp.sum()
        d_pre = d_mlp[:, None] * params.mlp_w2[None, :] * (1.0 - hidden**2)
        grads["mlp_w1"] += params.item_emb[items].T @ d_pre
        grads["mlp_b1"] += d_pre.sum(axis=0)
        np.add.at(grads["item_emb"], items, d_pre @ params.mlp_w1.T)

        np.add.at(grad_item_final, items, d_m[:, None] * u_vec)
        side_final = v_pos if name == "pos" else v_neg
        np.add.at(grad_user_final, users, d_m[:, None] * side_final)

    quality = 0.0
    if not cfg.no_quality and cfg.quality_weight > 0.0:
        sign = np.sign(pop.global_counts[pos] - pop.global_counts[neg]).astype(np.float64)
        xq = sign * (params.quality[pos] - params.quality[neg])
        quality = float(np.sum(softplus(-xq)) / n_pairs)
        gq = cfg.quality_weight * sign * (expit(xq) - 1.0) / n_pairs
        np.add.at(grads["quality"], pos, gq)
        np.add.at(grads["quality"], neg, -gq)

    _backprop_embeddings(params, prop, grad_user_final, grad_item_final, grads)
    total = bpr + cfg.quality_weight * quality + _l2_term(params, grads, cfg)
    if not np.isfinite(total):
        raise FloatingPointError(f"non-finite loss: bpr={bpr} quality={quality}")
    return bpr, quality, total, grads


def _l2_term(params: ModelParams, grads: dict[str, np.ndarray], cfg: TrainConfig) -> float:
    """Uniform weight decay over all parameters; keeps the quality shortcut
    from saturating the gate and BPR from memorizing small corpora."""
    if cfg.l2_reg <= 0.0:
        return 0.0
    total = 0.0
    arrays = param_dict(params)
    for name, arr in arrays.items():
        grads[name] += cfg.l2_reg * arr
        total += float((arr**2).sum())
    return 0.5 * cfg.l2_reg * total


def _backprop_embeddings(params, prop, grad_user_final, grad_item_final, grads):
    """Pull matching-score gradients on the final embeddings back to the base
    tables, through the propagation for LightGCN."""
    if params.backbone_kind == MF or prop.num_layers == 0 or prop.adj is None:
        grads["user_emb"] += grad_user_final
        grads["item_emb"] += grad_item_final
        return
    g = np.vstack([grad_user_final, grad_item_final])
    if prop.isolated is not None and prop.isolated.any():
        g_iso = g[prop.isolated].copy()
        g[prop.isolated] = 0.0
    else:
        g_iso = None
    acc = g.copy()
    cur = g
    for _ in range(prop.num_layers):
        cur = prop.adj @ cur
        acc += cur
    out = acc / (prop.num_layers + 1)
    if g_iso is not None:
        out[prop.isolated] = g_iso
    nu = params.num_users
    grads["user_emb"] += out[:nu]
    grads["item_emb"] += out[nu:]


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        return cls(zeros_like_params(params), zeros_like_params(params))


def adam_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    t: int,
) -> None:
    """In-place Adam update with bias correction; t is the 1-based step count."""
    arrays = param_dict(params)
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for name, grad in grads.items():
        state.m[name] = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * grad
        state.v[name] = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * grad**2
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        arrays[name] -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def train(
    dataset: SplitDataset,
    pop: PopularityTable,
    pers: PersonalPopularityTable,
    cfg: TrainConfig,
) -> tuple[ModelParams, TrainReport]:
    """Run mini-batch training, stopping early when validation recall has not
    improved for `patience` epochs. Returns the final parameters and the
    per-epoch report."""
    from .evaluation import metrics
    from .inference import NO_INTERVENTION, rank_users

    cfg.validate()
    started = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    params = init_params(
        dataset.num_users,
        dataset.num_items,
        cfg.dim,
        cfg.backbone_kind,
        seed=cfg.seed,
        num_layers=cfg.num_layers,
    )
    adj = None
    if cfg.backbone_kind == LIGHTGCN:
        adj = build_adjacency(dataset.train, dataset.num_users, dataset.num_items)

    users, items, ts = interactions_to_arrays(dataset.train)
    steps = np.minimum(
        np.maximum((ts - dataset.grid.origin) // dataset.grid.step_duration, 0),
        dataset.grid.num_steps - 1,
    )
    interacted = interacted_sets(dataset)

    val_truth: dict[int, set[int]] = {}
    for x in dataset.validation:
        val_truth.setdefault(x.user, set()).add(x.item)

    state = AdamState.for_params(params)
    report = TrainReport()
    best_recall = -1.0
    since_best = 0
    adam_t = 0
    n = users.size

    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n)
        if cfg.negatives_per_positive > 1:
            perm = np.repeat(perm, cfg.negatives_per_positive)
        sums = np.zeros(3)
        pairs = 0
        for start in range(0, perm.size, cfg.batch_size):
            sel = perm[start : start + cfg.batch_size]
            b_users = users[sel]
            negs = _sample_negatives(b_users, rng, interacted, dataset.num_items)
            batch = Batch(b_users, items[sel], steps[sel], negs)
            prop = propagate(params, adj)
            bpr, quality, total, grads = bpr_quality_loss(params, prop, batch, pop, pers, cfg)
            adam_t += 1
            adam_step(params, grads, state, cfg.lr, adam_t)
            sums += np.array([bpr, quality, total]) * sel.size
            pairs += sel.size

        val_recall = 0.0
        if val_truth:
            prop = propagate(params, adj)
            rankings = rank_users(
                params,
                prop,
                sorted(val_truth),
                pop,
                pers,
                dataset.grid,
                mode=NO_INTERVENTION,
                plan=None,
                alpha=cfg.alpha,
                k=cfg.eval_k,
                exclude=interacted,
                score_kind=cfg.mode,
                no_quality=cfg.no_quality,
                no_consistency=cfg.no_consistency,
            )
            val_recall = metrics(rankings, val_truth, cfg.eval_k).recall_at_k

        report.epochs.append(
            EpochRecord(
                epoch,
                float(sums[0] / pairs),
                float(sums[1] / pairs),
                float(sums[2] / pairs),
                float(val_recall),
            )
        )

        if val_truth:
            if val_recall >= best_recall:
                best_recall = val_recall
                since_best = 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    break

    report.wall_clock_seconds = time.perf_counter() - started
    return params, report


def write_report(report: TrainReport, path) -> None:
    """One record per epoch; timing is intentionally not written so repeated
    runs with the same seed produce identical files."""
    lines = ["epoch\tbpr_loss\tquality_loss\ttotal_loss\tval_recall"]
    for rec in report.epochs:
        lines.append(
            f"{rec.epoch}\t{rec.bpr_loss!r}\t{rec.quality_loss!r}\t"
            f"{rec.total_loss!r}\t{rec.val_recall!r}"
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
