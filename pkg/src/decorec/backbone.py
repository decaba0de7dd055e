"""Model parameters and the score factors: matching score from MF or
LightGCN-style propagation, per-item quality, the item MLP, the consistency
weight, the conformity effect, and the gated prediction score."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .corpus import Interaction

MF = "mf"
LIGHTGCN = "lightgcn"

_MAGIC = b"DRECCKPT"
_VERSION = 1


@dataclass
class ModelParams:
    """Everything the optimizer updates. hidden = max(dim // 2, 1); mlp_b2 is
    stored as a length-1 array so all parameters are ndarrays."""

    user_emb: np.ndarray
    item_emb: np.ndarray
    quality: np.ndarray
    mlp_w1: np.ndarray
    mlp_b1: np.ndarray
    mlp_w2: np.ndarray
    mlp_b2: np.ndarray
    backbone_kind: str = MF
    num_layers: int = 2

    @property
    def num_users(self) -> int:
        return self.user_emb.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_emb.shape[0]

    @property
    def dim(self) -> int:
        return self.user_emb.shape[1]


@dataclass
class PropagatedEmbeddings:
    """Final embeddings after graph propagation (MF: the base embeddings).
    Keeps the normalized adjacency so gradients can flow back through the
    propagation."""

    user_final: np.ndarray
    item_final: np.ndarray
    adj: sp.csr_matrix | None
    num_layers: int
    isolated: np.ndarray | None  # joint (num_users + num_items,) bool mask


PARAM_FIELDS = ("user_emb", "item_emb", "quality", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2")


def param_dict(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: getattr(params, name) for name in PARAM_FIELDS}


def zeros_like_params(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(getattr(params, name)) for name in PARAM_FIELDS}


def init_params(
    num_users: int,
    num_items: int,
    dim: int,
    backbone_kind: str = MF,
    seed: int = 0,
    num_layers: int = 2,
) -> ModelParams:
    """Embeddings and MLP weights ~ Normal(0, 0.1/sqrt(dim)); quality and MLP
    biases start at zero. Deterministic given the seed."""
    if num_users <= 0 or num_items <= 0 or dim < 1:
        raise ValueError("num_users, num_items and dim must be positive")
    if backbone_kind not in (MF, LIGHTGCN):
        raise ValueError(f"unknown backbone_kind {backbone_kind!r}")
    rng = np.random.default_rng(seed)
    scale = 0.1 / np.sqrt(dim)
    hidden = max(dim // 2, 1)
    return ModelParams(
        user_emb=rng.normal(0.0, scale, size=(num_users, dim)),
        item_emb=rng.normal(0.0, scale, size=(num_items, dim)),
        quality=np.zeros(num_items),
        mlp_w1=rng.normal(0.0, scale, size=(dim, hidden)),
        mlp_b1=np.zeros(hidden),
        mlp_w2=rng.normal(0.0, scale, size=hidden),
        mlp_b2=np.zeros(1),
        backbone_kind=backbone_kind,
        num_layers=num_layers,
    )


def build_adjacency(
    train: list[Interaction], num_users: int, num_items: int
) -> sp.csr_matrix:
    """Symmetric-normalized joint adjacency over user rows then item rows.

    Each distinct (user, item) pair contributes one edge with weight
    1 / sqrt(|N_u| * |N_i|), where neighborhoods count distinct partners.
    """
    pairs = {(x.user, x.item) for x in train}
    n = num_users + num_items
    if not pairs:
        return sp.csr_matrix((n, n))
    users = np.fromiter((u for u, _ in pairs), dtype=np.int64, count=len(pairs))
    items = np.fromiter((i for _, i in pairs), dtype=np.int64, count=len(pairs))
    deg_u = np.bincount(users, minlength=num_users)
    deg_i = np.bincount(items, minlength=num_items)
    weights = 1.0 / np.sqrt(deg_u[users] * deg_i[items])
    rows = np.concatenate([users, items + num_users])
    cols = np.concatenate([items + num_users, users])
    data = np.concatenate([weights, weights])
    return sp.csr_matrix((data, (rows, cols)), shape=(n, n))


def propagate(params: ModelParams, adj: sp.csr_matrix | None = None) -> PropagatedEmbeddings:
    """MF: identity. LightGCN: mean of layers 0..K of normalized neighbor
    aggregation; isolated nodes keep their base embedding."""
    if params.backbone_kind == MF or params.num_layers == 0:
        return PropagatedEmbeddings(
            params.user_emb, params.item_emb, adj, params.num_layers, None
        )
    if adj is None:
        raise ValueError("LightGCN propagation requires the training adjacency")
    base = np.vstack([params.user_emb, params.item_emb])
    acc = base.copy()
    cur = base
    for _ in range(params.num_layers):
        cur = adj @ cur
        acc += cur
    final = acc / (params.num_layers + 1)
    isolated = np.asarray(adj.sum(axis=1)).ravel() == 0.0
    final[isolated] = base[isolated]
    nu = params.num_users
    return PropagatedEmbeddings(final[:nu], final[nu:], adj, params.num_layers, isolated)


def matching_score(prop: PropagatedEmbeddings, u: int, i: int) -> float:
    return float(prop.user_final[u] @ prop.item_final[i])


def mlp_forward(params: ModelParams, item_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched item MLP on the base item embeddings.

    Returns (output, hidden) where hidden is the tanh activation, kept for
    backpropagation.
    """
    emb = params.item_emb[item_ids]
    hidden = np.tanh(emb @ params.mlp_w1 + params.mlp_b1)
    out = hidden @ params.mlp_w2 + params.mlp_b2[0]
    return out, hidden


def item_mlp(params: ModelParams, i: int) -> float:
    """Scalar quality-modulation path: w2 . tanh(w1^T e_i + b1) + b2."""
    out, _ = mlp_forward(params, np.array([i]))
    return float(out[0])


def softplus(x):
    """ln(1 + e^x) computed stably for large |x|."""
    return np.logaddexp(0.0, x)


def consistency_score(s, p, alpha: float):
    """exp(-alpha * |s - p|); 1 when the gap is zero or alpha is 0."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    return np.exp(-alpha * np.abs(np.asarray(s, dtype=np.float64) - p))


def conformity(params: ModelParams, i: int, s_value: float, p_value: float, alpha: float) -> float:
    """Popularity-alignment effect: consistency * popularity * MLP(i).

    Training passes (personal popularity at the click step, average local
    popularity); intervened inference passes the forecasted values.
    """
    if p_value < 0:
        raise ValueError("p_value must be >= 0")
    return float(consistency_score(s_value, p_value, alpha) * p_value * item_mlp(params, i))


def predict_score(
    params: ModelParams, prop: PropagatedEmbeddings, u: int, i: int, c_value: float
) -> float:
    """tanh(q_i + c) * softplus(m_ui)."""
    gate = np.tanh(params.quality[i] + c_value)
    return float(gate * softplus(matching_score(prop, u, i)))


# ---------------------------------------------------------------------------
# Checkpoints: magic, version, shape header, then the parameter arrays as
# little-endian float64 in PARAM_FIELDS order. A key=value sidecar at
# <path>.meta records backbone_kind, dim, num_layers, alpha and extras.
# ---------------------------------------------------------------------------


def save_checkpoint(
    params: ModelParams,
    path: str | Path,
    alpha: float,
    extra: dict[str, str] | None = None,
) -> None:
    path = Path(path)
    hidden = params.mlp_b1.shape[0]
    header = struct.pack(
        "<4Q", params.num_users, params.num_items, params.dim, hidden
    )
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(header)
        for name in PARAM_FIELDS:
            fh.write(np.ascontiguousarray(getattr(params, name), dtype="<f8").tobytes())
    lines = [
        f"backbone_kind={params.backbone_kind}",
        f"dim={params.dim}",
        f"num_layers={params.num_layers}",
        f"alpha={alpha!r}",
    ]
    for key, value in (extra or {}).items():
        lines.append(f"{key}={value}")
    Path(str(path) + ".meta").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict[str, str]]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    offset = len(_MAGIC)
    (version,) = struct.unpack_from("<I", raw, offset)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset += 4
    num_users, num_items, dim, hidden = struct.unpack_from("<4Q", raw, offset)
    offset += 32

    shapes = {
        "user_emb": (num_users, dim),
        "item_emb": (num_items, dim),
        "quality": (num_items,),
        "mlp_w1": (dim, hidden),
        "mlp_b1": (hidden,),
        "mlp_w2": (hidden,),
        "mlp_b2": (1,),
    }
    arrays = {}
    for name in PARAM_FIELDS:
        shape = shapes[name]
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += count * 8

    meta: dict[str, str] = {}
    for line in Path(str(path) + ".meta").read_text(encoding="utf-8").splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            meta[key] = value
    params = ModelParams(
        **arrays,
        backbone_kind=meta.get("backbone_kind", MF),
        num_layers=int(meta.get("num_layers", "0")),
    )
    return params, meta
