"""GraphRec forward pass.

Two code paths compute the same function:

* the per-vector path (``item_space_user_factor``, ``predict_rating`` ...)
  walks one neighbour at a time with column vectors and reads like the math;
* :func:`forward_batch` computes a whole minibatch with gathers and segment
  reductions, deduplicating shared work (one ``g_v`` evaluation per distinct
  ``(item, rating)``, one item-space factor per distinct user node).

The target pair's own edge is never part of its aggregations: C(i) skips
item j and B(j) skips user i when predicting (i, j).
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import diffmath as dm
from .diffmath import Tape, Tensor
from .graphdata import NeighborView


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class AblationConfig:
    use_social: bool = True
    use_opinion: bool = True
    attn_item_on: bool = True
    attn_social_on: bool = True
    attn_user_on: bool = True

    @classmethod
    def variant(cls, name: str) -> AblationConfig:
        try:
            return cls(**VARIANTS[name.lower()])
        except KeyError:
            raise KeyError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}") from None

    def compose(self, other: AblationConfig) -> AblationConfig:
        """Switch off everything that is off in either config."""
        return AblationConfig(*(a and b for a, b in zip(asdict(self).values(), asdict(other).values())))


VARIANTS: dict[str, dict[str, bool]] = {
    "full": {},
    "sn": {"use_social": False},
    "opinion": {"use_opinion": False},
    "alpha": {"attn_item_on": False},
    "beta": {"attn_social_on": False},
    "alphabeta": {"attn_item_on": False, "attn_social_on": False},
    "mu": {"attn_user_on": False},
}


@dataclass(frozen=True)
class ModelShape:
    n_users: int
    n_items: int
    r_max: int = 5
    dim: int = 64
    mlp_depth: int = 3
    attn_hidden: int | None = None

    @property
    def hidden(self) -> int:
        return self.attn_hidden if self.attn_hidden is not None else self.dim

    def param_shapes(self) -> dict[str, tuple[int, int]]:
        d, h = self.dim, self.hidden
        shapes = {
            "user_emb": (self.n_users, d),
            "item_emb": (self.n_items, d),
            "opinion_emb": (self.r_max, d),
        }
        for mlp in ("fusion_v", "fusion_u", "combine", "predict"):
            for k in range(self.mlp_depth):
                shapes[f"{mlp}.{k}.W"] = (d, 2 * d if k == 0 else d)
                shapes[f"{mlp}.{k}.b"] = (d, 1)
        shapes["predict.w"] = (d, 1)
        for name in ("item", "social", "user"):
            shapes[f"attn_{name}.W1"] = (h, 2 * d)
            shapes[f"attn_{name}.b1"] = (h, 1)
            shapes[f"attn_{name}.w2"] = (h, 1)
            shapes[f"attn_{name}.b2"] = (1, 1)
            shapes[f"agg_{name}.W"] = (d, d)
            shapes[f"agg_{name}.b"] = (d, 1)
        return shapes


def is_bias(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in ("b", "b1", "b2")


@dataclass
class GraphRecParams:
    shape: ModelShape
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        expected = self.shape.param_shapes()
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise CheckpointError(f"parameter names do not match the model shape (missing {missing}, extra {extra})")
        for name, shp in expected.items():
            arr = self.tensors[name]
            if arr.shape != shp:
                raise CheckpointError(f"{name}: expected shape {shp}, got {arr.shape}")

    def copy(self) -> GraphRecParams:
        return GraphRecParams(self.shape, {k: v.copy() for k, v in self.tensors.items()})

    def attach(self, tape: Tape | None) -> Net:
        if tape is None:
            return bind({k: Tensor(v) for k, v in self.tensors.items()}, self.shape)
        return bind({k: tape.leaf(v, k) for k, v in self.tensors.items()}, self.shape)

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.tensors.values())


class Affine(NamedTuple):
    W: Tensor
    b: Tensor


class AttentionNet(NamedTuple):
    W1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


class Net(NamedTuple):
    """Structured view of one set of parameter tensors."""

    user_emb: Tensor
    item_emb: Tensor
    opinion_emb: Tensor
    fusion_v: list[Affine]
    fusion_u: list[Affine]
    combine: list[Affine]
    predict: list[Affine]
    predict_w: Tensor
    attn_item: AttentionNet
    attn_social: AttentionNet
    attn_user: AttentionNet
    agg_item: Affine
    agg_social: Affine
    agg_user: Affine
    r_max: int


def bind(t: dict[str, Tensor], shape: ModelShape) -> Net:
    def mlp(name):
        return [Affine(t[f"{name}.{k}.W"], t[f"{name}.{k}.b"]) for k in range(shape.mlp_depth)]

    def attn(name):
        return AttentionNet(t[f"attn_{name}.W1"], t[f"attn_{name}.b1"], t[f"attn_{name}.w2"], t[f"attn_{name}.b2"])

    return Net(
        t["user_emb"], t["item_emb"], t["opinion_emb"],
        mlp("fusion_v"), mlp("fusion_u"), mlp("combine"), mlp("predict"), t["predict.w"],
        attn("item"), attn("social"), attn("user"),
        Affine(t["agg_item.W"], t["agg_item.b"]),
        Affine(t["agg_social.W"], t["agg_social.b"]),
        Affine(t["agg_user.W"], t["agg_user.b"]),
        shape.r_max,
    )


# ---------------------------------------------------------------------------
# per-vector path


def _row(table: Tensor, k: int) -> Tensor:
    return dm.transpose(dm.gather_rows(table, np.array([k])))


def _affine_col(layer: Affine, x: Tensor) -> Tensor:
    return dm.add(dm.matmul(layer.W, x), layer.b)


def _mlp_col(layers: Sequence[Affine], x: Tensor) -> Tensor:
    for layer in layers:
        x = dm.relu(_affine_col(layer, x))
    return x


def _opinion(net: Net, rating: int, ablation: AblationConfig) -> Tensor:
    if not 1 <= rating <= net.r_max:
        raise ValueError(f"rating {rating} outside 1..{net.r_max}")
    if not ablation.use_opinion:
        return dm.zeros(net.opinion_emb.shape[1], 1)
    return _row(net.opinion_emb, rating - 1)


def opinion_aware_item_repr(item: int, rating: int, net: Net, ablation: AblationConfig = AblationConfig()) -> Tensor:
    """x_ia: the fusion MLP g_v applied to the item embedding stacked on the opinion embedding."""
    return _mlp_col(net.fusion_v, dm.concat(_row(net.item_emb, item), _opinion(net, rating, ablation)))


def opinion_aware_user_repr(user: int, rating: int, net: Net, ablation: AblationConfig = AblationConfig()) -> Tensor:
    """f_jt: the fusion MLP g_u applied to the user embedding stacked on the opinion embedding."""
    return _mlp_col(net.fusion_u, dm.concat(_row(net.user_emb, user), _opinion(net, rating, ablation)))


def _stack_scalars(parts: Sequence[Tensor]) -> Tensor:
    out = parts[0]
    for p in parts[1:]:
        out = dm.concat(out, p)
    return out


def attention_weights(contexts: Sequence[Tensor], target: Tensor, net: AttentionNet, enabled: bool = True) -> Tensor:
    """Softmax-normalised two-layer attention scores, or uniform ``1/n`` when disabled."""
    n = len(contexts)
    if n == 0:
        raise dm.EmptySetError("attention over an empty neighbourhood")
    if not enabled:
        return dm.column(np.full(n, 1.0 / n))
    scores = []
    for c in contexts:
        hidden = dm.relu(dm.add(dm.matmul(net.W1, dm.concat(c, target)), net.b1))
        scores.append(dm.add(dm.matmul(dm.transpose(net.w2), hidden), net.b2))
    return dm.softmax(_stack_scalars(scores))


def _aggregate(contexts: list[Tensor], target: Tensor, attn: AttentionNet, enabled: bool, layer: Affine) -> Tensor:
    if contexts:
        agg = dm.weighted_sum(attention_weights(contexts, target, attn, enabled), contexts)
    else:
        agg = dm.zeros(layer.W.shape[1], 1)
    return dm.relu(_affine_col(layer, agg))


def item_space_user_factor(
    user: int, view: NeighborView, net: Net, ablation: AblationConfig = AblationConfig(), exclude_item: int | None = None
) -> Tensor:
    """h^I_i from the (opinion-aware) items in C(i); relu(b) for an empty C(i)."""
    xs = [opinion_aware_item_repr(a, r, net, ablation) for a, r in view.items_of(user, exclude_item)]
    return _aggregate(xs, _row(net.user_emb, user), net.attn_item, ablation.attn_item_on, net.agg_item)


def social_space_user_factor(user: int, view: NeighborView, net: Net, ablation: AblationConfig = AblationConfig()) -> Tensor:
    """h^S_i from the item-space factors of the users in N(i)."""
    hs = [item_space_user_factor(o, view, net, ablation) for o in view.friends_of(user)]
    return _aggregate(hs, _row(net.user_emb, user), net.attn_social, ablation.attn_social_on, net.agg_social)


def user_latent_factor(
    user: int, view: NeighborView, net: Net, ablation: AblationConfig = AblationConfig(), exclude_item: int | None = None
) -> Tensor:
    h_item = item_space_user_factor(user, view, net, ablation, exclude_item)
    if ablation.use_social:
        h_social = social_space_user_factor(user, view, net, ablation)
    else:
        h_social = dm.zeros(h_item.shape[0], 1)
    return _mlp_col(net.combine, dm.concat(h_item, h_social))


def item_latent_factor(
    item: int, view: NeighborView, net: Net, ablation: AblationConfig = AblationConfig(), exclude_user: int | None = None
) -> Tensor:
    fs = [opinion_aware_user_repr(t, r, net, ablation) for t, r in view.users_of(item, exclude_user)]
    return _aggregate(fs, _row(net.item_emb, item), net.attn_user, ablation.attn_user_on, net.agg_user)


def predict_rating(user: int, item: int, view: NeighborView, params: GraphRecParams | Net,
                   ablation: AblationConfig = AblationConfig()) -> float:
    """Unclamped predicted rating for one pair, dropout off."""
    net = params.attach(None) if isinstance(params, GraphRecParams) else params
    return predict_rating_tensor(user, item, view, net, ablation).item()


def predict_rating_tensor(user: int, item: int, view: NeighborView, net: Net,
                          ablation: AblationConfig = AblationConfig()) -> Tensor:
    if not 0 <= user < view.n_users or not 0 <= item < view.n_items:
        raise IndexError(f"pair ({user}, {item}) out of range")
    h = user_latent_factor(user, view, net, ablation, exclude_item=item)
    z = item_latent_factor(item, view, net, ablation, exclude_user=user)
    g = _mlp_col(net.predict, dm.concat(h, z))
    return dm.matmul(dm.transpose(net.predict_w), g)


# ---------------------------------------------------------------------------
# batched path (rows are examples)


class _Dropout(NamedTuple):
    rate: float
    training: bool
    rng: np.random.Generator | None


def _affine_rows(layer: Affine, x: Tensor) -> Tensor:
    return dm.add_rowvec(dm.matmul(x, dm.transpose(layer.W)), dm.transpose(layer.b))


def _mlp_rows(layers: Sequence[Affine], x: Tensor, drop: _Dropout) -> Tensor:
    for layer in layers:
        x = dm.dropout(dm.relu(_affine_rows(layer, x)), drop.rate, drop.training, drop.rng)
    return x


def _fused(emb: Tensor, ids: np.ndarray, ratings: np.ndarray, net: Net, layers, ablation, drop) -> Tensor:
    """g([emb_k ⊕ e_r]) for every distinct (id, rating) pair, gathered back per edge."""
    keys, inverse = np.unique(ids * net.r_max + (ratings - 1), return_inverse=True)
    uid, ur = keys // net.r_max, keys % net.r_max
    base = dm.gather_rows(emb, uid)
    if ablation.use_opinion:
        op = dm.gather_rows(net.opinion_emb, ur)
    else:
        op = dm.zeros(uid.size, emb.shape[1])
    fused = _mlp_rows(layers, dm.hstack(base, op), drop)
    return dm.gather_rows(fused, inverse.reshape(-1))


def _aggregate_rows(contexts: Tensor, targets: Tensor, seg: np.ndarray, n_seg: int,
                    attn: AttentionNet, enabled: bool, layer: Affine) -> Tensor:
    if enabled and seg.size:
        hidden = dm.relu(dm.add_rowvec(dm.matmul(dm.hstack(contexts, targets), dm.transpose(attn.W1)), dm.transpose(attn.b1)))
        scores = dm.add_rowvec(dm.matmul(hidden, attn.w2), attn.b2)
        weights = dm.segment_softmax(scores, seg, n_seg)
    else:
        weights = dm.segment_mean_weights(seg, n_seg)
    agg = dm.segment_weighted_sum(weights, contexts, seg, n_seg)
    return dm.relu(_affine_rows(layer, agg))


def _item_space_rows(users: np.ndarray, exclude: np.ndarray, view: NeighborView, net: Net,
                     ablation: AblationConfig, drop: _Dropout) -> Tensor:
    seg, items, ratings = view.user_edges(users, exclude)
    x = _fused(net.item_emb, items, ratings, net, net.fusion_v, ablation, drop)
    p = dm.gather_rows(net.user_emb, users[seg])
    return _aggregate_rows(x, p, seg, users.size, net.attn_item, ablation.attn_item_on, net.agg_item)


def batch_forward(pairs, view: NeighborView, net: Net, ablation: AblationConfig = AblationConfig(),
                  training: bool = False, dropout_rate: float = 0.0,
                  rng: np.random.Generator | None = None) -> Tensor:
    """Predictions (B x 1) for ``pairs`` on whatever tape ``net`` lives on."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.shape[0] == 0:
        raise dm.ContractError("forward_batch needs a non-empty batch")
    users, items = pairs[:, 0], pairs[:, 1]
    if users.min() < 0 or users.max() >= view.n_users or items.min() < 0 or items.max() >= view.n_items:
        raise IndexError("pair ids out of range")
    drop = _Dropout(dropout_rate, training, rng)
    d = net.user_emb.shape[1]
    B = pairs.shape[0]

    # user nodes: (user, excluded item); targets exclude their pair, social neighbours exclude nothing
    if ablation.use_social:
        s_seg, s_user = view.social_edges(users)
    else:
        s_seg, s_user = np.zeros(0, np.int64), np.zeros(0, np.int64)
    node_user = np.concatenate([users, s_user])
    node_excl = np.concatenate([items, np.full(s_user.size, -1)])
    keys, inverse = np.unique(node_user * (view.n_items + 1) + (node_excl + 1), return_inverse=True)
    inverse = inverse.reshape(-1)
    k_user, k_excl = keys // (view.n_items + 1), keys % (view.n_items + 1) - 1
    h_item_nodes = _item_space_rows(k_user, k_excl, view, net, ablation, drop)
    h_item = dm.gather_rows(h_item_nodes, inverse[:B])

    if ablation.use_social:
        contexts = dm.gather_rows(h_item_nodes, inverse[B:])
        p = dm.gather_rows(net.user_emb, users[s_seg])
        h_social = _aggregate_rows(contexts, p, s_seg, B, net.attn_social, ablation.attn_social_on, net.agg_social)
    else:
        h_social = dm.zeros(B, d)
    h = _mlp_rows(net.combine, dm.hstack(h_item, h_social), drop)

    b_seg, b_user, b_rating = view.item_edges(items, users)
    f = _fused(net.user_emb, b_user, b_rating, net, net.fusion_u, ablation, drop)
    q = dm.gather_rows(net.item_emb, items[b_seg])
    z = _aggregate_rows(f, q, b_seg, B, net.attn_user, ablation.attn_user_on, net.agg_user)

    g = _mlp_rows(net.predict, dm.hstack(h, z), drop)
    return dm.matmul(g, net.predict_w)


def forward_batch(pairs, view: NeighborView, params: GraphRecParams, ablation: AblationConfig = AblationConfig(),
                  training: bool = False, dropout_rate: float = 0.0,
                  rng: np.random.Generator | None = None) -> tuple[Tensor, Tape]:
    """Record a batched forward pass on a fresh tape whose leaves are the parameters."""
    tape = Tape()
    net = params.attach(tape)
    return batch_forward(pairs, view, net, ablation, training, dropout_rate, rng), tape


def predict_many(pairs, view: NeighborView, params: GraphRecParams, ablation: AblationConfig = AblationConfig(),
                 batch_size: int = 1024) -> np.ndarray:
    """Eval-mode predictions without recording a tape."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    net = params.attach(None)
    out = [batch_forward(pairs[s : s + batch_size], view, net, ablation).value[:, 0]
           for s in range(0, len(pairs), batch_size)]
    return np.concatenate(out) if out else np.zeros(0)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: GraphRecParams, meta: dict | None = None) -> None:
    header = {"shape": asdict(params.shape), "meta": meta or {}}
    arrays = {f"param/{k}": v for k, v in params.tensors.items()}
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[GraphRecParams, dict]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(bytes(data["header"]).decode())
        tensors = {k[len("param/"):]: data[k].astype(np.float64) for k in data.files if k.startswith("param/")}
    params = GraphRecParams(ModelShape(**header["shape"]), tensors)
    return params, header["meta"]
