"""Metrics, evaluation reports, ablation and embedding-size experiments, synthetic data."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffmath as dm
from .graphdata import DatasetSplit, NeighborView, RatingGraph, RatingTriple, SocialGraph
from .model import AblationConfig, GraphRecParams, predict_many
from .training import TrainConfig, derive_rng, eval_view, train, triples_to_arrays


def _pair(preds, truths) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.float64).ravel()
    r = np.asarray(truths, dtype=np.float64).ravel()
    if p.size == 0 or p.size != r.size:
        raise dm.ContractError(f"metrics need equal non-empty lengths, got {p.size} and {r.size}")
    return p, r


def mae(preds, truths) -> float:
    p, r = _pair(preds, truths)
    return float(np.mean(np.abs(p - r)))


def rmse(preds, truths) -> float:
    p, r = _pair(preds, truths)
    return float(math.sqrt(np.mean((p - r) ** 2)))


def fingerprint(config: TrainConfig, ablation: AblationConfig | None = None) -> str:
    payload = {"train": config.as_dict(), "ablation": asdict(ablation) if ablation else None}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def git_blob_hash(path) -> str:
    """Content hash computed the way ``git hash-object`` does."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


@dataclass
class MetricsReport:
    split: str
    mae: float
    rmse: float
    n: int
    clamped: bool = False
    fingerprint: str = ""
    cold: dict = field(default_factory=dict)
    checkpoint_hash: str | None = None

    def __post_init__(self):
        if self.n <= 0:
            raise ValueError("a report needs at least one prediction")
        if not (0.0 <= self.mae <= self.rmse + 1e-12):
            raise AssertionError(f"metric invariant violated: mae={self.mae}, rmse={self.rmse}")

    def as_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)

    def to_text(self) -> str:
        flag = " (clamped)" if self.clamped else ""
        return f"{self.split}: MAE {self.mae:.4f}  RMSE {self.rmse:.4f}  n={self.n}{flag}"


def evaluate(params: GraphRecParams, graph: RatingGraph, social: SocialGraph, triples: Sequence[RatingTriple],
             config: TrainConfig | None = None, ablation: AblationConfig = AblationConfig(),
             clamp: bool = False, split_name: str = "test", view: NeighborView | None = None) -> MetricsReport:
    """Eval-mode MAE/RMSE over ``triples``; ``graph`` should hold the training ratings.

    Cold users and items are predicted through the empty-neighbourhood
    convention and counted, never skipped.
    """
    if not triples:
        raise dm.ContractError("evaluate needs at least one triple")
    config = config or TrainConfig()
    if view is None:
        view = eval_view(graph, social, config)
    pairs, truth = triples_to_arrays(triples)
    preds = predict_many(pairs, view, params, ablation)
    if clamp:
        preds = np.clip(preds, 1.0, graph.r_max)
    return MetricsReport(split_name, mae(preds, truth), rmse(preds, truth), len(truth), clamp,
                         fingerprint(config, ablation), view.cold_counts(pairs))


# ---------------------------------------------------------------------------
# experiment tables


@dataclass
class Table:
    columns: list[str]
    rows: list[list] = field(default_factory=list)

    def to_text(self) -> str:
        cells = [self.columns] + [[_fmt(v) for v in row] for row in self.rows]
        widths = [max(len(str(r[k])) for r in cells) for k in range(len(self.columns))]
        lines = ["  ".join(str(v).ljust(w) for v, w in zip(r, widths)).rstrip() for r in cells]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines)

    def to_records(self) -> list[dict]:
        return [dict(zip(self.columns, row)) for row in self.rows]

    def to_json(self) -> str:
        return json.dumps(self.to_records(), sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        w.writerows(self.rows)
        return buf.getvalue()


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def _run(graph, social, split, config, ablation) -> tuple[MetricsReport, int]:
    result = train(graph, social, split, config, ablation)
    train_graph = graph.restricted(split.train)
    report = evaluate(result.params, train_graph, social, split.test, config, ablation)
    return report, result.best_epoch


def ablation_report(graph: RatingGraph, social: SocialGraph, split: DatasetSplit, config: TrainConfig,
                    variants: Sequence[str | AblationConfig]) -> Table:
    """Train every variant from the same seed; one row of test metrics per variant."""
    if not variants:
        raise ValueError("ablation_report needs at least one variant")
    table = Table(["variant", "mae", "rmse", "n", "best_epoch", "fingerprint"])
    for v in variants:
        name, ablation = (v, AblationConfig.variant(v)) if isinstance(v, str) else (_variant_name(v), v)
        report, best_epoch = _run(graph, social, split, config, ablation)
        table.rows.append([name, report.mae, report.rmse, report.n, best_epoch, report.fingerprint])
    return table


def _variant_name(ablation: AblationConfig) -> str:
    from .model import VARIANTS

    for name, flags in VARIANTS.items():
        if AblationConfig(**flags) == ablation:
            return name
    return "custom"


DEFAULT_SIZES = (8, 16, 32, 64, 128, 256)


def embedding_sweep(graph: RatingGraph, social: SocialGraph, split: DatasetSplit, config: TrainConfig,
                    sizes: Sequence[int] = DEFAULT_SIZES, ablation: AblationConfig = AblationConfig()) -> Table:
    if not sizes:
        raise ValueError("embedding_sweep needs at least one size")
    table = Table(["embed_dim", "mae", "rmse", "n", "best_epoch", "fingerprint"])
    for d in sizes:
        report, best_epoch = _run(graph, social, split, replace(config, embed_dim=int(d)), ablation)
        table.rows.append([int(d), report.mae, report.rmse, report.n, best_epoch, report.fingerprint])
    return table


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthData:
    graph: RatingGraph
    social: SocialGraph
    user_latent: np.ndarray
    item_latent: np.ndarray
    community: np.ndarray

    def latent_product(self, users, items) -> np.ndarray:
        return np.einsum("kd,kd->k", self.user_latent[users], self.item_latent[items])


def synth_generate(n_users: int, n_items: int, d_true: int, homophily: float, noise: float, seed: int,
                   *, ratings_per_user: float = 10.0, friends_per_user: float = 6.0,
                   community_size: int = 25, spread: float = 0.5, similar_pool: int = 10,
                   interaction: float = 0.5, user_bias: float = 0.8, item_bias: float = 0.5,
                   erratic_items: float = 0.0, erratic_noise: float = 1.5, r_max: int = 5) -> SynthData:
    """Clustered latent users, social ties that follow latent similarity, quantised ratings.

    Users belong to communities. A user's taste vector and rating offset are
    the community's plus ``spread``-scaled individual noise; items get a taste
    vector and an offset of their own. Both offsets are folded into augmented
    latents ``[interaction * u / norm, b_u, 1]`` and ``[v, 1, b_i]``, so

        rating = clip(round(3 + <user_latent, item_latent> + noise * eps), 1, r_max).

    Each friendship is drawn from the ``similar_pool`` most similar users with
    probability ``homophily`` and uniformly at random otherwise. Ratings per
    user are log-normal, so many users have only a handful. A fraction
    ``erratic_items`` of items is rated with noise ``erratic_noise`` instead of
    ``noise``, so their opinions say little about a user's taste.
    """
    if n_users < 2 or n_items < 1 or d_true < 1:
        raise ValueError("need at least 2 users, 1 item and d_true >= 1")
    if not 0.0 <= homophily <= 1.0:
        raise ValueError("homophily must lie in [0, 1]")
    rng = derive_rng(seed, "synth")

    n_comm = max(1, n_users // community_size)
    community = rng.integers(0, n_comm, size=n_users)
    centres = rng.normal(size=(n_comm, d_true + 1))
    taste = centres[community] + spread * rng.normal(size=(n_users, d_true + 1))
    taste /= math.sqrt(1.0 + spread**2)
    norm = math.sqrt(d_true)
    user_latent = np.hstack([interaction * taste[:, :d_true] / norm,
                             user_bias * taste[:, d_true:], np.ones((n_users, 1))])
    item_latent = np.hstack([rng.normal(size=(n_items, d_true)), np.ones((n_items, 1)),
                             item_bias * rng.normal(size=(n_items, 1))])

    unit = taste / np.linalg.norm(taste, axis=1, keepdims=True)
    sim = unit @ unit.T
    np.fill_diagonal(sim, -np.inf)
    pool = min(similar_pool, n_users - 1)
    nearest = np.argsort(-sim, axis=1, kind="stable")[:, :pool]
    edges = []
    for i in range(n_users):
        for _ in range(1 + rng.poisson(max(friends_per_user - 1.0, 0.0))):
            if rng.random() < homophily:
                o = int(nearest[i, rng.integers(pool)])
            else:
                o = int(rng.integers(n_users - 1))
                o += o >= i
            edges.append((i, o))
    social = SocialGraph.from_edges(n_users, edges)

    item_noise = np.where(rng.random(n_items) < erratic_items, erratic_noise, noise)
    popularity = rng.lognormal(0.0, 0.5, size=n_items)
    popularity /= popularity.sum()
    triples = []
    for u in range(n_users):
        k = int(np.clip(round(rng.lognormal(math.log(ratings_per_user), 0.8)), 1, n_items))
        chosen = np.sort(rng.choice(n_items, size=k, replace=False, p=popularity))
        score = item_latent[chosen] @ user_latent[u]
        levels = np.clip(np.rint(3.0 + score + item_noise[chosen] * rng.normal(size=k)), 1, r_max).astype(int)
        triples.extend(RatingTriple(u, int(j), int(r)) for j, r in zip(chosen, levels))
    graph = RatingGraph(triples, n_users, n_items, r_max)
    return SynthData(graph, social, user_latent, item_latent, community)
