"""Initialisation, RMSprop and the minibatch training loop with early stopping."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffmath as dm
from .graphdata import DatasetSplit, NeighborView, RatingGraph, RatingTriple, SocialGraph
from .model import AblationConfig, GraphRecParams, ModelShape, forward_batch, is_bias, predict_many

log = logging.getLogger(__name__)

INIT_STD = 0.1

# fixed spawn keys so each consumer of randomness can be varied independently
PURPOSES = {"init": 0, "shuffle": 1, "dropout": 2, "split": 3, "neighbors": 4, "eval_neighbors": 5, "synth": 6}


def derive_rng(seed: int, purpose: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(PURPOSES[purpose],)))


def derive_seed(seed: int, purpose: str) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(PURPOSES[purpose],)).generate_state(1)[0])


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}: loss = {value}")
        self.epoch, self.batch = epoch, batch


@dataclass
class TrainConfig:
    embed_dim: int = 64
    learning_rate: float = 0.001
    batch_size: int = 128
    dropout_rate: float = 0.5
    rmsprop_decay: float = 0.9
    rmsprop_epsilon: float = 1e-8
    max_epochs: int = 100
    patience: int = 5
    seed: int = 0
    neighbor_cap: int | None = 64
    mlp_depth: int = 3

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be at least 1")
        if self.batch_size < 1 or self.max_epochs < 1 or self.mlp_depth < 1:
            raise ValueError("batch_size, max_epochs and mlp_depth must be at least 1")
        if self.neighbor_cap is not None and self.neighbor_cap < 1:
            raise ValueError("neighbor_cap must be positive or None")

    def as_dict(self) -> dict:
        return asdict(self)


def init_params(shape: ModelShape, seed: int) -> GraphRecParams:
    """Weights and embeddings from N(0, 0.1^2); biases zero."""
    rng = derive_rng(seed, "init")
    tensors = {}
    for name, shp in shape.param_shapes().items():
        tensors[name] = np.zeros(shp) if is_bias(name) else rng.normal(0.0, INIT_STD, size=shp)
    return GraphRecParams(shape, tensors)


def loss(predictions, truths) -> float:
    """Half mean squared error ``sum((p - r)^2) / (2 n)``."""
    p = np.asarray(predictions, dtype=np.float64).ravel()
    r = np.asarray(truths, dtype=np.float64).ravel()
    if p.size == 0 or p.size != r.size:
        raise dm.ContractError(f"loss needs equal non-empty lengths, got {p.size} and {r.size}")
    return float(np.sum((p - r) ** 2) / (2 * p.size))


@dataclass
class OptimizerState:
    squares: dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0


def rmsprop_step(params: GraphRecParams | dict, grads: dict, state: OptimizerState,
                 lr: float, decay: float = 0.9, eps: float = 1e-8) -> None:
    """In place: ``s = decay s + (1 - decay) g^2``; ``theta -= lr g / (sqrt(s) + eps)``."""
    tensors = params.tensors if isinstance(params, GraphRecParams) else params
    for name, g in grads.items():
        theta = tensors[name]
        if g.shape != theta.shape:
            raise dm.ContractError(f"{name}: gradient shape {g.shape} != parameter shape {theta.shape}")
        s = state.squares.get(name)
        if s is None:
            s = state.squares[name] = np.zeros_like(theta)
        elif s.shape != theta.shape:
            raise dm.ContractError(f"{name}: optimizer state shape {s.shape} != parameter shape {theta.shape}")
        s *= decay
        s += (1.0 - decay) * g * g
        theta -= lr * g / (np.sqrt(s) + eps)
    state.steps += 1


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs whose score is strictly above the best so far."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, score: float) -> bool:
        """Record one epoch; returns True if training should stop."""
        if score < self.best:
            self.best, self.best_epoch, self.bad_epochs = score, epoch, 0
        elif score > self.best:
            self.bad_epochs += 1
        else:
            self.bad_epochs = 0
        return self.bad_epochs >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_rmse: float
    val_mae: float
    wall_seconds: float

    CSV_FIELDS = ("epoch", "train_loss", "val_rmse", "val_mae", "wall_seconds")

    def as_row(self) -> list:
        return [self.epoch, repr(self.train_loss), repr(self.val_rmse), repr(self.val_mae), f"{self.wall_seconds:.3f}"]


@dataclass
class TrainResult:
    params: GraphRecParams
    history: list[EpochRecord]
    best_epoch: int
    best_val_rmse: float
    stopped_early: bool


def eval_view(graph: RatingGraph, social: SocialGraph, config: TrainConfig) -> NeighborView:
    """The fixed neighbour view used for validation, test and prediction."""
    return NeighborView(graph, social, config.neighbor_cap, derive_rng(config.seed, "eval_neighbors"))


def triples_to_arrays(triples) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray([tuple(t) for t in triples], dtype=np.int64).reshape(-1, 3)
    return arr[:, :2], arr[:, 2].astype(np.float64)


def train(graph: RatingGraph, social: SocialGraph, split: DatasetSplit, config: TrainConfig,
          ablation: AblationConfig = AblationConfig(), params: GraphRecParams | None = None,
          callback=None) -> TrainResult:
    """Fit on ``split.train``; keep the parameters with the best validation RMSE.

    ``graph`` supplies the id space; neighbour sets come from the training
    triples only.
    """
    if not split.train or not split.validation:
        raise dm.ContractError("training needs non-empty train and validation sets")
    from .evaluation import mae, rmse

    train_graph = graph.restricted(split.train)
    shape = ModelShape(graph.n_users, graph.n_items, graph.r_max, config.embed_dim, config.mlp_depth)
    params = init_params(shape, config.seed) if params is None else params.copy()
    state = OptimizerState()
    shuffle_rng = derive_rng(config.seed, "shuffle")
    dropout_rng = derive_rng(config.seed, "dropout")
    neighbor_rng = derive_rng(config.seed, "neighbors")
    val_view = eval_view(train_graph, social, config)
    train_pairs, train_truth = triples_to_arrays(split.train)
    val_pairs, val_truth = triples_to_arrays(split.validation)

    stopper = EarlyStopping(config.patience)
    best = params.copy()
    history: list[EpochRecord] = []
    stopped = False
    for epoch in range(1, config.max_epochs + 1):
        start = time.perf_counter()
        view = NeighborView(train_graph, social, config.neighbor_cap, neighbor_rng)
        order = shuffle_rng.permutation(len(train_pairs))
        total, count = 0.0, 0
        for b, s in enumerate(range(0, len(order), config.batch_size), start=1):
            idx = order[s : s + config.batch_size]
            pred, tape = forward_batch(train_pairs[idx], view, params, ablation, True, config.dropout_rate, dropout_rng)
            batch_loss = dm.half_mse(pred, train_truth[idx])
            value = batch_loss.item()
            if not math.isfinite(value):
                raise DivergenceError(epoch, b, value)
            grads = tape.backward(batch_loss)
            rmsprop_step(params, grads, state, config.learning_rate, config.rmsprop_decay, config.rmsprop_epsilon)
            total += value * len(idx)
            count += len(idx)
        if not params.all_finite():
            raise DivergenceError(epoch, b, math.nan)
        val_pred = predict_many(val_pairs, val_view, params, ablation)
        rec = EpochRecord(epoch, total / count, rmse(val_pred, val_truth), mae(val_pred, val_truth),
                          time.perf_counter() - start)
        history.append(rec)
        log.info("epoch %d train_loss %.5f val_rmse %.5f val_mae %.5f (%.1fs)",
                 epoch, rec.train_loss, rec.val_rmse, rec.val_mae, rec.wall_seconds)
        if callback is not None:
            callback(rec)
        improved = rec.val_rmse < stopper.best
        stop = stopper.update(epoch, rec.val_rmse)
        if improved:
            best = params.copy()
        if stop:
            stopped = True
            break
    return TrainResult(best, history, stopper.best_epoch, stopper.best, stopped)
