"""GraphRec social recommendation with a self-contained autodiff engine."""

from .graphdata import (
    DatasetSplit,
    NeighborView,
    RatingGraph,
    RatingTriple,
    SocialGraph,
    load_ratings,
    load_trust,
    split,
)
from .model import AblationConfig, GraphRecParams, ModelShape, forward_batch, predict_rating
from .training import TrainConfig, init_params, train
from .evaluation import MetricsReport, evaluate, mae, rmse, synth_generate

__version__ = "0.1.0"
