"""Non-graph reference models: popularity rankings and BPR matrix factorization."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .dataio import Dataset
from .engine import FeatureMode, ModelConfig, Variant
from .training import TrainConfig, TrainResult, train


class PopularityMode(enum.Enum):
    ALL_HISTORY = "all_history"
    LAST_W_DAYS = "last_w_days"


@dataclass(frozen=True, eq=False)
class PopularityModel:
    mode: PopularityMode
    window: int | None = None
    counts: np.ndarray | None = None  # frozen training counts (ALL_HISTORY)


def most_pop(dataset: Dataset) -> PopularityModel:
    """Counts over the whole training range, frozen afterwards."""
    _, _, items = dataset.between(*dataset.split.train)
    return PopularityModel(PopularityMode.ALL_HISTORY, None,
                           np.bincount(items, minlength=dataset.n_items))


def recent_pop(window: int) -> PopularityModel:
    if window < 1:
        raise ValueError("RecentPop window must be >= 1")
    return PopularityModel(PopularityMode.LAST_W_DAYS, window)


def popularity_scores(model: PopularityModel, dataset: Dataset, t: int,
                      candidates: np.ndarray) -> np.ndarray:
    """Event counts per candidate; RecentPop counts days ``[t - w, t)`` only."""
    if model.mode is PopularityMode.ALL_HISTORY:
        counts = model.counts
    else:
        _, _, items = dataset.between(max(0, t - model.window), t)
        counts = np.bincount(items, minlength=dataset.n_items)
    return counts[candidates].astype(np.float64)


class PopularityScorer:
    def __init__(self, model: PopularityModel, dataset: Dataset):
        self.model = model
        self.dataset = dataset

    def __call__(self, t: int, users: np.ndarray, candidates: np.ndarray) -> np.ndarray:
        s = popularity_scores(self.model, self.dataset, t, candidates)
        return np.broadcast_to(s, (len(users), len(s)))


def mf_config(id_dim: int = 64) -> ModelConfig:
    return ModelConfig(Variant.STATIC, layers=0, id_dim=id_dim, feature_mode=FeatureMode.ID)


def train_mf(dataset: Dataset, train_config: TrainConfig, id_dim: int = 64) -> TrainResult:
    """BPR-MF: the engine with no propagation layers, trained by the same loop."""
    return train(dataset, mf_config(id_dim), train_config)
