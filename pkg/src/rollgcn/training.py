"""Rolling causal training: one BPR/Adam step per daily snapshot."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .dataio import Dataset
from .engine import (Forward, ModelConfig, ModelState, Variant, adam_step, backward, forward,
                     init_state, scatter_rows, score_all)
from .evaluation import MetricBundle, aggregate_over_time, evaluate_range
from .graph import WindowedGraph, build_static_graph, build_window_graph, edge_coefficients

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    patience: int = 10
    neg_ratio: int = 10
    dns_pool: int = 50
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_every: int = 1
    k: int = 50
    literal_map: bool = False

    def __post_init__(self):
        if self.neg_ratio < 1:
            raise ValueError("neg_ratio must be >= 1")
        if self.dns_pool < self.neg_ratio:
            raise ValueError("dns_pool must be >= neg_ratio")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.epochs < 1 or self.eval_every < 1:
            raise ValueError("epochs and eval_every must be >= 1")


@dataclass
class BprBatch:
    """Quadruplets ``(day, user, positive, negative)`` for one snapshot."""

    day: int
    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.users)


def day_rng(seed: int, epoch: int, day: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, day])


def dns_sample(fwd: Forward, pos_users: np.ndarray, pos_items: np.ndarray, available: np.ndarray,
               rng: np.random.Generator, neg_ratio: int = 10, pool: int = 50, day: int = -1) -> BprBatch:
    """Dynamic negative sampling.

    Each positive draws ``pool`` valid items uniformly without replacement
    (available today and not a same-day positive of the user) and keeps the
    ``neg_ratio`` that the current model scores highest.
    """
    P = len(pos_users)
    if P == 0:
        return BprBatch(day, *(np.zeros(0, np.int64),) * 3)
    avail_idx = np.flatnonzero(available)
    n_av = len(avail_idx)
    users, inv = np.unique(pos_users, return_inverse=True)
    blocked = np.zeros((len(users), len(available)), dtype=bool)
    blocked[inv, pos_items] = True
    valid = ~blocked[inv][:, avail_idx]
    n_valid = valid.sum(axis=1)

    if n_av == 0:
        return BprBatch(day, *(np.zeros(0, np.int64),) * 3, skipped=P)
    keys = rng.random((P, n_av))
    keys[~valid] = 2.0
    size = min(pool, n_av)
    if size < n_av:
        cand = np.argpartition(keys, size - 1, axis=1)[:, :size]
    else:
        cand = np.broadcast_to(np.arange(n_av), (P, n_av)).copy()
    ck = np.take_along_axis(keys, cand, axis=1)
    o = np.argsort(ck, axis=1, kind="stable")
    cand = avail_idx[np.take_along_axis(cand, o, axis=1)]
    ok = np.take_along_axis(ck, o, axis=1) < 2.0

    e_u = fwd.e_users[pos_users]
    s = np.matmul(fwd.e_items[cand], e_u[:, :, None])[:, :, 0]
    s[~ok] = -np.inf
    top = np.argsort(-s, axis=1, kind="stable")[:, :neg_ratio]
    neg = np.take_along_axis(cand, top, axis=1)
    keep = np.take_along_axis(ok, top, axis=1)
    rows = np.broadcast_to(np.arange(P)[:, None], keep.shape)[keep]
    skipped = int((n_valid == 0).sum())
    return BprBatch(day, pos_users[rows], pos_items[rows], neg[keep], skipped)


def bpr_loss_and_grad(batch: BprBatch, fwd: Forward) -> tuple[float, np.ndarray, np.ndarray]:
    """Summed BPR loss and its gradient w.r.t. the final user/item embeddings."""
    e_u = fwd.e_users[batch.users]
    e_i = fwd.e_items[batch.pos]
    e_j = fwd.e_items[batch.neg]
    x = (e_u * e_i).sum(axis=1) - (e_u * e_j).sum(axis=1)
    loss = float(np.logaddexp(0.0, -x).sum())  # -log(sigmoid(x)), finite for finite x
    g = -expit(-x)
    g_users = scatter_rows(batch.users, e_i - e_j, len(fwd.e_users), g)
    g_items = scatter_rows(np.concatenate([batch.pos, batch.neg]), np.concatenate([e_u, e_u]),
                           len(fwd.e_items), np.concatenate([g, -g]))
    return loss, g_users, g_items


def day_graph(config: ModelConfig, dataset: Dataset, t: int,
              static_graph: WindowedGraph | None = None) -> WindowedGraph | None:
    """Propagation graph used to represent nodes on day ``t``."""
    if config.layers == 0:
        return None
    if config.variant is Variant.STATIC:
        return static_graph
    return edge_coefficients(build_window_graph(dataset, t, config.window), config.normalizer)


def static_training_graph(dataset: Dataset) -> WindowedGraph:
    g = build_static_graph(dataset, dataset.split.train)
    return edge_coefficients(g, ModelConfig().normalizer)


def day_loss_and_grads(state: ModelState, graph: WindowedGraph | None, dataset: Dataset, t: int,
                       pos_users: np.ndarray, pos_items: np.ndarray, rng: np.random.Generator,
                       tc: TrainConfig):
    """Forward, DNS, BPR and backward for one snapshot; returns (loss, grads, batch)."""
    codes = dataset.items.codes
    fwd = forward(state, graph, codes)
    batch = dns_sample(fwd, pos_users, pos_items, dataset.items.available(t), rng,
                       tc.neg_ratio, tc.dns_pool, day=t)
    if len(batch) == 0:
        return 0.0, None, batch
    loss, gu, gi = bpr_loss_and_grad(batch, fwd)
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite loss on day {t}: {len(batch)} quadruplets, "
                            f"users {batch.users[:5].tolist()}, pos {batch.pos[:5].tolist()}, "
                            f"neg {batch.neg[:5].tolist()}")
    return loss, backward(state, fwd, gu, gi, codes), batch


class GraphScorer:
    """Causal scorer for a trained model: day ``t`` sees only its propagation graph."""

    def __init__(self, state: ModelState, dataset: Dataset, static_graph: WindowedGraph | None = None):
        self.state = state
        self.dataset = dataset
        self.static_graph = static_graph
        if state.config.variant is Variant.STATIC and state.config.layers > 0 and static_graph is None:
            self.static_graph = static_training_graph(dataset)

    def forward(self, t: int) -> Forward:
        g = day_graph(self.state.config, self.dataset, t, self.static_graph)
        return forward(self.state, g, self.dataset.items.codes)

    def __call__(self, t: int, users: np.ndarray, candidates: np.ndarray) -> np.ndarray:
        return score_all(self.forward(t), users, candidates)


class EarlyStopping:
    """Stop once the monitored value fails to strictly improve ``patience`` times in a row."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch: int | None = None
        self.bad = 0

    def update(self, epoch: int, value: float) -> bool:
        if value > self.best:
            self.best, self.best_epoch, self.bad = value, epoch, 0
            return False
        self.bad += 1
        return self.bad >= self.patience


LOG_FIELDS = ("epoch", "days", "steps", "mean_loss", "skipped", "val_map", "val_mrr",
              "val_ndcg_at_k", "val_recall_at_k", "wall_time")


@dataclass
class TrainResult:
    state: ModelState
    best_epoch: int
    epochs_run: int
    log: list[dict] = field(default_factory=list)
    best_validation: MetricBundle | None = None


def validate(state: ModelState, dataset: Dataset, tc: TrainConfig,
             static_graph: WindowedGraph | None = None) -> MetricBundle:
    lo, hi = dataset.split.validation
    scorer = GraphScorer(state, dataset, static_graph)
    return aggregate_over_time(evaluate_range(scorer, dataset, lo, hi, tc.k, tc.literal_map))


def train(dataset: Dataset, model_config: ModelConfig, tc: TrainConfig,
          state: ModelState | None = None) -> TrainResult:
    """Epochs over the training days in order; early stopping on validation mAP."""
    if dataset.split is None:
        raise TrainingError("dataset has no split")
    if state is None:
        state = init_state(model_config, dataset.n_users, dataset.n_items,
                           dataset.items.vocab_sizes, seed=tc.seed)
    static_graph = None
    if model_config.variant is Variant.STATIC and model_config.layers > 0:
        static_graph = static_training_graph(dataset)
    lo, hi = dataset.split.train
    train_days = dataset.active_days(lo, hi)
    stopper = EarlyStopping(tc.patience)
    best_state, best_val = state.copy(), None
    rows = []
    epoch = 0
    for epoch in range(1, tc.epochs + 1):
        t0 = time.perf_counter()
        total_loss, pairs, steps, skipped = 0.0, 0, 0, 0
        for t in train_days:
            pu, pi = dataset.positives(t)
            graph = day_graph(model_config, dataset, t, static_graph)
            loss, grads, batch = day_loss_and_grads(state, graph, dataset, t, pu, pi,
                                                    day_rng(tc.seed, epoch, t), tc)
            skipped += batch.skipped
            if grads is None:
                continue
            adam_step(state, grads, tc.lr, tc.beta1, tc.beta2, tc.eps)
            total_loss += loss
            pairs += len(batch)
            steps += 1
        row = {"epoch": epoch, "days": len(train_days), "steps": steps,
               "mean_loss": total_loss / pairs if pairs else float("nan"), "skipped": skipped}
        stop = False
        if epoch % tc.eval_every == 0 or epoch == tc.epochs:
            val = validate(state, dataset, tc, static_graph)
            row.update(val_map=val.map, val_mrr=val.mrr, val_ndcg_at_k=val.ndcg_at_k,
                       val_recall_at_k=val.recall_at_k)
            improved_before = stopper.best
            stop = stopper.update(epoch, val.map)
            if stopper.best > improved_before:
                best_state, best_val = state.copy(), val
        row["wall_time"] = time.perf_counter() - t0
        rows.append(row)
        log.info("epoch %d loss %.5f val_map %s", epoch, row["mean_loss"], row.get("val_map"))
        if stop:
            break
    return TrainResult(best_state, stopper.best_epoch or epoch, epoch, rows, best_val)


def write_train_log(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in rows:
            out = []
            for name in LOG_FIELDS:
                v = r.get(name, "")
                out.append(f"{v:.6f}" if isinstance(v, float) else v)
            w.writerow(out)
