"""Causal window graphs and the static training graph, with edge coefficients."""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .dataio import Dataset


class NormalizerKind(enum.Enum):
    STATIC_SYMMETRIC = "static_symmetric"
    WINDOWED_SYMMETRIC = "windowed_symmetric"
    INVERSE_DELTA_T = "inverse_delta_t"


@dataclass(frozen=True, eq=False)
class WindowedGraph:
    """Bipartite (multi)graph over dense local node indices.

    ``user_nodes[k]`` is the global user index of local user ``k`` (same for
    items). ``delta_t`` is 0 for static graphs.
    """

    prediction_day: int | None
    window: int | None
    user_nodes: np.ndarray
    item_nodes: np.ndarray
    edge_user: np.ndarray
    edge_item: np.ndarray
    delta_t: np.ndarray
    user_degree: np.ndarray
    item_degree: np.ndarray
    coeffs: np.ndarray | None = None
    kind: NormalizerKind | None = None
    _op: sp.csr_matrix | None = dataclasses.field(default=None, repr=False)

    @property
    def n_edges(self) -> int:
        return len(self.edge_user)

    @property
    def n_users(self) -> int:
        return len(self.user_nodes)

    @property
    def n_items(self) -> int:
        return len(self.item_nodes)

    @property
    def is_empty(self) -> bool:
        return self.n_edges == 0

    def edge_triples(self) -> set[tuple[int, int, int]]:
        """Global ``(user, item, source_day)`` of every edge (windowed graphs)."""
        day = self.prediction_day - self.delta_t
        return set(zip(self.user_nodes[self.edge_user].tolist(),
                       self.item_nodes[self.edge_item].tolist(), day.tolist()))

    def operator(self) -> sp.csr_matrix:
        """User-by-item propagation block; parallel edges are summed."""
        if self.coeffs is None:
            raise ValueError("graph has no coefficients; call edge_coefficients first")
        return self._op


def _local(idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    nodes, inv = np.unique(idx, return_inverse=True)
    return nodes, inv.astype(np.int64)


def _assemble(t, w, users, items, delta) -> WindowedGraph:
    user_nodes, eu = _local(users)
    item_nodes, ei = _local(items)
    udeg = np.bincount(eu, minlength=len(user_nodes))
    ideg = np.bincount(ei, minlength=len(item_nodes))
    return WindowedGraph(t, w, user_nodes, item_nodes, eu, ei, np.asarray(delta, dtype=np.int64),
                         udeg, ideg)


def build_window_graph(dataset: Dataset, t: int, w: int, items=None) -> WindowedGraph:
    """Graph of all events with day in ``[max(0, t - w), t)``, one edge per event.

    ``items`` is accepted for interface symmetry; availability does not
    filter graph edges.
    """
    if t < 0 or w < 1:
        raise ValueError(f"need t >= 0 and w >= 1, got t={t}, w={w}")
    days, users, items_ = dataset.between(max(0, t - w), t)
    return _assemble(t, w, users, items_, t - days)


def build_static_graph(dataset: Dataset, day_range: tuple[int, int]) -> WindowedGraph:
    """One edge per distinct (user, item) pair with an event in ``[lo, hi)``."""
    lo, hi = day_range
    if hi <= lo:
        raise ValueError(f"empty day range [{lo}, {hi})")
    _, users, items = dataset.between(lo, hi)
    pairs = np.unique(np.stack([users, items], axis=1), axis=0) if len(users) else np.zeros((0, 2), np.int64)
    return _assemble(None, None, pairs[:, 0], pairs[:, 1], np.zeros(len(pairs), dtype=np.int64))


def edge_coefficients(graph: WindowedGraph, kind: NormalizerKind) -> WindowedGraph:
    """Attach per-edge coefficients for ``kind`` and build the propagation block."""
    if kind is NormalizerKind.INVERSE_DELTA_T:
        if graph.n_edges and graph.delta_t.min() < 1:
            raise ValueError("inverse-delta-t coefficients need delta_t >= 1 on every edge")
        c = 1.0 / graph.delta_t.astype(np.float64)
    else:
        du = graph.user_degree[graph.edge_user]
        di = graph.item_degree[graph.edge_item]
        if graph.n_edges and (du.min() < 1 or di.min() < 1):
            raise AssertionError("zero degree on an edge endpoint")
        c = 1.0 / (np.sqrt(du.astype(np.float64)) * np.sqrt(di.astype(np.float64)))
    op = sp.csr_matrix((c, (graph.edge_user, graph.edge_item)), shape=(graph.n_users, graph.n_items))
    op.sum_duplicates()
    return dataclasses.replace(graph, coeffs=c, kind=kind, _op=op)
