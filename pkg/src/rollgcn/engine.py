"""Embedding tables, linear propagation, scoring, analytic gradients and Adam.

Everything runs in float64. The stacked propagation operator
``A = [[0, B], [B^T, 0]]`` is symmetric, so the layer-aggregated map
``M = sum_k A^k / (k + 1)`` is symmetric too and the backward pass is the
forward pass applied to the upstream gradient.
"""

from __future__ import annotations

import copy
import enum
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .dataio import FEATURES
from .graph import NormalizerKind, WindowedGraph


class Variant(enum.Enum):
    STATIC = "static"
    WINDOWED = "windowed"
    FORWARD_WEIGHTED = "forward_weighted"


class FeatureMode(enum.Enum):
    ID = "id"
    FEATS = "feats"


NORMALIZER = {
    Variant.STATIC: NormalizerKind.STATIC_SYMMETRIC,
    Variant.WINDOWED: NormalizerKind.WINDOWED_SYMMETRIC,
    Variant.FORWARD_WEIGHTED: NormalizerKind.INVERSE_DELTA_T,
}

INIT_SCALE = 0.1


class NumericalError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    variant: Variant = Variant.STATIC
    layers: int = 1
    id_dim: int = 64
    feature_mode: FeatureMode = FeatureMode.ID
    feature_dim: int = 16
    window: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "feature_mode", FeatureMode(self.feature_mode))
        if self.layers < 0:
            raise ValueError("layers must be >= 0")
        if self.id_dim < 1 or self.feature_dim < 1:
            raise ValueError("embedding dims must be >= 1")
        if self.variant is not Variant.STATIC and (self.window is None or self.window < 1):
            raise ValueError(f"{self.variant.value} variant needs window >= 1, got {self.window}")

    @property
    def normalizer(self) -> NormalizerKind:
        return NORMALIZER[self.variant]

    @property
    def uses_features(self) -> bool:
        return self.feature_mode is FeatureMode.FEATS

    @property
    def projection_width(self) -> int:
        return self.id_dim + len(FEATURES) * self.feature_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["feature_mode"] = self.feature_mode.value
        return d


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    seed: int = 0

    def copy(self) -> "ModelState":
        return copy.deepcopy(self)

    def check_finite(self) -> None:
        for name, p in self.params.items():
            if not np.isfinite(p).all():
                idx = tuple(int(x) for x in np.argwhere(~np.isfinite(p))[0])
                raise NumericalError(f"non-finite parameter {name} at {idx}")


def scatter_rows(index: np.ndarray, values: np.ndarray, n: int,
                 weights: np.ndarray | None = None) -> np.ndarray:
    """``out[index[r]] += weights[r] * values[r]`` accumulated over repeated indices."""
    m = len(index)
    w = np.ones(m) if weights is None else weights
    op = sp.csr_matrix((w, (index, np.arange(m))), shape=(n, m))
    return np.asarray(op @ values)


def feature_param(f: int) -> str:
    return f"feat_{FEATURES[f]}"


def init_state(config: ModelConfig, user_count: int, item_count: int,
               feature_vocabs: tuple[int, ...] | None = None, seed: int = 0) -> ModelState:
    if user_count < 1 or item_count < 1:
        raise ValueError("user_count and item_count must be >= 1")
    rng = np.random.default_rng(seed)
    d = config.id_dim
    shapes = {"user": (user_count, d), "item": (item_count, d)}
    if config.uses_features:
        if feature_vocabs is None or len(feature_vocabs) != len(FEATURES):
            raise ValueError(f"feature mode needs {len(FEATURES)} vocabulary sizes")
        for f, n in enumerate(feature_vocabs):
            shapes[feature_param(f)] = (n, config.feature_dim)
        shapes["proj_w"] = (config.projection_width, d)
        shapes["proj_b"] = (d,)
    params = {k: rng.normal(0.0, INIT_SCALE, size=s) for k, s in shapes.items()}
    return ModelState(config, params,
                      {k: np.zeros_like(p) for k, p in params.items()},
                      {k: np.zeros_like(p) for k, p in params.items()}, 0, seed)


def _item_inputs(state: ModelState, codes: np.ndarray, items: np.ndarray) -> np.ndarray:
    p = state.params
    parts = [p["item"][items]]
    for f in range(len(FEATURES)):
        parts.append(p[feature_param(f)][codes[items, f]])
    return np.concatenate(parts, axis=1)


def initial_features(state: ModelState, codes: np.ndarray | None,
                     users: np.ndarray | None = None, items: np.ndarray | None = None):
    """Layer-0 representations for the given global user/item indices (all if None).

    In feature mode, item rows are ``concat(id, 7 feature embeddings) @ proj_w + proj_b``;
    users keep their ID embedding.
    """
    p = state.params
    h_u = p["user"] if users is None else p["user"][users]
    if not state.config.uses_features:
        h_i = p["item"] if items is None else p["item"][items]
        return h_u, h_i
    if items is None:
        items = np.arange(len(p["item"]))
    x = _item_inputs(state, codes, items)
    return h_u, x @ p["proj_w"] + p["proj_b"]


@dataclass
class LayerStack:
    """Per-layer representations over a graph's local nodes and their weighted sum."""

    users: list[np.ndarray]
    items: list[np.ndarray]
    e_users: np.ndarray
    e_items: np.ndarray


def propagate(h0_users: np.ndarray, h0_items: np.ndarray, graph: WindowedGraph, K: int) -> LayerStack:
    if h0_users.shape[0] != graph.n_users or h0_items.shape[0] != graph.n_items:
        raise AssertionError("layer-0 rows do not match graph nodes")
    hu, hi = [h0_users], [h0_items]
    eu = 1.0 * h0_users
    ei = 1.0 * h0_items
    if K > 0:
        B = graph.operator()
        Bt = B.T.tocsr()
        for k in range(1, K + 1):
            nu = B @ hi[-1]
            ni = Bt @ hu[-1]
            hu.append(nu)
            hi.append(ni)
            eu = eu + nu / (k + 1)
            ei = ei + ni / (k + 1)
    return LayerStack(hu, hi, eu, ei)


@dataclass
class Forward:
    """Final embeddings for every global user/item, plus what backward needs."""

    graph: WindowedGraph | None
    e_users: np.ndarray
    e_items: np.ndarray
    stack: LayerStack | None = None
    item_inputs: np.ndarray | None = field(default=None, repr=False)


def forward(state: ModelState, graph: WindowedGraph | None, codes: np.ndarray | None = None) -> Forward:
    """Propagate over ``graph``; nodes absent from it keep ``e = h0``."""
    cfg = state.config
    x = None
    h_u = state.params["user"].copy()
    if cfg.uses_features:
        x = _item_inputs(state, codes, np.arange(len(state.params["item"])))
        h_i = x @ state.params["proj_w"] + state.params["proj_b"]
    else:
        h_i = state.params["item"].copy()
    if cfg.layers == 0 or graph is None or graph.is_empty:
        return Forward(graph, h_u, h_i, None, x)
    stack = propagate(h_u[graph.user_nodes], h_i[graph.item_nodes], graph, cfg.layers)
    e_u, e_i = h_u, h_i
    e_u[graph.user_nodes] = stack.e_users
    e_i[graph.item_nodes] = stack.e_items
    return Forward(graph, e_u, e_i, stack, x)


def score(e_user_row: np.ndarray, e_item_row: np.ndarray) -> float:
    return float(np.dot(e_user_row, e_item_row))


def score_all(fwd: Forward, users: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Scores of shape ``(len(users), len(candidates))``."""
    return fwd.e_users[users] @ fwd.e_items[candidates].T


def backward(state: ModelState, fwd: Forward, grad_e_users: np.ndarray, grad_e_items: np.ndarray,
             codes: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Gradients of every parameter given gradients w.r.t. the final embeddings."""
    cfg = state.config
    p = state.params
    if grad_e_users.shape != fwd.e_users.shape or grad_e_items.shape != fwd.e_items.shape:
        raise AssertionError("gradient shape does not match forward embeddings")
    g_u = grad_e_users.copy()
    g_i = grad_e_items.copy()
    g = fwd.graph
    if fwd.stack is not None:
        back = propagate(grad_e_users[g.user_nodes], grad_e_items[g.item_nodes], g, cfg.layers)
        g_u[g.user_nodes] = back.e_users
        g_i[g.item_nodes] = back.e_items
    grads = {"user": g_u}
    if not cfg.uses_features:
        grads["item"] = g_i
        return grads
    d, fd = cfg.id_dim, cfg.feature_dim
    grads["proj_w"] = fwd.item_inputs.T @ g_i
    grads["proj_b"] = g_i.sum(axis=0)
    g_x = g_i @ p["proj_w"].T
    grads["item"] = g_x[:, :d]
    for f in range(len(FEATURES)):
        name = feature_param(f)
        grads[name] = scatter_rows(codes[:, f], g_x[:, d + f * fd:d + (f + 1) * fd], len(p[name]))
    return grads


def adam_step(state: ModelState, gradients: dict[str, np.ndarray], lr: float = 1e-4,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ModelState:
    """One bias-corrected Adam update, in place. Missing gradients count as zero."""
    for name, gr in gradients.items():
        if name not in state.params:
            raise KeyError(f"gradient for unknown parameter {name}")
        if gr.shape != state.params[name].shape:
            raise ValueError(f"gradient shape {gr.shape} != parameter {name} shape {state.params[name].shape}")
        bad = ~np.isfinite(gr)
        if bad.any():
            idx = tuple(int(x) for x in np.argwhere(bad)[0])
            raise NumericalError(f"non-finite gradient for {name} at index {idx} ({int(bad.sum())} entries)")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in state.params.items():
        gr = gradients.get(name)
        m, v = state.m[name], state.v[name]
        m *= beta1
        v *= beta2
        if gr is not None:
            m += (1.0 - beta1) * gr
            v += (1.0 - beta2) * gr * gr
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# --------------------------------------------------------------------------
# checkpoints
#
# layout: MAGIC (8 bytes) | version u32 LE | header length u64 LE | JSON header |
# raw little-endian float64 arrays in header order (C order).

MAGIC = b"RGCNCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(state: ModelState, path: str | Path, extra: dict | None = None) -> None:
    arrays, entries = [], []
    for group, table in (("param", state.params), ("m", state.m), ("v", state.v)):
        for name in sorted(table):
            a = np.ascontiguousarray(table[name], dtype="<f8")
            entries.append({"group": group, "name": name, "shape": list(a.shape)})
            arrays.append(a)
    header = {
        "config": state.config.to_dict(),
        "step": state.step,
        "seed": state.seed,
        "arrays": entries,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
    buf.write(blob)
    for a in arrays:
        buf.write(a.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[ModelState, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 8 + 12
    header = json.loads(raw[off:off + hlen].decode("utf-8"))
    off += hlen
    tables: dict[str, dict[str, np.ndarray]] = {"param": {}, "m": {}, "v": {}}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        a = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(e["shape"]).astype(np.float64)
        off += 8 * n
        tables[e["group"]][e["name"]] = a
    state = ModelState(ModelConfig(**header["config"]), tables["param"], tables["m"], tables["v"],
                       header["step"], header["seed"])
    return state, header["extra"]
