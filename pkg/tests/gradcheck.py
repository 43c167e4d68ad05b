import numpy as np

from rollgcn.engine import FeatureMode, ModelConfig, Variant, backward, forward, init_state
from rollgcn.graph import build_window_graph, edge_coefficients
from rollgcn.training import BprBatch, bpr_loss_and_grad

from conftest import random_dataset
from oracles import central_differences, max_relative_error

# weights at twice the default init scale; roundoff stays far below the 1e-4 bound
SCALE = 2.0


def fixed_batch(rng, n_users, n_items, size):
    pos = rng.integers(n_items, size=size)
    neg = (pos + 1 + rng.integers(n_items - 1, size=size)) % n_items
    return BprBatch(0, rng.integers(n_users, size=size), pos, neg)


def gradient_check(seed, layers, mode, variant=Variant.WINDOWED, users=20, items=30, batch=25,
                   id_dim=6, feature_dim=3):
    """Max relative error between analytic and central-difference gradients of a batch loss."""
    ds = random_dataset(seed, n_users=users, n_items=items, n_days=12, n_events=150, lifetimes=True)
    cfg = ModelConfig(variant, layers=layers, id_dim=id_dim, feature_mode=mode, feature_dim=feature_dim,
                      window=None if variant is Variant.STATIC else 4)
    state = init_state(cfg, ds.n_users, ds.n_items, ds.items.vocab_sizes, seed=seed)
    for p in state.params.values():
        p *= SCALE
    graph = edge_coefficients(build_window_graph(ds, 10, 4), cfg.normalizer)
    rng = np.random.default_rng(seed)
    b = fixed_batch(rng, ds.n_users, ds.n_items, batch)
    codes = ds.items.codes

    def loss():
        return bpr_loss_and_grad(b, forward(state, graph, codes))[0]

    fwd = forward(state, graph, codes)
    _, gu, gi = bpr_loss_and_grad(b, fwd)
    analytic = backward(state, fwd, gu, gi, codes)
    numeric = central_differences(loss, state.params, h=1e-4)
    assert set(analytic) == set(state.params)
    return max_relative_error(analytic, numeric)


MODES = (FeatureMode.ID, FeatureMode.FEATS)
