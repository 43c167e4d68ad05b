"""Independent reference implementations used as test oracles.

Written with plain loops and dense matrices on purpose; they share no code
with the package beyond its data containers.
"""

import math

import numpy as np


def dense_operator(graph):
    """Stacked (users + items) square matrix assembled edge by edge."""
    nu, ni = graph.n_users, graph.n_items
    A = np.zeros((nu + ni, nu + ni))
    for e in range(graph.n_edges):
        u, i = int(graph.edge_user[e]), nu + int(graph.edge_item[e])
        A[u, i] += graph.coeffs[e]
        A[i, u] += graph.coeffs[e]
    return A


def dense_coefficients(graph, kind_name):
    """Per-edge coefficients recomputed from scratch."""
    out = []
    for e in range(graph.n_edges):
        if kind_name == "inverse_delta_t":
            out.append(1.0 / float(graph.delta_t[e]))
        else:
            du = int(np.sum(graph.edge_user == graph.edge_user[e]))
            di = int(np.sum(graph.edge_item == graph.edge_item[e]))
            out.append(1.0 / (math.sqrt(du) * math.sqrt(di)))
    return np.array(out)


def dense_propagation(A, h0, K):
    """e = sum_k A^k h0 / (k + 1)."""
    e = np.zeros_like(h0)
    Ak = np.eye(A.shape[0])
    for k in range(K + 1):
        e += Ak @ h0 / (k + 1)
        Ak = Ak @ A
    return e


def brute_metrics(ranked, relevant, k, literal_map=False):
    """Textbook metric definitions evaluated item by item."""
    relevant = set(relevant)
    T = len(relevant)
    mrr = 0.0
    for pos, x in enumerate(ranked, start=1):
        if x in relevant:
            mrr = 1.0 / pos
            break
    recall = len([x for x in ranked[:k] if x in relevant]) / T
    ap, hits = 0.0, 0
    for pos, x in enumerate(ranked, start=1):
        if x in relevant:
            hits += 1
            ap += hits / pos
    if not literal_map:
        ap /= T
    dcg = sum(1.0 / math.log2(pos + 1) for pos, x in enumerate(ranked[:k], start=1) if x in relevant)
    idcg = sum(1.0 / math.log2(pos + 1) for pos in range(1, min(T, k) + 1))
    return {"mrr": mrr, "recall_at_k": recall, "map": ap, "ndcg_at_k": dcg / idcg}


def central_differences(loss_fn, params, h=1e-4):
    """Numerical gradient of ``loss_fn()`` w.r.t. every entry of every array in ``params``."""
    grads = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for n in range(flat.size):
            old = flat[n]
            flat[n] = old + h
            up = loss_fn()
            flat[n] = old - h
            down = loss_fn()
            flat[n] = old
            gflat[n] = (up - down) / (2 * h)
        grads[name] = g
    return grads


def max_relative_error(analytic, numeric, floor=1e-6):
    """Largest entrywise |a - n| / max(|a|, |n|, floor) over all parameters."""
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
