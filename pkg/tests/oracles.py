"""Independent reference implementations used to check the package."""

from __future__ import annotations

import itertools
import math

import numpy as np


# -- network ---------------------------------------------------------------------


def unpack(vec, dims):
    """Layer (W, b) list from a flat vector, W stored in x out row-major."""
    layers, off = [], 0
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        W = np.array(vec[off:off + n_in * n_out]).reshape(n_in, n_out)
        off += n_in * n_out
        layers.append((W, np.array(vec[off:off + n_out])))
        off += n_out
    assert off == len(vec)
    return layers


def forward_loop(vec, dims, X, activation, last_linear):
    """Sample-by-sample, neuron-by-neuron forward pass."""
    act = math.tanh if activation == "tanh" else (lambda z: z)
    layers = unpack(vec, dims)
    out = []
    for x in np.asarray(X):
        h = list(x)
        for k, (W, b) in enumerate(layers):
            z = [sum(h[i] * W[i, j] for i in range(len(h))) + b[j] for j in range(W.shape[1])]
            h = z if (last_linear and k == len(layers) - 1) else [act(v) for v in z]
        out.append(h)
    return np.array(out)


def xent(logits, labels):
    total = 0.0
    for row, y in zip(logits, labels):
        m = max(row)
        total += -(row[y] - m - math.log(sum(math.exp(v - m) for v in row)))
    return total / len(labels)


def central_difference(f, x, h=1e-6):
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    for k in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        g[k] = (f(xp) - f(xm)) / (2 * h)
    return g


def relative_error(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


# -- clustering -------------------------------------------------------------------


def kl(p, q, eps=1e-9):
    p = (np.asarray(p, float) + eps)
    q = (np.asarray(q, float) + eps)
    p, q = p / p.sum(), q / q.sum()
    return float(sum(pi * math.log(pi / qi) for pi, qi in zip(p, q)))


def utility(top, members, prof, weights, phi0):
    """Cluster utility written out directly from its definition."""
    t = [prof[m].bottom_compute_time + prof[m].link_time[top] + prof[top].top_compute_time for m in members]
    W = max(t) - sum(t) / len(t)
    mix = np.mean([prof[m].label_dist for m in members], axis=0)
    return weights.lam * W / weights.waiting_norm + (1 - weights.lam) * kl(mix, phi0) / weights.kl_norm


def feasible(top, members, prof, b):
    if len(members) * b > prof[top].ingress_bandwidth:
        return False
    reach = max(prof[m].bottom_compute_time + prof[m].link_time[top] for m in members)
    return len(members) * prof[top].top_compute_time <= reach


def best_member_assignment(tops, workers, prof, weights, phi0):
    """Minimum summed utility over every feasible assignment of ``workers`` to fixed ``tops``.

    Each top keeps at least one member.
    """
    best = math.inf
    C = len(tops)
    for labels in itertools.product(range(C), repeat=len(workers)):
        groups = [[w for w, c in zip(workers, labels) if c == k] for k in range(C)]
        if any(not g for g in groups):
            continue
        if not all(feasible(t, g, prof, weights.per_worker_bandwidth) for t, g in zip(tops, groups)):
            continue
        best = min(best, sum(utility(t, g, prof, weights, phi0) for t, g in zip(tops, groups)))
    return best
