"""Independent reference implementations used as test oracles."""

import math

import numpy as np

EPS_MIN = 1e-6


def energy_direct(n, pairs, weights, edges, edge_w, mu, var, y, eps):
    """Energy written out term by term with plain Python loops."""
    total = 0.0
    for (i, j), w, e in zip(pairs, weights, eps):
        d = y[i] - y[j]
        total += w[0] * (abs(d) - e[0]) ** 2
        total += w[1] * (d - e[1]) ** 2
        total += w[2] * (-d - e[2]) ** 2
        for o in range(3):
            total += (e[o] - mu[o]) ** 2 / var[o]
    for (a, b), w in zip(edges, edge_w):
        total += w * (y[a] - y[b]) ** 2
    return total


def grid_search(n, pairs, weights, edges, edge_w, mu, var, lo, hi, n_y=41, n_eps=21):
    """Exhaustive minimum over a y grid (n_y points per node on [log lo,
    log hi]) with each slack minimized over n_eps points of mu +- 3 sigma.

    Returns (best energy, best grid indices, energy gap), the gap being the
    largest energy change of a one-step move of a single node away from
    the best grid point.
    """
    ys = np.linspace(math.log(lo), math.log(hi), n_y)
    step = ys[1] - ys[0]
    diffs = np.arange(-(n_y - 1), n_y) * step
    tables = []
    for w in weights:
        table = np.zeros(len(diffs))
        for o in range(3):
            grid = np.maximum(mu[o] + math.sqrt(var[o]) * np.linspace(-3, 3, n_eps), EPS_MIN)
            target = (np.abs(diffs), diffs, -diffs)[o]
            cost = w[o] * (target[:, None] - grid[None, :]) ** 2 + (grid[None, :] - mu[o]) ** 2 / var[o]
            table += cost.min(axis=1)
        tables.append(table)
    idx = np.indices((n_y,) * n).reshape(n, -1).T
    e = np.zeros(len(idx))
    for (i, j), table in zip(pairs, tables):
        e += table[idx[:, i] - idx[:, j] + n_y - 1]
    for (a, b), w in zip(edges, edge_w):
        e += w * ((idx[:, a] - idx[:, b]) * step) ** 2
    k = int(np.argmin(e))
    best = idx[k]
    gap = 0.0
    for node in range(n):
        for move in (-1, 1):
            other = best.copy()
            other[node] += move
            if 0 <= other[node] < n_y:
                val = e[int(np.ravel_multi_index(other, (n_y,) * n))]
                gap = max(gap, abs(val - e[k]))
    return float(e[k]), best, gap


def wkdr_brute(depth_pairs, labels, delta):
    """Disagreement fraction with the ratio test spelled out."""
    wrong = 0
    for (a, b), lab in zip(depth_pairs, labels):
        if a / b > 1 + delta:
            pred = 1
        elif b / a > 1 + delta:
            pred = 2
        else:
            pred = 0
        wrong += pred != int(lab)
    return wrong / len(labels)


def random_problem(rng, max_nodes=4, max_pairs=4):
    n = int(rng.integers(2, max_nodes + 1))
    all_pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    k = int(rng.integers(1, max_pairs + 1))
    pairs = [all_pairs[t] for t in rng.choice(len(all_pairs), size=min(k, len(all_pairs)), replace=False)]
    weights = rng.dirichlet(np.full(3, 0.5), size=len(pairs))
    sharp = rng.random(len(pairs)) < 0.3
    weights[sharp] = np.eye(3)[rng.integers(0, 3, sharp.sum())]
    undirected = [(a, b) for a in range(n) for b in range(a + 1, n)]
    edges = [e for e in undirected if rng.random() < 0.5]
    edge_w = rng.uniform(0.0, 1.0, len(edges))
    mu = rng.uniform(0.0, 1.0, 3)
    var = rng.uniform(0.02, 1.0, 3)
    return n, pairs, weights, edges, edge_w, mu, var
