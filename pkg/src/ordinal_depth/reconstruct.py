"""Dense relative depth from pairwise ordinal probabilities.

Unknowns are the log-depths ``y`` of the superpixels and three slacks per
scored pair.  The energy is

    E = sum_pairs sum_o w_o * theta_o
        + sum_edges w_ab * (y_a - y_b)^2
        + sum_pairs sum_o (eps_o - mu_o)^2 / var_o

with d = y_i - y_j and theta_EQ = (|d| - eps_EQ)^2, theta_GT = (d - eps_GT)^2,
theta_LT = (-d - eps_LT)^2.  It is minimized over the box
log L <= y <= log U, eps >= EPS_MIN.  For fixed y the energy is a
separable quadratic in each slack, so the slacks are kept at their exact
(clipped) minimizer and y is updated by projected gradient descent with
an Armijo backtracking line search.
"""

import csv
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .dataio import DepthMap
from .errors import ClassUnderpopulated, LengthMismatch, NonFiniteInput
from .superpixel import Ordinal, build_adjacency

EPS_MIN = 1e-6
VAR_FLOOR = 1e-4


@dataclass
class SlackPriors:
    """Mean and variance of |log x_i - log x_j| per class, indexed by Ordinal."""

    mu: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(3)
        self.var = np.asarray(self.var, dtype=np.float64).reshape(3)
        if np.any(self.var <= 0) or np.any(self.mu < 0):
            raise ValueError("slack priors need var > 0 and mu >= 0")

    def to_dict(self):
        return {o.name: {"mu": float(self.mu[o]), "var": float(self.var[o])} for o in Ordinal}

    @classmethod
    def from_dict(cls, d):
        return cls([d[o.name]["mu"] for o in Ordinal], [d[o.name]["var"] for o in Ordinal])

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def slack_priors_from_data(samples, var_floor=VAR_FLOOR):
    """Priors from ``(x_i, x_j, label)`` triples of ground-truth depths.

    Variances are unbiased sample variances, floored at ``var_floor``.
    """
    ratios = {o: [] for o in Ordinal}
    for x_i, x_j, label in samples:
        ratios[Ordinal(label)].append(abs(math.log(x_i) - math.log(x_j)))
    mu, var = [], []
    for o in Ordinal:
        r = np.asarray(ratios[o])
        if len(r) < 2:
            raise ClassUnderpopulated(f"class {o.name} has {len(r)} samples, need 2")
        mu.append(r.mean())
        var.append(max(r.var(ddof=1), var_floor))
    return SlackPriors(mu, var)


def priors_from_pairs(depth, pairs, var_floor=VAR_FLOOR):
    """Priors from labeled pairs read against a ground-truth DepthMap."""
    from .superpixel import depth_at

    return slack_priors_from_data(
        ((depth_at(depth, p.p_i), depth_at(depth, p.p_j), p.label) for p in pairs), var_floor)


@dataclass
class OrdinalProbs:
    """Scored pairs ``(P, 2)`` and their (p_eq, p_gt, p_lt) rows ``(P, 3)``."""

    pairs: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1, 3)
        if len(self.pairs) != len(self.values):
            raise LengthMismatch("pairs and probability rows differ in length")
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteInput("probabilities must be finite")
        if np.any(self.values < 0) or np.any(np.abs(self.values.sum(axis=1) - 1) > 1e-5):
            raise ValueError("probability rows must be >= 0 and sum to 1")

    def __len__(self):
        return len(self.pairs)

    def eq_lookup(self):
        """Unordered pair -> p_eq (EQ is symmetric in i, j)."""
        return {(min(a, b), max(a, b)): float(v[0])
                for (a, b), v in zip(self.pairs.tolist(), self.values)}


PROB_FIELDS = ["i", "j", "p_eq", "p_gt", "p_lt"]


def write_probs_csv(path, probs):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(PROB_FIELDS)
        for (i, j), v in zip(probs.pairs.tolist(), probs.values):
            wr.writerow([i, j, *("%.8f" % x for x in v)])


def read_probs_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    pairs = [(int(r["i"]), int(r["j"])) for r in rows]
    values = np.array([[float(r["p_eq"]), float(r["p_gt"]), float(r["p_lt"])] for r in rows])
    # renormalize the rounding of the text form
    if len(values):
        values /= values.sum(axis=1, keepdims=True)
    return OrdinalProbs(pairs, values)


def segment_colors(image, spmap):
    """Mean RGB of every superpixel, (S, 3)."""
    rgb = image.rgb().reshape(-1, 3)
    flat = spmap.labels.ravel()
    sums = np.stack([np.bincount(flat, weights=rgb[:, c], minlength=spmap.n_segments)
                     for c in range(3)], axis=1)
    return sums / np.maximum(spmap.sizes, 1)[:, None]


def smoothness_weights(image, spmap, probs, k1=0.5, k2=0.5, rho=0.1):
    """Adjacent edges ``(E, 2)`` and weights
    ``k1 * exp(-|I_a - I_b|^2 / rho) + k2 * p_eq(a, b)`` (p_eq = 0 if unscored)."""
    if min(k1, k2, rho) <= 0:
        raise ValueError("k1, k2 and rho must be positive")
    edges = np.asarray(build_adjacency(spmap).edges, dtype=np.int64).reshape(-1, 2)
    colors = segment_colors(image, spmap)
    eq = probs.eq_lookup() if probs is not None else {}
    diff = ((colors[edges[:, 0]] - colors[edges[:, 1]]) ** 2).sum(axis=1)
    p_eq = np.array([eq.get((a, b), 0.0) for a, b in edges.tolist()])
    return edges, k1 * np.exp(-diff / rho) + k2 * p_eq


@dataclass
class EnergySpec:
    n_nodes: int
    pairs: np.ndarray       # (P, 2)
    weights: np.ndarray     # (P, 3) ordinal probabilities
    edges: np.ndarray       # (E, 2) adjacent superpixels
    edge_weights: np.ndarray
    priors: SlackPriors
    lo: float = 0.1
    hi: float = 10.0

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1, 3)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.edge_weights = np.asarray(self.edge_weights, dtype=np.float64).reshape(-1)
        if not 0 < self.lo < self.hi:
            raise ValueError(f"need 0 < lo < hi, got {self.lo}, {self.hi}")
        if len(self.pairs) != len(self.weights) or len(self.edges) != len(self.edge_weights):
            raise LengthMismatch("pair/edge arrays differ in length from their weights")
        for arr in (self.weights, self.edge_weights):
            if not np.all(np.isfinite(arr)):
                raise NonFiniteInput("energy weights must be finite")
        for arr in (self.pairs, self.edges):
            if arr.size and (arr.min() < 0 or arr.max() >= self.n_nodes):
                raise ValueError("node index out of range")

    @property
    def y_bounds(self):
        return math.log(self.lo), math.log(self.hi)


def build_spec(image, spmap, probs, priors, k1=0.5, k2=0.5, rho=0.1, lo=0.1, hi=10.0):
    edges, ew = smoothness_weights(image, spmap, probs, k1, k2, rho)
    return EnergySpec(spmap.n_segments, probs.pairs, probs.values, edges, ew, priors, lo, hi)


# --- energy -----------------------------------------------------------------

def _terms(spec, y, eps, signs=None):
    """Residuals r_o with theta_o = r_o^2, and the pair differences."""
    d = y[spec.pairs[:, 0]] - y[spec.pairs[:, 1]]
    a = np.abs(d) if signs is None else signs * d
    r = np.stack([a - eps[:, 0], d - eps[:, 1], -d - eps[:, 2]], axis=1)
    return d, r


def energy(spec, y, eps, signs=None):
    """Total energy.  ``signs`` (one +-1 per pair) replaces |d| in the EQ
    term by ``sign * d``, giving a convex quadratic that upper-bounds E."""
    y = np.asarray(y, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64).reshape(-1, 3)
    if y.shape != (spec.n_nodes,) or eps.shape != (len(spec.pairs), 3):
        raise LengthMismatch("y / eps shapes do not match the energy problem")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(eps))):
        raise NonFiniteInput("y and eps must be finite")
    _, r = _terms(spec, y, eps, signs)
    e = (spec.weights * r * r).sum()
    if len(spec.edges):
        g = y[spec.edges[:, 0]] - y[spec.edges[:, 1]]
        e += (spec.edge_weights * g * g).sum()
    e += (((eps - spec.priors.mu) ** 2) / spec.priors.var).sum()
    return float(e)


def gradient(spec, y, eps, signs=None):
    """Gradient of :func:`energy`; at d = 0 the EQ term contributes 0."""
    d, r = _terms(spec, y, eps, signs)
    wr = 2.0 * spec.weights * r
    s = np.sign(d) if signs is None else signs
    dd = wr[:, 0] * s + wr[:, 1] - wr[:, 2]
    n = spec.n_nodes
    gy = np.bincount(spec.pairs[:, 0], weights=dd, minlength=n)
    gy -= np.bincount(spec.pairs[:, 1], weights=dd, minlength=n)
    if len(spec.edges):
        ge = 2.0 * spec.edge_weights * (y[spec.edges[:, 0]] - y[spec.edges[:, 1]])
        gy += np.bincount(spec.edges[:, 0], weights=ge, minlength=n)
        gy -= np.bincount(spec.edges[:, 1], weights=ge, minlength=n)
    geps = -wr + 2.0 * (eps - spec.priors.mu) / spec.priors.var
    return gy, geps


def best_slacks(spec, y, signs=None):
    """Slacks minimizing E for fixed ``y``: every eps_o enters one
    separable quadratic, so the minimizer is a clipped weighted mean."""
    d = y[spec.pairs[:, 0]] - y[spec.pairs[:, 1]]
    a = np.abs(d) if signs is None else signs * d
    target = np.stack([a, d, -d], axis=1)
    prec = 1.0 / spec.priors.var
    eps = (spec.weights * target + prec * spec.priors.mu) / (spec.weights + prec)
    return np.maximum(eps, EPS_MIN)


def _diag_scale(spec):
    """Diagonal preconditioner for y (pair and edge degree)."""
    n = spec.n_nodes
    w = 2.0 * spec.weights.sum(axis=1)
    h = np.bincount(spec.pairs[:, 0], weights=w, minlength=n)
    h += np.bincount(spec.pairs[:, 1], weights=w, minlength=n)
    if len(spec.edges):
        we = 2.0 * spec.edge_weights
        h += np.bincount(spec.edges[:, 0], weights=we, minlength=n)
        h += np.bincount(spec.edges[:, 1], weights=we, minlength=n)
    return np.maximum(h, 1e-3)


@dataclass
class Solution:
    y: np.ndarray
    eps: np.ndarray
    energy: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)
    stalled: bool = False

    @property
    def depths(self):
        return np.exp(self.y)


def initial_point(spec):
    lo, hi = spec.y_bounds
    y = np.full(spec.n_nodes, 0.5 * (lo + hi))
    eps = np.maximum(np.tile(spec.priors.mu, (len(spec.pairs), 1)), EPS_MIN)
    return y, eps


def _descend(spec, y, eps, tol, max_iter, signs=None):
    """Projected gradient on y with the slacks kept at their exact
    minimizer, from the feasible start (y, eps).

    Each trial step is projected onto the y box; the first trial uses a
    Barzilai-Borwein length and is halved until the Armijo condition
    holds.  Returns (y, eps, energy, iterations, converged, stalled, trace).
    """
    lo, hi = spec.y_bounds
    scale = _diag_scale(spec)
    e = energy(spec, y, eps, signs)
    trace = [e]
    eps_star = best_slacks(spec, y, signs)
    e_star = energy(spec, y, eps_star, signs)
    if e_star < e:
        eps, e = eps_star, e_star
        trace.append(e)
    step, prev = 1.0, None
    converged = stalled = False
    it = 0
    while it < max_iter:
        g, _ = gradient(spec, y, eps, signs)
        g = g / scale
        if prev is not None:
            s_y, s_g = y - prev[0], (g - prev[1]) * scale
            curv = (s_y * s_g).sum()
            step = (s_y * s_y * scale).sum() / curv if curv > 0 else 1.0
            step = min(max(step, 1e-12), 1e12)
        first_move = None
        while True:
            y_new = np.clip(y - step * g, lo, hi)
            move = (g * scale * (y - y_new)).sum()
            if move <= 0:
                converged = True  # projected gradient vanishes
                break
            if first_move is None:
                first_move = move
            eps_new = best_slacks(spec, y_new, signs)
            e_new = energy(spec, y_new, eps_new, signs)
            if e_new <= e - 1e-4 * move:
                break
            step *= 0.5
            if step < 1e-20:
                # a predicted decrease below the energy's float resolution
                # means we are already at the minimizer
                if first_move <= 1e-12 * abs(e):
                    converged = True
                else:
                    stalled = True
                break
        if converged or stalled:
            break
        it += 1
        decrease = e - e_new
        prev = (y, g)
        y, eps, e = y_new, eps_new, e_new
        trace.append(e)
        if decrease <= tol * abs(e) or e == 0.0:
            converged = True
            break
    return y, eps, e, it, converged, stalled, trace


def solve(spec, tol=1e-8, max_iter=20000, max_sign_search=6):
    """Minimize the energy from y = midpoint of the log bounds, eps = mu.

    Because (|d| - eps)^2 = min over s = +-1 of (s d - eps)^2 when eps >= 0,
    E is the pointwise minimum of convex quadratics, one per sign pattern
    of the EQ-weighted pairs.  When there are at most ``max_sign_search``
    such pairs every pattern is solved as a convex problem and the best
    point (if better) is polished on E itself; otherwise the result is the
    plain local descent.

    The energy trace is non-increasing and every iterate is feasible.  A
    line search that cannot make progress returns the best iterate with
    ``converged=False``.
    """
    y0, eps0 = initial_point(spec)
    y, eps, e, it, conv, stalled, trace = _descend(spec, y0, eps0, tol, max_iter)
    eq_pairs = np.flatnonzero(spec.weights[:, 0] > 0)
    if 0 < len(eq_pairs) <= max_sign_search:
        best = None
        for pattern in itertools.product((1.0, -1.0), repeat=len(eq_pairs)):
            signs = np.ones(len(spec.pairs))
            signs[eq_pairs] = pattern
            cy, ceps, _, _, _, _, _ = _descend(spec, y0, eps0, tol, max_iter, signs)
            ce = energy(spec, cy, ceps)
            if best is None or ce < best[0]:
                best = (ce, cy, ceps)
        if best[0] < e:
            y, eps, e2, it2, conv, stalled, tail = _descend(spec, best[1], best[2], tol, max_iter)
            trace += tail
            it += it2
            e = e2
    return Solution(y, eps, e, it, conv, trace, stalled)


def floodfill(spmap, y):
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (spmap.n_segments,):
        raise LengthMismatch(f"need {spmap.n_segments} values, got {y.shape}")
    data = np.exp(y)[spmap.labels]
    return DepthMap(data, np.ones(data.shape, dtype=bool))


def write_solution_csv(path, spmap, solution):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["segment", "row", "col", "size", "log_depth", "depth"])
        for s in range(spmap.n_segments):
            r, c = spmap.centroids[s]
            wr.writerow([s, "%.3f" % r, "%.3f" % c, int(spmap.sizes[s]),
                         "%.8f" % solution.y[s], "%.8f" % math.exp(solution.y[s])])
