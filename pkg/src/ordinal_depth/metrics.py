"""Ordinal disagreement rates and 3-way classification accuracy."""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import EmptyPairSet, LengthMismatch, NonPositiveDepth
from .superpixel import Ordinal, classify_ratio


def classify_pair(x_i, x_j, delta=0.02):
    if not (x_i > 0 and x_j > 0):
        raise NonPositiveDepth(f"depths must be positive, got {x_i}, {x_j}")
    return classify_ratio(x_i, x_j, delta)


@dataclass
class EvalReport:
    """Rates are None when their denominator is empty."""

    wkdr: float
    wkdr_eq: float
    wkdr_neq: float
    n_pairs: int
    n_eq: int
    n_neq: int
    counts: dict
    accuracy: float

    def rows(self):
        return [
            ("wkdr", self.wkdr, self.n_pairs),
            ("wkdr_eq", self.wkdr_eq, self.n_eq),
            ("wkdr_neq", self.wkdr_neq, self.n_neq),
            ("accuracy", self.accuracy, self.n_pairs),
            *((f"count_{o.name.lower()}", None, self.counts[o.name]) for o in Ordinal),
        ]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["metric", "value", "count"])
            for name, value, count in self.rows():
                wr.writerow([name, "" if value is None else "%.6f" % value, count])


def _rate(wrong, mask):
    n = int(mask.sum())
    return (float(wrong[mask].sum()) / n if n else None), n


def report_from_predictions(predicted, labels, diw=False):
    """Report for ordinal predictions against labels.

    With ``diw`` the labels contain no EQ class and an EQ prediction is
    simply a disagreement (which it already is by inequality).
    """
    predicted = np.asarray([int(p) for p in predicted], dtype=np.int64)
    labels = np.asarray([int(l) for l in labels], dtype=np.int64)
    if len(predicted) != len(labels):
        raise LengthMismatch(f"{len(predicted)} predictions vs {len(labels)} labels")
    if len(labels) == 0:
        raise EmptyPairSet("no labeled pairs to evaluate")
    wrong = predicted != labels
    is_eq = labels == Ordinal.EQ
    wkdr, n = _rate(wrong, np.ones_like(wrong))
    wkdr_eq, n_eq = _rate(wrong, is_eq)
    wkdr_neq, n_neq = _rate(wrong, ~is_eq)
    if diw:
        wkdr_eq, n_eq = None, 0
    counts = {o.name: int((labels == o).sum()) for o in Ordinal}
    return EvalReport(wkdr, wkdr_eq, wkdr_neq, n, n_eq, n_neq, counts, 1.0 - wkdr)


def wkdr(depth, pairs, delta=0.02, diw=False):
    """Disagreement rates of a predicted depth source against labeled pairs.

    ``depth`` is a DepthMap (read at each pair's pixels) or a sequence of
    per-pair ``(x_i, x_j)`` depths.
    """
    pairs = [p for p in pairs]
    if not pairs:
        raise EmptyPairSet("no labeled pairs to evaluate")
    if any(p.label is None for p in pairs):
        raise ValueError("every pair needs a label")
    if hasattr(depth, "data"):
        values = [(depth.data[tuple(p.p_i)], depth.data[tuple(p.p_j)]) for p in pairs]
    else:
        values = list(depth)
        if len(values) != len(pairs):
            raise LengthMismatch(f"{len(values)} depth pairs vs {len(pairs)} labels")
    predicted = [classify_pair(a, b, delta) for a, b in values]
    return report_from_predictions(predicted, [p.label for p in pairs], diw)


def accuracy(predicted, labels):
    predicted, labels = list(predicted), list(labels)
    if len(predicted) != len(labels):
        raise LengthMismatch(f"{len(predicted)} predictions vs {len(labels)} labels")
    if not labels:
        raise EmptyPairSet("no labels")
    return sum(int(p) == int(l) for p, l in zip(predicted, labels)) / len(labels)
