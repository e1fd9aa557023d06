import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ordinal_depth.dataio import DepthMap
from ordinal_depth.errors import EmptyPairSet, LengthMismatch, NonPositiveDepth
from ordinal_depth.metrics import accuracy, classify_pair, report_from_predictions, wkdr
from ordinal_depth.superpixel import Ordinal, PairSample


def _pairs(labels):
    return [PairSample(k, k + 1, (0, 2 * k), (0, 2 * k + 1), Ordinal(l)) for k, l in enumerate(labels)]


def test_classify_examples():
    assert classify_pair(1.03, 1.00, 0.02) == Ordinal.GT
    assert classify_pair(1.00, 1.00, 0.02) == Ordinal.EQ
    assert classify_pair(1.00, 1.03, 0.02) == Ordinal.LT
    with pytest.raises(NonPositiveDepth):
        classify_pair(0.0, 1.0)


def test_wkdr_examples():
    labels = [Ordinal.GT, Ordinal.EQ, Ordinal.LT, Ordinal.GT]
    depths = [(2.0, 1.0), (1.0, 1.0), (1.0, 2.0), (2.0, 1.0)]
    r = wkdr(depths, _pairs(labels))
    assert (r.wkdr, r.wkdr_eq, r.wkdr_neq, r.accuracy) == (0, 0, 0, 1)
    depths[3] = (1.0, 2.0)
    assert wkdr(depths, _pairs(labels)).wkdr == 0.25
    r = wkdr([(1.01, 1.0)], _pairs([Ordinal.GT]))
    assert r.wkdr == 1.0 and r.wkdr_eq is None and r.n_eq == 0


def test_wkdr_reads_depth_map():
    d = DepthMap(np.array([[2.0, 1.0, 1.0, 1.0]]))
    r = wkdr(d, _pairs([Ordinal.GT, Ordinal.GT]))
    assert r.wkdr == 0.5 and r.wkdr_neq == 0.5


def test_errors():
    with pytest.raises(EmptyPairSet):
        wkdr([], [])
    with pytest.raises(LengthMismatch):
        wkdr([(1.0, 2.0)], _pairs([0, 1]))
    with pytest.raises(LengthMismatch):
        accuracy([0, 1], [0])


def test_accuracy_examples():
    assert accuracy([0, 1, 2], [0, 1, 2]) == 1.0
    assert accuracy([1, 2, 0], [0, 1, 2]) == 0.0
    assert accuracy([0, 1, 2, 2], [0, 1, 2, 1]) == 0.75


def test_diw_mode_counts_eq_as_wrong():
    r = report_from_predictions([Ordinal.EQ, Ordinal.GT], [Ordinal.GT, Ordinal.GT], diw=True)
    assert r.wkdr == 0.5 and r.wkdr_neq == 0.5 and r.wkdr_eq is None


def test_report_csv(tmp_path):
    r = report_from_predictions([0, 1, 1], [0, 1, 2])
    r.write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "metric,value,count"
    assert "wkdr,0.333333,3" in lines


depth_pairs = st.lists(st.tuples(st.floats(0.1, 10), st.floats(0.1, 10), st.integers(0, 2)),
                       min_size=1, max_size=30)


@settings(max_examples=200, deadline=None)
@given(depth_pairs, st.floats(0.0, 0.2))
def test_weighted_average_and_order_invariance(rows, delta):
    values = [(a, b) for a, b, _ in rows]
    labels = [l for *_, l in rows]
    r = wkdr(values, _pairs(labels), delta)
    parts = [(rate, n) for rate, n in ((r.wkdr_eq, r.n_eq), (r.wkdr_neq, r.n_neq)) if n]
    assert r.wkdr == pytest.approx(sum(rate * n for rate, n in parts) / r.n_pairs)
    flipped = [p.swapped() for p in _pairs(labels)]
    s = wkdr([(b, a) for a, b in values], flipped, delta)
    assert (s.wkdr, s.wkdr_eq, s.wkdr_neq) == (r.wkdr, r.wkdr_eq, r.wkdr_neq)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.1, 10), st.floats(0.1, 10), st.floats(0, 0.5), st.floats(0, 0.5))
def test_raising_delta_never_leaves_eq(a, b, d1, d2):
    lo, hi = sorted((d1, d2))
    if classify_pair(a, b, lo) == Ordinal.EQ:
        assert classify_pair(a, b, hi) == Ordinal.EQ
