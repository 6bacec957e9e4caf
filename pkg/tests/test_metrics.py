import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mofm.metrics import anomaly_auc, auc_roc, frame_aggregate, window_frame_scores


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=2, max_size=40))
def test_auc_matches_pairwise_oracle(items):
    scores = [s / 3 for s, _ in items]  # coarse values force ties
    labels = [y for _, y in items]
    if all(labels) or not any(labels):
        with pytest.raises(ValueError):
            auc_roc(scores, labels)
        return
    assert abs(auc_roc(scores, labels) - brute_auc(scores, labels)) < 1e-9


def test_auc_examples():
    assert auc_roc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc_roc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert auc_roc([0.5, 0.5], [0, 1]) == 0.5
    with pytest.raises(ValueError, match="length"):
        auc_roc([1, 2], [1])


def test_anomaly_auc_low_score_is_abnormal():
    assert anomaly_auc([0.9, 0.8, 0.1], [0, 0, 1]) == 1.0


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(st.integers(0, 15), st.lists(st.floats(0, 1), max_size=4), max_size=10),
       st.integers(0, 20))
def test_frame_aggregate_min_over_persons(per_frame, n):
    out = frame_aggregate(per_frame, n)
    assert out.shape == (n,)
    for f in range(n):
        vals = per_frame.get(f, [])
        assert out[f] == (min(vals) if vals else 1.0)


def test_frame_aggregate_infers_length():
    assert frame_aggregate({0: [0.4, 0.2], 3: [0.7]}).tolist() == [0.2, 1.0, 1.0, 0.7]
    assert frame_aggregate({}).size == 0


def test_window_frame_scores():
    out = window_frame_scores(10, [0, 3, 8], 4, [0.5, 0.3, 0.9])
    assert out.tolist() == [0.5, 0.5, 0.5, 0.3, 0.3, 0.3, 0.3, 1.0, 0.9, 0.9]
