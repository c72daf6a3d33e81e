import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nlvc.metrics import EvalResult, evaluate, gap_at_k, hit_at_one, top_k

from oracles import ap_oracle


def test_top_k_order_and_ties():
    assert top_k(np.array([0.1, 0.9, 0.5, 0.9]), 3) == [(1, 0.9), (3, 0.9), (2, 0.5)]
    assert len(top_k(np.arange(5.0), 20)) == 5
    with pytest.raises(ValueError):
        top_k(np.ones(3), 0)


def test_gap_perfect_single():
    assert gap_at_k([np.array([0.9, 0.1])], [[0]]) == 1.0


def test_gap_hand_example():
    # pooled ranking: (v0,c0,0.9) hit, (v1,c0,0.8) miss, (v1,c1,0.7) hit
    preds = [[(0, 0.9)], [(0, 0.8), (1, 0.7)]]
    assert abs(gap_at_k(preds, [[0], [1]]) - (1 + 2 / 3) / 2) < 1e-9


def test_gap_all_wrong():
    assert gap_at_k([np.array([0.9, 0.1])], [[1]], k=1) == 0.0


def test_gap_counts_unretrieved_positives():
    # one of two positives never appears in the top-k
    assert gap_at_k([np.array([0.9, 0.5, 0.1])], [[0, 2]], k=2) == 0.5


def test_gap_errors():
    with pytest.raises(ValueError):
        gap_at_k([np.ones(3)], [[]])
    with pytest.raises(ValueError):
        gap_at_k([np.ones(3)], [[0], [1]])


@pytest.mark.parametrize("seed", range(200))
def test_gap_matches_bruteforce_oracle(seed):
    r = np.random.default_rng(seed)
    V, C = int(r.integers(1, 21)), int(r.integers(1, 31))
    k = int(r.integers(1, 25))
    probs = r.random((V, C))
    if seed % 4 == 0:
        probs = np.round(probs, 1)  # plenty of ties
    labels = [set(r.choice(C, size=int(r.integers(0, min(C, 4) + 1)), replace=False).tolist())
              for _ in range(V)]
    if sum(map(len, labels)) == 0:
        labels[0] = {0}
    assert abs(gap_at_k(list(probs), [sorted(s) for s in labels], k) - ap_oracle(probs, labels, k)) < 1e-9


@given(st.integers(0, 10 ** 6), st.floats(0.01, 100))
def test_gap_scale_invariance(seed, scale):
    r = np.random.default_rng(seed)
    probs = r.random((6, 8))
    labels = [[int(r.integers(0, 8))] for _ in range(6)]
    assert gap_at_k(list(probs), labels, 5) == gap_at_k(list(probs * scale), labels, 5)


@given(st.integers(0, 10 ** 6))
def test_gap_in_unit_interval_and_perfect_iff_separated(seed):
    r = np.random.default_rng(seed)
    probs = r.random((5, 6))
    labels = [sorted(set(r.integers(0, 6, size=2).tolist())) for _ in range(5)]
    g = gap_at_k(list(probs), labels, 6)
    assert 0.0 <= g <= 1.0
    perfect = probs.copy()
    for v, ls in enumerate(labels):
        perfect[v, ls] += 10
    assert gap_at_k(list(perfect), labels, 6) == 1.0


def test_hit_at_one():
    preds = [np.array([0.1, 0.9]), np.array([0.8, 0.2])]
    assert hit_at_one(preds, [[1], [0]]) == 1.0
    assert hit_at_one(preds, [[0], [1]]) == 0.0
    r = np.random.default_rng(0)
    P = r.random((50, 7))
    L = [[int(x)] for x in r.integers(0, 7, size=50)]
    assert hit_at_one(list(P), L) == sum(int(np.argmax(p)) == l[0] for p, l in zip(P, L)) / 50
    with pytest.raises(ValueError):
        hit_at_one([], [])


def test_evaluate_report():
    res = evaluate([np.array([0.9, 0.1])], [[0]], k=20)
    assert isinstance(res, EvalResult)
    assert res.report_lines()[0] == "GAP=1.000000"
    assert json.loads(res.to_json())["positives"] == 1
