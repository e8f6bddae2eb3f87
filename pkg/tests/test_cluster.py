import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment
from sklearn.metrics import adjusted_rand_score, normalized_mutual_info_score

from smart_pvc.cluster import acc, ari, contingency, evaluate_labels, hungarian, kmeans, nmi

labels = st.lists(st.integers(0, 4), min_size=2, max_size=30)


def test_worked_examples():
    assert acc([0, 0, 1, 1], [0, 1, 1, 1]) == 0.75
    assert nmi([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_array_equal(hungarian([[4, 1], [2, 3]]), [1, 0])


def test_ari_standard_value():
    # the standard pair-counting formula (and sklearn) give -1/2 here
    assert ari([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(-0.5, abs=1e-12)
    assert adjusted_rand_score([0, 1, 0, 1], [0, 0, 1, 1]) == pytest.approx(-0.5)


def test_perfect_agreement_up_to_renaming():
    t = [0, 0, 1, 1, 2, 2]
    p = [2, 2, 0, 0, 1, 1]
    assert acc(p, t) == 1.0 and nmi(p, t) == pytest.approx(1.0) and ari(p, t) == pytest.approx(1.0)


@settings(max_examples=150, deadline=None)
@given(labels, st.data())
def test_metrics_match_sklearn(pred, data):
    truth = data.draw(st.lists(st.integers(0, 4), min_size=len(pred), max_size=len(pred)))
    assert nmi(pred, truth) == pytest.approx(normalized_mutual_info_score(truth, pred), abs=1e-10)
    assert ari(pred, truth) == pytest.approx(adjusted_rand_score(truth, pred), abs=1e-10)


@settings(max_examples=150, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=7), st.data())
def test_acc_bruteforce(pred, data):
    truth = data.draw(st.lists(st.integers(0, 3), min_size=len(pred), max_size=len(pred)))
    best = max(sum(perm[p] == t for p, t in zip(pred, truth)) for perm in itertools.permutations(range(4)))
    assert acc(pred, truth) == best / len(pred)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_hungarian_matches_scipy(n, m, seed):
    C = np.random.default_rng(seed).normal(size=(n, m))
    col = hungarian(C)
    r, c = linear_sum_assignment(C)
    if n <= m:
        assert len(set(col.tolist())) == n
        assert C[np.arange(n), col].sum() == pytest.approx(C[r, c].sum(), abs=1e-9)
    else:
        rows = np.flatnonzero(col >= 0)
        assert len(rows) == m
        assert C[rows, col[rows]].sum() == pytest.approx(C[r, c].sum(), abs=1e-9)


def test_hungarian_rejects_nonfinite():
    with pytest.raises(ValueError):
        hungarian([[1.0, np.inf]])


def test_contingency():
    np.testing.assert_array_equal(contingency([0, 0, 1], [1, 1, 1]), [[2], [1]])
    with pytest.raises(ValueError):
        contingency([0, 1], [0])


def blobs(rng, k=4, per=50):
    centers = rng.normal(scale=10, size=(k, 3))
    X = np.vstack([c + rng.normal(size=(per, 3)) for c in centers])
    return X, np.repeat(np.arange(k), per)


def test_kmeans_separable(rng):
    X, y = blobs(rng)
    res = evaluate_labels(kmeans(X, 4, restarts=5, seed=0), y)
    assert res.acc == 1.0 and res.nmi == pytest.approx(1.0) and res.ari == pytest.approx(1.0)
    assert res.metrics()["k"] == 4
    assert res.inertia == pytest.approx(((X - res.centers[res.assignments]) ** 2).sum())


def test_kmeans_deterministic_and_thread_independent(rng):
    X, _ = blobs(rng, k=5, per=30)
    a = kmeans(X, 5, restarts=6, seed=3)
    b = kmeans(X, 5, restarts=6, seed=3, n_jobs=3)
    np.testing.assert_array_equal(a.assignments, b.assignments)
    assert a.inertia == b.inertia


def test_kmeans_inertia_history_monotone(rng):
    X, _ = blobs(rng, k=3, per=40)
    h = kmeans(X, 6, restarts=1, seed=1).inertia_history
    assert all(b <= a * (1 + 1e-9) for a, b in zip(h, h[1:]))


def test_kmeans_duplicate_points_no_empty_cluster():
    X = np.vstack([np.zeros((10, 2)), np.ones((2, 2))])
    res = kmeans(X, 3, restarts=2, seed=0)
    assert len(np.unique(res.assignments)) >= 2
    assert np.isfinite(res.inertia)


def test_kmeans_bad_k(rng):
    with pytest.raises(ValueError):
        kmeans(rng.normal(size=(3, 2)), 4)
