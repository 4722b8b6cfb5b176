import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from raid.ranking import evaluate_model, hr_at_k, ndcg_at_k, rank_test_item, user_ranks
from raid.train import EmbeddingModel


def model_with_scores(scores):
    """One user whose item scores are exactly ``scores`` (d = 1, P = 1)."""
    scores = np.asarray(scores, dtype=float)
    return EmbeddingModel(np.ones((1, 1)), scores[:, None])


def test_unique_max_ranks_first():
    assert rank_test_item(model_with_scores([0.1, 0.9, 0.3]), 0, 1) == 1


def test_all_equal_scores_rank_by_index():
    model = model_with_scores(np.zeros(6))
    assert [rank_test_item(model, 0, v) for v in range(6)] == [1, 2, 3, 4, 5, 6]
    assert rank_test_item(model, 0, 4, excluded=[1, 2]) == 3


def test_rank_matches_full_sort():
    rng = np.random.default_rng(0)
    model = model_with_scores(rng.normal(size=20))
    order = sorted(range(20), key=lambda v: (-model.Q[v, 0], v))
    for v in range(20):
        assert rank_test_item(model, 0, v) == order.index(v) + 1


def test_excluded_items_are_not_candidates():
    model = model_with_scores([5.0, 4.0, 3.0, 2.0])
    assert rank_test_item(model, 0, 3, excluded=[0, 1]) == 2
    with pytest.raises(ValueError):
        rank_test_item(model, 0, 1, excluded=[1])


def test_metric_examples():
    assert hr_at_k([1, 1, 1], 10) == 1.0 and ndcg_at_k([1, 1, 1], 10) == 1.0
    assert hr_at_k([3], 10) == 1.0 and ndcg_at_k([3], 10) == pytest.approx(0.5)
    assert hr_at_k([11], 10) == 0.0 and ndcg_at_k([11], 10) == 0.0
    with pytest.raises(ValueError):
        hr_at_k([], 5)
    with pytest.raises(ValueError):
        ndcg_at_k([1], 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 50), min_size=1, max_size=30))
def test_metric_invariants(ranks):
    hr = [hr_at_k(ranks, k) for k in (5, 10, 15, 20)]
    nd = [ndcg_at_k(ranks, k) for k in (5, 10, 15, 20)]
    assert hr == sorted(hr) and nd == sorted(nd)
    assert all(0 <= n <= h <= 1 for n, h in zip(nd, hr))


def oracle_model(N, M, test_items, d=None):
    """Scores the test item of every user strictly highest."""
    P = np.eye(N)
    Q = np.zeros((M, N))
    Q[test_items, np.arange(N)] = 1.0
    return EmbeddingModel(P, Q)


def test_oracle_model_scores_perfectly():
    rng = np.random.default_rng(1)
    N, M = 15, 12
    test = rng.integers(0, M, N)
    train = np.array([(u, v) for u in range(N) for v in range(M) if v != test[u] and rng.random() < 0.3])
    report = evaluate_model(oracle_model(N, M, test), train, test)
    assert all(v == 1.0 for v in report.hr.values()) and all(v == 1.0 for v in report.ndcg.values())
    assert report.num_users == N


def test_users_without_test_item_are_skipped():
    model = oracle_model(4, 5, np.array([0, 1, 2, 3]))
    report = evaluate_model(model, np.empty((0, 2)), np.array([0, -1, 2, -1]))
    assert report.num_users == 2 and report.skipped_users == 2


def test_random_model_hit_rate_matches_uniform_expectation():
    rng = np.random.default_rng(2)
    N, M, n_train = 1500, 100, 20
    train = np.array([(u, v) for u in range(N) for v in rng.choice(M, n_train, replace=False)])
    test = np.array([rng.choice(np.setdiff1d(np.arange(M), train[train[:, 0] == u, 1])) for u in range(N)])
    model = EmbeddingModel(rng.normal(size=(N, 8)), rng.normal(size=(M, 8)))
    report = evaluate_model(model, train, test)
    for k in (5, 10, 15, 20):
        expected = k / (M - n_train)
        assert abs(report.hr[k] - expected) <= 0.2 * expected


def test_vectorized_ranks_agree_with_single_user_ranks():
    rng = np.random.default_rng(3)
    N, M = 20, 15
    model = EmbeddingModel(rng.normal(size=(N, 3)), rng.normal(size=(M, 3)))
    train = np.array([(u, v) for u in range(N) for v in rng.choice(M, 4, replace=False)])
    test = np.array([rng.choice(np.setdiff1d(np.arange(M), train[train[:, 0] == u, 1])) for u in range(N)])
    ranks = user_ranks(model, train, test, block=7)
    for u in range(N):
        assert ranks[u] == rank_test_item(model, u, test[u], excluded=train[train[:, 0] == u, 1])


def test_report_is_deterministic_and_serializable():
    rng = np.random.default_rng(4)
    model = EmbeddingModel(rng.normal(size=(10, 3)), rng.normal(size=(30, 3)))
    test = rng.integers(0, 30, 10)
    a, b = evaluate_model(model, np.empty((0, 2)), test), evaluate_model(model, np.empty((0, 2)), test)
    assert a.to_json() == b.to_json()
    data = json.loads(a.to_json())
    assert set(data["hr"]) == {"5", "10", "15", "20"}
