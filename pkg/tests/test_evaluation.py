import json
import math

import numpy as np
import pytest
from conftest import tiny_config

from recipseq.data import InteractionRecord as R
from recipseq.data import SequenceStore
from recipseq.evaluation import (
    HistoryCache,
    LeakageError,
    MacroScorer,
    build_eval_instances,
    evaluate_model,
    evaluate_scorer,
    metrics_at_k,
    rank_position,
    summarize,
)
from recipseq.training import build_model


def test_rank_examples():
    assert rank_position(0.9, [0.1, 0.5]) == 1
    assert rank_position(0.5, [0.5, 0.1]) == 2  # ties count against the positive
    assert rank_position(0.0, [1.0, 2.0, 3.0]) == 4


def test_rank_matches_sort_oracle():
    rng = np.random.default_rng(0)
    for _ in range(300):
        neg = rng.integers(0, 5, size=20).astype(float)
        pos = float(rng.integers(0, 5))
        # pessimistic sort: the positive goes after every negative with an equal score
        order = sorted([(s, 0) for s in neg] + [(pos, 1)], key=lambda x: (-x[0], -(x[1] == 0)))
        assert rank_position(pos, neg) == order.index((pos, 1)) + 1


def test_metrics_examples():
    assert metrics_at_k(1, 5) == (1.0, 1.0, 1.0)
    hr, mrr, ndcg = metrics_at_k(3, 5)
    assert (hr, mrr) == (1.0, pytest.approx(1 / 3))
    assert ndcg == pytest.approx(0.5)
    assert metrics_at_k(6, 5) == (0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        metrics_at_k(0)


def test_summary_hand_average():
    # ranks 1, 3, 8 in both perspectives
    s = np.array([[5.0, 1, 1, 1], [5.0, 6, 7, 1], [0.0, 1, 1, 1]])
    s = np.concatenate([s, np.ones((3, 4))], axis=1)
    out = summarize(s, s, 5)
    assert [1 + (row[1:] >= row[0]).sum() for row in s] == [1, 3, 8]
    assert out["u"]["hr"] == pytest.approx(2 / 3)
    assert out["u"]["mrr"] == pytest.approx((1 + 1 / 3) / 3)
    assert out["v"]["ndcg"] == pytest.approx((1 + 0.5) / 3)


@pytest.fixture
def store_and_test():
    recs = [R(f"u{i}", f"v{j}", 10 * i + j) for i in range(8) for j in range(8) if (i + j) % 3 == 0]
    test = [R("u1", "v2", 500), R("u4", "v5", 501), R("u6", "v0", 502)]
    return SequenceStore(recs + test), test


class ConstantScorer:
    def score_pairs(self, u, v, T):
        return np.zeros(u.shape)


class TruthScorer:
    def __init__(self, store, test):
        self.truth = {(store.user_index("U", r.u_id), store.user_index("V", r.v_id), r.timestamp) for r in test}

    def score_pairs(self, u, v, T):
        Tg = np.broadcast_to(T[:, None], u.shape)
        return np.array([[math.inf if (a, b, t) in self.truth else 0.0 for a, b, t in zip(*row)]
                         for row in zip(u, v, Tg)])


def test_constant_model_scores_zero(store_and_test):
    store, test = store_and_test
    rep = evaluate_scorer(ConstantScorer(), store, test, k=5, n_neg=5)
    assert all(v == 0.0 for p in rep.metrics.values() for v in p.values())


def test_perfect_model_scores_one(store_and_test):
    store, test = store_and_test
    rep = evaluate_scorer(TruthScorer(store, test), store, test, k=5, n_neg=5)
    assert all(v == 1.0 for p in rep.metrics.values() for v in p.values())


def test_instances_exclude_positive_and_are_seeded(store_and_test):
    store, test = store_and_test
    a = build_eval_instances(store, test, n_neg=5, seed=3)
    b = build_eval_instances(store, test, n_neg=5, seed=3)
    assert np.array_equal(a.cand_u, b.cand_u) and np.array_equal(a.cand_v, b.cand_v)
    for i in range(len(a)):
        assert a.cand_v[i, 0] == a.v_idx[i] and a.v_idx[i] not in a.cand_v[i, 1:]
        assert a.cand_u[i, 0] == a.u_idx[i] and a.u_idx[i] not in a.cand_u[i, 1:]
    with pytest.raises(ValueError):
        build_eval_instances(store, [], 5)


def test_model_evaluation_is_deterministic_and_consistent(store_and_test):
    store, test = store_and_test
    model = build_model(tiny_config(), store.n_users("U"), store.n_users("V")).eval()
    r1 = evaluate_model(model, store, test, n_neg=6, seed=1)
    r2 = evaluate_model(model, store, test, n_neg=6, seed=1)
    assert r1.flat() == r2.flat()
    for p in r1.metrics.values():
        assert p["hr"] >= p["ndcg"] >= p["mrr"]
    # the fast path agrees with the generic pair grid
    scorer = MacroScorer(model, store)
    generic = evaluate_scorer(type("G", (), {"score_pairs": staticmethod(scorer.score_pairs)})(), store, test,
                              n_neg=6, seed=1)
    assert generic.flat()["perspective_u.ndcg@5"] == r1.flat()["perspective_u.ndcg@5"]


def test_report_keys_and_files(store_and_test, tmp_path):
    store, test = store_and_test
    rep = evaluate_scorer(ConstantScorer(), store, test, k=5, n_neg=5)
    keys = set(rep.flat())
    for p in ("u", "v"):
        for m in ("hr", "mrr", "ndcg"):
            assert f"perspective_{p}.{m}@5" in keys
    rep.write(tmp_path)
    assert json.loads((tmp_path / "metrics.json").read_text())["count"] == 3
    assert "perspective_u.hr@5=0.0" in (tmp_path / "metrics.kv").read_text()
    assert "U ranks V" in (tmp_path / "metrics.txt").read_text()


def test_history_audit_catches_future_events():
    store = SequenceStore([R("a", "x", 1), R("a", "y", 2), R("a", "z", 3), R("a", "w", 4)])
    cache = HistoryCache(store, "U", 5)
    assert cache.keys(np.array([[0]]), np.array([3])).tolist() == [[2]]
    store._times["U"][0] = np.array([1, 6, 2, 3])
    with pytest.raises(LeakageError):
        cache.keys(np.array([[0]]), np.array([5]))
