import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from nnbr.data import Corpus, UserSequence
from nnbr.evaluation import (
    EvalResult, EvaluationError, evaluate_rankings, ground_truths, metric_oracle, ndcg_at_k,
    paired_t_test, recall_at_k,
)


def test_hand_case():
    p, t = [1, 2, 3], {2, 4}
    assert recall_at_k(p, t, 3) == 0.5
    expected = (1 / math.log2(3)) / (1 + 1 / math.log2(3))
    assert ndcg_at_k(p, t, 3) == pytest.approx(expected, abs=1e-12)
    assert ndcg_at_k(p, t, 3) == pytest.approx(0.3869, abs=1e-4)


def test_perfect_and_empty_hits():
    assert ndcg_at_k([4, 2, 9], {2, 4}, 3) == 1.0
    assert recall_at_k([7, 8], {1}, 2) == 0.0
    assert ndcg_at_k([7, 8], {1}, 2) == 0.0
    with pytest.raises(EvaluationError):
        recall_at_k([1], set(), 1)


def test_fast_path_matches_oracle_1000_cases():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        m = int(rng.integers(2, 80))
        predicted = rng.permutation(np.arange(1, m + 1))[: int(rng.integers(1, m + 1))].tolist()
        truth = set(rng.choice(np.arange(1, m + 1), size=int(rng.integers(1, m + 1)), replace=False).tolist())
        k = int(rng.integers(1, 40))
        r, n = metric_oracle(predicted, truth, k)
        assert recall_at_k(predicted, truth, k) == r
        assert ndcg_at_k(predicted, truth, k) == n


def test_oracle_rejects_duplicates():
    with pytest.raises(ValueError):
        metric_oracle([1, 1], {1}, 2)


@settings(max_examples=200)
@given(st.permutations(list(range(1, 21))), st.sets(st.integers(1, 20), min_size=1), st.integers(1, 19))
def test_monotone_in_k_and_bounded(predicted, truth, k):
    r1, r2 = recall_at_k(predicted, truth, k), recall_at_k(predicted, truth, k + 1)
    assert 0 <= r1 <= r2 <= 1
    assert 0 <= ndcg_at_k(predicted, truth, k) <= 1


def corpus(*users, n_items=10):
    return Corpus([UserSequence(f"u{k}", tuple(tuple(sorted(b)) for b in bs)) for k, bs in enumerate(users)],
                  n_items)


def test_ground_truths_drop_repeat_only_targets():
    c = corpus([{1}, {1, 2}], [{3}, {3}])
    kept, dropped = ground_truths(c)
    assert [g.target_novel for g in kept] == [frozenset({2})]
    assert dropped == 1


def test_evaluate_rankings_rejects_leakage():
    c = corpus([{1}, {2}])
    with pytest.raises(EvaluationError, match="repeat"):
        evaluate_rankings(lambda hs: [[1, 2] for _ in hs], c, ks=(2,))


def test_evaluate_rankings_averages_and_roundtrips():
    c = corpus([{1}, {2}], [{1}, {3, 4}])
    res = evaluate_rankings(lambda hs: [[2, 3, 4] for _ in hs], c, ks=(1, 3))
    assert res.recall[1] == pytest.approx((1 + 0) / 2)
    assert res.recall[3] == pytest.approx(1.0)
    back = EvalResult.from_dict(res.to_dict())
    assert back.recall == res.recall and back.per_user == res.per_user


# ---------------------------------------------------------------------------
# significance

def test_paired_t_matches_scipy():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = rng.normal(size=40)
        b = a + rng.normal(0.1, 1.0, size=40)
        ours = paired_t_test(a, b)
        ref = stats.ttest_rel(a, b)
        assert ours.statistic == pytest.approx(ref.statistic, rel=1e-10)
        assert ours.p_value == pytest.approx(ref.pvalue, rel=1e-8)


def test_paired_t_degenerate():
    same = paired_t_test([1, 2, 3], [1, 2, 3])
    assert (same.statistic, same.p_value) == (0.0, 1.0)
    t = paired_t_test([2, 3, 4], [1, 2, 3])
    assert t.p_value == 0.0 and t.statistic > 0
    with pytest.raises(ValueError):
        paired_t_test([1], [2])
