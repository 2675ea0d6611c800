import math

import numpy as np
import pytest

from nnbr.baselines import (
    TifuConfig, TifuKNN, apply_label_mode, g_topfreq, item_popularity, make_ranker, pif_vector,
    supervised_users,
)
from nnbr.data import Corpus, UserSequence


def corpus(*users, n_items=8):
    return Corpus([UserSequence(f"u{k}", tuple(tuple(sorted(b)) for b in bs)) for k, bs in enumerate(users)],
                  n_items)


TOY = corpus(
    [{1, 2}, {2, 3}, {4}],
    [{1}, {1, 5}, {6, 7}, {2}],
    [{8}, {3, 8}],
    [{2, 4}, {4, 6}, {6, 8}, {1}, {5}],
    [{7}, {7, 3}, {3, 2}],
)


# ---------------------------------------------------------------------------
# G-TopFreq

def test_popularity_counts():
    expected = np.zeros(8, int)
    for u in TOY.users:
        for b in u.baskets:
            for i in b:
                expected[i - 1] += 1
    assert item_popularity(TOY).tolist() == expected.tolist()


def test_g_topfreq_oracle():
    counts = item_popularity(TOY)
    history = [(2,), (1, 3)]
    pool = sorted((i for i in range(1, 9) if i not in {1, 2, 3}), key=lambda i: (-counts[i - 1], i))
    assert g_topfreq(TOY, history, 3) == pool[:3]


def test_g_topfreq_ignores_label_mode():
    a = make_ranker("g_topfreq", TOY, 4, "all")([[(1,)]])
    b = make_ranker("g_topfreq", TOY, 4, "explore")([[(1,)]])
    assert a == b


# ---------------------------------------------------------------------------
# TIFUKNN

def pif_dense(baskets, m, cfg):
    """Straight transcription: group back from the newest basket, decay, average."""
    groups = []
    rest = list(baskets)
    while rest:
        groups.insert(0, rest[-cfg.group_size:])
        rest = rest[:-cfg.group_size]
    k = len(groups)
    total = [0.0] * m
    for gi, g in enumerate(groups, start=1):
        s = len(g)
        for j, b in enumerate(g, start=1):
            w = cfg.group_decay ** (k - gi) * cfg.within_decay ** (s - j) / s / k
            for item in b:
                total[item - 1] += w
    return np.array(total)


@pytest.mark.parametrize("gs", [1, 2, 3, 7])
def test_pif_matches_dense(gs):
    cfg = TifuConfig(group_size=gs, within_decay=0.8, group_decay=0.6)
    for u in TOY.users:
        np.testing.assert_allclose(pif_vector(u.baskets, 8, cfg), pif_dense(u.baskets, 8, cfg), atol=1e-15)


def test_pif_no_decay_is_frequency():
    cfg = TifuConfig(group_size=100, within_decay=1.0, group_decay=1.0)
    baskets = [(1, 2), (2,), (2, 3)]
    np.testing.assert_allclose(pif_vector(baskets, 4, cfg), [1 / 3, 1.0, 1 / 3, 0.0])


def test_tifuknn_scores_dense_oracle():
    cfg = TifuConfig(group_size=2, within_decay=0.9, group_decay=0.7, alpha=0.6, n_neighbors=2)
    model = TifuKNN(TOY, cfg)
    history = [(1, 2), (5,)]
    own = pif_dense(history, 8, cfg)
    train = [pif_dense(u.baskets, 8, cfg) for u in TOY.users]
    dist = [math.sqrt(sum((a - b) ** 2 for a, b in zip(own, t))) for t in train]
    nearest = sorted(range(len(train)), key=lambda i: (dist[i], i))[:2]
    expected = 0.6 * own + 0.4 * np.mean([train[i] for i in nearest], axis=0)
    np.testing.assert_allclose(model.scores(history), expected, atol=1e-12)
    top = model.predict(history, 8)
    assert not {1, 2, 5} & set(top)
    assert top == sorted((i for i in range(1, 9) if i not in {1, 2, 5}),
                         key=lambda i: (-expected[i - 1], i))


def test_tifuknn_alpha_one_is_own_history():
    cfg = TifuConfig(alpha=1.0)
    s = TifuKNN(TOY, cfg).scores([(3,), (4,)])
    assert set(np.flatnonzero(s) + 1) == {3, 4}


def test_tifu_config_validation():
    for bad in (dict(group_size=0), dict(within_decay=0.0), dict(alpha=1.5), dict(n_neighbors=0)):
        with pytest.raises(ValueError):
            TifuConfig(**bad)


# ---------------------------------------------------------------------------
# label modes

def test_explore_strips_repeats_from_label():
    out = apply_label_mode(TOY, "explore")
    u0 = out.users[0]
    assert u0.baskets[-1] == (4,)
    # u4's label {2,3}: 3 was seen before, so only 2 stays
    assert out.users[4].baskets[-1] == (2,)


def test_explore_empty_label_keeps_history():
    c = corpus([{1}, {1}], [{2}, {3}])
    out = apply_label_mode(c, "explore")
    assert out.users[0].baskets == ((1,),)
    assert supervised_users(c, "explore") == ["u1"]
    assert supervised_users(c, "all") == ["u0", "u1"]


def test_unknown_names():
    with pytest.raises(ValueError):
        apply_label_mode(TOY, "weird")
    with pytest.raises(ValueError):
        make_ranker("nope", TOY, 3)
