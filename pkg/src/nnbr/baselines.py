"""Non-neural reference recommenders sharing the novel-item evaluation harness."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from nnbr.data import Corpus, UserSequence
from nnbr.model import restrict_to_novel, topk

LABEL_MODES = ("all", "explore")


def item_popularity(corpus: Corpus) -> np.ndarray:
    """Occurrence counts over every basket; index k is item k + 1."""
    counts = np.zeros(corpus.n_items, dtype=np.int64)
    for u in corpus.users:
        for b in u.baskets:
            counts[np.asarray(b) - 1] += 1
    return counts


def g_topfreq(train: Corpus, history, k: int) -> list:
    return g_topfreq_ranker(train, k)([history])[0]


def g_topfreq_ranker(train: Corpus, k: int):
    if not train.users:
        raise ValueError("empty training corpus")
    counts = item_popularity(train)
    # most frequent first, lower id on ties
    ranking = np.lexsort((np.arange(train.n_items), -counts)) + 1

    def rank(histories):
        out = []
        for h in histories:
            seen = {i for b in h for i in b}
            picked = []
            for item in ranking:
                if item not in seen:
                    picked.append(int(item))
                    if len(picked) == k:
                        break
            out.append(picked)
        return out

    return rank


@dataclass
class TifuConfig:
    group_size: int = 7
    within_decay: float = 0.9
    group_decay: float = 0.7
    alpha: float = 0.7
    n_neighbors: int = 300

    def __post_init__(self):
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        for name in ("within_decay", "group_decay"):
            if not 0 < getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if self.n_neighbors < 1:
            raise ValueError("n_neighbors must be >= 1")


def pif_vector(baskets, n_items: int, cfg: TifuConfig) -> np.ndarray:
    """Personalized item frequency with basket- and group-level time decay.

    Baskets are grouped ``group_size`` at a time counting back from the most
    recent one, so only the oldest group can be short. Inside a group the
    newest basket weighs 1 and each older one a further ``within_decay``;
    groups are averaged the same way with ``group_decay``.
    """
    n = len(baskets)
    bounds = list(range(n, 0, -cfg.group_size))  # exclusive group ends, newest first
    groups = [baskets[max(0, end - cfg.group_size):end] for end in bounds][::-1]
    vec = np.zeros(n_items)
    k = len(groups)
    for gi, group in enumerate(groups, start=1):
        gvec = np.zeros(n_items)
        s = len(group)
        for j, b in enumerate(group, start=1):
            gvec[np.asarray(b) - 1] += cfg.within_decay ** (s - j)
        vec += cfg.group_decay ** (k - gi) * gvec / s
    return vec / k


class TifuKNN:
    def __init__(self, train: Corpus, cfg: TifuConfig):
        if not train.users:
            raise ValueError("empty training corpus")
        self.cfg = cfg
        self.n_items = train.n_items
        self.train_pif = np.stack([pif_vector(u.baskets, train.n_items, cfg) for u in train.users])
        self._sq = (self.train_pif ** 2).sum(axis=1)

    def scores(self, history) -> np.ndarray:
        own = pif_vector(history, self.n_items, self.cfg)
        d2 = self._sq - 2 * self.train_pif @ own + own @ own
        n = min(self.cfg.n_neighbors, len(d2))
        nearest = np.argsort(d2, kind="stable")[:n]
        neigh = self.train_pif[nearest].mean(axis=0)
        return self.cfg.alpha * own + (1 - self.cfg.alpha) * neigh

    def predict(self, history, k: int) -> list:
        seen = {i for b in history for i in b}
        return topk(restrict_to_novel(self.scores(history), seen), k)

    def ranker(self, k: int):
        return lambda histories: [self.predict(h, k) for h in histories]


def tifuknn_predict(train: Corpus, history, cfg: TifuConfig, k: int) -> list:
    return TifuKNN(train, cfg).predict(history, k)


def apply_label_mode(train: Corpus, mode: str) -> Corpus:
    """Train-all keeps label baskets; Train-explore strips repeat items from them.

    A user whose label basket empties keeps only their history, which still
    feeds frequency and PIF statistics but supervises nothing.
    """
    if mode not in LABEL_MODES:
        raise ValueError(f"label mode must be one of {LABEL_MODES}")
    if mode == "all":
        return train
    users = []
    for u in train.users:
        if len(u) < 2:
            raise ValueError(f"user {u.user_id!r} has no label basket")
        seen = {i for b in u.history for i in b}
        label = tuple(i for i in u.target if i not in seen)
        baskets = u.history + (label,) if label else u.history
        users.append(UserSequence(u.user_id, baskets))
    return Corpus(users, train.n_items, train.id_map)


def supervised_users(train: Corpus, mode: str) -> list:
    """Ids of users that still carry a non-empty label basket under ``mode``."""
    if mode == "all":
        return [u.user_id for u in train.users]
    out = []
    for u in train.users:
        seen = {i for b in u.history for i in b}
        if any(i not in seen for i in u.target):
            out.append(u.user_id)
    return out


BASELINES = ("g_topfreq", "tifuknn")


def make_ranker(name: str, train: Corpus, k: int, mode: str = "all", tifu: TifuConfig | None = None):
    if name == "g_topfreq":
        # popularity has no supervised labels, so the mode is ignored
        return g_topfreq_ranker(train, k)
    if name == "tifuknn":
        return TifuKNN(apply_label_mode(train, mode), tifu or TifuConfig()).ranker(k)
    raise ValueError(f"unknown baseline {name!r}")
