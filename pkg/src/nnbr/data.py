"""Basket-sequence corpora: ingestion, preprocessing, user splits, synthetic data.

Item ids are contiguous in ``1..n_items``. Id ``0`` is the padding id and
``n_items + 1`` the mask token; neither ever appears inside a basket.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

PAD_ID = 0

# A basket is a tuple of distinct item ids kept in ascending order so that
# flattening is deterministic. Its ordinal is its 1-based list position.
Basket = tuple


class CorpusError(ValueError):
    """Raised for empty or malformed corpora."""


class SchemaError(CorpusError):
    """Raised when a transaction file does not match its column mapping."""


class ProfileError(ValueError):
    """Raised for synthetic profiles that cannot produce a valid corpus."""


def make_basket(items: Iterable[int]) -> Basket:
    return tuple(sorted(set(int(i) for i in items)))


@dataclass(frozen=True)
class UserSequence:
    user_id: str
    baskets: tuple

    def __post_init__(self):
        if not self.baskets:
            raise CorpusError(f"user {self.user_id!r} has no baskets")
        for b in self.baskets:
            if not b:
                raise CorpusError(f"user {self.user_id!r} has an empty basket")
            if len(set(b)) != len(b):
                raise CorpusError(f"user {self.user_id!r} has a duplicate item in one basket")

    def __len__(self):
        return len(self.baskets)

    @property
    def history(self) -> tuple:
        return self.baskets[:-1]

    @property
    def target(self) -> Basket:
        return self.baskets[-1]


@dataclass
class Corpus:
    users: list
    n_items: int
    # raw identifier of item ``i`` lives at ``id_map[i - 1]``
    id_map: list | None = None

    def __post_init__(self):
        seen = set()
        for u in self.users:
            if u.user_id in seen:
                raise CorpusError(f"duplicate user id {u.user_id!r}")
            seen.add(u.user_id)
            for b in u.baskets:
                if b[0] < 1 or b[-1] > self.n_items:
                    raise CorpusError(
                        f"user {u.user_id!r}: item id outside 1..{self.n_items}"
                    )
        if self.id_map is not None and len(self.id_map) != self.n_items:
            raise CorpusError("id_map length must equal n_items")

    @property
    def mask_id(self) -> int:
        return self.n_items + 1

    def __len__(self):
        return len(self.users)

    def encode(self, raw) -> int:
        if self.id_map is None:
            return int(raw)
        if not hasattr(self, "_index"):
            self._index = {r: i + 1 for i, r in enumerate(self.id_map)}
        return self._index[raw]

    def decode(self, item_id: int):
        if self.id_map is None:
            return item_id
        return self.id_map[item_id - 1]

    def subset(self, user_ids: Sequence[str]) -> "Corpus":
        keep = set(user_ids)
        return Corpus([u for u in self.users if u.user_id in keep], self.n_items, self.id_map)


@dataclass(frozen=True)
class RepeatNovelPartition:
    repeat_items: frozenset
    novel_items: frozenset


@dataclass
class PreprocessConfig:
    min_baskets: int = 3
    max_baskets: int = 50
    min_item_frequency: int = 1

    def __post_init__(self):
        if not 1 <= self.min_baskets <= self.max_baskets:
            raise ValueError("need 1 <= min_baskets <= max_baskets")
        if self.min_item_frequency < 0:
            raise ValueError("min_item_frequency must be non-negative")


# Cutoffs chosen to land near the usual statistics for these datasets; no
# canonical thresholds exist, so these are tunable starting points.
DATASET_PREPROCESS = {
    "tafeng": PreprocessConfig(3, 50, 10),
    "dunnhumby": PreprocessConfig(3, 50, 150),
    "instacart": PreprocessConfig(3, 50, 50),
}


@dataclass
class SplitSpec:
    train_fraction: float = 0.8
    test_fraction: float = 0.2
    validation_fraction_of_train: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("train_fraction", "test_fraction", "validation_fraction_of_train"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if not math.isclose(self.train_fraction + self.test_fraction, 1.0):
            raise ValueError("train_fraction + test_fraction must equal 1")


# ---------------------------------------------------------------------------
# ingestion

@dataclass
class TransactionSchema:
    """Column mapping for a transaction export.

    ``order`` is the chronological key (timestamp or order number). ``join``
    optionally names a second file merged on ``join_on`` before grouping,
    e.g. Instacart's ``orders.csv`` that carries user and order number.
    """

    user: str
    basket: str
    item: str
    order: str
    sep: str = ","
    join: str | None = None
    join_on: str | None = None
    parse_dates: bool = False


DATASET_SCHEMAS = {
    # ta_feng_all_months_merged.csv (Kaggle); one basket per customer-day
    "tafeng": TransactionSchema(
        user="CUSTOMER_ID", basket="TRANSACTION_DT", item="PRODUCT_ID",
        order="TRANSACTION_DT", parse_dates=True,
    ),
    # The Complete Journey: transaction_data.csv
    "dunnhumby": TransactionSchema(
        user="household_key", basket="BASKET_ID", item="PRODUCT_ID", order="DAY",
    ),
    # order_products__prior.csv joined with orders.csv
    "instacart": TransactionSchema(
        user="user_id", basket="order_id", item="product_id", order="order_number",
        join="orders.csv", join_on="order_id",
    ),
}


def load_transactions(path, schema: TransactionSchema) -> Corpus:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        df = pd.read_csv(path, sep=schema.sep, dtype=str)
    except pd.errors.EmptyDataError:
        raise CorpusError(f"{path}: empty file") from None
    if schema.join:
        other = Path(schema.join)
        if not other.is_absolute():
            other = path.parent / other
        right = pd.read_csv(other, sep=schema.sep, dtype=str)
        if schema.join_on not in df.columns or schema.join_on not in right.columns:
            raise SchemaError(f"join column {schema.join_on!r} missing")
        dup = [c for c in right.columns if c in df.columns and c != schema.join_on]
        df = df.merge(right.drop(columns=dup), on=schema.join_on, how="inner")
    needed = {"user": schema.user, "basket": schema.basket,
              "item": schema.item, "order": schema.order}
    missing = [f"{role}={col!r}" for role, col in needed.items() if col not in df.columns]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
    df = df[[schema.user, schema.basket, schema.item, schema.order]].dropna()
    df.columns = ["user", "basket", "item", "order"]
    if df.empty:
        raise CorpusError(f"{path}: no transactions")
    if schema.parse_dates:
        df["order"] = pd.to_datetime(df["order"])
    else:
        df["order"] = pd.to_numeric(df["order"], errors="coerce")
        if df["order"].isna().any():
            df["order"] = df["order"].astype(str)

    raw_items = sorted(df["item"].unique())
    index = {r: i + 1 for i, r in enumerate(raw_items)}
    df["item"] = df["item"].map(index)

    # earliest chronological key per basket, basket key breaks ties
    first = df.groupby(["user", "basket"], sort=False)["order"].min().rename("t")
    df = df.join(first, on=["user", "basket"])
    df = df.sort_values(["user", "t", "basket"], kind="stable")
    users = []
    for user, g in df.groupby("user", sort=True):
        baskets = [make_basket(b["item"]) for _, b in g.groupby(["t", "basket"], sort=True)]
        users.append(UserSequence(str(user), tuple(baskets)))
    return Corpus(users, len(raw_items), list(raw_items))


# ---------------------------------------------------------------------------
# preprocessing

def _preprocess_once(corpus: Corpus, cfg: PreprocessConfig) -> Corpus:
    freq = Counter(i for u in corpus.users for b in u.baskets for i in b)
    keep = {i for i, c in freq.items() if c >= cfg.min_item_frequency}
    users = []
    for u in corpus.users:
        baskets = [tuple(i for i in b if i in keep) for b in u.baskets]
        baskets = [b for b in baskets if b]
        if cfg.min_baskets <= len(baskets) <= cfg.max_baskets:
            users.append((u.user_id, baskets))
    surviving = sorted({i for _, bs in users for b in bs for i in b})
    remap = {old: new for new, old in enumerate(surviving, start=1)}
    # ids without a raw name (synthetic data) keep their pre-compaction id
    id_map = [str(corpus.decode(old)) for old in surviving]
    out = [UserSequence(uid, tuple(tuple(remap[i] for i in b) for b in bs)) for uid, bs in users]
    return Corpus(out, len(surviving), id_map)


def preprocess(corpus: Corpus, config: PreprocessConfig) -> Corpus:
    """Filter rare items, then emptied baskets, then users by basket count.

    The three filters repeat until nothing changes: dropping a user can push
    an item below the frequency cutoff, so one pass is not idempotent.
    """
    current = corpus
    while True:
        nxt = _preprocess_once(current, config)
        if not nxt.users:
            raise CorpusError("preprocessing removed every user")
        if nxt.n_items == current.n_items and len(nxt) == len(current) and \
                sum(len(u) for u in nxt.users) == sum(len(u) for u in current.users) and \
                _n_entries(nxt) == _n_entries(current):
            return nxt
        current = nxt


def _n_entries(corpus: Corpus) -> int:
    return sum(len(b) for u in corpus.users for b in u.baskets)


def split_users(corpus: Corpus, spec: SplitSpec):
    """Partition users into (train, val, test); val is carved out of train."""
    n = len(corpus)
    if n == 0:
        raise CorpusError("cannot split an empty corpus")
    order = np.random.default_rng(spec.seed).permutation(n)
    n_test = int(round(spec.test_fraction * n))
    n_train_total = n - n_test
    n_val = int(round(spec.validation_fraction_of_train * n_train_total))
    test_idx = set(order[:n_test].tolist())
    val_idx = set(order[n_test:n_test + n_val].tolist())

    def pick(idx):
        return Corpus([u for k, u in enumerate(corpus.users) if k in idx],
                      corpus.n_items, corpus.id_map)

    train_idx = set(range(n)) - test_idx - val_idx
    return pick(train_idx), pick(val_idx), pick(test_idx)


def repeat_novel_partition(history: Sequence[Basket], vocab_size: int) -> RepeatNovelPartition:
    if not history:
        raise ValueError("history must be non-empty")
    repeat = frozenset(i for b in history for i in b)
    novel = frozenset(range(1, vocab_size + 1)) - repeat
    return RepeatNovelPartition(repeat, novel)


# ---------------------------------------------------------------------------
# statistics

@dataclass
class CorpusStats:
    n_items: int
    n_users: int
    avg_basket_size: float
    avg_baskets_per_user: float
    repeat_ratio: float
    explore_ratio: float

    def to_dict(self):
        return asdict(self)


def last_basket_repeat_fraction(user: UserSequence) -> float | None:
    if len(user) < 2:
        return None
    seen = {i for b in user.history for i in b}
    last = user.target
    return sum(i in seen for i in last) / len(last)


def corpus_stats(corpus: Corpus) -> CorpusStats:
    if not corpus.users:
        raise CorpusError("empty corpus")
    n_baskets = sum(len(u) for u in corpus.users)
    n_entries = _n_entries(corpus)
    items = {i for u in corpus.users for b in u.baskets for i in b}
    fracs = [f for f in map(last_basket_repeat_fraction, corpus.users) if f is not None]
    rep = float(np.mean(fracs)) if fracs else 0.0
    return CorpusStats(
        n_items=len(items),
        n_users=len(corpus),
        avg_basket_size=n_entries / n_baskets,
        avg_baskets_per_user=n_baskets / len(corpus),
        repeat_ratio=rep,
        explore_ratio=1.0 - rep,
    )


# ---------------------------------------------------------------------------
# synthetic corpora

@dataclass
class SyntheticProfile:
    """Generator settings for a clustered grocery-like corpus.

    Items are split into ``n_clusters`` equal groups with Zipf-like
    popularity inside each group. Every user favours ``clusters_per_user``
    groups; each basket picks one of them and draws its novel items from that
    group with probability ``cluster_purity``. Each slot of a non-first basket
    is a repeat purchase with probability ``repeat_prob``.
    """

    n_users: int = 1000
    n_items: int = 200
    n_clusters: int = 10
    min_baskets: int = 3
    max_baskets: int = 12
    mean_basket_size: float = 5.0
    max_basket_size: int = 12
    repeat_prob: float = 0.6
    cluster_purity: float = 0.9
    clusters_per_user: int = 2
    popularity_exponent: float = 1.0

    def validate(self):
        if self.n_users < 1 or self.n_items < 1:
            raise ProfileError("need at least one user and one item")
        if not 1 <= self.n_clusters <= self.n_items:
            raise ProfileError("n_clusters must lie in 1..n_items")
        if not 1 <= self.clusters_per_user <= self.n_clusters:
            raise ProfileError("clusters_per_user must lie in 1..n_clusters")
        if not 1 <= self.min_baskets <= self.max_baskets:
            raise ProfileError("need 1 <= min_baskets <= max_baskets")
        if not 1 <= self.mean_basket_size <= self.max_basket_size <= self.n_items:
            raise ProfileError("need 1 <= mean_basket_size <= max_basket_size <= n_items")
        if not 0.0 <= self.repeat_prob <= 1.0:
            raise ProfileError("repeat_prob must lie in [0, 1]")
        if self.repeat_prob > 0 and self.max_baskets < 2:
            raise ProfileError("a positive repeat ratio needs users with at least 2 baskets")
        if self.repeat_prob == 1.0 and self.min_baskets < 2:
            raise ProfileError("repeat_prob=1 is unreachable for single-basket users")
        if not 0.0 <= self.cluster_purity <= 1.0:
            raise ProfileError("cluster_purity must lie in [0, 1]")


def item_clusters(profile: SyntheticProfile) -> np.ndarray:
    """Cluster label of every item id (index 0 unused, set to -1)."""
    labels = np.empty(profile.n_items + 1, dtype=np.int64)
    labels[0] = -1
    labels[1:] = np.arange(profile.n_items) % profile.n_clusters
    return labels


def _draw(rng, pool: np.ndarray, weights: np.ndarray) -> int:
    w = weights[pool]
    return int(pool[rng.choice(len(pool), p=w / w.sum())])


def generate_synthetic(profile: SyntheticProfile, seed: int) -> Corpus:
    profile.validate()
    m = profile.n_items
    labels = item_clusters(profile)
    # Zipf popularity by rank inside each cluster
    weights = np.zeros(m + 1)
    for c in range(profile.n_clusters):
        members = np.flatnonzero(labels == c)
        weights[members] = 1.0 / np.arange(1, len(members) + 1) ** profile.popularity_exponent
    members_of = [np.flatnonzero(labels == c) for c in range(profile.n_clusters)]
    all_items = np.arange(1, m + 1)

    users = []
    for u in range(profile.n_users):
        rng = np.random.default_rng([seed, u])
        n_b = int(rng.integers(profile.min_baskets, profile.max_baskets + 1))
        prefs = rng.choice(profile.n_clusters, size=profile.clusters_per_user, replace=False)
        seen = np.zeros(m + 1, dtype=bool)
        baskets = []
        for t in range(n_b):
            cluster = int(rng.choice(prefs))
            size = min(1 + int(rng.poisson(profile.mean_basket_size - 1)), profile.max_basket_size)
            basket: set = set()
            for _ in range(size):
                taken = np.zeros(m + 1, dtype=bool)
                taken[list(basket)] = True
                repeat_pool = np.flatnonzero(seen & ~taken)
                want_repeat = t > 0 and rng.random() < profile.repeat_prob
                novel_pool = np.array([], dtype=np.int64)
                if not want_repeat or len(repeat_pool) == 0:
                    if rng.random() < profile.cluster_purity:
                        cand = members_of[cluster]
                        novel_pool = cand[~seen[cand] & ~taken[cand]]
                    if len(novel_pool) == 0:
                        novel_pool = all_items[~seen[1:] & ~taken[1:]]
                if want_repeat and len(repeat_pool):
                    basket.add(int(rng.choice(repeat_pool)))
                elif len(novel_pool):
                    basket.add(_draw(rng, novel_pool, weights))
                elif len(repeat_pool):
                    # vocabulary exhausted for this user
                    basket.add(int(rng.choice(repeat_pool)))
                else:
                    break
            b = make_basket(basket)
            seen[list(b)] = True
            baskets.append(b)
        users.append(UserSequence(f"u{u}", tuple(baskets)))
    return Corpus(users, m)


# ---------------------------------------------------------------------------
# persistence

def write_corpus(corpus: Corpus, path) -> None:
    """One line per basket: ``user_id<TAB>basket_index<TAB>items``."""
    path = Path(path)
    with open(path, "w") as f:
        f.write(f"# n_items={corpus.n_items}\n")
        for u in corpus.users:
            for k, b in enumerate(u.baskets, start=1):
                f.write(f"{u.user_id}\t{k}\t{' '.join(map(str, b))}\n")
    if corpus.id_map is not None:
        write_id_map(corpus.id_map, path.with_suffix(".idmap.tsv"))


def write_id_map(id_map, path) -> None:
    with open(path, "w") as f:
        for k, raw in enumerate(id_map, start=1):
            f.write(f"{k}\t{raw}\n")


def read_corpus(path) -> Corpus:
    path = Path(path)
    n_items = None
    rows: dict = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                if line.startswith("# n_items="):
                    n_items = int(line.split("=", 1)[1])
                continue
            try:
                uid, k, items = line.split("\t")
                basket = make_basket(int(x) for x in items.split())
                rows.setdefault(uid, []).append((int(k), basket))
            except ValueError as e:
                raise CorpusError(f"{path}:{lineno}: malformed line ({e})") from None
    users = []
    for uid, bs in rows.items():
        bs.sort()
        if [k for k, _ in bs] != list(range(1, len(bs) + 1)):
            raise CorpusError(f"{path}: user {uid!r} basket indices are not 1..n")
        users.append(UserSequence(uid, tuple(b for _, b in bs)))
    if not users:
        raise CorpusError(f"{path}: empty corpus")
    if n_items is None:
        n_items = max(b[-1] for u in users for b in u.baskets)
    id_map = None
    idmap_path = path.with_suffix(".idmap.tsv")
    if idmap_path.exists():
        with open(idmap_path) as f:
            id_map = [line.rstrip("\n").split("\t", 1)[1] for line in f if line.strip()]
    return Corpus(users, n_items, id_map)


def write_stats(stats: CorpusStats, path) -> None:
    with open(path, "w") as f:
        json.dump(stats.to_dict(), f, indent=2, sort_keys=True)
