"""Novel-item-only evaluation: Recall@K, nDCG@K, and paired significance tests."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
import torch
from scipy import stats

from nnbr.augmentation import append_prediction_slot, flatten
from nnbr.model import restrict_to_novel, topk


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class GroundTruth:
    user_id: str
    history: tuple
    target_novel: frozenset


@lru_cache(maxsize=None)
def _discounts(n: int) -> tuple:
    return tuple(1.0 / math.log2(k + 1) for k in range(1, n + 1))


def recall_at_k(predicted: Sequence[int], truth, k: int) -> float:
    if not truth:
        raise EvaluationError("empty ground truth; exclude the user instead")
    return len(set(predicted[:k]) & set(truth)) / len(truth)


def ndcg_at_k(predicted: Sequence[int], truth, k: int) -> float:
    if not truth:
        raise EvaluationError("empty ground truth; exclude the user instead")
    truth = set(truth)
    disc = _discounts(k)
    dcg = math.fsum(disc[r] for r, item in enumerate(predicted[:k]) if item in truth)
    idcg = math.fsum(disc[:min(k, len(truth))])
    return dcg / idcg


def metric_oracle(predicted: Sequence[int], truth, k: int):
    """Recall and nDCG by walking the ranking one rank at a time.

    Deliberately independent of :func:`recall_at_k` / :func:`ndcg_at_k`.
    """
    if len(set(predicted)) != len(predicted):
        raise ValueError("predicted list contains duplicates")
    truth_list = list(truth)
    if len(set(truth_list)) != len(truth_list):
        raise ValueError("truth contains duplicates")
    if not truth_list:
        raise ValueError("empty truth")
    hits = 0
    gains = []
    for rank in range(1, k + 1):
        if rank > len(predicted):
            break
        p = 1 if predicted[rank - 1] in truth_list else 0
        hits += p
        if p:
            gains.append(1.0 / math.log2(rank + 1))
    ideal = []
    rank = 1
    while rank <= k and rank <= len(truth_list):
        ideal.append(1.0 / math.log2(rank + 1))
        rank += 1
    return hits / len(truth_list), math.fsum(gains) / math.fsum(ideal)


@dataclass
class EvalResult:
    ks: list
    recall: dict
    ndcg: dict
    n_users: int
    per_user: list = field(default_factory=list)
    n_excluded_no_novel: int = 0
    n_excluded_empty_input: int = 0

    def to_dict(self, per_user: bool = True) -> dict:
        d = {
            "ks": list(self.ks),
            "recall": {str(k): v for k, v in self.recall.items()},
            "ndcg": {str(k): v for k, v in self.ndcg.items()},
            "n_users": self.n_users,
            "n_excluded_no_novel": self.n_excluded_no_novel,
            "n_excluded_empty_input": self.n_excluded_empty_input,
        }
        if per_user:
            d["per_user"] = self.per_user
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalResult":
        return cls(
            ks=list(d["ks"]),
            recall={int(k): v for k, v in d["recall"].items()},
            ndcg={int(k): v for k, v in d["ndcg"].items()},
            n_users=d["n_users"],
            per_user=d.get("per_user", []),
            n_excluded_no_novel=d.get("n_excluded_no_novel", 0),
            n_excluded_empty_input=d.get("n_excluded_empty_input", 0),
        )


def ground_truths(corpus):
    """Hold out each user's final basket; users without a novel target are dropped."""
    kept, dropped = [], 0
    for u in corpus.users:
        if len(u) < 2:
            raise EvaluationError(f"user {u.user_id!r} needs at least 2 baskets")
        seen = {i for b in u.history for i in b}
        novel = frozenset(i for i in u.target if i not in seen)
        if novel:
            kept.append(GroundTruth(u.user_id, u.history, novel))
        else:
            dropped += 1
    return kept, dropped


# A ranker maps a batch of histories to repeat-free rankings, best first.
Ranker = Callable[[list], list]


def evaluate_rankings(rank: Ranker, corpus, ks=(10, 20), batch_size: int = 256) -> EvalResult:
    ks = sorted(set(ks))
    truths, dropped = ground_truths(corpus)
    if not truths:
        raise EvaluationError("no user buys a novel item in the held-out basket")
    per_user = []
    for start in range(0, len(truths), batch_size):
        chunk = truths[start:start + batch_size]
        rankings = rank([g.history for g in chunk])
        for g, ranked in zip(chunk, rankings):
            seen = {i for b in g.history for i in b}
            leaked = seen.intersection(ranked[:ks[-1]])
            if leaked:
                raise EvaluationError(
                    f"user {g.user_id!r}: repeat items {sorted(leaked)[:5]} in the recommendation"
                )
            rec = {"user_id": g.user_id}
            for k in ks:
                rec[f"recall@{k}"] = recall_at_k(ranked, g.target_novel, k)
                rec[f"ndcg@{k}"] = ndcg_at_k(ranked, g.target_novel, k)
            per_user.append(rec)
    return EvalResult(
        ks=ks,
        recall={k: float(np.mean([r[f"recall@{k}"] for r in per_user])) for k in ks},
        ndcg={k: float(np.mean([r[f"ndcg@{k}"] for r in per_user])) for k in ks},
        n_users=len(per_user),
        per_user=per_user,
        n_excluded_no_novel=dropped,
    )


def model_ranker(model, k_max: int) -> Ranker:
    """Score a prediction slot appended to each history, hide repeats, rank."""
    cfg = model.cfg

    def rank(histories):
        samples = [append_prediction_slot(flatten(h), cfg.max_len, cfg.mask_id) for h in histories]
        ids = torch.as_tensor(np.stack([s.input_ids for s in samples]))
        idx = torch.as_tensor(np.stack([s.basket_indices for s in samples]))
        pad = torch.as_tensor(np.stack([s.pad_mask for s in samples]))
        # left padding: drop columns that are padding in every row
        first = int((~pad).all(dim=0).long().cumprod(0).sum())
        ids, idx, pad = ids[:, first:], idx[:, first:], pad[:, first:]
        was_training = model.training
        model.eval()
        with torch.no_grad():
            h = model(ids, idx, pad)[:, -1]
            scores = model.log_probs(h).double().numpy()
        model.train(was_training)
        out = []
        for hist, s in zip(histories, scores):
            seen = {i for b in hist for i in b}
            out.append(topk(restrict_to_novel(s, seen), k_max))
        return out

    return rank


def evaluate_model(model, corpus, ks=(10, 20), batch_size: int = 256) -> EvalResult:
    return evaluate_rankings(model_ranker(model, max(ks)), corpus, ks, batch_size)


@dataclass(frozen=True)
class TTest:
    statistic: float
    p_value: float


def paired_t_test(a, b) -> TTest:
    """Two-sided paired t-test on per-user records."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("paired records must have equal length")
    n = len(a)
    if n < 2:
        raise ValueError("need at least 2 pairs")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        if mean == 0:
            return TTest(0.0, 1.0)
        return TTest(math.copysign(math.inf, mean), 0.0)
    t = mean / (sd / math.sqrt(n))
    return TTest(float(t), float(2 * stats.t.sf(abs(t), n - 1)))
