"""Masked-item training, joint pretrain/finetune, and numeric gradient checks."""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from nnbr.augmentation import (
    MaskConfig, SwapConfig, check_sample, flatten, make_sample,
)
from nnbr.evaluation import evaluate_model
from nnbr.model import BTBR, ModelConfig, init_parameters

log = logging.getLogger(__name__)

VAL_K = 10


class TrainConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    mask: MaskConfig = field(default_factory=MaskConfig)
    swap: SwapConfig = field(default_factory=SwapConfig)
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 5
    grad_clip: float = 5.0
    seed: int = 0
    check_samples: bool = True

    def __post_init__(self):
        if isinstance(self.mask, dict):
            self.mask = MaskConfig(**self.mask)
        if isinstance(self.swap, dict):
            self.swap = SwapConfig(**self.swap)
        if self.swap.enabled and not self.mask.item_level:
            raise TrainConfigError(
                f"swap_ratio={self.swap.swap_ratio} with {self.mask.strategy}: "
                "swapping only applies to item-level masking"
            )
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise TrainConfigError("batch_size, patience must be >= 1 and max_epochs >= 0")
        if self.learning_rate <= 0:
            raise TrainConfigError("learning_rate must be positive")


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_epoch: int | None = None  # index into records
    phase_boundary: int | None = None

    def add(self, rec: dict):
        if self.records and rec["epoch"] <= self.records[-1]["epoch"]:
            raise ValueError("epoch indices must increase")
        self.records.append(rec)

    @property
    def best(self) -> dict | None:
        return None if self.best_epoch is None else self.records[self.best_epoch]

    def curve(self, key=f"val_recall@{VAL_K}"):
        return [r[key] for r in self.records]

    def log_lines(self) -> list:
        """Deterministic metrics-log lines (no wall-clock fields)."""
        keys = ("epoch", "phase", "loss", f"val_recall@{VAL_K}", f"val_ndcg@{VAL_K}")
        return [json.dumps({k: r[k] for k in keys}) for r in self.records]


def nll_loss(log_probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of the labels.

    ``log_probs`` has one row per masked position over items ``1..m``;
    ``labels`` holds the matching item ids.
    """
    if labels.numel() == 0:
        raise ValueError("no masked positions to score")
    return -log_probs[torch.arange(len(labels)), labels - 1].mean()


def collate(samples):
    """Stack samples and drop the left columns that are padding in every row."""
    ids = np.stack([s.input_ids for s in samples])
    idx = np.stack([s.basket_indices for s in samples])
    pad = np.stack([s.pad_mask for s in samples])
    first = int(np.argmax(pad.any(axis=0)))
    rows, cols, targets = [], [], []
    for r, s in enumerate(samples):
        for p in sorted(s.labels):
            rows.append(r)
            cols.append(p - first)
            targets.append(s.labels[p])
    return (
        torch.as_tensor(ids[:, first:]),
        torch.as_tensor(idx[:, first:]),
        torch.as_tensor(pad[:, first:]),
        torch.as_tensor(rows), torch.as_tensor(cols), torch.as_tensor(targets),
    )


def batch_loss(model: BTBR, batch) -> torch.Tensor:
    ids, idx, pad, rows, cols, targets = batch
    h = model(ids, idx, pad)[rows, cols]
    return nll_loss(model.log_probs(h), targets)


def length_buckets(samples, batch_size: int, rng, pool: int = 8) -> list:
    """Shuffled batches of similar length.

    Samples are shuffled, sorted by real length inside pools of ``pool``
    batches, cut into batches, and the batch order is shuffled again.
    """
    order = rng.permutation(len(samples))
    lengths = np.array([samples[i].pad_mask.sum() for i in order])
    batches = []
    step = batch_size * pool
    for start in range(0, len(order), step):
        block = order[start:start + step]
        block = block[np.argsort(lengths[start:start + step], kind="stable")]
        batches.extend(block[b:b + batch_size] for b in range(0, len(block), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def epoch_samples(users, cfg: TrainConfig, model_cfg: ModelConfig, epoch: int):
    """One sample per user; item-level masks are redrawn every epoch."""
    out = []
    for n, u in enumerate(users):
        rng = np.random.default_rng([cfg.seed, 0, epoch, n])
        s = make_sample(flatten(u), cfg.mask, cfg.swap, model_cfg.max_len, rng, model_cfg.mask_id)
        if s is not None:
            out.append(s)
    return out


def train(train_corpus, val_corpus, model_cfg: ModelConfig, cfg: TrainConfig, *,
          model: BTBR | None = None, phase: str = "train", history: TrainHistory | None = None,
          best_score: float | None = None, on_epoch=None):
    """Train with early stopping on validation Recall@10.

    Passing ``model`` continues from its weights with a fresh optimizer;
    ``best_score`` is the validation score those weights already reached, so
    the returned parameters are never worse on validation than the input.
    Returns the best-epoch model and the (extended) history.
    """
    if not train_corpus.users:
        raise TrainConfigError("empty training corpus")
    if val_corpus is None or not val_corpus.users:
        raise TrainConfigError("a validation corpus is needed for early stopping")
    torch.manual_seed(cfg.seed)
    if model is None:
        model = init_parameters(model_cfg, cfg.seed)
    history = history if history is not None else TrainHistory()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    users = list(train_corpus.users)

    fixed = None
    if not cfg.mask.item_level:
        fixed = epoch_samples(users, cfg, model_cfg, 0)
        if not fixed:
            raise TrainConfigError(f"{cfg.mask.strategy} produced no trainable sample")

    best_state = copy.deepcopy(model.state_dict())
    best = -np.inf if best_score is None else best_score
    since_best = 0
    start_epoch = history.records[-1]["epoch"] + 1 if history.records else 1
    for e in range(cfg.max_epochs):
        epoch = start_epoch + e
        t0 = time.perf_counter()
        samples = fixed if fixed is not None else epoch_samples(users, cfg, model_cfg, epoch)
        if not samples:
            raise TrainConfigError(f"{cfg.mask.strategy} produced no trainable sample")
        batches = length_buckets(samples, cfg.batch_size, np.random.default_rng([cfg.seed, 1, epoch]))
        model.train()
        total, n_labels = 0.0, 0
        for b, members in enumerate(batches):
            chunk = [samples[i] for i in members]
            if cfg.check_samples and b == 0:
                for s in chunk:
                    check_sample(s, model_cfg.mask_id)
            batch = collate(chunk)
            loss = batch_loss(model, batch)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            k = len(batch[-1])
            total += loss.item() * k
            n_labels += k
        res = evaluate_model(model, val_corpus, ks=(VAL_K,))
        rec = {
            "epoch": epoch,
            "phase": phase,
            "loss": total / n_labels,
            "n_labels": n_labels,
            f"val_recall@{VAL_K}": res.recall[VAL_K],
            f"val_ndcg@{VAL_K}": res.ndcg[VAL_K],
            "seconds": time.perf_counter() - t0,
        }
        history.add(rec)
        if on_epoch is not None:
            on_epoch(rec)
        log.info("epoch %d [%s] loss %.4f val R@10 %.4f", epoch, phase, rec["loss"],
                 rec[f"val_recall@{VAL_K}"])
        if rec[f"val_recall@{VAL_K}"] > best:
            best = rec[f"val_recall@{VAL_K}"]
            best_state = copy.deepcopy(model.state_dict())
            history.best_epoch = len(history.records) - 1
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    return model, history


def joint_train(train_corpus, val_corpus, model_cfg: ModelConfig,
                pretrain: TrainConfig, finetune: TrainConfig, on_epoch=None, pretrained=None):
    """Item-level pretraining to its early-stop point, then basket-level finetuning.

    ``pretrained`` may carry the ``(model, history)`` of an earlier run with the
    same ``pretrain`` config; it is copied, not modified, and phase one is skipped.
    """
    if not pretrain.mask.item_level:
        raise TrainConfigError("joint pretraining needs an item-level strategy")
    if finetune.mask.item_level:
        raise TrainConfigError("joint finetuning needs a basket-level strategy")
    if pretrained is None:
        model, history = train(train_corpus, val_corpus, model_cfg, pretrain,
                               phase="pretrain", on_epoch=on_epoch)
    else:
        model, history = copy.deepcopy(pretrained)
        for rec in history.records:
            rec["phase"] = "pretrain"
    history.phase_boundary = history.records[history.best_epoch]["epoch"]
    best = history.best[f"val_recall@{VAL_K}"]
    # fresh optimizer moments for the second phase
    model, history = train(train_corpus, val_corpus, model_cfg, finetune, model=model,
                           phase="finetune", history=history, best_score=best,
                           on_epoch=on_epoch)
    return model, history


# ---------------------------------------------------------------------------
# numeric verification

def _tiny_batch(cfg: ModelConfig, seed: int):
    rng = np.random.default_rng(seed)
    samples = []
    for strategy in ("item_random", "basket_all", "item_select"):
        baskets = [tuple(sorted(rng.choice(np.arange(1, cfg.n_items + 1),
                                           size=int(rng.integers(1, 3)), replace=False)))
                   for _ in range(int(rng.integers(2, 4)))]
        mask = MaskConfig(strategy, 0.5 if strategy != "basket_all" else None)
        samples.append(make_sample(flatten(baskets), mask, None, cfg.max_len, rng, cfg.mask_id))
    return collate(samples)


def gradient_check(cfg: ModelConfig, seed: int = 0, eps: float = 1e-3, corrupt=None) -> float:
    """Largest relative gap between autograd and central differences.

    The gap is measured per parameter tensor as ``|g_a - g_n| / max(|g_a|, |g_n|)``
    (Euclidean norms) and the maximum over tensors is returned. ``corrupt``
    may rewrite the analytic gradients (name -> tensor) as a negative control.
    """
    if cfg.n_items > 8 or cfg.embed_dim > 4:
        raise ValueError("gradient_check is meant for tiny models (m <= 8, d <= 4)")
    cfg = ModelConfig(**{**cfg.__dict__, "dropout": 0.0})
    torch.manual_seed(seed)
    model = init_parameters(cfg, seed).double()
    # nudge biases and norms away from their trivial init so every path is exercised
    g = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.1 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    model.eval()
    batch = _tiny_batch(cfg, seed)

    model.zero_grad()
    batch_loss(model, batch).backward()
    analytic = {n: p.grad.detach().clone() for n, p in model.named_parameters()}
    if corrupt is not None:
        analytic = corrupt(analytic)

    worst = 0.0
    with torch.no_grad():
        for name, p in model.named_parameters():
            numeric = torch.zeros_like(p)
            flat, nflat = p.view(-1), numeric.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + eps
                up = batch_loss(model, batch).item()
                flat[j] = orig - eps
                down = batch_loss(model, batch).item()
                flat[j] = orig
                nflat[j] = (up - down) / (2 * eps)
            a = analytic[name]
            scale = max(a.norm().item(), numeric.norm().item())
            if scale < 1e-10:
                continue
            worst = max(worst, (a - numeric).norm().item() / scale)
    return worst
