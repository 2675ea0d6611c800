import math

import numpy as np
import pytest
import torch

from nnbr.augmentation import MaskConfig, SwapConfig, flatten, make_sample
from nnbr.data import SplitSpec, SyntheticProfile, generate_synthetic, split_users
from nnbr.model import ModelConfig
from nnbr.training import (
    TrainConfig, TrainConfigError, TrainHistory, collate, epoch_samples, joint_train, length_buckets,
    nll_loss, train,
)


@pytest.fixture(scope="module")
def split():
    c = generate_synthetic(SyntheticProfile(n_users=150, n_items=40, n_clusters=4, max_baskets=8), 0)
    tr, va, _ = split_users(c, SplitSpec(seed=0))
    mc = ModelConfig(n_items=c.n_items, embed_dim=16, layers=1, heads=2, max_positions=9, max_len=32)
    return tr, va, mc


def cfg(strategy="item_select", **kw):
    ratio = 0.5 if strategy.startswith("item") else None
    base = dict(mask=MaskConfig(strategy, ratio), learning_rate=3e-3, batch_size=16, max_epochs=3,
                patience=3, seed=0)
    return TrainConfig(**{**base, **kw})


# ---------------------------------------------------------------------------
# loss

def test_nll_uniform_is_log_m():
    lp = torch.log_softmax(torch.zeros(3, 4), dim=-1)
    assert nll_loss(lp, torch.tensor([1, 2, 4])).item() == pytest.approx(math.log(4), abs=1e-6)
    assert nll_loss(lp, torch.tensor([1])).item() == pytest.approx(1.3863, abs=1e-4)


def test_nll_confident_and_empty():
    lp = torch.log_softmax(torch.tensor([[100.0, 0.0]]), dim=-1)
    assert nll_loss(lp, torch.tensor([1])).item() == pytest.approx(0.0, abs=1e-6)
    with pytest.raises(ValueError):
        nll_loss(lp, torch.tensor([], dtype=torch.long))


def test_collate_trims_shared_padding():
    rng = np.random.default_rng(0)
    a = make_sample(flatten([(1,), (2,)]), MaskConfig("basket_all", None), None, 10, rng, 9)
    b = make_sample(flatten([(1, 3), (2, 4)]), MaskConfig("basket_all", None), None, 10, rng, 9)
    ids, idx, pad, rows, cols, targets = collate([a, b])
    assert ids.shape == (2, 4)
    assert ids[rows, cols].eq(9).all()
    assert sorted(targets.tolist()) == [2, 2, 4]


def test_length_buckets_cover_every_sample_once():
    rng = np.random.default_rng(0)
    samples = [make_sample(flatten([(1,)] * int(n) + [(2,)]), MaskConfig("basket_all", None), None, 40, rng, 9)
               for n in rng.integers(1, 30, size=100)]
    batches = length_buckets(samples, 8, np.random.default_rng(1))
    flat = sorted(int(i) for b in batches for i in b)
    assert flat == list(range(100))


# ---------------------------------------------------------------------------
# configuration

def test_swap_rejected_for_basket_level():
    with pytest.raises(TrainConfigError, match="swap"):
        cfg("basket_all", swap=SwapConfig(0.3, 1))


def test_history_epochs_increase():
    h = TrainHistory()
    h.add({"epoch": 1})
    with pytest.raises(ValueError):
        h.add({"epoch": 1})


def test_explore_has_fewer_labels_than_all(split):
    tr, _, mc = split
    n_all = sum(len(s.labels) for s in epoch_samples(tr.users, cfg("basket_all"), mc, 0))
    n_exp = sum(len(s.labels) for s in epoch_samples(tr.users, cfg("basket_explore"), mc, 0))
    assert 0 < n_exp < n_all


def test_item_masks_redrawn_each_epoch(split):
    tr, _, mc = split
    a = epoch_samples(tr.users[:20], cfg(), mc, 1)
    b = epoch_samples(tr.users[:20], cfg(), mc, 2)
    assert any(x.labels != y.labels for x, y in zip(a, b))


# ---------------------------------------------------------------------------
# training loop

def test_training_is_deterministic(split):
    tr, va, mc = split
    _, h1 = train(tr, va, mc, cfg(max_epochs=2))
    _, h2 = train(tr, va, mc, cfg(max_epochs=2))
    assert h1.log_lines() == h2.log_lines()


def test_loss_decreases_early(split):
    tr, va, mc = split
    _, h = train(tr, va, mc, cfg("basket_all", max_epochs=3, patience=10))
    losses = [r["loss"] for r in h.records]
    assert losses[2] < losses[0]


def test_returns_best_epoch_weights(split):
    tr, va, mc = split
    model, h = train(tr, va, mc, cfg(max_epochs=4, patience=10))
    from nnbr.evaluation import evaluate_model
    assert evaluate_model(model, va, ks=(10,)).recall[10] == pytest.approx(h.best["val_recall@10"])


def test_early_stopping_respects_patience(split):
    tr, va, mc = split
    _, h = train(tr, va, mc, cfg(max_epochs=30, patience=1, learning_rate=1e-6))
    assert len(h.records) - 1 - h.best_epoch <= 1
    assert len(h.records) < 30


def test_joint_with_zero_finetune_equals_pretrain(split):
    tr, va, mc = split
    m1, h1 = train(tr, va, mc, cfg(max_epochs=2), phase="pretrain")
    m2, h2 = joint_train(tr, va, mc, cfg(max_epochs=2), cfg("basket_all", max_epochs=0))
    for p, q in zip(m1.parameters(), m2.parameters()):
        assert torch.equal(p, q)
    assert h2.phase_boundary == h1.best["epoch"]


def test_joint_phases_and_boundary(split):
    tr, va, mc = split
    _, h = joint_train(tr, va, mc, cfg(max_epochs=2), cfg("basket_all", max_epochs=2))
    phases = [r["phase"] for r in h.records]
    assert phases == ["pretrain"] * 2 + ["finetune"] * 2
    assert [r["epoch"] for r in h.records] == [1, 2, 3, 4]
    assert h.phase_boundary in (1, 2)


def test_joint_rejects_wrong_order(split):
    tr, va, mc = split
    with pytest.raises(TrainConfigError):
        joint_train(tr, va, mc, cfg("basket_all"), cfg("basket_all"))


def test_empty_validation_rejected(split):
    tr, _, mc = split
    with pytest.raises(TrainConfigError):
        train(tr, None, mc, cfg())


def test_joint_reuses_pretrained_run(split):
    tr, va, mc = split
    fresh, h1 = joint_train(tr, va, mc, cfg(max_epochs=2), cfg("basket_all", max_epochs=2))
    pre = train(tr, va, mc, cfg(max_epochs=2))
    reused, h2 = joint_train(tr, va, mc, cfg(max_epochs=2), cfg("basket_all", max_epochs=2), pretrained=pre)
    assert h1.log_lines() == h2.log_lines()
    for p, q in zip(fresh.parameters(), reused.parameters()):
        assert torch.equal(p, q)
    assert pre[1].records[0]["phase"] == "train"  # the donor run is left alone
