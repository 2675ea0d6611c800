"""Flattening, masking and item swapping for basket sequences.

A flattened sequence pairs every item occurrence with the 1-based ordinal of
the basket it came from. Padding is on the left (id 0, basket index 0) so the
most recent items always sit at the right edge.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from nnbr.data import PAD_ID

ITEM_LEVEL = ("item_random", "item_select")
BASKET_LEVEL = ("basket_all", "basket_explore")
STRATEGIES = ITEM_LEVEL + BASKET_LEVEL


@dataclass
class FlattenedSequence:
    item_ids: np.ndarray
    basket_indices: np.ndarray

    def __post_init__(self):
        self.item_ids = np.asarray(self.item_ids, dtype=np.int64)
        self.basket_indices = np.asarray(self.basket_indices, dtype=np.int64)
        if self.item_ids.shape != self.basket_indices.shape:
            raise ValueError("item_ids and basket_indices differ in length")

    def __len__(self):
        return len(self.item_ids)

    @property
    def real(self) -> np.ndarray:
        return self.item_ids != PAD_ID

    @property
    def n_baskets(self) -> int:
        b = self.basket_indices[self.real]
        return len(np.unique(b))

    def copy(self):
        return FlattenedSequence(self.item_ids.copy(), self.basket_indices.copy())


@dataclass
class MaskedSample:
    input_ids: np.ndarray
    basket_indices: np.ndarray
    pad_mask: np.ndarray  # True at real positions
    labels: dict  # position -> original item id

    def __len__(self):
        return len(self.input_ids)


@dataclass
class MaskConfig:
    strategy: str = "item_select"
    mask_ratio: float | None = 0.5

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown masking strategy {self.strategy!r}")
        if self.item_level:
            if self.mask_ratio is None or not 0 < self.mask_ratio < 1:
                raise ValueError("item-level masking needs mask_ratio in (0, 1)")
        elif self.mask_ratio is not None:
            raise ValueError("mask_ratio only applies to item-level strategies")

    @property
    def item_level(self) -> bool:
        return self.strategy in ITEM_LEVEL


@dataclass
class SwapConfig:
    swap_ratio: float = 0.0
    swap_hop: int = 1

    def __post_init__(self):
        if not 0 <= self.swap_ratio < 1:
            raise ValueError("swap_ratio must lie in [0, 1)")
        if self.swap_hop < 1:
            raise ValueError("swap_hop must be >= 1")

    @property
    def enabled(self) -> bool:
        return self.swap_ratio > 0


def flatten(baskets) -> FlattenedSequence:
    """Concatenate baskets (a UserSequence or a list of baskets) in order."""
    baskets = getattr(baskets, "baskets", baskets)
    if len(baskets) == 0:
        raise ValueError("cannot flatten an empty sequence")
    items = [i for b in baskets for i in b]
    idx = [k for k, b in enumerate(baskets, start=1) for _ in b]
    return FlattenedSequence(np.array(items), np.array(idx))


def _rebase(basket_indices: np.ndarray) -> np.ndarray:
    out = basket_indices.copy()
    real = out > 0
    if real.any():
        out[real] -= out[real].min() - 1
    return out


def truncate_pad(seq: FlattenedSequence, max_len: int) -> FlattenedSequence:
    """Keep the most recent ``max_len`` items, then left-pad to ``max_len``."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    real = seq.real
    items, baskets = seq.item_ids[real][-max_len:], seq.basket_indices[real][-max_len:]
    baskets = _rebase(baskets)
    n_pad = max_len - len(items)
    return FlattenedSequence(
        np.concatenate([np.full(n_pad, PAD_ID), items]),
        np.concatenate([np.zeros(n_pad, dtype=np.int64), baskets]),
    )


def fit_sample(sample: MaskedSample, max_len: int) -> MaskedSample:
    """Truncate (suffix) and left-pad a masked sample; labels move with their positions."""
    real = np.flatnonzero(sample.pad_mask)
    keep = real[-max_len:]
    n_pad = max_len - len(keep)
    new_pos = {old: n_pad + k for k, old in enumerate(keep)}
    labels = {new_pos[p]: v for p, v in sample.labels.items() if p in new_pos}
    pad_mask = np.zeros(max_len, dtype=bool)
    pad_mask[n_pad:] = True
    return MaskedSample(
        np.concatenate([np.full(n_pad, PAD_ID), sample.input_ids[keep]]),
        np.concatenate([np.zeros(n_pad, dtype=np.int64), _rebase(sample.basket_indices[keep])]),
        pad_mask,
        labels,
    )


def _masked(seq: FlattenedSequence, positions, mask_id: int) -> MaskedSample:
    positions = np.asarray(sorted(int(p) for p in positions), dtype=np.int64)
    input_ids = seq.item_ids.copy()
    labels = {int(p): int(seq.item_ids[p]) for p in positions}
    input_ids[positions] = mask_id
    return MaskedSample(input_ids, seq.basket_indices.copy(), seq.real.copy(), labels)


def mask_item_random(seq: FlattenedSequence, alpha: float, rng, mask_id: int) -> MaskedSample:
    real = np.flatnonzero(seq.real)
    if len(real) == 0:
        raise ValueError("sequence has no real positions")
    hit = real[rng.random(len(real)) < alpha]
    if len(hit) == 0:
        hit = real[[rng.integers(len(real))]]
    return _masked(seq, hit, mask_id)


def mask_item_select(seq: FlattenedSequence, alpha: float, rng, mask_id: int) -> MaskedSample:
    """Mask every occurrence of a random subset of the distinct items."""
    real = seq.real
    if not real.any():
        raise ValueError("sequence has no real positions")
    distinct = np.unique(seq.item_ids[real])
    k = max(1, int(np.floor(alpha * len(distinct) + 0.5)))
    chosen = rng.choice(distinct, size=min(k, len(distinct)), replace=False)
    hit = np.flatnonzero(real & np.isin(seq.item_ids, chosen))
    return _masked(seq, hit, mask_id)


def mask_basket_all(seq: FlattenedSequence, mask_id: int) -> MaskedSample | None:
    """Mask the whole last basket; None when there is no earlier basket."""
    if seq.n_baskets < 2:
        return None
    real = seq.real
    last = seq.basket_indices[real].max()
    return _masked(seq, np.flatnonzero(real & (seq.basket_indices == last)), mask_id)


def mask_basket_explore(seq: FlattenedSequence, mask_id: int) -> MaskedSample | None:
    """Drop repeat items from the last basket and mask the novel ones.

    Returns None when the sequence has one basket or the last basket holds
    no novel item.
    """
    if seq.n_baskets < 2:
        return None
    real = seq.real
    last = seq.basket_indices[real].max()
    in_last = real & (seq.basket_indices == last)
    history = set(seq.item_ids[real & ~in_last].tolist())
    repeat = in_last & np.isin(seq.item_ids, list(history))
    if not (in_last & ~repeat).any():
        return None
    kept = ~repeat
    # deleted slots are replaced by left padding so the length is unchanged
    n_drop = int(repeat.sum())
    trimmed = FlattenedSequence(
        np.concatenate([np.full(n_drop, PAD_ID), seq.item_ids[kept]]),
        np.concatenate([np.zeros(n_drop, dtype=np.int64), seq.basket_indices[kept]]),
    )
    in_last = trimmed.real & (trimmed.basket_indices == last)
    return _masked(trimmed, np.flatnonzero(in_last), mask_id)


def swap_items(seq: FlattenedSequence, cfg: SwapConfig, rng) -> FlattenedSequence:
    """Move a random subset of occurrences to a basket at most ``swap_hop`` away.

    The target basket is uniform over the existing ordinals within the hop,
    excluding the source. Moved items that land on a copy of themselves stay
    as duplicate positions. A single-basket sequence comes back unchanged.
    """
    out = seq.copy()
    if not cfg.enabled:
        return out
    real = np.flatnonzero(seq.real)
    ordinals = np.unique(seq.basket_indices[real])
    if len(ordinals) < 2:
        return out
    picked = real[rng.random(len(real)) < cfg.swap_ratio]
    for p in picked:
        src = seq.basket_indices[p]
        cand = ordinals[(ordinals != src) & (np.abs(ordinals - src) <= cfg.swap_hop)]
        if len(cand):
            out.basket_indices[p] = cand[rng.integers(len(cand))]
    # pads carry basket index 0, so a stable sort keeps them on the left
    order = np.argsort(out.basket_indices, kind="stable")
    return FlattenedSequence(out.item_ids[order], out.basket_indices[order])


def append_prediction_slot(seq: FlattenedSequence, max_len: int, mask_id: int) -> MaskedSample:
    """Inference input: history plus one mask token in a fresh basket."""
    if max_len < 2:
        raise ValueError("max_len must leave room for history and the slot")
    real = seq.real
    if not real.any():
        raise ValueError("sequence has no real positions")
    hist = truncate_pad(FlattenedSequence(seq.item_ids[real], seq.basket_indices[real]), max_len - 1)
    slot = hist.basket_indices.max() + 1
    ids = np.append(hist.item_ids, mask_id)
    idx = np.append(hist.basket_indices, slot)
    return MaskedSample(ids, idx, ids != PAD_ID, {})


def make_sample(seq: FlattenedSequence, mask: MaskConfig, swap: SwapConfig | None,
                max_len: int, rng, mask_id: int) -> MaskedSample | None:
    """Full training-sample pipeline for one user.

    Item-level: swap, truncate to the window, then mask inside the window so
    every label survives. Basket-level: mask the full sequence, then keep the
    suffix (which always contains the last basket).
    """
    if mask.item_level:
        if swap is not None and swap.enabled:
            seq = swap_items(seq, swap, rng)
        seq = truncate_pad(seq, max_len)
        if mask.strategy == "item_random":
            return mask_item_random(seq, mask.mask_ratio, rng, mask_id)
        return mask_item_select(seq, mask.mask_ratio, rng, mask_id)
    if swap is not None and swap.enabled:
        raise ValueError("swapping is only allowed with item-level masking")
    if mask.strategy == "basket_all":
        sample = mask_basket_all(seq, mask_id)
    else:
        sample = mask_basket_explore(seq, mask_id)
    if sample is None:
        return None
    return fit_sample(sample, max_len)


def check_sample(sample: MaskedSample, mask_id: int) -> None:
    """Assert the label/padding invariants shared by every strategy."""
    masked = np.flatnonzero(sample.input_ids == mask_id)
    if sorted(sample.labels) != masked.tolist():
        raise AssertionError("labels do not match the masked positions")
    if not sample.labels:
        raise AssertionError("sample has no labels")
    if (~sample.pad_mask[masked]).any():
        raise AssertionError("a padding position is masked")
    pads = ~sample.pad_mask
    if (sample.input_ids[pads] != PAD_ID).any() or (sample.basket_indices[pads] != 0).any():
        raise AssertionError("padding positions must carry id 0 and basket index 0")
