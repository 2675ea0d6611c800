"""Bi-directional transformer over flattened baskets with a tied output head."""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1
INIT_STD = 0.02


class ModelConfigError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass
class ModelConfig:
    n_items: int
    embed_dim: int = 64
    layers: int = 2
    heads: int = 8
    max_positions: int = 51  # basket ordinals 1..max_positions; row 0 is padding
    max_len: int = 100
    dropout: float = 0.1
    # count basket positions back from the newest basket (ablation; off by default)
    positions_from_end: bool = False

    def __post_init__(self):
        if self.n_items < 1:
            raise ModelConfigError("n_items must be >= 1")
        if self.layers < 1:
            raise ModelConfigError("need at least one transformer layer")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ModelConfigError("embed_dim must be divisible by heads")
        if self.max_positions < 2 or self.max_len < 2:
            raise ModelConfigError("max_positions and max_len must be >= 2")
        if not 0 <= self.dropout < 1:
            raise ModelConfigError("dropout must lie in [0, 1)")

    @property
    def mask_id(self) -> int:
        return self.n_items + 1


def parameter_count(cfg: ModelConfig) -> int:
    """Closed form for the number of trainable scalars.

    Per layer: four d x d attention projections with biases (4d^2 + 4d), two
    layer norms (4d), and a 4d-wide feed-forward (8d^2 + 5d).
    """
    d, m = cfg.embed_dim, cfg.n_items
    per_layer = 12 * d * d + 13 * d
    return (m + 2) * d + (cfg.max_positions + 1) * d + cfg.layers * per_layer + m


def _trunc_normal(t: torch.Tensor, generator):
    nn.init.trunc_normal_(t, mean=0.0, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD,
                          generator=generator)


class SelfAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)

    def forward(self, x, key_bias):
        B, T, d = x.shape
        h = self.heads

        def split(t):
            return t.view(B, T, h, d // h).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        # no causal mask; key_bias only hides padded keys
        y = F.scaled_dot_product_attention(q, k, v, attn_mask=key_bias)
        y = y.transpose(1, 2).reshape(B, T, d)
        return self.out(y)


class TransformerBlock(nn.Module):
    """Post-norm block: LN(x + attn(x)), then LN(x + ffn(x))."""

    def __init__(self, d: int, heads: int, dropout: float):
        super().__init__()
        self.attn = SelfAttention(d, heads)
        self.norm1 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, 4 * d)
        self.ff2 = nn.Linear(4 * d, d)
        self.norm2 = nn.LayerNorm(d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, key_bias):
        x = self.norm1(x + self.drop(self.attn(x, key_bias)))
        x = self.norm2(x + self.drop(self.ff2(self.drop(F.gelu(self.ff1(x))))))
        return x


class BTBR(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        # rows: 0 pad, 1..m items, m+1 mask token
        self.item_embeddings = nn.Embedding(cfg.n_items + 2, d)
        self.position_embeddings = nn.Embedding(cfg.max_positions + 1, d)
        self.blocks = nn.ModuleList(
            TransformerBlock(d, cfg.heads, cfg.dropout) for _ in range(cfg.layers)
        )
        self.output_bias = nn.Parameter(torch.zeros(cfg.n_items))
        self.emb_drop = nn.Dropout(cfg.dropout)

    def embed(self, input_ids, basket_indices):
        if int(basket_indices.max()) > self.cfg.max_positions:
            raise ModelConfigError(
                f"basket index {int(basket_indices.max())} exceeds "
                f"max_positions={self.cfg.max_positions}"
            )
        if self.cfg.positions_from_end:
            newest = basket_indices.max(dim=1, keepdim=True).values
            basket_indices = torch.where(basket_indices > 0, newest - basket_indices + 1, 0)
        return self.item_embeddings(input_ids) + self.position_embeddings(basket_indices)

    def encode(self, x, pad_mask):
        x = self.emb_drop(x)
        key_bias = torch.zeros(pad_mask.shape, dtype=x.dtype)
        key_bias = key_bias.masked_fill(~pad_mask, torch.finfo(x.dtype).min)[:, None, None, :]
        for i, block in enumerate(self.blocks):
            x = block(x, key_bias)
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite activations after layer {i}")
        return x

    def forward(self, input_ids, basket_indices, pad_mask):
        return self.encode(self.embed(input_ids, basket_indices), pad_mask)

    def item_logits(self, h):
        """Scores over real items 1..m; pad and mask rows never compete."""
        return h @ self.item_embeddings.weight[1:self.cfg.n_items + 1].T + self.output_bias

    def log_probs(self, h):
        return torch.log_softmax(self.item_logits(h), dim=-1)


def init_parameters(cfg: ModelConfig, seed: int) -> BTBR:
    """Fresh model: truncated normal (std 0.02, cut at 2 std) weights, zero biases."""
    g = torch.Generator().manual_seed(seed)
    model = BTBR(cfg)
    for name, p in model.named_parameters():
        if "norm" in name:
            nn.init.ones_(p) if name.endswith("weight") else nn.init.zeros_(p)
        elif name.endswith("bias"):
            nn.init.zeros_(p)
        else:
            with torch.no_grad():
                _trunc_normal(p, g)
    return model


# ---------------------------------------------------------------------------
# scoring helpers on plain arrays; index k holds item k + 1

def predict_scores(h, model: BTBR) -> np.ndarray:
    with torch.no_grad():
        h = torch.as_tensor(h, dtype=model.output_bias.dtype)
        return model.log_probs(h).numpy()


def restrict_to_novel(scores: np.ndarray, repeat_items) -> np.ndarray:
    out = np.array(scores, dtype=np.float64, copy=True)
    idx = np.fromiter(repeat_items, dtype=np.int64) - 1
    out[..., idx] = -np.inf
    return out


def topk(scores, k: int) -> list:
    """Item ids of the ``k`` best finite scores; ties go to the lower id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = np.asarray(scores, dtype=np.float64)
    finite = np.flatnonzero(np.isfinite(scores))
    order = finite[np.lexsort((finite, -scores[finite]))]
    return (order[:k] + 1).tolist()


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, model: BTBR, seed: int, meta: dict | None = None) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "model_config": asdict(model.cfg),
        "state_dict": model.state_dict(),
        "seed": seed,
        "meta": meta or {},
    }, tmp)
    tmp.replace(path)


def load_checkpoint(path, n_items: int | None = None):
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise ModelConfigError(f"{path}: unsupported checkpoint version {blob.get('format_version')}")
    cfg = ModelConfig(**blob["model_config"])
    if n_items is not None and cfg.n_items != n_items:
        raise ModelConfigError(
            f"{path}: checkpoint vocabulary has {cfg.n_items} items, corpus has {n_items}"
        )
    model = BTBR(cfg)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob
