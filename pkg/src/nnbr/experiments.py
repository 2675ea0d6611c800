"""Runners shared by the CLI, the scripts, and the acceptance suite."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from nnbr.augmentation import MaskConfig
from nnbr.baselines import make_ranker
from nnbr.config import ExperimentConfig
from nnbr.data import (
    Corpus, SplitSpec, SyntheticProfile, corpus_stats, generate_synthetic, load_transactions,
    preprocess, read_corpus, split_users,
)
from nnbr.evaluation import EvalResult, evaluate_model, evaluate_rankings
from nnbr.model import ModelConfig
from nnbr.training import TrainConfig, joint_train, train

log = logging.getLogger(__name__)


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def atomic_write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def build_corpus(cfg: ExperimentConfig) -> Corpus:
    if cfg.dataset.synthetic is not None:
        corpus = generate_synthetic(cfg.dataset.profile(), cfg.dataset.synthetic_seed)
    else:
        corpus = load_transactions(cfg.dataset.resolved_path(), cfg.dataset.resolved_schema())
    return preprocess(corpus, cfg.preprocess)


def corpus_path(cfg: ExperimentConfig) -> Path:
    return cfg.run_dir / "data" / "corpus.tsv"


def load_prepared(cfg: ExperimentConfig) -> Corpus:
    p = corpus_path(cfg)
    if not p.exists():
        raise FileNotFoundError(f"{p} missing; run `nnbr prepare` first")
    return read_corpus(p)


def rep_dir(cfg: ExperimentConfig, rep: int) -> Path:
    return cfg.run_dir / f"rep{rep}"


def train_rep(cfg: ExperimentConfig, corpus: Corpus, rep: int, on_epoch=None):
    tr, va, _ = split_users(corpus, cfg.split_for(rep))
    mc = cfg.model_config(corpus.n_items)
    if cfg.joint:
        return joint_train(tr, va, mc, cfg.seeded(cfg.train, rep), cfg.seeded(cfg.finetune, rep),
                           on_epoch=on_epoch)
    return train(tr, va, mc, cfg.seeded(cfg.train, rep), on_epoch=on_epoch)


def baseline_rep(cfg: ExperimentConfig, corpus: Corpus, rep: int) -> EvalResult:
    tr, _, te = split_users(corpus, cfg.split_for(rep))
    b = cfg.baseline
    rank = make_ranker(b.name, tr, max(cfg.ks), b.label_mode, b.tifu_config())
    return evaluate_rankings(rank, te, cfg.ks)


def result_record(cfg: ExperimentConfig, method: str, per_rep: list) -> dict:
    """Serialized evaluation: one entry per repetition plus the mean of means."""
    reps = []
    for rep, res in enumerate(per_rep):
        reps.append({"rep": rep, "seed": cfg.seed + rep, **res.to_dict()})
    ks = per_rep[0].ks
    return {
        "method": method,
        "experiment": cfg.name,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "ks": ks,
        "repetitions": reps,
        "mean": {
            "recall": {str(k): float(np.mean([r.recall[k] for r in per_rep])) for k in ks},
            "ndcg": {str(k): float(np.mean([r.ndcg[k] for r in per_rep])) for k in ks},
        },
    }


def method_name(cfg: ExperimentConfig) -> str:
    if cfg.joint:
        return f"btbr-joint-{cfg.train.mask.strategy}-{cfg.finetune.mask.strategy}"
    return f"btbr-{cfg.train.mask.strategy}"


# ---------------------------------------------------------------------------
# desk-scale comparison on synthetic data

@dataclass
class DeskSettings:
    """Small synthetic replica of the masking comparison.

    The learning rate and batch size differ from the full-data defaults
    (1e-3, 128): with 720 training users those take a few hundred epochs to
    converge, which does not fit a laptop budget.
    """

    profile: SyntheticProfile = field(default_factory=lambda: SyntheticProfile(
        n_users=1000, n_items=200, n_clusters=10, repeat_prob=0.6))
    corpus_seed: int = 0
    seeds: tuple = (0, 1, 2, 3, 4)
    embed_dim: int = 32
    layers: int = 2
    heads: int = 8
    max_len: int = 64
    dropout: float = 0.1
    mask_ratio: float = 0.5
    learning_rate: float = 3e-3
    # basket-level finetuning after joint pretraining; larger steps undo the pretrain gains
    finetune_learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 60
    patience: int = 8
    ks: tuple = (10, 20)


DESK_METHODS = ("item_random", "item_select", "basket_all", "basket_explore", "joint")


def desk_run(settings: DeskSettings, seed: int, methods=DESK_METHODS, corpus=None) -> dict:
    """Train every method and G-TopFreq on one split; returns per-method records."""
    if corpus is None:
        corpus = generate_synthetic(settings.profile, settings.corpus_seed)
    tr, va, te = split_users(corpus, SplitSpec(seed=seed))
    mc = ModelConfig(n_items=corpus.n_items, embed_dim=settings.embed_dim, layers=settings.layers,
                     heads=settings.heads, max_positions=settings.profile.max_baskets + 1,
                     max_len=settings.max_len, dropout=settings.dropout)

    def tc(strategy, lr=settings.learning_rate):
        ratio = settings.mask_ratio if strategy.startswith("item") else None
        return TrainConfig(mask=MaskConfig(strategy, ratio), learning_rate=lr,
                           batch_size=settings.batch_size, max_epochs=settings.max_epochs,
                           patience=settings.patience, seed=seed)

    out = {}
    runs = {}
    res = evaluate_rankings(make_ranker("g_topfreq", tr, max(settings.ks)), te, settings.ks)
    out["g_topfreq"] = {"result": res.to_dict(), "best_epoch": None, "epochs": 0, "seconds": 0.0}
    for method in methods:
        t0 = time.perf_counter()
        if method == "joint":
            # phase one is exactly the item_select run; reuse it when available
            model, hist = joint_train(tr, va, mc, tc("item_select"),
                                      tc("basket_all", settings.finetune_learning_rate),
                                      pretrained=runs.get("item_select"))
        else:
            model, hist = train(tr, va, mc, tc(method))
            runs[method] = (model, hist)
        res = evaluate_model(model, te, settings.ks)
        out[method] = {
            "result": res.to_dict(),
            "best_epoch": hist.best["epoch"],
            "epochs": len(hist.records),
            "labels_per_epoch": hist.records[0]["n_labels"],
            "seconds": time.perf_counter() - t0,
            "curve": hist.curve(),
        }
        log.info("seed %d %s: R@10 %.4f best epoch %d (%.0fs)", seed, method,
                 res.recall[10], hist.best["epoch"], out[method]["seconds"])
    return out


def desk_experiment(settings: DeskSettings | None = None, methods=DESK_METHODS,
                    cache: Path | None = None) -> dict:
    """All seeds; ``cache`` (a JSON file) lets reruns skip finished seeds."""
    settings = settings or DeskSettings()
    done = {}
    if cache is not None and Path(cache).exists():
        blob = json.loads(Path(cache).read_text())
        if blob.get("settings") == _jsonable(settings):
            done = blob["runs"]
    corpus = generate_synthetic(settings.profile, settings.corpus_seed)
    for seed in settings.seeds:
        key = str(seed)
        if key in done and all(m in done[key] for m in methods):
            continue
        done[key] = desk_run(settings, seed, methods, corpus)
        if cache is not None:
            Path(cache).parent.mkdir(parents=True, exist_ok=True)
            atomic_write_json(cache, {"settings": _jsonable(settings), "runs": done})
    return {"settings": _jsonable(settings), "runs": done}


def _jsonable(settings: DeskSettings) -> dict:
    return json.loads(json.dumps(asdict(settings)))
