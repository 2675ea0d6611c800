"""Experiment configuration: one YAML file per experiment.

Precedence, lowest to highest: dataclass defaults, the config file, then
``--set dotted.key=value`` overrides from the command line. Relative data
paths resolve against ``$NNBR_DATA_ROOT`` when it is set.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from nnbr.augmentation import MaskConfig, SwapConfig
from nnbr.baselines import BASELINES, LABEL_MODES, TifuConfig
from nnbr.data import (
    DATASET_PREPROCESS, DATASET_SCHEMAS, PreprocessConfig, SplitSpec, SyntheticProfile,
    TransactionSchema,
)
from nnbr.model import ModelConfig
from nnbr.training import TrainConfig, TrainConfigError

DATA_ROOT_ENV = "NNBR_DATA_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSpec:
    synthetic: dict | None = None
    synthetic_seed: int = 0
    path: str | None = None
    schema: str | dict | None = None

    def __post_init__(self):
        if (self.synthetic is None) == (self.path is None):
            raise ConfigError("dataset needs exactly one of 'synthetic' or 'path'")
        if self.path is not None and self.schema is None:
            raise ConfigError("a dataset path needs a schema (name or column mapping)")

    def profile(self) -> SyntheticProfile:
        return SyntheticProfile(**self.synthetic)

    def resolved_path(self) -> Path:
        p = Path(self.path)
        root = os.environ.get(DATA_ROOT_ENV)
        if not p.is_absolute() and root:
            p = Path(root) / p
        return p

    def resolved_schema(self) -> TransactionSchema:
        if isinstance(self.schema, str):
            try:
                return DATASET_SCHEMAS[self.schema]
            except KeyError:
                raise ConfigError(f"unknown schema {self.schema!r}; known: {sorted(DATASET_SCHEMAS)}")
        return TransactionSchema(**self.schema)


@dataclass
class BaselineSpec:
    name: str = "g_topfreq"
    label_mode: str = "all"
    tifu: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in BASELINES:
            raise ConfigError(f"unknown baseline {self.name!r}; known: {BASELINES}")
        if self.label_mode not in LABEL_MODES:
            raise ConfigError(f"label_mode must be one of {LABEL_MODES}")
        TifuConfig(**self.tifu)

    def tifu_config(self) -> TifuConfig:
        return TifuConfig(**self.tifu)


@dataclass
class ExperimentConfig:
    name: str
    dataset: DatasetSpec
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: TrainConfig | None = None
    baseline: BaselineSpec = field(default_factory=BaselineSpec)
    ks: list = field(default_factory=lambda: [10, 20])
    repetitions: int = 5
    seed: int = 0
    output_dir: str = "runs"

    def __post_init__(self):
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if not self.ks or any(k < 1 for k in self.ks):
            raise ConfigError("ks must be a non-empty list of positive integers")
        bad = set(self.model) - {f.name for f in fields(ModelConfig)} | ({"n_items"} & set(self.model))
        if bad:
            raise ConfigError(f"unknown or derived model field(s): {sorted(bad)}")
        if self.finetune is not None:
            if not self.train.mask.item_level:
                raise ConfigError("joint training: 'train' must use an item-level strategy")
            if self.finetune.mask.item_level:
                raise ConfigError("joint training: 'finetune' must use a basket-level strategy")
        # fail on bad model fields before any compute
        self.model_config(1)

    @property
    def joint(self) -> bool:
        return self.finetune is not None

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.name

    def model_config(self, n_items: int) -> ModelConfig:
        kw = dict(self.model)
        kw.setdefault("max_positions", self.preprocess.max_baskets + 1)
        return ModelConfig(n_items=n_items, **kw)

    def split_for(self, rep: int) -> SplitSpec:
        return SplitSpec(self.split.train_fraction, self.split.test_fraction,
                         self.split.validation_fraction_of_train, self.seed + rep)

    def seeded(self, tc: TrainConfig, rep: int) -> TrainConfig:
        return TrainConfig(**{**tc.__dict__, "seed": self.seed + rep})

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def _train_config(d: dict) -> TrainConfig:
    d = dict(d)
    mask = d.pop("mask", {})
    swap = d.pop("swap", {})
    strategy = mask.get("strategy", "item_select")
    if strategy in ("basket_all", "basket_explore"):
        mask = {"mask_ratio": None, **mask}
    return TrainConfig(mask=MaskConfig(**mask), swap=SwapConfig(**swap), **d)


def from_dict(d: dict) -> ExperimentConfig:
    d = copy.deepcopy(d)
    try:
        dataset = DatasetSpec(**d.pop("dataset"))
        pre = d.pop("preprocess", None)
        if pre is None and isinstance(dataset.schema, str):
            pre = asdict(DATASET_PREPROCESS.get(dataset.schema, PreprocessConfig()))
        cfg = ExperimentConfig(
            dataset=dataset,
            preprocess=PreprocessConfig(**(pre or {})),
            split=SplitSpec(**d.pop("split", {})),
            train=_train_config(d.pop("train", {})),
            finetune=_train_config(d["finetune"]) if d.get("finetune") else None,
            baseline=BaselineSpec(**d.pop("baseline", {})),
            **{k: v for k, v in d.items() if k != "finetune"},
        )
    except (TypeError, ValueError, KeyError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"invalid config: {e}") from e
    return cfg


def apply_overrides(d: dict, overrides) -> dict:
    d = copy.deepcopy(d)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            if node.get(p) is None:
                node[p] = {}
            node = node[p]
        node[parts[-1]] = yaml.safe_load(raw)
    return d


def load_config(path, overrides=()) -> ExperimentConfig:
    with open(path) as f:
        d = yaml.safe_load(f) or {}
    d.setdefault("name", Path(path).stem)
    return from_dict(apply_overrides(d, overrides))


def dump_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=True)


__all__ = [
    "ConfigError", "DatasetSpec", "BaselineSpec", "ExperimentConfig", "TrainConfigError",
    "apply_overrides", "from_dict", "load_config", "dump_config",
]
