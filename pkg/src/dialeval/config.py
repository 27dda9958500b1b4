"""Run configuration: dataclasses mirroring the JSON config schema.

See README for the documented schema. Library defaults follow the reference
training recipe (lr 0.001, batch 32, hidden 512 scaled down for desk runs is
up to the config file); everything is overridable per run.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

STRATEGY_NAMES = ("stationary", "individual", "retraining", "fine_tuning", "ewc", "vcl")

DEFAULT_ORDER = ["echo", "blend", "drift", "remix", "free"]


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    embed_dim: int = 256
    hidden_dim: int = 512
    max_len: int = 50
    init_scale: float = 0.08
    vocab_min_count: int = 1
    vocab_max_size: int | None = None


@dataclass
class PretrainConfig:
    epochs: int = 3
    batch_size: int = 32
    lr: float = 1e-3
    freeze: bool = False  # when True the encoder stays fixed during evaluator training


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 30
    patience: int = 5
    clip_norm: float = 5.0
    select_metric: str = "spearman"  # or "mse"


@dataclass
class EwcConfig:
    # lambdas[t-2] is applied at step t; the last entry repeats beyond it.
    lambdas: list[float] = field(default_factory=lambda: [1e4, 1e5, 1e6, 1e7])
    multi_anchor: bool = False


@dataclass
class VclConfig:
    prior_var: float = 1e-6
    sigma_init: float = 1e-3
    train_samples: int = 20
    predict_samples: int = 20
    valid_samples: int = 5
    kl_weight: float = 1.0
    kl_scale: str = "per_example"  # or "raw"
    head_only: bool = False  # scoring head variational, encoder point-estimated


@dataclass
class DataConfig:
    dir: str | None = None  # read <system>.{train,valid,test}.jsonl from here
    seed: int = 13  # generator seed when dir is None
    n_posts: int = 600


@dataclass
class RunConfig:
    out_dir: str = "runs/out"
    seed: int = 7
    order: list[str] = field(default_factory=lambda: list(DEFAULT_ORDER))
    strategies: list[str] = field(default_factory=lambda: list(STRATEGY_NAMES))
    training_fraction: float = 1.0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ewc: EwcConfig = field(default_factory=EwcConfig)
    vcl: VclConfig = field(default_factory=VclConfig)

    def validate(self) -> "RunConfig":
        if not self.order:
            raise ConfigError("order must name at least one system")
        if len(set(self.order)) != len(self.order):
            raise ConfigError("order contains duplicate system ids")
        unknown = [s for s in self.strategies if s not in STRATEGY_NAMES]
        if unknown:
            raise ConfigError(f"unknown strategies: {unknown}; known: {list(STRATEGY_NAMES)}")
        if not 0.0 < self.training_fraction <= 1.0:
            raise ConfigError("training_fraction must lie in (0, 1]")
        if self.train.select_metric not in ("spearman", "mse"):
            raise ConfigError("select_metric must be 'spearman' or 'mse'")
        if self.vcl.kl_scale not in ("per_example", "raw"):
            raise ConfigError("vcl.kl_scale must be 'per_example' or 'raw'")
        if self.vcl.prior_var <= 0 or self.vcl.sigma_init <= 0:
            raise ConfigError("vcl variances must be positive")
        if self.vcl.train_samples < 1 or self.vcl.predict_samples < 1:
            raise ConfigError("vcl sample counts must be >= 1")
        if min(self.model.embed_dim, self.model.hidden_dim, self.model.max_len) < 1:
            raise ConfigError("model dimensions must be positive")
        return self

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _merge(cls, raw: dict):
    fields = {f: raw[f] for f in raw}
    return cls(**fields)


def run_config_from_dict(raw: dict) -> RunConfig:
    raw = dict(raw)
    try:
        for key, cls in (
            ("data", DataConfig),
            ("model", ModelConfig),
            ("pretrain", PretrainConfig),
            ("train", TrainConfig),
            ("ewc", EwcConfig),
            ("vcl", VclConfig),
        ):
            if key in raw:
                raw[key] = _merge(cls, raw[key])
        cfg = RunConfig(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad config structure: {exc}") from None
    return cfg.validate()


def load_run_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return run_config_from_dict(raw)
