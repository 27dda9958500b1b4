import numpy as np
import pytest

from dialeval.config import (
    DataConfig,
    EwcConfig,
    ModelConfig,
    PretrainConfig,
    RunConfig,
    TrainConfig,
    VclConfig,
)
from dialeval.corpus import WorldConfig, default_corpora
from dialeval.encoder import init_encoder_params
from dialeval.harness import build_vocab, load_corpora
from dialeval.scorer import init_scorer
from dialeval.strategies import AccessLedger, UpdateContext


def tiny_run_config(**overrides) -> RunConfig:
    base = dict(
        out_dir="unused",
        seed=5,
        order=["echo", "blend", "drift"],
        strategies=["stationary", "fine_tuning", "ewc", "vcl"],
        data=DataConfig(dir=None, seed=21, n_posts=120),
        model=ModelConfig(embed_dim=8, hidden_dim=8, max_len=20),
        pretrain=PretrainConfig(epochs=1),
        train=TrainConfig(epochs=2, patience=2),
        ewc=EwcConfig(lambdas=[1.0, 2.0]),
        vcl=VclConfig(prior_var=1.0, sigma_init=1e-3, train_samples=2, valid_samples=2, predict_samples=4),
    )
    base.update(overrides)
    return RunConfig(**base).validate()


@pytest.fixture(scope="session")
def tiny_corpora():
    cfg = tiny_run_config()
    return load_corpora(cfg)


@pytest.fixture(scope="session")
def tiny_vocab(tiny_corpora):
    return build_vocab(tiny_run_config(), tiny_corpora)


def make_ctx(vocab, hidden=8, embed=8, max_len=20, seed=0, **cfg_overrides):
    cfg = tiny_run_config(model=ModelConfig(embed_dim=embed, hidden_dim=hidden, max_len=max_len), **cfg_overrides)
    rng = np.random.default_rng(seed)
    enc = init_encoder_params(rng, len(vocab), embed, hidden)
    return UpdateContext(
        vocab=vocab,
        model=cfg.model,
        train=cfg.train,
        ewc=cfg.ewc,
        vcl=cfg.vcl,
        encoder_init=enc,
        ledger=AccessLedger(),
    )


def random_model_params(rng, vocab_size, embed, hidden):
    params = init_encoder_params(rng, vocab_size, embed, hidden)
    params.update(init_scorer(rng, hidden))
    return params
