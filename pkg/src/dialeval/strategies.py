"""The six sequential update strategies behind one interface.

Every update consumes the full history list D_{1..t} but is only allowed to
read the training splits its definition permits; reads go through the
AccessLedger, which records them and hard-fails on a contract violation:

* stationary    trains once on D_1, then never changes
* individual    fresh parameters, trained on D_t only
* retraining    fresh parameters, trained on pooled D_{1..t}
* fine_tuning   warm start from the previous evaluator, trained on D_t
* ewc           fine_tuning plus a Fisher-weighted anchor penalty
* vcl           recursive Gaussian posterior update

All strategies keep the checkpoint with the best validation metric
(validation Spearman by default).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import STRATEGY_NAMES, EwcConfig, ModelConfig, TrainConfig, VclConfig
from .corpus import Quad, SystemCorpus, Vocabulary
from .encoder import init_encoder_params
from .ewc import FisherState, compute_fisher, ewc_loss_graph
from .metrics import spearman_or_none
from .model import Batch, forward_scores, loss_graph, make_batch
from .scorer import init_scorer
from .training import TrainResult, TrainSettings, train_loop
from .vcl import GaussianPosterior, make_prior, vcl_predict, vcl_update


class DataAccessViolation(AssertionError):
    """A strategy touched a training split its definition forbids."""


class HistoryError(ValueError):
    pass


@dataclass
class AccessLedger:
    """Counts every training-split read and the storage each strategy needs.

    All counters are monotonically nondecreasing over a run; reads are
    deduplicated within one update call.
    """

    train_reads: list[tuple[int, str]] = field(default_factory=list)
    example_passes: int = 0
    evaluators_stored: int = 0
    datasets_stored: int = 0
    _step: int = field(default=0, repr=False)
    _allowed: set | None = field(default=None, repr=False)
    _seen: set = field(default_factory=set, repr=False)

    def begin_update(self, step: int, allowed: set) -> None:
        self._step = step
        self._allowed = allowed
        self._seen = set()

    def read_train(self, corpus: SystemCorpus) -> list[Quad]:
        if self._allowed is None or corpus.system_id not in self._allowed:
            raise DataAccessViolation(
                f"strategy may not read training data of {corpus.system_id!r} at step {self._step}"
            )
        if corpus.system_id not in self._seen:
            self._seen.add(corpus.system_id)
            self.train_reads.append((self._step, corpus.system_id))
        return corpus.train

    def note_storage(self, evaluators: int, datasets: int) -> None:
        self.evaluators_stored = max(self.evaluators_stored, evaluators)
        self.datasets_stored = max(self.datasets_stored, datasets)

    @property
    def train_sets_touched(self) -> int:
        return len(self.train_reads)

    def snapshot(self) -> dict:
        return {
            "train_sets_touched": self.train_sets_touched,
            "train_reads": [[s, i] for s, i in self.train_reads],
            "example_passes": self.example_passes,
            "evaluators_stored": self.evaluators_stored,
            "datasets_stored": self.datasets_stored,
        }

    @classmethod
    def from_snapshot(cls, snap: dict) -> "AccessLedger":
        ledger = cls()
        ledger.train_reads = [(int(s), str(i)) for s, i in snap["train_reads"]]
        ledger.example_passes = int(snap["example_passes"])
        ledger.evaluators_stored = int(snap["evaluators_stored"])
        ledger.datasets_stored = int(snap["datasets_stored"])
        return ledger


@dataclass
class EvaluatorState:
    """Everything the evaluator carries between steps."""

    strategy: str
    step: int
    params: dict[str, np.ndarray]
    attachment: object | None = None  # list[FisherState] | GaussianPosterior | None
    predict_seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGY_NAMES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.strategy == "vcl":
            if self.attachment is not None and not isinstance(self.attachment, GaussianPosterior):
                raise TypeError("vcl state requires a GaussianPosterior attachment")
        elif self.strategy == "ewc":
            if self.attachment is not None and not isinstance(self.attachment, list):
                raise TypeError("ewc state requires a list of FisherState anchors")
        elif self.attachment is not None:
            raise TypeError(f"{self.strategy} state carries no attachment")


ENCODER_PARAM_NAMES = ("emb", "w_x", "w_h", "b")


@dataclass
class UpdateContext:
    """Shared, read-only setup for a whole sequence run."""

    vocab: Vocabulary
    model: ModelConfig
    train: TrainConfig
    ewc: EwcConfig
    vcl: VclConfig
    encoder_init: dict[str, np.ndarray]
    freeze_encoder: bool = False
    ledger: AccessLedger = field(default_factory=AccessLedger)

    def settings(self, prefixes: tuple[str, ...] = ("",)) -> TrainSettings:
        frozen = frozenset(
            f"{p}{name}" for p in prefixes for name in ENCODER_PARAM_NAMES
        ) if self.freeze_encoder else frozenset()
        return TrainSettings(
            lr=self.train.lr,
            batch_size=self.train.batch_size,
            epochs=self.train.epochs,
            patience=self.train.patience,
            clip_norm=self.train.clip_norm,
            frozen=frozen,
        )

    def batch(self, quads: list[Quad]) -> Batch:
        return make_batch(quads, self.vocab, self.model.max_len)


def _spawn_rngs(seed_seq: np.random.SeedSequence):
    init_ss, shuffle_ss, noise_ss, predict_ss = seed_seq.spawn(4)
    predict_seed = int(predict_ss.generate_state(1)[0])
    return (
        np.random.default_rng(init_ss),
        np.random.default_rng(shuffle_ss),
        np.random.default_rng(noise_ss),
        predict_seed,
    )


def fresh_params(ctx: UpdateContext, init_rng: np.random.Generator) -> dict[str, np.ndarray]:
    """A fresh evaluator: the shared encoder snapshot plus a new scoring head."""
    params = {k: v.copy() for k, v in ctx.encoder_init.items()}
    params.update(init_scorer(init_rng, ctx.model.hidden_dim))
    return params


def _valid_fn(ctx: UpdateContext, valid_quads: list[Quad]):
    if not valid_quads:
        return None
    vbatch = ctx.batch(valid_quads)
    if ctx.train.select_metric == "mse":
        return lambda params: -float(np.mean((forward_scores(params, vbatch) - vbatch.labels) ** 2))
    return lambda params: spearman_or_none(forward_scores(params, vbatch), vbatch.grades)


def _fit(
    ctx: UpdateContext,
    params: dict[str, np.ndarray],
    train_quads: list[Quad],
    valid_quads: list[Quad],
    shuffle_rng: np.random.Generator,
    anchors: list[FisherState] | None = None,
) -> TrainResult:
    tbatch = ctx.batch(train_quads)

    def loss_builder(g, nodes, idx, step):
        piece = tbatch.take(idx)
        if anchors:
            return ewc_loss_graph(g, nodes, piece, anchors)
        return loss_graph(g, nodes, piece)

    result = train_loop(params, len(tbatch), loss_builder, _valid_fn(ctx, valid_quads), ctx.settings(), shuffle_rng)
    ctx.ledger.example_passes += result.examples_processed
    return result


def _ewc_lambda(ctx: UpdateContext, step: int) -> float:
    sched = ctx.ewc.lambdas
    if not sched:
        return 0.0
    return float(sched[min(step - 2, len(sched) - 1)])


def update(
    strategy: str,
    state: EvaluatorState | None,
    history: list[SystemCorpus],
    ctx: UpdateContext,
    seed_seq: np.random.SeedSequence,
) -> EvaluatorState:
    """Advance one strategy from step t-1 to step t, where t = len(history)."""
    if strategy not in STRATEGY_NAMES:
        raise ValueError(f"unknown strategy {strategy!r}")
    t = len(history)
    if t == 0:
        raise HistoryError("history must contain at least the current system")
    if state is None:
        if t != 1:
            raise HistoryError(f"no previous state but history has {t} entries")
    elif state.step != t - 1:
        raise HistoryError(f"state is at step {state.step}, expected {t - 1}")

    current = history[-1]
    init_rng, shuffle_rng, noise_rng, predict_seed = _spawn_rngs(seed_seq)
    ledger = ctx.ledger

    if strategy == "stationary":
        if t > 1:
            ledger.begin_update(t, set())
            ledger.note_storage(evaluators=1, datasets=1)
            return EvaluatorState(strategy, t, state.params, None, state.predict_seed)
        ledger.begin_update(t, {current.system_id})
        params = fresh_params(ctx, init_rng)
        result = _fit(ctx, params, ledger.read_train(current), current.valid, shuffle_rng)
        ledger.note_storage(evaluators=1, datasets=1)
        return EvaluatorState(strategy, t, result.params, None, predict_seed)

    if strategy == "individual":
        ledger.begin_update(t, {current.system_id})
        params = fresh_params(ctx, init_rng)
        result = _fit(ctx, params, ledger.read_train(current), current.valid, shuffle_rng)
        ledger.note_storage(evaluators=t, datasets=1)
        return EvaluatorState(strategy, t, result.params, None, predict_seed)

    if strategy == "retraining":
        ledger.begin_update(t, {c.system_id for c in history})
        pooled_train: list[Quad] = []
        pooled_valid: list[Quad] = []
        for corpus in history:
            pooled_train.extend(ledger.read_train(corpus))
            pooled_valid.extend(corpus.valid)
        params = fresh_params(ctx, init_rng)
        result = _fit(ctx, params, pooled_train, pooled_valid, shuffle_rng)
        ledger.note_storage(evaluators=1, datasets=t)
        return EvaluatorState(strategy, t, result.params, None, predict_seed)

    if strategy == "fine_tuning":
        ledger.begin_update(t, {current.system_id})
        params = fresh_params(ctx, init_rng) if state is None else state.params
        result = _fit(ctx, params, ledger.read_train(current), current.valid, shuffle_rng)
        ledger.note_storage(evaluators=1, datasets=1)
        return EvaluatorState(strategy, t, result.params, None, predict_seed)

    if strategy == "ewc":
        ledger.begin_update(t, {current.system_id})
        params = fresh_params(ctx, init_rng) if state is None else state.params
        anchors = list(state.attachment) if state is not None and state.attachment else []
        if anchors:
            lam = _ewc_lambda(ctx, t)
            anchors = [FisherState(a.fisher, a.anchor, lam) for a in anchors]
        train_quads = ledger.read_train(current)
        result = _fit(ctx, params, train_quads, current.valid, shuffle_rng, anchors=anchors)
        fisher = compute_fisher(ctx.batch(train_quads), result.params)
        new_anchor = FisherState(fisher, {k: v.copy() for k, v in result.params.items()}, 1.0)
        kept = anchors + [new_anchor] if ctx.ewc.multi_anchor else [new_anchor]
        ledger.note_storage(evaluators=1, datasets=1)
        return EvaluatorState(strategy, t, result.params, kept, predict_seed)

    # vcl
    ledger.begin_update(t, {current.system_id})
    shapes_params = fresh_params(ctx, init_rng)
    if state is None:
        prev = make_prior({k: v.shape for k, v in shapes_params.items()}, prior_var=ctx.vcl.prior_var)
        init_mu = shapes_params
    else:
        prev = state.attachment
        init_mu = prev.mu
    train_quads = ledger.read_train(current)
    posterior, result = vcl_update(
        prev,
        init_mu,
        ctx.batch(train_quads),
        ctx.batch(current.valid) if current.valid else None,
        ctx.settings(prefixes=("mu.", "rho.")),
        ctx.vcl,
        shuffle_rng,
        noise_rng,
    )
    ctx.ledger.example_passes += result.examples_processed
    ledger.note_storage(evaluators=1, datasets=1)
    return EvaluatorState(strategy, t, {k: v.copy() for k, v in posterior.mu.items()}, posterior, predict_seed)


def predict_batch(state: EvaluatorState, batch: Batch, ctx: UpdateContext) -> np.ndarray:
    """Scores for a batch of quads; deterministic given the state."""
    if state.strategy == "vcl" and state.attachment is not None:
        rng = np.random.default_rng(state.predict_seed)
        return vcl_predict(state.attachment, batch, ctx.vcl.predict_samples, rng)
    return forward_scores(state.params, batch)


def predict(state: EvaluatorState, quad: Quad, ctx: UpdateContext) -> float:
    """Score one post/response/reference triple."""
    return float(predict_batch(state, ctx.batch([quad]), ctx)[0])
