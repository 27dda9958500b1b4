"""Experiment runner: sequential evaluation, complexity accounting, reports.

A run walks each strategy through the system sequence: update on step t,
score the test sets of every system seen so far, persist the prediction
records, and accumulate plasticity/stability plus the data-access ledger.
Every step is committed to disk atomically, so a killed run resumes from the
last completed step and reproduces the uninterrupted report byte for byte
(all randomness is derived from the run seed and the step index, never from
execution history). Wall-clock timings go to a separate timing.json because
reports themselves must be deterministic.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint, figures
from .config import ConfigError, RunConfig
from .corpus import SystemCorpus, Vocabulary, WorldConfig, default_corpora, load_jsonl
from .encoder import init_encoder_params, pretrain_encoder
from .metrics import (
    MissingRecordError,
    PredictionRecord,
    SequenceReport,
    StrategyReport,
    spearman_or_none,
    stability,
)
from .model import make_batch
from .strategies import (
    AccessLedger,
    UpdateContext,
    fresh_params,
    predict_batch,
    update,
    _fit,
)


class RunError(RuntimeError):
    pass


class AblationError(ValueError):
    pass


class RunInterrupted(RuntimeError):
    """Raised by the stop_after hook to simulate a killed run."""


# --- data loading --------------------------------------------------------------


def load_corpora(config: RunConfig) -> dict[str, SystemCorpus]:
    """Corpora from config.data.dir, or freshly generated defaults."""
    if config.data.dir is None:
        corpora = default_corpora(
            seed=config.data.seed,
            world_config=WorldConfig(n_posts=config.data.n_posts, seed=config.data.seed),
        )
    else:
        root = Path(config.data.dir)
        corpora = {}
        for name in config.order:
            splits = {}
            for split in ("train", "valid", "test"):
                path = root / f"{name}.{split}.jsonl"
                if not path.exists():
                    raise ConfigError(f"missing corpus file: {path}")
                splits[split] = load_jsonl(path)
            corpora[name] = SystemCorpus(name, splits["train"], splits["valid"], splits["test"])
    missing = [name for name in config.order if name not in corpora]
    if missing:
        raise ConfigError(f"order names systems with no corpus: {missing}")
    return corpora


def subsample_training(
    corpora: dict[str, SystemCorpus], fraction: float, seed: int
) -> dict[str, SystemCorpus]:
    """Keep a seeded fraction of each system's labeled annotation.

    Training and validation shrink together (they come from the same
    labeling budget); test sets stay full so measurements remain comparable.
    """
    if fraction >= 1.0:
        return corpora
    out = {}
    for idx, name in enumerate(sorted(corpora)):
        c = corpora[name]
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF0A, idx, int(fraction * 10_000)]))
        kept = {}
        for split_name, quads in (("train", c.train), ("valid", c.valid)):
            keep = max(2, int(round(len(quads) * fraction)))
            sel = sorted(rng.choice(len(quads), size=keep, replace=False))
            kept[split_name] = [quads[i] for i in sel]
        out[name] = SystemCorpus(name, kept["train"], kept["valid"], c.test)
    return out


# --- shared setup ----------------------------------------------------------------


def build_vocab(config: RunConfig, corpora: dict[str, SystemCorpus]) -> Vocabulary:
    train_quads = [q for name in config.order for q in corpora[name].train]
    return Vocabulary.build(
        train_quads, min_count=config.model.vocab_min_count, max_size=config.model.vocab_max_size
    )


def pretraining_pairs(config: RunConfig, corpora: dict[str, SystemCorpus], vocab: Vocabulary):
    """(post, reference) sequence pairs from training posts, deduplicated.

    References are human-written and shared across systems, so this teaches
    the encoder the post/reply structure without touching any system's
    machine responses or labels.
    """
    by_post = {}
    for name in config.order:
        for q in corpora[name].train:
            by_post.setdefault(q.post_id, (q.post, q.reference))
    from .corpus import preprocess

    return [
        (preprocess(post, vocab, config.model.max_len), preprocess(ref, vocab, config.model.max_len))
        for _, (post, ref) in sorted(by_post.items())
    ]


def prepare_encoder(config: RunConfig, corpora, vocab: Vocabulary, out_dir: Path) -> dict[str, np.ndarray]:
    """Pretrain (or reload) the shared encoder snapshot all fresh inits use."""
    path = out_dir / "encoder_init.json"
    if path.exists():
        return checkpoint.load_params(str(path))
    init_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    params = init_encoder_params(
        init_rng, len(vocab), config.model.embed_dim, config.model.hidden_dim, config.model.init_scale
    )
    if config.pretrain.epochs > 0:
        pairs = pretraining_pairs(config, corpora, vocab)
        pre_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
        params = pretrain_encoder(
            pairs,
            params,
            config.pretrain.epochs,
            pre_rng,
            batch_size=config.pretrain.batch_size,
            lr=config.pretrain.lr,
        )
    checkpoint.save_params(str(path), params)
    return params


def make_context(config: RunConfig, vocab: Vocabulary, encoder_init, ledger: AccessLedger) -> UpdateContext:
    return UpdateContext(
        vocab=vocab,
        model=config.model,
        train=config.train,
        ewc=config.ewc,
        vcl=config.vcl,
        encoder_init=encoder_init,
        freeze_encoder=config.pretrain.freeze,
        ledger=ledger,
    )


# --- sequential run ------------------------------------------------------------


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _guard_config(config: RunConfig, out_dir: Path) -> None:
    path = out_dir / "config.json"
    canonical = config.to_json()
    if path.exists():
        if path.read_text(encoding="utf-8") != canonical:
            raise RunError(f"{out_dir} holds state for a different config; refusing to resume")
    else:
        _atomic_write(path, canonical)


def _step_records_path(sdir: Path, t: int) -> Path:
    return sdir / f"records_step_{t:02d}.jsonl"


def _load_strategy_progress(sdir: Path, T: int):
    records: dict[tuple[int, int], PredictionRecord] = {}
    completed = []
    for t in range(1, T + 1):
        path = _step_records_path(sdir, t)
        if not path.exists():
            break
        for line in path.read_text(encoding="utf-8").splitlines():
            rec = PredictionRecord.from_json(line)
            records[(rec.step, rec.system_index)] = rec
        completed.append(t)
    state = None
    ledger = AccessLedger()
    state_path = sdir / "state.json"
    if state_path.exists():
        doc = json.loads(state_path.read_text(encoding="utf-8"))
        state = checkpoint.load_state(str(sdir / "evaluator.json"))
        ledger = AccessLedger.from_snapshot(doc["ledger"])
    return records, completed, state, ledger


def _persist_state(sdir: Path, state, ledger: AccessLedger) -> None:
    checkpoint.save_state(str(sdir / "evaluator.json"), state)
    _atomic_write(sdir / "state.json", json.dumps({"step": state.step, "ledger": ledger.snapshot()}))


def _strategy_metrics(strategy: str, records, T: int) -> StrategyReport:
    report = StrategyReport(strategy)
    for t in range(1, T + 1):
        if (t, t) in records:
            report.pla[t] = spearman_or_none(records[(t, t)].scores, records[(t, t)].labels)
        for i in range(1, t + 1):
            if (t, i) in records:
                rec = records[(t, i)]
                report.accuracy[(t, i)] = spearman_or_none(rec.scores, rec.labels)
                report.mean_scores[(t, i)] = float(np.mean(rec.scores))
                if i < t and (i, i) in records:
                    report.consistency[(t, i)] = spearman_or_none(records[(i, i)].scores, rec.scores)
        if t >= 2:
            try:
                report.sta[t] = stability(records, t)
            except MissingRecordError:
                pass
    return report


def run_sequence(
    config: RunConfig,
    corpora: dict[str, SystemCorpus] | None = None,
    stop_after: tuple[str, int] | None = None,
) -> SequenceReport:
    """Run every configured strategy over the system sequence and report.

    stop_after=(strategy, t) aborts right after that step is persisted,
    simulating a crash; rerunning the same config resumes and completes.
    """
    config = config.validate()
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _guard_config(config, out_dir)
    if corpora is None:
        corpora = load_corpora(config)
    # Vocabulary and encoder pretraining see the full corpora: they model the
    # unlabeled side (posts and human references), which a reduced labeling
    # budget does not shrink.
    vocab = build_vocab(config, corpora)
    encoder_init = prepare_encoder(config, corpora, vocab, out_dir)
    if config.training_fraction < 1.0:
        # Keyed on the data seed: the reduced corpus is a fixed dataset, not
        # a per-run redraw, so repeated runs measure training variance only.
        corpora = subsample_training(corpora, config.training_fraction, config.data.seed)
    systems = [corpora[name] for name in config.order]
    T = len(systems)
    test_batches = {i: make_batch(systems[i - 1].test, vocab, config.model.max_len) for i in range(1, T + 1)}

    strategy_reports: list[StrategyReport] = []
    timings: dict[str, float] = {}
    for strategy in config.strategies:
        sdir = out_dir / strategy
        sdir.mkdir(exist_ok=True)
        started = time.perf_counter()
        ledger = AccessLedger()
        try:
            records, completed, state, ledger = _load_strategy_progress(sdir, T)
            ctx = make_context(config, vocab, encoder_init, ledger)
            for t in range(1, T + 1):
                if t in completed:
                    continue
                if state is None or state.step < t:
                    state = update(strategy, state, systems[:t], ctx, np.random.SeedSequence([config.seed, 1000 + t]))
                    _persist_state(sdir, state, ledger)
                    if strategy == "individual":
                        checkpoint.save_state(str(sdir / f"evaluator_step_{t:02d}.json"), state)
                lines = []
                for i in range(1, t + 1):
                    scores = predict_batch(state, test_batches[i], ctx)
                    rec = PredictionRecord(
                        strategy,
                        t,
                        systems[i - 1].system_id,
                        i,
                        [float(s) for s in scores],
                        [int(v) for v in test_batches[i].grades],
                    )
                    records[(t, i)] = rec
                    lines.append(rec.to_json())
                _atomic_write(_step_records_path(sdir, t), "\n".join(lines) + "\n")
                if stop_after == (strategy, t):
                    raise RunInterrupted(f"stopped after {strategy} step {t}")
            report = _strategy_metrics(strategy, records, T)
            report.ledger = ledger.snapshot()
        except RunInterrupted:
            raise
        except Exception as exc:  # noqa: BLE001 - one strategy failing must not sink the others
            report = _strategy_metrics(strategy, locals().get("records", {}), T)
            report.ledger = ledger.snapshot()
            report.error = f"{type(exc).__name__}: {exc}"
        timings[strategy] = time.perf_counter() - started
        strategy_reports.append(report)

    seq = SequenceReport(list(config.order), strategy_reports)
    write_report_files(seq, out_dir)
    _atomic_write(out_dir / "timing.json", json.dumps(timings, indent=2, sort_keys=True))
    return seq


def rebuild_report(out_dir) -> SequenceReport:
    """Regenerate report files from persisted records (no models loaded)."""
    out_dir = Path(out_dir)
    cfg_path = out_dir / "config.json"
    if not cfg_path.exists():
        raise RunError(f"{out_dir} has no config.json; nothing to report")
    from .config import run_config_from_dict

    config = run_config_from_dict(json.loads(cfg_path.read_text(encoding="utf-8")))
    T = len(config.order)
    reports = []
    for strategy in config.strategies:
        sdir = out_dir / strategy
        records, completed, _, _ = ({}, [], None, None)
        if sdir.exists():
            records, completed, *_ = _load_strategy_progress(sdir, T)
        report = _strategy_metrics(strategy, records, T)
        state_path = sdir / "state.json"
        if state_path.exists():
            report.ledger = json.loads(state_path.read_text(encoding="utf-8"))["ledger"]
        if len(completed) < T:
            report.error = f"incomplete: {len(completed)}/{T} steps"
        reports.append(report)
    seq = SequenceReport(list(config.order), reports)
    write_report_files(seq, out_dir)
    return seq


# --- report files ----------------------------------------------------------------


def _fmt(v: float | None) -> str:
    return "" if v is None else f"{v:.6f}"


def write_report_files(seq: SequenceReport, out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    T = len(seq.order)
    pla_cols = [f"pla_t{t}" for t in range(1, T + 1)]
    sta_cols = [f"sta_t{t}" for t in range(2, T + 1)]
    ledger_cols = ["train_sets_touched", "example_passes", "evaluators_stored", "datasets_stored"]

    csv_lines = [",".join(["strategy", *pla_cols, *sta_cols, *ledger_cols, "error"])]
    for rep in seq.strategies:
        row = [rep.strategy]
        row += [_fmt(rep.pla.get(t)) for t in range(1, T + 1)]
        row += [_fmt(rep.sta.get(t)) for t in range(2, T + 1)]
        row += [str(rep.ledger.get(c, "")) for c in ledger_cols]
        row.append(rep.error or "")
        csv_lines.append(",".join(row))
    csv_path = out_dir / "report.csv"
    _atomic_write(csv_path, "\n".join(csv_lines) + "\n")

    corr_lines = ["strategy,kind,t,i,spearman,mean_score,mean_grade"]
    for rep in seq.strategies:
        for (t, i) in sorted(rep.accuracy):
            mean_s = rep.mean_scores.get((t, i))
            corr_lines.append(
                f"{rep.strategy},accuracy,{t},{i},{_fmt(rep.accuracy[(t, i)])},"
                f"{_fmt(mean_s)},{_fmt(None if mean_s is None else 2.0 * mean_s)}"
            )
        for (t, i) in sorted(rep.consistency):
            corr_lines.append(f"{rep.strategy},consistency,{t},{i},{_fmt(rep.consistency[(t, i)])},,")
    corr_path = out_dir / "correlations.csv"
    _atomic_write(corr_path, "\n".join(corr_lines) + "\n")

    md = ["# Sequence evaluation report", "", f"Order: {' -> '.join(seq.order)}", ""]
    header = ["strategy"] + [f"Pla t={t}" for t in range(1, T + 1)] + [f"Sta t={t}" for t in range(2, T + 1)]
    md.append("| " + " | ".join(header) + " |")
    md.append("|" + "---|" * len(header))
    for rep in seq.strategies:
        cells = [rep.strategy]
        cells += [_fmt(rep.pla.get(t)) or "-" for t in range(1, T + 1)]
        cells += [_fmt(rep.sta.get(t)) or "-" for t in range(2, T + 1)]
        md.append("| " + " | ".join(cells) + " |")
    md += ["", "## Resource ledger", ""]
    md.append("| strategy | training-set reads | example passes | evaluators stored | datasets stored |")
    md.append("|---|---|---|---|---|")
    for rep in seq.strategies:
        md.append(
            "| {} | {} | {} | {} | {} |".format(
                rep.strategy,
                rep.ledger.get("train_sets_touched", ""),
                rep.ledger.get("example_passes", ""),
                rep.ledger.get("evaluators_stored", ""),
                rep.ledger.get("datasets_stored", ""),
            )
        )
    failed = [rep.strategy for rep in seq.strategies if rep.error]
    if failed:
        md += ["", "**Partial report.** Failed strategies:"]
        md += [f"- {rep.strategy}: {rep.error}" for rep in seq.strategies if rep.error]
    md += [
        "",
        "Scores are internal (0,1) model outputs; multiply by 2 for the 0-2 grade scale",
        "(see correlations.csv for per-system mean scores on both scales).",
        "",
    ]
    md_path = out_dir / "report.md"
    _atomic_write(md_path, "\n".join(md))

    fig_path = out_dir / "pla_sta.png"
    figures.render_sequence(seq, fig_path)
    return {"csv": csv_path, "md": md_path, "correlations": corr_path, "figure": fig_path}


# --- scope-gap experiment ---------------------------------------------------------


@dataclass
class GapReport:
    ks: list[int]
    in_scope: dict[int, float | None] = field(default_factory=dict)
    out_scope: dict[int, float | None] = field(default_factory=dict)

    def gap(self, k: int) -> float | None:
        a, b = self.in_scope.get(k), self.out_scope.get(k)
        return None if a is None or b is None else a - b


def gap_experiment(
    config: RunConfig,
    ks: list[int] | None = None,
    corpora: dict[str, SystemCorpus] | None = None,
) -> GapReport:
    """Train a once-off evaluator on the first k systems pooled and compare
    its test correlation inside vs outside that training scope."""
    config = config.validate()
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if corpora is None:
        corpora = load_corpora(config)
    systems = [corpora[name] for name in config.order]
    T = len(systems)
    ks = list(ks) if ks is not None else list(range(1, T))
    for k in ks:
        if not 1 <= k < T:
            raise ConfigError(f"k={k} leaves no out-of-scope systems (need 1 <= k < {T})")
    vocab = build_vocab(config, corpora)
    encoder_init = prepare_encoder(config, corpora, vocab, out_dir)
    test_batches = [make_batch(s.test, vocab, config.model.max_len) for s in systems]

    report = GapReport(ks)
    for k in ks:
        ledger = AccessLedger()
        ctx = make_context(config, vocab, encoder_init, ledger)
        ledger.begin_update(1, {s.system_id for s in systems[:k]})
        pooled_train = [q for s in systems[:k] for q in ledger.read_train(s)]
        pooled_valid = [q for s in systems[:k] for q in s.valid]
        init_rng, shuffle_rng, _, _ = np.random.SeedSequence([config.seed, 2000 + k]).spawn(4)
        params = fresh_params(ctx, np.random.default_rng(init_rng))
        result = _fit(ctx, params, pooled_train, pooled_valid, np.random.default_rng(shuffle_rng))
        rhos = [
            spearman_or_none(
                np.asarray(_scores(result.params, test_batches[i - 1])), test_batches[i - 1].grades
            )
            for i in range(1, T + 1)
        ]
        report.in_scope[k] = _mean_or_none(rhos[:k])
        report.out_scope[k] = _mean_or_none(rhos[k:])

    lines = ["k,in_scope,out_of_scope,gap"]
    for k in ks:
        lines.append(f"{k},{_fmt(report.in_scope.get(k))},{_fmt(report.out_scope.get(k))},{_fmt(report.gap(k))}")
    _atomic_write(out_dir / "gap.csv", "\n".join(lines) + "\n")
    figures.render_gap(report, out_dir / "gap.png")
    return report


def _scores(params, batch):
    from .model import forward_scores

    return forward_scores(params, batch)


def _mean_or_none(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


# --- training-size ablation --------------------------------------------------------


@dataclass
class AblationReport:
    fractions: list[float]
    # (strategy, fraction, t) -> plasticity
    pla: dict[tuple[str, float, int], float | None] = field(default_factory=dict)

    def normalized(self, strategy: str, fraction: float, t: int) -> float | None:
        base = self.pla.get((strategy, 1.0, t))
        val = self.pla.get((strategy, fraction, t))
        if base is None or val is None or base == 0:
            return None
        return val / base


def ablate_training_size(
    config: RunConfig,
    fractions: list[float],
    corpora: dict[str, SystemCorpus] | None = None,
    scale_epochs: bool = True,
) -> AblationReport:
    """Rerun the sequence with subsampled training sets and report plasticity
    normalized to the full-data run.

    With scale_epochs (default), reduced-data runs get proportionally more
    epochs (capped at 4x) so every run trains for a comparable number of
    optimizer steps rather than being cut off by the full-data epoch budget.
    """
    config = config.validate()
    if any(not 0.0 < f <= 1.0 for f in fractions):
        raise AblationError(f"fractions must lie in (0, 1]: {fractions}")
    if list(fractions) != sorted(fractions, reverse=True):
        raise AblationError("fractions must be descending")
    if 1.0 not in fractions:
        fractions = [1.0, *fractions]
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if corpora is None:
        corpora = load_corpora(config)
    min_train = min(len(corpora[name].train) for name in config.order)
    for f in fractions:
        if int(round(min_train * f)) < config.train.batch_size:
            raise AblationError(
                f"fraction {f} yields fewer examples than one batch of {config.train.batch_size}"
            )

    report = AblationReport(list(fractions))
    for f in fractions:
        train = config.train
        if scale_epochs and f < 1.0:
            boost = min(10, max(1, int(round(1.0 / f))))
            train = replace(train, epochs=config.train.epochs * boost, patience=config.train.patience * boost)
        sub_cfg = replace(
            config, out_dir=str(out_dir / f"fraction_{f:0.2f}"), training_fraction=f, train=train
        )
        seq = run_sequence(sub_cfg, corpora=corpora)
        for rep in seq.strategies:
            for t, val in rep.pla.items():
                report.pla[(rep.strategy, f, t)] = val

    T = len(config.order)
    lines = ["strategy,fraction,t,plasticity,normalized"]
    for strategy in config.strategies:
        for f in fractions:
            for t in range(1, T + 1):
                lines.append(
                    f"{strategy},{f},{t},{_fmt(report.pla.get((strategy, f, t)))},"
                    f"{_fmt(report.normalized(strategy, f, t))}"
                )
    _atomic_write(out_dir / "ablation.csv", "\n".join(lines) + "\n")
    figures.render_ablation(report, config.strategies, T, out_dir / "ablation.png")
    return report
