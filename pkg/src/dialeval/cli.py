"""Command-line entry points.

Subcommands: generate, pretrain, run, ablate, gap, report. Exit codes:
0 success, 1 configuration error, 2 runtime failure (including partial runs).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, RunConfig, load_run_config
from .corpus import (
    WorldConfig,
    default_system_specs,
    load_generator_config,
    save_jsonl,
    split_posts,
    synth_system,
    synth_world,
)
from .harness import (
    AblationError,
    RunError,
    ablate_training_size,
    build_vocab,
    gap_experiment,
    load_corpora,
    prepare_encoder,
    rebuild_report,
    run_sequence,
)


def _load_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    if getattr(args, "strategies", None):
        cfg = replace(cfg, strategies=[s.strip() for s in args.strategies.split(",") if s.strip()])
    if getattr(args, "order", None):
        cfg = replace(cfg, order=[s.strip() for s in args.order.split(",") if s.strip()])
    return cfg.validate()


def _cmd_generate(args) -> int:
    import numpy as np

    if args.config:
        world_cfg, specs = load_generator_config(args.config)
    else:
        world_cfg, specs = WorldConfig(), default_system_specs()
    if args.seed is not None:
        world_cfg = replace(world_cfg, seed=args.seed)
    if args.posts is not None:
        world_cfg = replace(world_cfg, n_posts=args.posts)
    world = synth_world(world_cfg)
    split_rng = np.random.default_rng(np.random.SeedSequence([world_cfg.seed, 0x5B]))
    post_split = split_posts([p.post_id for p in world.posts], (4 / 6, 1 / 6, 1 / 6), split_rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for spec in specs:
        sys_rng = np.random.default_rng(np.random.SeedSequence([world_cfg.seed, 0xD7, spec.seed]))
        corpus = synth_system(spec, world, sys_rng, post_split=post_split)
        for split, quads in corpus.splits().items():
            save_jsonl(out / f"{spec.name}.{split}.jsonl", quads)
        print(f"{spec.name}: {len(corpus.train)}/{len(corpus.valid)}/{len(corpus.test)} train/valid/test")
    return 0


def _cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpora = load_corpora(cfg)
    vocab = build_vocab(cfg, corpora)
    prepare_encoder(cfg, corpora, vocab, out)
    print(f"encoder snapshot written to {out / 'encoder_init.json'} (vocab size {len(vocab)})")
    return 0


def _cmd_run(args) -> int:
    cfg = _load_config(args)
    seq = run_sequence(cfg)
    for rep in seq.strategies:
        status = f"FAILED ({rep.error})" if rep.error else "ok"
        print(f"{rep.strategy}: {status}")
    print(f"report written under {cfg.out_dir}")
    return 2 if seq.partial else 0


def _cmd_ablate(args) -> int:
    cfg = _load_config(args)
    fractions = [float(f) for f in args.fractions.split(",") if f.strip()]
    ablate_training_size(cfg, fractions)
    print(f"ablation written under {cfg.out_dir}")
    return 0


def _cmd_gap(args) -> int:
    cfg = _load_config(args)
    ks = [int(k) for k in args.k.split(",")] if args.k else None
    report = gap_experiment(cfg, ks)
    for k in report.ks:
        print(
            f"k={k}: in={report.in_scope.get(k)}, out={report.out_scope.get(k)}, gap={report.gap(k)}"
        )
    return 0


def _cmd_report(args) -> int:
    seq = rebuild_report(args.out)
    print(f"report rebuilt under {args.out}" + (" (partial)" if seq.partial else ""))
    return 2 if seq.partial else 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="path to a JSON run config")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--out", help="override the output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dialeval", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write synthetic system corpora as JSONL")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="generator spec JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--posts", type=int, help="posts per system")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("pretrain", help="pretrain the shared encoder snapshot")
    _add_common(p)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("run", help="run the sequential evaluation")
    _add_common(p)
    p.add_argument("--strategies", help="comma-separated strategy subset")
    p.add_argument("--order", help="comma-separated system order")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("ablate", help="training-size ablation")
    _add_common(p)
    p.add_argument("--fractions", required=True, help="descending fractions, e.g. 1.0,0.5,0.1")
    p.add_argument("--strategies", help="comma-separated strategy subset")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("gap", help="in-scope vs out-of-scope correlation gap")
    _add_common(p)
    p.add_argument("--k", help="comma-separated scope sizes, default 1..T-1")
    p.set_defaults(func=_cmd_gap)

    p = sub.add_parser("report", help="rebuild report files from persisted records")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, AblationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (RunError, Exception) as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
