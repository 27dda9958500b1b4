"""Generic minibatch training loop with best-validation checkpointing.

The loop owns shuffling, Adam, gradient clipping, early stopping, and
divergence detection; callers supply a per-batch loss-graph builder and a
validation metric (higher is better). Everything is driven by explicit
generators, so a given seed reproduces the run bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph
from .optim import Adam, clip_global_norm


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at optimization step {step}")
        self.step = step


@dataclass
class TrainSettings:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 30
    patience: int = 5
    clip_norm: float = 5.0
    frozen: frozenset[str] = frozenset()  # parameter names excluded from updates


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    best_metric: float | None
    epochs_run: int
    examples_processed: int
    loss_history: list[float] = field(default_factory=list)


def train_loop(
    params: dict[str, np.ndarray],
    n_examples: int,
    loss_builder,
    valid_fn,
    settings: TrainSettings,
    shuffle_rng: np.random.Generator,
) -> TrainResult:
    """Run up to settings.epochs epochs and return the end-of-epoch
    checkpoint with the best validation metric.

    loss_builder(graph, param_nodes, example_indices, step) must return a
    scalar node; valid_fn(params) returns the selection metric or None when
    it is undefined. Zero epochs returns the parameters unchanged.
    """
    params = {k: v.copy() for k, v in params.items()}
    if settings.epochs == 0:
        return TrainResult(params, None, 0, 0)
    if n_examples == 0:
        raise ValueError("cannot train on an empty dataset")

    opt = Adam(lr=settings.lr)
    best_metric = None
    best = None
    wait = 0
    history: list[float] = []
    step = 0
    examples = 0
    epochs_run = 0
    for _ in range(settings.epochs):
        order = shuffle_rng.permutation(n_examples)
        epoch_loss = 0.0
        for start in range(0, n_examples, settings.batch_size):
            idx = order[start : start + settings.batch_size]
            g = Graph()
            nodes = {k: g.param(k, v) for k, v in params.items()}
            loss = loss_builder(g, nodes, idx, step)
            value = float(loss.value)
            if not math.isfinite(value):
                raise TrainingDivergedError(step)
            grads = g.backward(loss)
            for name in settings.frozen:
                grads.pop(name, None)
            clip_global_norm(grads, settings.clip_norm)
            opt.step(params, grads)
            epoch_loss += value * len(idx)
            examples += len(idx)
            step += 1
        history.append(epoch_loss / n_examples)
        epochs_run += 1
        if valid_fn is None:
            continue
        metric = valid_fn(params)
        if metric is not None and (best_metric is None or metric > best_metric):
            best_metric = metric
            best = {k: v.copy() for k, v in params.items()}
            wait = 0
        else:
            wait += 1
            if wait >= settings.patience:
                break
    return TrainResult(best if best is not None else params, best_metric, epochs_run, examples, history)
