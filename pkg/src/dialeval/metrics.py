"""Rank-correlation metrics: Spearman, plasticity, and stability.

Plasticity at step t is the Spearman correlation between the current
evaluator's scores and the human grades on the newest system's test set.
Stability at step t averages, over every earlier system, the Spearman
correlation between that system's scores at the time it was current and its
scores now. Undefined correlations (a constant input) are reported as
missing, never coerced to zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class UndefinedCorrelationError(ValueError):
    """Correlation is undefined because one input is constant."""


class MissingRecordError(KeyError):
    pass


def average_ranks(values) -> np.ndarray:
    """Fractional ranks starting at 1; tied values share the mean of their
    rank positions."""
    arr = np.asarray(values, dtype=np.float64)
    order = np.argsort(arr, kind="stable")
    ranks = np.empty(arr.size, dtype=np.float64)
    i = 0
    while i < arr.size:
        j = i
        while j + 1 < arr.size and arr[order[j + 1]] == arr[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(xs, ys) -> float:
    """Pearson correlation of average-ranked variables."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"inputs must be equal-length 1-D, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise ValueError("need at least two observations")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedCorrelationError("constant input has no rank ordering")
    rx = average_ranks(x)
    ry = average_ranks(y)
    if np.array_equal(rx, ry):
        return 1.0  # identical rankings correlate exactly, no rounding
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    return float((dx @ dy) / np.sqrt((dx @ dx) * (dy @ dy)))


def spearman_or_none(xs, ys) -> float | None:
    try:
        return spearman(xs, ys)
    except UndefinedCorrelationError:
        return None


@dataclass
class PredictionRecord:
    """Scores of evaluator e_t on system d_i's test set, in test-set order."""

    strategy: str
    step: int  # t, the evaluator's position in the sequence
    system_id: str
    system_index: int  # i, the scored system's position
    scores: list[float]
    labels: list[int]

    def to_json(self) -> str:
        return json.dumps(
            {
                "strategy": self.strategy,
                "step": self.step,
                "system_id": self.system_id,
                "system_index": self.system_index,
                "scores": self.scores,
                "labels": self.labels,
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "PredictionRecord":
        row = json.loads(line)
        return cls(
            row["strategy"],
            int(row["step"]),
            row["system_id"],
            int(row["system_index"]),
            [float(s) for s in row["scores"]],
            [int(l) for l in row["labels"]],
        )


def plasticity(record: PredictionRecord) -> float | None:
    """Correlation with human grades on the system the evaluator just saw."""
    if record.step != record.system_index:
        raise ValueError(f"plasticity needs the diagonal record, got t={record.step}, i={record.system_index}")
    return spearman_or_none(record.scores, record.labels)


def stability(records: dict[tuple[int, int], PredictionRecord], t: int) -> float | None:
    """Mean consistency of step-t scores with each earlier evaluator's scores
    on its own system. Records are keyed by (step, system_index). Pairs whose
    correlation is undefined are skipped; returns None if none are defined."""
    if t < 2:
        raise ValueError("stability is defined for t >= 2")
    values = []
    for i in range(1, t):
        for key in ((i, i), (t, i)):
            if key not in records:
                raise MissingRecordError(f"missing prediction record (step={key[0]}, system={key[1]})")
        rho = spearman_or_none(records[(i, i)].scores, records[(t, i)].scores)
        if rho is not None:
            values.append(rho)
    if not values:
        return None
    return float(np.mean(values))


@dataclass
class StrategyReport:
    """Per-strategy slice of a sequence run."""

    strategy: str
    pla: dict[int, float | None] = field(default_factory=dict)
    sta: dict[int, float | None] = field(default_factory=dict)
    # (t, i) -> correlation of e_t's scores with grades on system i
    accuracy: dict[tuple[int, int], float | None] = field(default_factory=dict)
    # (t, i) -> correlation of e_t's scores with e_i's scores on system i
    consistency: dict[tuple[int, int], float | None] = field(default_factory=dict)
    mean_scores: dict[tuple[int, int], float] = field(default_factory=dict)
    ledger: dict = field(default_factory=dict)
    error: str | None = None


@dataclass
class SequenceReport:
    order: list[str]
    strategies: list[StrategyReport]

    @property
    def partial(self) -> bool:
        return any(s.error for s in self.strategies)
