"""Bilinear scoring head and the per-system regression loss.

A response r is scored against the post c and the human reference g as
sigmoid(c'Mr + g'Nr + b). Grades {0,1,2} are normalized to {0, 0.5, 1} so the
regression target lives on the same scale as the sigmoid output; reports
rescale by 2 when a human-readable grade is wanted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Node, ShapeError, as_array
from .corpus import Quad

GRADE_SCALE = 2.0


@dataclass
class ScoredExample:
    quad: Quad
    score: float
    normalized_label: float


def normalize_label(grade: int) -> float:
    if grade not in (0, 1, 2):
        raise ValueError(f"grade {grade!r} not in {{0, 1, 2}}")
    return grade / GRADE_SCALE


def to_grade_scale(score: float) -> float:
    """Map an internal (0,1) score onto the 0-2 grade scale for reports."""
    return score * GRADE_SCALE


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.1, clip_stds: float = 2.0) -> np.ndarray:
    """Normal(0, std) with redraws outside +/- clip_stds standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > clip_stds * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > clip_stds * std
    return out


def init_scorer(rng: np.random.Generator, hidden_dim: int) -> dict[str, np.ndarray]:
    if hidden_dim < 1:
        raise ValueError("hidden_dim must be >= 1")
    return {
        "m": truncated_normal(rng, (hidden_dim, hidden_dim)),
        "n": truncated_normal(rng, (hidden_dim, hidden_dim)),
        "bias": truncated_normal(rng, ()),
    }


def score(c_vec, r_vec, g_vec, params: dict[str, np.ndarray]) -> float:
    """Plain (non-graph) evaluation of sigmoid(c'Mr + g'Nr + b)."""
    c = as_array(c_vec, "c")
    r = as_array(r_vec, "r")
    gv = as_array(g_vec, "g")
    m, n = params["m"], params["n"]
    if m.shape != (c.shape[0], r.shape[0]) or n.shape != (gv.shape[0], r.shape[0]):
        raise ShapeError(f"score: vectors {c.shape}/{r.shape}/{gv.shape} vs M {m.shape}, N {n.shape}")
    logit = float(c @ m @ r + gv @ n @ r + params["bias"])
    return float(1.0 / (1.0 + np.exp(-logit))) if logit >= 0 else float(np.exp(logit) / (1.0 + np.exp(logit)))


def score_graph(g: Graph, c: Node, r: Node, ref: Node, params: dict[str, Node]) -> Node:
    """Graph version of score() for single H-vectors."""
    logit = g.add(g.add(g.bilinear(c, params["m"], r), g.bilinear(ref, params["n"], r)), params["bias"])
    return g.sigmoid(logit)


def score_batch_graph(g: Graph, c: Node, r: Node, ref: Node, params: dict[str, Node]) -> Node:
    """Batched scores: rows of c/r/ref are (B, H) encodings; returns (B,)."""
    cm_r = g.sum(g.mul(g.matmul(c, params["m"]), r), axis=1)
    gn_r = g.sum(g.mul(g.matmul(ref, params["n"]), r), axis=1)
    return g.sigmoid(g.add(g.add(cm_r, gn_r), params["bias"]))


def regression_loss(examples: list[ScoredExample]) -> float:
    """Mean squared error between normalized labels and scores."""
    if not examples:
        raise ValueError("regression loss over an empty batch")
    return float(np.mean([(e.normalized_label - e.score) ** 2 for e in examples]))


def regression_loss_graph(g: Graph, scores: Node, labels: np.ndarray) -> Node:
    if labels.size == 0:
        raise ValueError("regression loss over an empty batch")
    return g.mean(g.square(g.sub(g.constant(labels), scores)))
