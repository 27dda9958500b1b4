"""Diagonal empirical Fisher information and the quadratic consolidation
penalty that anchors important weights to their previously learned values."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, Node, ShapeError
from .model import Batch, loss_graph


@dataclass
class FisherState:
    """Per-parameter importance weights plus the anchor they were measured at."""

    fisher: dict[str, np.ndarray]
    anchor: dict[str, np.ndarray]
    lam: float = 1.0

    def __post_init__(self):
        for name, f in self.fisher.items():
            if np.any(f < 0):
                raise ValueError(f"negative Fisher entry for {name}")
            if f.shape != self.anchor[name].shape:
                raise ShapeError(f"fisher/anchor shape mismatch for {name}")


def compute_fisher(data: Batch, params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Mean squared per-example loss gradient, evaluated at params.

    Each example contributes the square of the gradient of its own squared
    error; params are not modified. Invariant under dataset permutation and
    duplication.
    """
    n = len(data)
    if n == 0:
        raise ValueError("Fisher information over an empty dataset")
    fisher = {k: np.zeros_like(v) for k, v in params.items()}
    for j in range(n):
        g = Graph()
        nodes = {k: g.param(k, v) for k, v in params.items()}
        loss = loss_graph(g, nodes, data.take(np.array([j])))
        grads = g.backward(loss)
        for k, grad in grads.items():
            fisher[k] += grad * grad
    for k in fisher:
        fisher[k] /= n
    return fisher


def _check_shapes(params, state: FisherState):
    for name, anchor in state.anchor.items():
        if name not in params or params[name].shape != anchor.shape:
            raise ShapeError(f"parameter {name} does not match anchor shape {anchor.shape}")


def ewc_penalty(params: dict[str, np.ndarray], state: FisherState) -> float:
    """sum_i (lam/2) * F_i * (theta_i - anchor_i)^2, over all parameters."""
    _check_shapes(params, state)
    total = 0.0
    for name, anchor in state.anchor.items():
        diff = params[name] - anchor
        total += float(np.sum(state.fisher[name] * diff * diff))
    return 0.5 * state.lam * total


def ewc_penalty_graph(g: Graph, nodes: dict[str, Node], state: FisherState) -> Node:
    _check_shapes({k: n.value for k, n in nodes.items()}, state)
    total = None
    for name in sorted(state.anchor):
        diff = g.sub(nodes[name], g.constant(state.anchor[name]))
        term = g.sum(g.mul(g.constant(state.fisher[name]), g.square(diff)))
        total = term if total is None else g.add(total, term)
    return g.scale(total, 0.5 * state.lam)


def ewc_loss_graph(g: Graph, nodes: dict[str, Node], batch: Batch, anchors: list[FisherState]) -> Node:
    """Regression loss plus one consolidation penalty per retained anchor.

    With no anchors (the first system, or lam == 0 throughout) the graph is
    exactly the plain regression graph, so the update trajectory matches
    unpenalized fine-tuning bit for bit.
    """
    loss = loss_graph(g, nodes, batch)
    for state in anchors:
        if state.lam == 0.0:
            continue
        loss = g.add(loss, ewc_penalty_graph(g, nodes, state))
    return loss


def ewc_total_loss(batch: Batch, params: dict[str, np.ndarray], state: FisherState | None) -> float:
    """Value of the joint objective; state None means no penalty yet."""
    g = Graph()
    nodes = {k: g.param(k, v) for k, v in params.items()}
    return float(ewc_loss_graph(g, nodes, batch, [state] if state is not None else []).value)
