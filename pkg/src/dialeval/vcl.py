"""Mean-field Gaussian variational continual learning.

Each parameter coordinate carries an independent Gaussian posterior; the
posterior learned on one system becomes the prior for the next, realized as
a KL penalty toward the previous posterior inside a Monte-Carlo objective.
Standard deviations are carried as rho with sigma = softplus(rho), which
keeps them positive without constraints. Prediction averages the score over
sampled parameter sets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, Node, ShapeError
from .config import VclConfig
from .metrics import spearman_or_none
from .model import Batch, forward_scores, loss_graph
from .training import TrainResult, TrainSettings, train_loop


def softplus(x):
    return np.logaddexp(0.0, x)


def rho_for_sigma(sigma: float) -> float:
    """Inverse softplus; the rho that yields the requested sigma."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return float(np.log(np.expm1(sigma)))


@dataclass
class GaussianPosterior:
    """Per-parameter mean and variance carrier, plus the root prior spec.

    Names in point_names are treated as point estimates (head-only mode):
    sampling returns their mean and the KL skips them.
    """

    mu: dict[str, np.ndarray]
    rho: dict[str, np.ndarray]
    prior_mu: float = 0.0
    prior_var: float = 1e-6
    point_names: frozenset[str] = frozenset()

    def sigma(self) -> dict[str, np.ndarray]:
        return {k: softplus(v) for k, v in self.rho.items()}

    def variational_names(self) -> list[str]:
        return [k for k in sorted(self.mu) if k not in self.point_names]

    def copy(self) -> "GaussianPosterior":
        return GaussianPosterior(
            {k: v.copy() for k, v in self.mu.items()},
            {k: v.copy() for k, v in self.rho.items()},
            self.prior_mu,
            self.prior_var,
            self.point_names,
        )


def make_prior(shapes: dict[str, tuple], prior_mu: float = 0.0, prior_var: float = 1e-6) -> GaussianPosterior:
    """The step-0 posterior: every coordinate is N(prior_mu, prior_var)."""
    if prior_var <= 0:
        raise ValueError("prior variance must be positive")
    rho0 = rho_for_sigma(float(np.sqrt(prior_var)))
    return GaussianPosterior(
        {k: np.full(s, prior_mu, dtype=np.float64) for k, s in shapes.items()},
        {k: np.full(s, rho0, dtype=np.float64) for k, s in shapes.items()},
        prior_mu,
        prior_var,
    )


def kl_gaussian(q: GaussianPosterior, p: GaussianPosterior) -> float:
    """KL(q || p) for diagonal Gaussians, summed over every variational coordinate."""
    total = 0.0
    for name in q.variational_names():
        if name not in p.mu or q.mu[name].shape != p.mu[name].shape:
            raise ShapeError(f"posterior shape mismatch for {name}")
        sq = softplus(q.rho[name])
        sp = softplus(p.rho[name])
        if np.any(sq <= 0) or np.any(sp <= 0):
            raise ValueError(f"nonpositive standard deviation for {name}")
        total += float(
            np.sum(np.log(sp) - np.log(sq) + (sq * sq + (q.mu[name] - p.mu[name]) ** 2) / (2.0 * sp * sp) - 0.5)
        )
    return total


def kl_graph(g: Graph, mu_nodes: dict[str, Node], rho_nodes: dict[str, Node], prev: GaussianPosterior) -> Node:
    """Differentiable KL(q || prev); covers exactly the names in rho_nodes."""
    total = None
    const = 0.0
    for name in sorted(rho_nodes):
        sp = softplus(prev.rho[name])
        inv2var = 1.0 / (2.0 * sp * sp)
        sq = g.softplus(rho_nodes[name])
        neg_log_sq = g.scale(g.sum(g.log(sq)), -1.0)
        diff = g.sub(mu_nodes[name], g.constant(prev.mu[name]))
        quad = g.sum(g.mul(g.constant(inv2var), g.add(g.square(sq), g.square(diff))))
        term = g.add(neg_log_sq, quad)
        total = term if total is None else g.add(total, term)
        const += float(np.sum(np.log(sp))) - 0.5 * sp.size
    return g.add(total, g.constant(const))


def sample_params(posterior: GaussianPosterior, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """One reparameterized draw: theta = mu + sigma * eps, names in sorted order."""
    out = {}
    for name in sorted(posterior.mu):
        mu = posterior.mu[name]
        if name in posterior.point_names:
            out[name] = mu.copy()
        else:
            out[name] = mu + softplus(posterior.rho[name]) * rng.standard_normal(mu.shape)
    return out


def _draw_eps(shapes: dict[str, tuple], names: list[str], rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {name: rng.standard_normal(shapes[name]) for name in names}


def _sample_graph(g, mu_nodes, rho_nodes, eps):
    return {
        name: g.add(mu_nodes[name], g.mul(g.softplus(rho_nodes[name]), g.constant(eps[name])))
        if name in eps
        else mu_nodes[name]
        for name in mu_nodes
    }


def vcl_loss_graph(
    g: Graph,
    mu_nodes: dict[str, Node],
    rho_nodes: dict[str, Node],
    batch: Batch,
    prev: GaussianPosterior,
    eps_sets: list[dict[str, np.ndarray]],
    kl_coeff: float,
) -> Node:
    """Monte-Carlo regression loss over eps_sets plus kl_coeff * KL(q || prev).

    kl_coeff == 0 skips the KL subgraph entirely, reducing the objective to
    the plain averaged regression loss.
    """
    acc = None
    for eps in eps_sets:
        theta = _sample_graph(g, mu_nodes, rho_nodes, eps)
        term = loss_graph(g, theta, batch)
        acc = term if acc is None else g.add(acc, term)
    loss = g.scale(acc, 1.0 / len(eps_sets))
    if kl_coeff != 0.0:
        loss = g.add(loss, g.scale(kl_graph(g, mu_nodes, rho_nodes, prev), kl_coeff))
    return loss


def vcl_loss(
    posterior: GaussianPosterior,
    batch: Batch,
    prev: GaussianPosterior,
    n_samples: int,
    rng: np.random.Generator,
    kl_coeff: float = 1.0,
) -> float:
    """Objective value at the given posterior with freshly drawn noise."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    g = Graph()
    names = posterior.variational_names()
    mu_nodes = {k: g.param(f"mu.{k}", v) for k, v in posterior.mu.items()}
    rho_nodes = {k: g.param(f"rho.{k}", posterior.rho[k]) for k in names}
    shapes = {k: v.shape for k, v in posterior.mu.items()}
    eps_sets = [_draw_eps(shapes, names, rng) for _ in range(n_samples)]
    return float(vcl_loss_graph(g, mu_nodes, rho_nodes, batch, prev, eps_sets, kl_coeff).value)


def vcl_predict(
    posterior: GaussianPosterior, batch: Batch, n_samples: int, rng: np.random.Generator
) -> np.ndarray:
    """Mean score over sampled parameter sets; seeded, hence deterministic."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    acc = np.zeros(len(batch))
    for _ in range(n_samples):
        acc += forward_scores(sample_params(posterior, rng), batch)
    return acc / n_samples


def vcl_update(
    prev: GaussianPosterior,
    init_mu: dict[str, np.ndarray],
    train_batch: Batch,
    valid_batch: Batch | None,
    settings: TrainSettings,
    cfg: VclConfig,
    shuffle_rng: np.random.Generator,
    noise_rng: np.random.Generator,
) -> tuple[GaussianPosterior, TrainResult]:
    """Fit q_t against the previous posterior on one system's data.

    Means start from init_mu (pass prev.mu to warm-start, or a fresh point
    estimate at the first step); sigmas restart at cfg.sigma_init. The
    previous posterior is never modified. Zero epochs returns it unchanged.
    """
    if settings.epochs == 0:
        return prev.copy(), TrainResult(
            {f"mu.{k}": v.copy() for k, v in prev.mu.items()}, None, 0, 0
        )
    point_names = (
        frozenset(k for k in init_mu if k not in ("m", "n", "bias")) if cfg.head_only else frozenset()
    )
    names = [k for k in sorted(init_mu) if k not in point_names]
    rho0 = rho_for_sigma(cfg.sigma_init)
    params: dict[str, np.ndarray] = {}
    for k, v in init_mu.items():
        params[f"mu.{k}"] = v.copy()
        if k in names:
            params[f"rho.{k}"] = np.full(v.shape, rho0, dtype=np.float64)
    shapes = {k: v.shape for k, v in init_mu.items()}
    kl_coeff = cfg.kl_weight / len(train_batch) if cfg.kl_scale == "per_example" else cfg.kl_weight
    valid_seed = int(noise_rng.integers(2**63)) if valid_batch is not None else 0
    rest_rho = {k: np.full(shapes[k], rho0, dtype=np.float64) for k in point_names}

    def split(p):
        return GaussianPosterior(
            {k: p[f"mu.{k}"] for k in shapes},
            {k: p[f"rho.{k}"] if k in names else rest_rho[k] for k in shapes},
            prev.prior_mu,
            prev.prior_var,
            point_names,
        )

    def loss_builder(g, nodes, idx, step):
        mu_nodes = {k: nodes[f"mu.{k}"] for k in shapes}
        rho_nodes = {k: nodes[f"rho.{k}"] for k in names}
        eps_sets = [_draw_eps(shapes, names, noise_rng) for _ in range(cfg.train_samples)]
        return vcl_loss_graph(g, mu_nodes, rho_nodes, train_batch.take(idx), prev, eps_sets, kl_coeff)

    valid_fn = None
    if valid_batch is not None:

        def valid_fn(p):
            scores = vcl_predict(split(p), valid_batch, cfg.valid_samples, np.random.default_rng(valid_seed))
            return spearman_or_none(scores, valid_batch.grades)

    result = train_loop(params, len(train_batch), loss_builder, valid_fn, settings, shuffle_rng)
    post = split(result.params)
    return post.copy(), result
