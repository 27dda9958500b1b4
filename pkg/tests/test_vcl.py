import numpy as np
import pytest

from dialeval.autodiff import Graph, ShapeError
from dialeval.config import VclConfig
from dialeval.corpus import Quad
from dialeval.model import forward_scores, loss_graph, make_batch
from dialeval.training import TrainSettings
from dialeval.vcl import (
    GaussianPosterior,
    kl_gaussian,
    kl_graph,
    make_prior,
    rho_for_sigma,
    sample_params,
    softplus,
    vcl_loss,
    vcl_loss_graph,
    vcl_predict,
    vcl_update,
)
from tests.conftest import random_model_params


def scalar_posterior(mu, sigma):
    return GaussianPosterior({"w": np.array([float(mu)])}, {"w": np.array([rho_for_sigma(sigma)])})


def test_kl_zero_for_identical():
    q = scalar_posterior(0.7, 0.3)
    assert kl_gaussian(q, q.copy()) == 0.0


def test_kl_standard_case():
    q = scalar_posterior(1.0, 1.0)
    p = scalar_posterior(0.0, 1.0)
    assert kl_gaussian(q, p) == pytest.approx(0.5, abs=1e-12)


def test_kl_matches_quadrature():
    from scipy.integrate import quad

    rng = np.random.default_rng(17)
    for _ in range(50):
        mu_q, mu_p = rng.normal(size=2)
        sd_q, sd_p = rng.uniform(0.2, 2.0, size=2)
        q = scalar_posterior(mu_q, sd_q)
        p = scalar_posterior(mu_p, sd_p)

        def integrand(x):
            log_q = -0.5 * ((x - mu_q) / sd_q) ** 2 - np.log(sd_q * np.sqrt(2 * np.pi))
            log_p = -0.5 * ((x - mu_p) / sd_p) ** 2 - np.log(sd_p * np.sqrt(2 * np.pi))
            return np.exp(log_q) * (log_q - log_p)

        lo, hi = mu_q - 12 * sd_q, mu_q + 12 * sd_q
        numeric, _ = quad(integrand, lo, hi, limit=200)
        assert kl_gaussian(q, p) == pytest.approx(numeric, abs=1e-6)


def test_kl_nonnegative_random():
    rng = np.random.default_rng(3)
    for _ in range(40):
        q = scalar_posterior(rng.normal(), rng.uniform(0.1, 2))
        p = scalar_posterior(rng.normal(), rng.uniform(0.1, 2))
        assert kl_gaussian(q, p) >= 0.0


def test_kl_shape_mismatch():
    q = GaussianPosterior({"w": np.zeros(2)}, {"w": np.zeros(2)})
    p = GaussianPosterior({"w": np.zeros(3)}, {"w": np.zeros(3)})
    with pytest.raises(ShapeError):
        kl_gaussian(q, p)


def test_kl_graph_matches_closed_form():
    rng = np.random.default_rng(8)
    shapes = {"a": (3,), "b": (2, 2)}
    q = GaussianPosterior(
        {k: rng.normal(size=s) for k, s in shapes.items()},
        {k: rng.uniform(-2, 0.5, size=s) for k, s in shapes.items()},
    )
    p = GaussianPosterior(
        {k: rng.normal(size=s) for k, s in shapes.items()},
        {k: rng.uniform(-2, 0.5, size=s) for k, s in shapes.items()},
    )
    g = Graph()
    mu_nodes = {k: g.param(f"mu.{k}", v) for k, v in q.mu.items()}
    rho_nodes = {k: g.param(f"rho.{k}", v) for k, v in q.rho.items()}
    node = kl_graph(g, mu_nodes, rho_nodes, p)
    assert float(node.value) == pytest.approx(kl_gaussian(q, p), rel=1e-12)


def test_prior_construction():
    prior = make_prior({"w": (2, 2)}, prior_var=1e-6)
    assert np.all(prior.mu["w"] == 0.0)
    assert np.allclose(softplus(prior.rho["w"]), 1e-3, rtol=1e-12)
    with pytest.raises(ValueError):
        make_prior({"w": (1,)}, prior_var=0.0)


def test_sample_degenerate_sigma_returns_mean():
    post = GaussianPosterior({"w": np.array([0.4, -0.2])}, {"w": np.full(2, -1000.0)})
    sample = sample_params(post, np.random.default_rng(0))
    assert np.array_equal(sample["w"], post.mu["w"])


def test_sample_seeded_determinism():
    post = scalar_posterior(0.0, 1.0)
    a = sample_params(post, np.random.default_rng(4))
    b = sample_params(post, np.random.default_rng(4))
    assert np.array_equal(a["w"], b["w"])


def test_sample_mean_clt_bound():
    post = scalar_posterior(0.0, 1.0)
    rng = np.random.default_rng(5)
    draws = np.array([sample_params(post, rng)["w"][0] for _ in range(10_000)])
    assert abs(draws.mean()) <= 0.05


@pytest.fixture(scope="module")
def model_setup(tiny_vocab):
    rng = np.random.default_rng(6)
    params = random_model_params(rng, len(tiny_vocab), embed=4, hidden=4)
    quads = [
        Quad(["c001", "c002"], ["c003"], ["c004"], 2, "s", "p1"),
        Quad(["c005"], ["c006"], ["c007", "c008"], 0, "s", "p2"),
        Quad(["c009"], ["c010", "c011"], ["c012"], 1, "s", "p3"),
    ]
    return params, make_batch(quads, tiny_vocab, l_max=6)


def _posterior_around(params, sigma):
    rho = rho_for_sigma(sigma)
    return GaussianPosterior(
        {k: v.copy() for k, v in params.items()},
        {k: np.full(v.shape, rho) for k, v in params.items()},
    )


def test_vcl_loss_reduces_to_point_regression(model_setup):
    params, batch = model_setup
    post = GaussianPosterior(
        {k: v.copy() for k, v in params.items()},
        {k: np.full(v.shape, -1000.0) for k, v in params.items()},
    )
    value = vcl_loss(post, batch, post.copy(), n_samples=1, rng=np.random.default_rng(0), kl_coeff=0.0)
    g = Graph()
    nodes = {k: g.param(k, v) for k, v in params.items()}
    assert value == pytest.approx(float(loss_graph(g, nodes, batch).value), abs=1e-8)


def test_vcl_loss_zero_when_perfect_and_matched(model_setup):
    params, batch = model_setup
    zeroish = {k: np.zeros_like(v) for k, v in params.items()}
    post = _posterior_around(zeroish, 1e-4)
    fair = batch.take(np.array([2]))  # grade 1 -> normalized 0.5 == sigmoid(0)
    value = vcl_loss(post, fair, post.copy(), n_samples=2, rng=np.random.default_rng(0), kl_coeff=1.0)
    assert value == pytest.approx(0.0, abs=1e-8)


def test_vcl_loss_gradcheck_frozen_noise(model_setup):
    params, batch = model_setup
    rng = np.random.default_rng(7)
    prev = _posterior_around({k: v + rng.normal(scale=0.01, size=v.shape) for k, v in params.items()}, 0.05)
    g = Graph()
    mu_nodes = {k: g.param(f"mu.{k}", v) for k, v in params.items()}
    rho_nodes = {k: g.param(f"rho.{k}", np.full(v.shape, rho_for_sigma(0.05))) for k, v in params.items()}
    shapes = {k: v.shape for k, v in params.items()}
    eps_sets = [{k: rng.standard_normal(shapes[k]) for k in sorted(shapes)} for _ in range(2)]
    loss = vcl_loss_graph(g, mu_nodes, rho_nodes, batch, prev, eps_sets, kl_coeff=0.01)
    grads = g.backward(loss)
    for name in ("mu.m", "rho.m", "mu.bias", "rho.b", "mu.w_h"):
        fd = g.finite_diff(loss, name)
        denom = np.maximum(np.maximum(np.abs(grads[name]), np.abs(fd)), 1e-6)
        assert float(np.max(np.abs(grads[name] - fd) / denom)) < 1e-4, name


def test_vcl_predict_degenerate_equals_deterministic(model_setup):
    params, batch = model_setup
    post = GaussianPosterior(
        {k: v.copy() for k, v in params.items()},
        {k: np.full(v.shape, -1000.0) for k, v in params.items()},
    )
    mc = vcl_predict(post, batch, n_samples=3, rng=np.random.default_rng(0))
    assert np.allclose(mc, forward_scores(params, batch), atol=1e-15)


def test_vcl_predict_range_and_determinism(model_setup):
    params, batch = model_setup
    post = _posterior_around(params, 0.1)
    a = vcl_predict(post, batch, n_samples=8, rng=np.random.default_rng(3))
    b = vcl_predict(post, batch, n_samples=8, rng=np.random.default_rng(3))
    assert np.array_equal(a, b)
    assert np.all((a > 0) & (a < 1))


def test_vcl_predict_variance_shrinks_with_samples(model_setup):
    params, batch = model_setup
    post = _posterior_around(params, 0.2)

    def spread(n_samples, base_seed):
        vals = [
            vcl_predict(post, batch.take(np.array([0])), n_samples, np.random.default_rng(base_seed + r))[0]
            for r in range(100)
        ]
        return float(np.var(vals))

    v1, v16 = spread(1, 100), spread(16, 5000)
    assert v16 < v1 / 4  # roughly 1/n scaling, generous slack


def test_vcl_update_zero_epochs_returns_prior(model_setup):
    params, batch = model_setup
    prev = _posterior_around(params, 0.05)
    cfg = VclConfig(train_samples=1, valid_samples=1, predict_samples=1)
    post, result = vcl_update(
        prev, params, batch, None, TrainSettings(epochs=0), cfg,
        np.random.default_rng(0), np.random.default_rng(1),
    )
    assert result.epochs_run == 0
    assert all(np.array_equal(post.mu[k], prev.mu[k]) for k in prev.mu)
    assert all(np.array_equal(post.rho[k], prev.rho[k]) for k in prev.rho)


def test_vcl_update_recursion_wiring(model_setup):
    params, batch = model_setup
    prior = make_prior({k: v.shape for k, v in params.items()}, prior_var=1.0)
    cfg = VclConfig(prior_var=1.0, sigma_init=1e-3, train_samples=1, valid_samples=1, predict_samples=1)
    settings = TrainSettings(epochs=2, batch_size=2, patience=5)

    q1, _ = vcl_update(prior, params, batch, None, settings, cfg,
                       np.random.default_rng(10), np.random.default_rng(11))
    snapshot = {k: q1.mu[k].copy() for k in q1.mu}
    q2a, _ = vcl_update(q1, q1.mu, batch, None, settings, cfg,
                        np.random.default_rng(20), np.random.default_rng(21))
    q2b, _ = vcl_update(q1, q1.mu, batch, None, settings, cfg,
                        np.random.default_rng(20), np.random.default_rng(21))
    assert all(np.array_equal(q2a.mu[k], q2b.mu[k]) for k in q2a.mu)
    assert all(np.array_equal(q1.mu[k], snapshot[k]) for k in q1.mu)  # prev untouched


def test_vcl_head_only_mode(model_setup):
    params, batch = model_setup
    prior = make_prior({k: v.shape for k, v in params.items()}, prior_var=1.0)
    cfg = VclConfig(prior_var=1.0, sigma_init=1e-2, train_samples=1, valid_samples=1,
                    predict_samples=2, head_only=True)
    post, _ = vcl_update(prior, params, batch, None, TrainSettings(epochs=1, batch_size=2), cfg,
                         np.random.default_rng(0), np.random.default_rng(1))
    assert post.point_names == frozenset({"emb", "w_x", "w_h", "b"})
    sample = sample_params(post, np.random.default_rng(2))
    assert np.array_equal(sample["emb"], post.mu["emb"])  # point estimate, no noise
    assert not np.array_equal(sample["m"], post.mu["m"])
    # KL covers only the variational head
    assert kl_gaussian(post, post.copy()) == 0.0
