import numpy as np
import pytest

from dialeval.autodiff import Graph, ShapeError
from dialeval.corpus import Quad
from dialeval.ewc import (
    FisherState,
    compute_fisher,
    ewc_loss_graph,
    ewc_penalty,
    ewc_penalty_graph,
    ewc_total_loss,
)
from dialeval.model import loss_graph, make_batch
from tests.conftest import random_model_params


@pytest.fixture(scope="module")
def setup(tiny_vocab):
    rng = np.random.default_rng(5)
    params = random_model_params(rng, len(tiny_vocab), embed=4, hidden=4)
    quads = [
        Quad(["c001", "c002"], ["c003"], ["c004"], 2, "s", "p1"),
        Quad(["c005"], ["c006", "c007"], ["c008"], 0, "s", "p2"),
        Quad(["c009", "c010"], ["c011"], ["c012", "c001"], 1, "s", "p3"),
    ]
    batch = make_batch(quads, tiny_vocab, l_max=6)
    return params, batch, tiny_vocab


def test_fisher_matches_per_example_oracle(setup):
    params, batch, _ = setup
    fisher = compute_fisher(batch, params)
    expected = {k: np.zeros_like(v) for k, v in params.items()}
    for j in range(len(batch)):
        g = Graph()
        nodes = {k: g.param(k, v) for k, v in params.items()}
        grads = g.backward(loss_graph(g, nodes, batch.take(np.array([j]))))
        for k in expected:
            if k in grads:
                expected[k] += grads[k] ** 2
    for k in expected:
        assert np.allclose(fisher[k], expected[k] / len(batch), atol=1e-15)


def test_fisher_zero_for_untouched_parameters(setup):
    params, batch, vocab = setup
    fisher = compute_fisher(batch, params)
    unused_row = vocab.id_of("c070")  # token absent from the fixture quads
    assert np.all(fisher["emb"][unused_row] == 0.0)
    assert np.any(fisher["m"] != 0.0)


def test_fisher_invariant_to_duplication_and_order(setup):
    params, batch, _ = setup
    base = compute_fisher(batch, params)
    doubled = compute_fisher(batch.take(np.array([0, 1, 2, 0, 1, 2])), params)
    shuffled = compute_fisher(batch.take(np.array([2, 0, 1])), params)
    for k in base:
        assert np.allclose(base[k], doubled[k], atol=1e-15)
        assert np.allclose(base[k], shuffled[k], atol=1e-15)


def test_fisher_rejects_empty(setup):
    params, batch, _ = setup
    with pytest.raises(ValueError):
        compute_fisher(batch.take(np.array([], dtype=int)), params)


def test_fisher_nonnegative(setup):
    params, batch, _ = setup
    fisher = compute_fisher(batch, params)
    assert all(np.all(v >= 0) for v in fisher.values())
    with pytest.raises(ValueError):
        FisherState({"x": np.array([-1.0])}, {"x": np.array([0.0])})


def test_penalty_examples():
    state = FisherState({"w": np.array([1.0, 2.0])}, {"w": np.array([0.0, 0.0])}, lam=2.0)
    assert ewc_penalty({"w": np.array([0.0, 0.0])}, state) == 0.0
    assert ewc_penalty({"w": np.array([1.0, 1.0])}, state) == pytest.approx(3.0, abs=1e-15)
    zero_f = FisherState({"w": np.zeros(2)}, {"w": np.zeros(2)}, lam=5.0)
    assert ewc_penalty({"w": np.array([9.0, -4.0])}, zero_f) == 0.0


def test_penalty_nonnegative_random():
    rng = np.random.default_rng(0)
    for _ in range(25):
        state = FisherState({"w": rng.uniform(0, 2, 4)}, {"w": rng.normal(size=4)}, lam=float(rng.uniform(0, 3)))
        assert ewc_penalty({"w": rng.normal(size=4)}, state) >= 0.0


def test_penalty_shape_mismatch():
    state = FisherState({"w": np.ones(2)}, {"w": np.zeros(2)}, lam=1.0)
    with pytest.raises(ShapeError):
        ewc_penalty({"w": np.zeros(3)}, state)


def test_penalty_graph_matches_plain(setup):
    params, batch, _ = setup
    fisher = compute_fisher(batch, params)
    rng = np.random.default_rng(1)
    state = FisherState(fisher, {k: v + rng.normal(scale=0.01, size=v.shape) for k, v in params.items()}, lam=3.0)
    g = Graph()
    nodes = {k: g.param(k, v) for k, v in params.items()}
    node = ewc_penalty_graph(g, nodes, state)
    assert float(node.value) == pytest.approx(ewc_penalty(params, state), rel=1e-12)


def test_penalty_gradient_zero_at_anchor(setup):
    params, batch, _ = setup
    fisher = compute_fisher(batch, params)
    state = FisherState(fisher, {k: v.copy() for k, v in params.items()}, lam=7.0)
    g = Graph()
    nodes = {k: g.param(k, v) for k, v in params.items()}
    grads = g.backward(ewc_penalty_graph(g, nodes, state))
    for k, grad in grads.items():
        assert np.all(grad == 0.0), k


def test_total_loss_reduces_without_anchor(setup):
    params, batch, _ = setup
    g = Graph()
    nodes = {k: g.param(k, v) for k, v in params.items()}
    plain = float(loss_graph(g, nodes, batch).value)
    assert ewc_total_loss(batch, params, None) == pytest.approx(plain, abs=1e-15)
    at_anchor = FisherState(compute_fisher(batch, params), {k: v.copy() for k, v in params.items()}, lam=10.0)
    assert ewc_total_loss(batch, params, at_anchor) == pytest.approx(plain, abs=1e-12)


def test_total_loss_gradcheck(setup):
    params, batch, _ = setup
    fisher = compute_fisher(batch, params)
    rng = np.random.default_rng(2)
    anchor = {k: v + rng.normal(scale=0.02, size=v.shape) for k, v in params.items()}
    state = FisherState(fisher, anchor, lam=2.5)
    g = Graph()
    nodes = {k: g.param(k, v) for k, v in params.items()}
    loss = ewc_loss_graph(g, nodes, batch, [state])
    grads = g.backward(loss)
    for name in ("m", "n", "bias", "b"):
        fd = g.finite_diff(loss, name)
        denom = np.maximum(np.maximum(np.abs(grads[name]), np.abs(fd)), 1e-6)
        assert float(np.max(np.abs(grads[name] - fd) / denom)) < 1e-4, name


def test_zero_lambda_anchor_is_skipped(setup):
    params, batch, _ = setup
    state = FisherState(compute_fisher(batch, params), {k: v * 0 for k, v in params.items()}, lam=0.0)
    g = Graph()
    nodes = {k: g.param(k, v) for k, v in params.items()}
    with_anchor = ewc_loss_graph(g, nodes, batch, [state])
    g2 = Graph()
    nodes2 = {k: g2.param(k, v) for k, v in params.items()}
    plain = loss_graph(g2, nodes2, batch)
    assert float(with_anchor.value) == float(plain.value)
    ga = g.backward(with_anchor)
    gb = g2.backward(plain)
    assert all(np.array_equal(ga[k], gb[k]) for k in gb)
