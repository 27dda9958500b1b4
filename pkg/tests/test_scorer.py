import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dialeval.autodiff import Graph, ShapeError
from dialeval.corpus import Quad
from dialeval.scorer import (
    ScoredExample,
    init_scorer,
    normalize_label,
    regression_loss,
    regression_loss_graph,
    score,
    score_batch_graph,
    score_graph,
    to_grade_scale,
    truncated_normal,
)


def _example(score_value, grade):
    q = Quad(["a"], ["b"], ["c"], grade, "s", "p")
    return ScoredExample(q, score_value, normalize_label(grade))


def test_zero_params_score_half():
    params = {"m": np.zeros((3, 3)), "n": np.zeros((3, 3)), "bias": np.zeros(())}
    assert score(np.ones(3), np.ones(3), np.ones(3), params) == 0.5


def test_hand_evaluated_score():
    params = {"m": np.array([[0.5]]), "n": np.array([[1.0]]), "bias": np.array(-1.0)}
    # logit = 2*0.5*1 + 3*1*1 - 1 = 3
    val = score(np.array([2.0]), np.array([1.0]), np.array([3.0]), params)
    assert val == pytest.approx(1.0 / (1.0 + np.exp(-3.0)), abs=1e-12)
    assert val == pytest.approx(0.95257, abs=5e-6)


def test_response_sign_flip_mirrors_score():
    rng = np.random.default_rng(0)
    params = {"m": rng.normal(size=(4, 4)), "n": rng.normal(size=(4, 4)), "bias": np.zeros(())}
    c, r, g = rng.normal(size=(3, 4))
    assert score(c, -r, g, params) == pytest.approx(1.0 - score(c, r, g, params), abs=1e-12)


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=30, deadline=None)
def test_score_stays_in_open_interval(seed):
    rng = np.random.default_rng(seed)
    params = {"m": rng.normal(scale=3, size=(3, 3)), "n": rng.normal(scale=3, size=(3, 3)), "bias": rng.normal()}
    val = score(rng.normal(size=3), rng.normal(size=3), rng.normal(size=3), params)
    assert 0.0 < val < 1.0


def test_score_shape_mismatch():
    params = {"m": np.zeros((3, 3)), "n": np.zeros((3, 3)), "bias": np.zeros(())}
    with pytest.raises(ShapeError):
        score(np.ones(2), np.ones(3), np.ones(3), params)


def test_score_graph_matches_plain():
    rng = np.random.default_rng(1)
    params = {"m": rng.normal(size=(3, 3)), "n": rng.normal(size=(3, 3)), "bias": np.asarray(rng.normal())}
    c, r, ref = rng.normal(size=(3, 3))
    g = Graph()
    nodes = {k: g.param(k, v) for k, v in params.items()}
    node = score_graph(g, g.constant(c), g.constant(r), g.constant(ref), nodes)
    assert float(node.value) == pytest.approx(score(c, r, ref, params), abs=1e-15)
    g2 = Graph()
    nodes2 = {k: g2.param(k, v) for k, v in params.items()}
    batch_node = score_batch_graph(
        g2, g2.constant(c[None]), g2.constant(r[None]), g2.constant(ref[None]), nodes2
    )
    assert float(batch_node.value[0]) == pytest.approx(score(c, r, ref, params), abs=1e-12)


def test_regression_loss_examples():
    assert regression_loss([_example(1.0, 2), _example(0.5, 1)]) == 0.0
    assert regression_loss([_example(0.5, 2)]) == pytest.approx(0.25, abs=1e-15)
    assert regression_loss([_example(0.5, 2), _example(0.2, 1)]) == pytest.approx(0.17, abs=1e-12)


def test_regression_loss_empty_batch():
    with pytest.raises(ValueError):
        regression_loss([])
    g = Graph()
    with pytest.raises(ValueError):
        regression_loss_graph(g, g.constant(np.zeros(0)), np.zeros(0))


def test_regression_loss_bounded():
    rng = np.random.default_rng(2)
    examples = [_example(float(rng.uniform(0.001, 0.999)), int(rng.integers(0, 3))) for _ in range(50)]
    assert 0.0 <= regression_loss(examples) <= 1.0


def test_normalize_label():
    assert [normalize_label(g) for g in (0, 1, 2)] == [0.0, 0.5, 1.0]
    assert to_grade_scale(0.5) == 1.0
    with pytest.raises(ValueError):
        normalize_label(3)


def test_init_scorer_truncation_and_determinism():
    params = init_scorer(np.random.default_rng(7), hidden_dim=50)
    for key in ("m", "n"):
        assert np.all(np.abs(params[key]) <= 0.2)
    again = init_scorer(np.random.default_rng(7), hidden_dim=50)
    assert all(np.array_equal(params[k], again[k]) for k in params)
    with pytest.raises(ValueError):
        init_scorer(np.random.default_rng(0), hidden_dim=0)


def test_truncated_normal_sample_mean():
    vals = truncated_normal(np.random.default_rng(11), (100, 100))
    assert abs(float(vals.mean())) <= 0.01
    assert np.all(np.abs(vals) <= 0.2)


def test_regression_gradcheck_through_model(tiny_vocab):
    from dialeval.model import loss_graph, make_batch
    from tests.conftest import random_model_params

    rng = np.random.default_rng(3)
    params = random_model_params(rng, len(tiny_vocab), embed=4, hidden=4)
    quads = [
        Quad(["c001", "c002"], ["c003"], ["c004", "c005"], 2, "s", "p1"),
        Quad(["c006"], ["c007", "c008"], ["c009"], 0, "s", "p2"),
    ]
    batch = make_batch(quads, tiny_vocab, l_max=6)
    g = Graph()
    nodes = {k: g.param(k, v) for k, v in params.items()}
    loss = loss_graph(g, nodes, batch)
    grads = g.backward(loss)
    for name, grad in grads.items():
        fd = g.finite_diff(loss, name)
        denom = np.maximum(np.maximum(np.abs(grad), np.abs(fd)), 1e-6)
        assert float(np.max(np.abs(grad - fd) / denom)) < 1e-4, name
