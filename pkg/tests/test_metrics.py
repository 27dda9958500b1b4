import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dialeval.metrics import (
    MissingRecordError,
    PredictionRecord,
    UndefinedCorrelationError,
    average_ranks,
    plasticity,
    spearman,
    spearman_or_none,
    stability,
)


def brute_force_spearman(xs, ys):
    """Independent oracle: O(n^2) average ranks, then an explicit Pearson."""

    def ranks(vals):
        out = []
        for v in vals:
            less = sum(1 for w in vals if w < v)
            equal = sum(1 for w in vals if w == v)
            out.append(less + (equal + 1) / 2.0)
        return out

    rx, ry = ranks(list(xs)), ranks(list(ys))
    n = len(rx)
    mx, my = sum(rx) / n, sum(ry) / n
    num = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    dx = math.sqrt(sum((a - mx) ** 2 for a in rx))
    dy = math.sqrt(sum((b - my) ** 2 for b in ry))
    return num / (dx * dy)


def test_monotone_pair():
    assert spearman([1, 2, 3, 4, 5], [2, 4, 6, 8, 10]) == 1.0


def test_reversed_pair():
    assert spearman([1, 2, 3], [5, 3, 1]) == pytest.approx(-1.0, abs=1e-12)


def test_tied_example_value():
    assert spearman([1, 2, 2, 4], [1, 3, 2, 4]) == pytest.approx(3 / math.sqrt(10), abs=1e-12)


def test_average_ranks_with_ties():
    assert np.array_equal(average_ranks([10, 20, 20, 30]), np.array([1.0, 2.5, 2.5, 4.0]))


def test_constant_input_is_undefined():
    with pytest.raises(UndefinedCorrelationError):
        spearman([1, 1, 1], [1, 2, 3])
    assert spearman_or_none([1, 2, 3], [2, 2, 2]) is None


def test_input_validation():
    with pytest.raises(ValueError):
        spearman([1, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        spearman([1], [2])


def test_oracle_agreement_on_random_pairs():
    rng = np.random.default_rng(77)
    for _ in range(200):
        n = int(rng.integers(2, 21))
        xs = rng.integers(0, 6, size=n).astype(float) if rng.random() < 0.5 else rng.normal(size=n)
        ys = rng.integers(0, 6, size=n).astype(float) if rng.random() < 0.5 else rng.normal(size=n)
        if np.all(xs == xs[0]) or np.all(ys == ys[0]):
            continue
        assert spearman(xs, ys) == pytest.approx(brute_force_spearman(xs, ys), abs=1e-12)


@given(st.lists(st.integers(0, 9), min_size=2, max_size=15))
@settings(max_examples=60, deadline=None)
def test_self_correlation_is_exactly_one(vals):
    xs = np.asarray(vals, dtype=float)
    if np.all(xs == xs[0]):
        return
    assert spearman(xs, xs) == 1.0


_sane_floats = st.floats(-5, 5, allow_nan=False).filter(lambda v: v == 0.0 or abs(v) > 1e-6)


@given(
    st.lists(_sane_floats, min_size=3, max_size=12, unique=True),
    st.lists(_sane_floats, min_size=3, max_size=12, unique=True),
)
@settings(max_examples=60, deadline=None)
def test_symmetry_and_monotone_invariance(xs, ys):
    n = min(len(xs), len(ys))
    xs, ys = np.asarray(xs[:n]), np.asarray(ys[:n])
    rho = spearman(xs, ys)
    assert spearman(ys, xs) == pytest.approx(rho, abs=1e-12)
    assert spearman(np.exp(xs / 5.0), ys) == pytest.approx(rho, abs=1e-12)
    assert spearman(xs, 3.0 * ys + 1.0) == pytest.approx(rho, abs=1e-12)


def _record(t, i, scores, labels=None):
    labels = labels if labels is not None else [0] * len(scores)
    return PredictionRecord("s", t, f"d{i}", i, [float(x) for x in scores], list(labels))


def test_plasticity_examples():
    labels = [0, 1, 2, 0, 2, 1]
    perfect = _record(1, 1, [float(l) for l in labels], labels)
    assert plasticity(perfect) == 1.0
    flipped = _record(1, 1, [2.0 - l for l in labels], labels)
    assert plasticity(flipped) == pytest.approx(-1.0, abs=1e-12)
    squashed = _record(1, 1, [math.tanh(l) for l in labels], labels)
    assert plasticity(squashed) == 1.0


def test_plasticity_requires_diagonal_record():
    with pytest.raises(ValueError):
        plasticity(_record(3, 1, [1, 2, 3]))


def test_stability_identical_predictions():
    records = {
        (1, 1): _record(1, 1, [0.1, 0.5, 0.9]),
        (2, 1): _record(2, 1, [0.1, 0.5, 0.9]),
    }
    assert stability(records, 2) == 1.0


def test_stability_mean_of_pairwise():
    # rank displacement picked so the pairwise correlations are exactly 0.8 and 0.6
    records = {
        (1, 1): _record(1, 1, [1, 2, 3, 4]),
        (3, 1): _record(3, 1, [1, 2, 4, 3]),
        (2, 2): _record(2, 2, [1, 2, 3, 4]),
        (3, 2): _record(3, 2, [2, 1, 4, 3]),
    }
    assert stability(records, 3) == pytest.approx(0.7, abs=1e-12)


def test_stability_missing_record_names_pair():
    records = {(1, 1): _record(1, 1, [1, 2, 3])}
    with pytest.raises(MissingRecordError, match=r"step=2, system=1"):
        stability(records, 2)


def test_stability_skips_undefined_pairs():
    records = {
        (1, 1): _record(1, 1, [5, 5, 5]),  # constant: pair (1,.) undefined
        (3, 1): _record(3, 1, [1, 2, 3]),
        (2, 2): _record(2, 2, [1, 2, 3]),
        (3, 2): _record(3, 2, [1, 2, 3]),
    }
    assert stability(records, 3) == 1.0
    records[(2, 2)] = _record(2, 2, [4, 4, 4])
    assert stability(records, 3) is None


def test_stability_lower_bound():
    with pytest.raises(ValueError):
        stability({}, 1)


def test_prediction_record_roundtrip():
    rec = PredictionRecord("vcl", 3, "drift", 2, [0.25, 0.75], [0, 2])
    back = PredictionRecord.from_json(rec.to_json())
    assert back == rec
