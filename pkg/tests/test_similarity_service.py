# tests/test_similarity_service.py

import numpy as np
import pandas as pd
import pytest

from services.dataset_service import Dataset, FeatureSpec, ProtectedSpec, Schema
from services.similarity_service import (
    DistanceContext,
    gower_distance,
    gower_distances,
    per_attribute_distance,
)
from utils.exceptions import DistanceError, SchemaValidationError

MIXED_SCHEMA = Schema(
    features=(
        FeatureSpec(name="Color", kind="categorical"),
        FeatureSpec(name="Income"),
        FeatureSpec(name="Grade", kind="ordinal"),
        FeatureSpec(name="Temp", kind="interval"),
    ),
    protected=(ProtectedSpec(name="A"),),
    decision="Y",
)
COLORS = np.array(["red", "blue", "green"])


def _mixed_dataset(n: int, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    frame = pd.DataFrame({
        "Color": rng.choice(COLORS, n),
        "Income": rng.uniform(0, 100, n),
        "Grade": rng.integers(1, 6, n).astype(float),
        "Temp": rng.normal(20, 5, n),
        "A": rng.binomial(1, 0.5, n),
        "Y": rng.binomial(1, 0.5, n),
    })
    return Dataset.from_frame(MIXED_SCHEMA, frame)


def _straight_line(x1: dict, x2: dict, stats: dict) -> float:
    """獨立撰寫的逐項計算，作為比對基準。"""
    total = 0.0
    for name in ("Color", "Income", "Grade", "Temp"):
        if name == "Color":
            total += 0.0 if x1[name] == x2[name] else 1.0
        else:
            low, high = stats[name]
            total += abs(x1[name] - x2[name]) / (high - low)
    return total / 4


def test_categorical_overlap():
    assert per_attribute_distance("red", "red", "categorical") == 0.0
    assert per_attribute_distance("red", "blue", "categorical") == 1.0


def test_continuous_normalized_difference():
    assert per_attribute_distance(30, 50, "continuous", (0, 100)) == pytest.approx(0.2)


def test_out_of_range_term_may_exceed_range():
    assert per_attribute_distance(90, 130, "continuous", (0, 100)) == pytest.approx(0.4)
    assert per_attribute_distance(-50, 130, "continuous", (0, 100)) == pytest.approx(1.8)


def test_zero_range_feature():
    assert per_attribute_distance(5, 5, "continuous", (5, 5)) == 0.0
    with pytest.raises(DistanceError):
        per_attribute_distance(5, 6, "continuous", (5, 5))


def test_two_feature_average():
    schema = Schema(
        features=(FeatureSpec(name="C", kind="categorical"), FeatureSpec(name="X")),
        protected=(ProtectedSpec(name="A"),),
        decision="Y",
    )
    ctx = DistanceContext(schema=schema, stats={"X": (0.0, 100.0)})
    assert gower_distance({"C": "a", "X": 30}, {"C": "b", "X": 50}, ctx) == pytest.approx(0.6)


def test_categorical_features_need_no_range_stats():
    d = _mixed_dataset(50, seed=4)
    for scaling in ("minmax", "rank"):
        ctx = DistanceContext.from_dataset(d, ordinal_scaling=scaling)
        assert "Color" not in ctx.stats
        x1 = {"Color": "red", "Income": 30.0, "Grade": 2.0, "Temp": 20.0}
        x2 = {"Color": "blue", "Income": 30.0, "Grade": 2.0, "Temp": 20.0}
        assert gower_distance(x1, x2, ctx) == pytest.approx(0.25)
        assert gower_distance(x1, x1, ctx) == 0.0


def test_distance_matches_straight_line_reimplementation():
    d = _mixed_dataset(400, seed=1)
    ctx = DistanceContext.from_dataset(d)
    rng = np.random.default_rng(99)
    rows = d.features.to_dict("records")
    for _ in range(10_000):
        i, j = rng.integers(0, len(rows), 2)
        expected = _straight_line(rows[i], rows[j], d.normalization_stats)
        assert abs(gower_distance(rows[i], rows[j], ctx) - expected) <= 1e-12


def test_vectorized_distances_match_scalar():
    d = _mixed_dataset(200, seed=2)
    ctx = DistanceContext.from_dataset(d)
    encoded = ctx.encode(d.features)
    rows = d.features.to_dict("records")
    for i in range(0, 200, 17):
        batch = gower_distances(encoded.take(np.array([i])), encoded, ctx)
        scalar = [gower_distance(rows[i], row, ctx) for row in rows]
        np.testing.assert_allclose(batch, scalar, rtol=0, atol=1e-12)


def test_symmetry_identity_and_range():
    d = _mixed_dataset(300, seed=3)
    ctx = DistanceContext.from_dataset(d)
    rows = d.features.to_dict("records")
    rng = np.random.default_rng(4)
    for _ in range(2000):
        i, j = rng.integers(0, len(rows), 2)
        forward = gower_distance(rows[i], rows[j], ctx)
        assert forward == gower_distance(rows[j], rows[i], ctx)
        assert 0.0 <= forward <= 1.0
        assert gower_distance(rows[i], rows[i], ctx) == 0.0


def test_monotone_in_one_coordinate():
    d = _mixed_dataset(100, seed=5)
    ctx = DistanceContext.from_dataset(d)
    base = d.features.iloc[0].to_dict()
    previous = -1.0
    for delta in np.linspace(0, 100, 50):
        moved = dict(base, Income=base["Income"] + delta)
        current = gower_distance(base, moved, ctx)
        assert current >= previous
        previous = current


def test_protected_and_decision_are_ignored():
    d = _mixed_dataset(50, seed=6)
    ctx = DistanceContext.from_dataset(d)
    x = d.frame.iloc[0].to_dict()
    y = dict(x, A=1 - x["A"], Y=1 - x["Y"])
    assert gower_distance(x, y, ctx) == 0.0


def test_rank_scaling_for_ordinal_features():
    schema = Schema(
        features=(FeatureSpec(name="G", kind="ordinal"),),
        protected=(ProtectedSpec(name="A"),),
        decision="Y",
    )
    frame = pd.DataFrame({"G": [1.0, 2.0, 10.0, 10.0], "A": [1, 0, 1, 0], "Y": [0, 1, 0, 1]})
    d = Dataset.from_frame(schema, frame)
    minmax = DistanceContext.from_dataset(d)
    ranked = DistanceContext.from_dataset(d, ordinal_scaling="rank")
    assert gower_distance([1.0], [2.0], minmax) == pytest.approx(1 / 9)
    assert gower_distance([1.0], [2.0], ranked) == pytest.approx(0.5)


def test_context_requires_stats_for_numeric_features():
    with pytest.raises(SchemaValidationError):
        DistanceContext(schema=MIXED_SCHEMA, stats={"Income": (0.0, 1.0)})


def test_vector_length_must_match_schema():
    d = _mixed_dataset(20, seed=7)
    ctx = DistanceContext.from_dataset(d)
    with pytest.raises(SchemaValidationError):
        gower_distance(["red", 1.0], ["red", 1.0], ctx)
