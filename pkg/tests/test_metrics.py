import numpy as np
import pytest

from oracles import auroc_pairs, average_precision_steps
from rfssl.metrics import (
    CorePrediction,
    auroc,
    average_precision,
    balanced_accuracy,
    compute_metrics,
    passes_involvement,
    predicted_involvement,
)


def random_scores(rng):
    n = int(rng.integers(2, 201))
    y = rng.integers(0, 2, size=n)
    y[0], y[1] = 0, 1
    # coarse grid forces ties
    s = rng.integers(0, 20, size=n) / 20.0 if rng.random() < 0.5 else rng.random(n)
    return y, s


def test_auroc_matches_pair_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(100):
        y, s = random_scores(rng)
        assert auroc(y, s) == auroc_pairs(y, s)


def test_average_precision_matches_step_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        y, s = random_scores(rng)
        np.testing.assert_allclose(average_precision(y, s), average_precision_steps(y, s), atol=1e-10)


def test_four_score_example():
    y, s = [1, 1, 0, 0], [0.9, 0.4, 0.6, 0.1]
    assert auroc(y, s) == 0.75
    # sensitivity 1/2 (0.4 misses), specificity 1/2 (0.6 fires)
    assert balanced_accuracy(y, s) == 0.5


def test_perfect_ranking():
    y, s = [0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9]
    assert auroc(y, s) == 1.0
    assert average_precision(y, s) == 1.0
    assert balanced_accuracy(y, s) == 1.0


def test_threshold_is_inclusive():
    assert balanced_accuracy([0, 1], [0.2, 0.5]) == 1.0


def test_metric_input_errors():
    with pytest.raises(ValueError):
        auroc([1, 1], [0.2, 0.3])
    with pytest.raises(ValueError):
        auroc([0, 2], [0.2, 0.3])
    with pytest.raises(ValueError):
        average_precision([0, 1, 1], [0.2, 0.3])


def test_core_probability_is_mean_class():
    p = CorePrediction.from_probabilities("c", [0.9, 0.6, 0.3, 0.1], 1, 50)
    assert p.patch_classes == [1, 1, 0, 0]
    assert p.core_probability == 0.5
    assert CorePrediction.from_probabilities("c", [0.1] * 5, 0, 0).core_probability == 0.0
    assert CorePrediction.from_probabilities("c", [0.8] * 7 + [0.2] * 3, 1, 60).core_probability == pytest.approx(0.7)


def test_predicted_involvement():
    assert predicted_involvement(CorePrediction.from_probabilities("a", [0.9] * 4, 1, 50)) == 1.0
    assert predicted_involvement(CorePrediction.from_probabilities("b", [0.1] * 12, 1, 50)) == 0.0
    assert predicted_involvement(CorePrediction.from_probabilities("c", [0.7, 0.2, 0.9, 0.5], 1, 50)) == 0.75
    with pytest.raises(ValueError):
        predicted_involvement(CorePrediction.from_probabilities("d", [], 1, 50))


def test_low_involvement_core_excluded():
    preds = [
        CorePrediction.from_probabilities("b1", [0.1, 0.2], 0, 0),
        CorePrediction.from_probabilities("b2", [0.6, 0.7], 0, 0),
        CorePrediction.from_probabilities("c1", [0.9, 0.8], 1, 60),
        CorePrediction.from_probabilities("c2", [0.0, 0.0], 1, 30),
    ]
    core = compute_metrics(preds, "core")
    assert (core.n_positive, core.n_negative) == (1, 2)
    # b2 ties c1 at core probability 1.0, so one pair counts one half
    assert core.auroc == 0.75
    patch = compute_metrics(preds, "patch")
    assert (patch.n_positive, patch.n_negative) == (2, 4)
    assert passes_involvement(1, 40.0, 40.0) and not passes_involvement(1, 39.9, 40.0)
    assert passes_involvement(0, 0.0, 40.0)


def test_empty_core_excluded():
    preds = [
        CorePrediction.from_probabilities("b", [0.1], 0, 0),
        CorePrediction.from_probabilities("c", [0.9], 1, 80),
        CorePrediction.from_probabilities("e", [], 1, 80),
    ]
    assert preds[2].empty
    assert compute_metrics(preds).n_positive == 1
