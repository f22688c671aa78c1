import math

import numpy as np
import pytest
from scipy import stats as sps

from fedmeta.errors import DomainError, PairingError
from fedmeta.metrics import ScoredPredictions
from fedmeta.stats import bootstrap_se_p_value, compare_bootstrap_ttest, t_two_sided_p


def noisy_predictions(n=200, seed=0, noise=1.0):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    return labels, labels + rng.normal(0, noise, n)


def test_identical_predictions_give_p_one():
    labels, scores = noisy_predictions()
    a = ScoredPredictions(scores, labels)
    res = compare_bootstrap_ttest(a, a, replicates=200, seed=1)
    assert res.p_value == 1.0
    assert res.t_statistic == 0.0
    assert not res.significant
    assert not np.any(res.bootstrap_diffs)


def test_grossly_different_models_are_significant():
    rng = np.random.default_rng(2)
    labels = rng.integers(0, 2, 300)
    good = ScoredPredictions(labels + rng.normal(0, 0.05, 300), labels)
    random = ScoredPredictions(rng.random(300), labels)
    res = compare_bootstrap_ttest(good, random, replicates=1000, seed=3)
    assert res.p_value < 0.001
    assert res.significant
    assert res.auroc_a == 1.0


def test_fixed_seed_gives_identical_result():
    labels, s1 = noisy_predictions(seed=4)
    _, s2 = noisy_predictions(seed=5)
    a, b = ScoredPredictions(s1, labels), ScoredPredictions(s2, labels)
    assert compare_bootstrap_ttest(a, b, 100, seed=6) == compare_bootstrap_ttest(a, b, 100, seed=6)
    assert compare_bootstrap_ttest(a, b, 100, seed=6) != compare_bootstrap_ttest(a, b, 100, seed=7)


def test_t_statistic_follows_stated_formula():
    labels, s1 = noisy_predictions(seed=8)
    _, s2 = noisy_predictions(seed=9, noise=1.5)
    res = compare_bootstrap_ttest(ScoredPredictions(s1, labels), ScoredPredictions(s2, labels), 300, seed=0)
    d = res.bootstrap_diffs
    expected_t = d.mean() / (d.std(ddof=1) / math.sqrt(d.size))
    assert res.t_statistic == pytest.approx(expected_t, rel=1e-12)
    assert res.p_value == pytest.approx(2 * sps.t.sf(abs(expected_t), d.size - 1), rel=1e-8, abs=1e-300)


def test_supplementary_p_uses_replicate_sd():
    labels, s1 = noisy_predictions(seed=8)
    _, s2 = noisy_predictions(seed=9, noise=1.5)
    res = compare_bootstrap_ttest(ScoredPredictions(s1, labels), ScoredPredictions(s2, labels), 300, seed=0)
    d = res.bootstrap_diffs
    t = d.mean() / d.std(ddof=1)
    assert bootstrap_se_p_value(res) == pytest.approx(2 * sps.t.sf(abs(t), d.size - 1), rel=1e-9)
    assert bootstrap_se_p_value(res) >= res.p_value


@pytest.mark.parametrize("t,df,p", [
    (0.0, 10, 1.0),
    (2.228138851986274, 10, 0.05),   # textbook t_{0.975, 10}
    (1.962341461, 999, 0.05),
    (2.580759637267628, 999, 0.01),
    (12.7062047361747, 1, 0.05),
])
def test_t_distribution_known_quantiles(t, df, p):
    assert t_two_sided_p(t, df) == pytest.approx(p, rel=1e-6)
    assert t_two_sided_p(-t, df) == pytest.approx(p, rel=1e-6)


def test_infinite_t_has_zero_p():
    assert t_two_sided_p(math.inf, 5) == 0.0


def test_unpaired_inputs_rejected():
    labels, s = noisy_predictions(50)
    a = ScoredPredictions(s, labels)
    with pytest.raises(PairingError):
        compare_bootstrap_ttest(a, ScoredPredictions(s[:-1], labels[:-1]))
    with pytest.raises(PairingError):
        compare_bootstrap_ttest(a, ScoredPredictions(s, 1 - labels))


def test_too_few_replicates_rejected():
    labels, s = noisy_predictions(50)
    a = ScoredPredictions(s, labels)
    with pytest.raises(DomainError):
        compare_bootstrap_ttest(a, a, replicates=1)


def test_single_class_resamples_are_redrawn():
    # one positive in 30: many resamples miss it and must be redrawn
    labels = np.zeros(30, dtype=int)
    labels[0] = 1
    rng = np.random.default_rng(0)
    a = ScoredPredictions(rng.random(30), labels)
    b = ScoredPredictions(rng.random(30), labels)
    res = compare_bootstrap_ttest(a, b, replicates=50, seed=2)
    assert np.all(np.isfinite(res.bootstrap_diffs))


def test_result_serializes():
    labels, s = noisy_predictions(60)
    res = compare_bootstrap_ttest(ScoredPredictions(s, labels), ScoredPredictions(-s, labels), 20, seed=0)
    d = res.to_dict()
    assert set(d) == {"auroc_a", "auroc_b", "t_statistic", "p_value", "significant", "replicates"}
    assert d["replicates"] == 20
