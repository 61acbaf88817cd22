import json
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.analyze import (
    AnalysisReport,
    a_distance,
    channel_distance_report,
    estimate_a_distance,
    estimate_lambda,
    export_reports,
    nearest_channel_distances,
)
from src.config import ExperimentConfig
from src.data import load_csv
from src.models import DomainAdversarialNet, MlpSpec
from src.norms import DomainStats
from src.numerics import InvalidInputError, Tensor
from src.train import train_run


# ----------------------------------------------------------------------
# A-distance
# ----------------------------------------------------------------------


@pytest.mark.parametrize("error, expected", [(0.0, 2.0), (0.25, 1.0), (0.5, 0.0), (0.7, 0.0)])
def test_a_distance_from_error(error, expected):
    assert a_distance(error) == pytest.approx(expected)


def test_a_distance_rejects_rates_outside_unit_interval():
    with pytest.raises(InvalidInputError):
        a_distance(1.5)


def test_identical_feature_sets_are_indistinguishable():
    rng = np.random.default_rng(0)
    features = rng.normal(size=(2000, 8))
    shuffled = features[rng.permutation(len(features))]
    report = estimate_a_distance(features, shuffled, seed=0)
    assert report.a_distance <= 0.3


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(5))
def test_separated_feature_sets_are_distinguishable(seed):
    rng = np.random.default_rng(seed)
    features_s = rng.normal(size=(2000, 16))
    features_t = rng.normal(size=(2000, 16)) + 1.0
    assert estimate_a_distance(features_s, features_t, seed=seed).a_distance >= 1.7


def test_a_distance_is_seeded():
    rng = np.random.default_rng(1)
    features_s, features_t = rng.normal(size=(200, 3)), rng.normal(0.5, 1.0, size=(200, 3))
    first = estimate_a_distance(features_s, features_t, seed=4, epochs=3)
    second = estimate_a_distance(features_s, features_t, seed=4, epochs=3)
    assert first == second


def test_a_distance_needs_enough_examples():
    with pytest.raises(InvalidInputError):
        estimate_a_distance(np.zeros((2, 3)), np.zeros((2, 3)))


# ----------------------------------------------------------------------
# lambda
# ----------------------------------------------------------------------


def separable(seed, n=300):
    rng = np.random.default_rng(seed)
    labels = np.repeat([0, 1], n // 2)
    features = np.where(labels[:, None] == 0, -2.0, 2.0) + rng.normal(0, 0.5, size=(n, 4))
    return features, labels


def test_shared_labelling_has_low_joint_risk():
    f_s, y_s = separable(0)
    f_t, y_t = separable(1)
    assert estimate_lambda(f_s, y_s, f_t, y_t, seed=0) <= 0.05


def test_conflicting_labellings_have_high_joint_risk():
    f_s, y_s = separable(2)
    f_t, y_t = separable(3)
    risk = estimate_lambda(f_s, y_s, f_t, 1 - y_t, seed=0)
    assert abs(risk - 0.5) <= 0.15


def test_joint_risk_ignores_domain_order():
    f_s, y_s = separable(4, n=100)
    f_t, y_t = separable(5, n=100)
    y_t = np.where(np.arange(100) % 7 == 0, 1 - y_t, y_t)
    assert estimate_lambda(f_s, y_s, f_t, y_t, seed=3, epochs=5) == estimate_lambda(f_t, y_t, f_s, y_s, seed=3, epochs=5)


def test_missing_class_raises():
    f_s, y_s = separable(6, n=40)
    with pytest.raises(InvalidInputError):
        estimate_lambda(f_s, y_s, f_s[:20], y_s[:20])


# ----------------------------------------------------------------------
# channel distances
# ----------------------------------------------------------------------


def test_single_channel_distance():
    report = nearest_channel_distances((np.array([0.0]), np.array([1.0])), (np.array([3.0]), np.array([4.0])))
    assert report.distance_sum == pytest.approx(1.5)
    assert report.corresponding_ratio == 100.0
    assert report.nearest == [0]


def test_identical_statistics_match_channels():
    mu, var = np.array([0.0, 1.0, 5.0]), np.array([1.0, 1.0, 4.0])
    report = nearest_channel_distances((mu, var), (mu.copy(), var.copy()))
    assert report.distance_sum == 0.0
    assert report.corresponding_ratio == 100.0


def test_swapped_channels_never_match():
    report = nearest_channel_distances((np.array([0.0, 4.0]), np.ones(2)), (np.array([4.0, 0.0]), np.ones(2)))
    assert report.corresponding_ratio == 0.0
    assert report.nearest == [1, 0]
    assert report.distance_sum == 0.0


def test_ties_pick_the_lowest_source_index():
    report = nearest_channel_distances((np.array([1.0, -1.0]), np.ones(2)), (np.array([0.0, 0.0]), np.ones(2)))
    assert report.nearest == [0, 0]


def test_accepts_domain_stats():
    stats = DomainStats(Tensor([0.0, 2.0]), Tensor([1.0, 4.0]))
    assert nearest_channel_distances(stats, stats).corresponding_ratio == 100.0


def test_non_positive_variance_raises():
    with pytest.raises(InvalidInputError):
        nearest_channel_distances((np.zeros(2), np.array([1.0, 0.0])), (np.zeros(2), np.ones(2)))


def test_channel_distances_match_brute_force():
    rng = np.random.default_rng(123)
    for _ in range(100):
        c = int(rng.integers(1, 65))
        mu_s, var_s = rng.normal(size=c), rng.uniform(0.1, 3.0, size=c)
        mu_t, var_t = rng.normal(size=c), rng.uniform(0.1, 3.0, size=c)
        sig_s, sig_t = mu_s / np.sqrt(var_s), mu_t / np.sqrt(var_t)
        nearest, picked = [], []
        for i in range(c):
            best = 0
            for j in range(1, c):
                if abs(sig_t[i] - sig_s[j]) < abs(sig_t[i] - sig_s[best]):
                    best = j
            nearest.append(best)
            picked.append(abs(sig_t[i] - sig_s[best]))
        report = nearest_channel_distances((mu_s, var_s), (mu_t, var_t))
        assert report.nearest == nearest
        assert report.distance_sum == math.fsum(picked)
        assert report.corresponding_ratio == pytest.approx(100.0 * sum(i == n for i, n in enumerate(nearest)) / c)


def test_pooled_layers_are_skipped():
    net = DomainAdversarialNet(MlpSpec(widths=[3, 4, 5, 2], normalizer=["bn", "rn"]), seed=0)
    reports = channel_distance_report(net)
    assert [r.layer for r in reports] == [1]


# ----------------------------------------------------------------------
# export
# ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("run")
    config = ExperimentConfig(classes=2, features=4, per_class=40, hidden=[8], epochs=1, batch_size=16,
                              norm_lr_scale=0.0)
    train_run(config, out_dir=run_dir)
    return run_dir


def test_export_writes_analysis(trained_run, tmp_path):
    analysis = export_reports(trained_run, out_dir=tmp_path)
    stored = AnalysisReport.model_validate_json((tmp_path / "analysis.json").read_text(encoding="utf-8"))
    assert stored == analysis
    assert analysis.checkpoints == ["epoch_001"]
    assert len(analysis.gates) == 1


def test_untrained_gates_export_as_one(trained_run, tmp_path):
    analysis = export_reports(trained_run, theory=False, out_dir=tmp_path)
    for values in analysis.gates[0].gates.values():
        assert values == [1.0] * 8
    assert all(mean == 1.0 for mean in analysis.gates[0].means.values())


def test_exported_correlations_are_row_stochastic(trained_run, tmp_path):
    analysis = export_reports(trained_run, theory=False, out_dir=tmp_path)
    record = analysis.correlations["epoch_001"][0]
    for rho in (record.rho_mu_ts, record.rho_var_ts, record.rho_mu_st, record.rho_var_st):
        assert_allclose(np.sum(rho, axis=1), np.ones(8), atol=1e-6)


def test_export_theory_terms(trained_run, tmp_path):
    theory = export_reports(trained_run, out_dir=tmp_path).theory
    assert 0.0 <= theory.a_distance <= 2.0
    assert theory.bound == pytest.approx(theory.source_error + theory.a_distance / 2.0 + theory.lambda_risk)


def test_export_writes_bottleneck_features(trained_run, tmp_path):
    export_reports(trained_run, theory=False, out_dir=tmp_path)
    source, target = load_csv(tmp_path / "features.csv")
    assert source.num_features == 8
    assert len(source) == len(target) == 80


def test_export_without_checkpoints_raises(tmp_path):
    with pytest.raises(InvalidInputError):
        export_reports(tmp_path)


def test_export_into_the_run_directory(trained_run):
    export_reports(trained_run, theory=False)
    payload = json.loads((trained_run / "analysis.json").read_text(encoding="utf-8"))
    assert payload["run"] == str(trained_run)
