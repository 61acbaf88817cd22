import json

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.config import ExperimentConfig, load_config
from src.data import DomainDataset, make_channel_permuted, make_shifted_gaussians, save_csv
from src.models import ModelCheckpoint
from src.numerics import InvalidInputError, Parameter
from src.train import (
    METRIC_COLUMNS,
    ProjectedSGD,
    TrainingDiverged,
    build_model,
    evaluate,
    load_model,
    make_datasets,
    sgd_step,
    train_run,
)


def small_config(**overrides):
    values = dict(classes=2, features=4, per_class=40, hidden=[8], epochs=2, batch_size=16, seed=0)
    values.update(overrides)
    return ExperimentConfig(**values)


# ----------------------------------------------------------------------
# optimizer
# ----------------------------------------------------------------------


def test_zero_gradient_leaves_parameters_unchanged():
    p = Parameter([1.0, -2.0])
    sgd_step([p], {p: np.zeros(2)}, lr=0.1, momentum=0.9)
    assert_array_equal(p.data, [1.0, -2.0])


def test_step_is_projected_onto_bounds():
    p = Parameter([1.0], bounds=(0.5, 1.0), decay=False)
    sgd_step([p], {p: np.array([100.0])}, lr=0.1)
    assert_array_equal(p.data, [0.5])
    sgd_step([p], {p: np.array([-100.0])}, lr=0.1)
    assert_array_equal(p.data, [1.0])


def test_gate_at_upper_bound_stays_there():
    p = Parameter([1.0], bounds=(0.5, 1.0), decay=False)
    sgd_step([p], {p: np.array([-5.0])}, lr=0.1)
    assert p.data[0] == 1.0


def test_momentum_accumulates():
    p = Parameter([0.0])
    optimizer = ProjectedSGD([p], lr=0.1, momentum=0.5)
    optimizer.step({p: np.array([1.0])})
    optimizer.step({p: np.array([1.0])})
    assert_allclose(p.data, [-0.1 - 0.15])


def test_weight_decay_skips_normalizer_parameters():
    weight = Parameter([2.0])
    gate = Parameter([2.0], decay=False)
    sgd_step([weight, gate], {weight: np.zeros(1), gate: np.zeros(1)}, lr=0.1, weight_decay=0.5)
    assert_allclose(weight.data, [1.9])
    assert_array_equal(gate.data, [2.0])
    sgd_step([gate], {gate: np.zeros(1)}, lr=0.1, weight_decay=0.5, decay_all=True)
    assert_allclose(gate.data, [1.9])


def test_normalizer_learning_rate_scale():
    weight, gate = Parameter([1.0]), Parameter([1.0], decay=False)
    grads = {weight: np.array([1.0]), gate: np.array([1.0])}
    sgd_step([weight, gate], grads, lr=0.1, lr_scale_free=0.0)
    assert_allclose(weight.data, [0.9])
    assert_array_equal(gate.data, [1.0])


def test_non_finite_gradient_raises():
    p = Parameter([1.0])
    with pytest.raises(TrainingDiverged):
        sgd_step([p], {p: np.array([np.nan])}, lr=0.1)


def test_default_config_leaves_idle_gates_at_one():
    config = ExperimentConfig()
    model = build_model(small_config(), features=4, classes=2)
    optimizer = ProjectedSGD(
        model.parameters(), config.lr, config.momentum, config.weight_decay,
        decay_norm_params=config.decay_norm_params, norm_lr_scale=config.norm_lr_scale,
    )
    optimizer.step({p: np.zeros_like(p.data) for p in model.parameters()})
    for values in model.backbone.norms[0].gates.snapshot().values():
        assert values == [1.0] * 8


def test_non_positive_learning_rate_raises():
    with pytest.raises(InvalidInputError):
        ProjectedSGD([Parameter([1.0])], lr=0.0)


# ----------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------


def test_constant_logits_score_chance():
    config = small_config(classes=4, normalizer="bn")
    source, _ = make_datasets(config)
    model = build_model(config, source.num_features, 4)
    head = model.backbone.head
    head.weight.data = np.zeros_like(head.weight.data)
    head.bias.data = np.zeros_like(head.bias.data)
    accuracy, loss = evaluate(model, source)
    assert accuracy == pytest.approx(0.25)
    assert loss == pytest.approx(np.log(4.0))


def test_evaluation_is_repeatable():
    config = small_config()
    _, target = make_datasets(config)
    model = build_model(config, 4, 2)
    assert evaluate(model, target) == evaluate(model, target)


# ----------------------------------------------------------------------
# training runs
# ----------------------------------------------------------------------


def test_run_writes_its_artifacts(tmp_path):
    config = small_config()
    result = train_run(config, out_dir=tmp_path)
    assert list(result.metrics.columns) == METRIC_COLUMNS
    assert len(result.metrics) == 3 * config.epochs
    assert set(result.metrics["split"]) == {"train_s", "eval_s", "eval_t"}
    for name in ("config.cfg", "metrics.csv", "timings.csv", "checkpoints/epoch_002.json", "reports/epoch_002.json"):
        assert (tmp_path / name).exists(), name
    assert load_config(tmp_path / "config.cfg") == config
    records = json.loads((tmp_path / "reports" / "epoch_001.json").read_text(encoding="utf-8"))
    assert len(records) == 1
    assert_allclose(np.sum(records[0]["rho_mu_ts"], axis=1), np.ones(8), atol=1e-9)


def test_runs_are_reproducible(tmp_path):
    config = small_config()
    train_run(config, out_dir=tmp_path / "a")
    train_run(config, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "checkpoints" / "epoch_002.json").read_bytes() == \
        (tmp_path / "b" / "checkpoints" / "epoch_002.json").read_bytes()


def test_unit_gate_rn_trains_like_shared_affine_dsbn(tmp_path):
    train_run(small_config(normalizer="rn", fixed_gate=1.0), out_dir=tmp_path / "rn")
    train_run(small_config(normalizer="dsbn_shared"), out_dir=tmp_path / "dsbn")
    assert (tmp_path / "rn" / "metrics.csv").read_bytes() == (tmp_path / "dsbn" / "metrics.csv").read_bytes()


def test_target_labels_never_reach_training(tmp_path):
    config = small_config()
    source, target = make_datasets(config)
    shuffled = DomainDataset(target.features, np.random.default_rng(1).permutation(target.labels), "target")
    train_run(config, data=(source, target), out_dir=tmp_path / "a")
    train_run(config, data=(source, shuffled), out_dir=tmp_path / "b")
    for epoch in ("epoch_001.json", "epoch_002.json"):
        assert (tmp_path / "a" / "checkpoints" / epoch).read_bytes() == (tmp_path / "b" / "checkpoints" / epoch).read_bytes()


def test_learnable_gates_stay_in_bounds(tmp_path):
    train_run(small_config(epochs=3, lr=0.05), out_dir=tmp_path)
    for path in sorted((tmp_path / "checkpoints").glob("*.json")):
        checkpoint = ModelCheckpoint.model_validate_json(path.read_text(encoding="utf-8"))
        for norm in checkpoint.norms:
            for values in norm.gates.values():
                assert min(values) >= 0.5 and max(values) <= 1.0


def test_frozen_normalizer_parameters_keep_unit_gates(tmp_path):
    result = train_run(small_config(norm_lr_scale=0.0), out_dir=tmp_path)
    for values in result.model.backbone.norms[0].gates.snapshot().values():
        assert values == [1.0] * 8


def test_source_only_training_fits_separable_data(tmp_path):
    rng = np.random.default_rng(0)
    labels = np.repeat([0, 1], 100)
    centers = np.where(labels[:, None] == 0, -3.0, 3.0) * np.ones((1, 4))
    source = DomainDataset(centers + rng.normal(0, 0.5, size=(200, 4)), labels, "source")
    target = DomainDataset(centers + rng.normal(0, 0.5, size=(200, 4)) + 1.0, labels, "target")
    config = small_config(normalizer="bn", dann_lambda=0.0, epochs=10, lr=0.05)
    result = train_run(config, data=(source, target), out_dir=tmp_path)
    final = result.metrics[(result.metrics["epoch"] == 10) & (result.metrics["split"] == "eval_s")]
    assert final["accuracy"].iloc[0] >= 0.99
    assert result.metrics["domain_loss"].isna().all()


def test_source_only_on_copied_domains_scores_alike(tmp_path):
    config = small_config(dann_lambda=0.0, epochs=3, per_class=200)
    source, _ = make_datasets(config)
    target = DomainDataset(source.features.copy(), source.labels.copy(), "target")
    metrics = train_run(config, data=(source, target), out_dir=tmp_path).metrics
    last = metrics[metrics["epoch"] == 3].set_index("split")
    assert abs(last.loc["eval_s", "accuracy"] - last.loc["eval_t", "accuracy"]) <= 0.05


def test_annealed_adversarial_run(tmp_path):
    result = train_run(small_config(anneal=True, dann_lambda=0.5), out_dir=tmp_path)
    assert result.metrics["domain_loss"].dropna().size == 2


def test_divergence_is_reported_and_metrics_survive(tmp_path):
    config = small_config()
    source, target = make_datasets(config)
    features = source.features.copy()
    features[:, 0] = np.nan
    broken = DomainDataset(features, source.labels, "source")
    with pytest.raises(TrainingDiverged):
        train_run(config, data=(broken, target), out_dir=tmp_path)
    assert list(pd.read_csv(tmp_path / "metrics.csv").columns) == METRIC_COLUMNS


def test_checkpoint_loads_back(tmp_path):
    result = train_run(small_config(epochs=1), out_dir=tmp_path)
    model = load_model(tmp_path / "checkpoints" / "epoch_001.json")
    source, target = make_datasets(small_config())
    assert evaluate(model, target) == evaluate(result.model, target)
    with pytest.raises(InvalidInputError):
        load_model(tmp_path / "checkpoints" / "epoch_099.json")


def test_csv_generator_reads_both_domains(tmp_path):
    source, target = make_channel_permuted(2, 4, [1, 0, 3, 2], per_class=5)
    path = save_csv(tmp_path / "data.csv", [source, target])
    loaded_s, loaded_t = make_datasets(ExperimentConfig(generator="csv", data_path=str(path)))
    assert_array_equal(loaded_s.features, source.features)
    assert_array_equal(loaded_t.features, target.features)
    save_csv(tmp_path / "source.csv", [source])
    with pytest.raises(InvalidInputError):
        make_datasets(ExperimentConfig(generator="csv", data_path=str(tmp_path / "source.csv")))


def test_per_feature_shift_from_config():
    config = small_config(generator="shifted_gaussians", shift="5,0,0,0", scale="2")
    source, target = make_datasets(config)
    expected_s, expected_t = make_shifted_gaussians(2, 4, [5.0, 0.0, 0.0, 0.0], 2.0, per_class=40, seed=0)
    assert_array_equal(source.features, expected_s.features)
    assert_array_equal(target.features, expected_t.features)


def test_model_width_follows_data():
    model = build_model(small_config(hidden=[5, 3]), features=6, classes=3)
    assert model.backbone.spec.widths == [6, 5, 3, 3]
