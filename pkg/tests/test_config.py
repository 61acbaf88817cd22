import pytest

from src.config import DEFAULT_CONFIG, ConfigError, ExperimentConfig, dump_config, load_config, parse_config


def write(tmp_path, text, name="exp.cfg"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_default_config_loads():
    config = load_config(DEFAULT_CONFIG)
    assert config.normalizer == "rn"
    assert config.hidden == [32, 16]
    assert config.fixed_gate is None


def test_values_and_lists_are_parsed(tmp_path):
    path = write(tmp_path, "# comment\nnormalizer=bn\nhidden=8, 4\nlr=0.05\nanneal=true\n")
    config = load_config(path)
    assert config.normalizer == "bn"
    assert config.hidden == [8, 4]
    assert config.lr == 0.05
    assert config.anneal is True


@pytest.mark.parametrize("value", ["", "learnable", "none"])
def test_blank_fixed_gate_means_learnable(tmp_path, value):
    assert load_config(write(tmp_path, f"fixed_gate={value}\n")).fixed_gate is None


def test_unknown_key_reports_file_and_line(tmp_path):
    path = write(tmp_path, "normalizer=rn\nbogus=1\n")
    with pytest.raises(ConfigError) as e:
        load_config(path)
    assert str(e.value).startswith(f"{path}:2: bogus:")
    assert e.value.line == 2


def test_invalid_value_reports_file_and_line(tmp_path):
    path = write(tmp_path, "epochs=3\n\nlr=-1\n")
    with pytest.raises(ConfigError) as e:
        load_config(path)
    assert e.value.field == "lr"
    assert str(e.value).startswith(f"{path}:3: lr:")


def test_unknown_normalizer_is_rejected(tmp_path):
    with pytest.raises(ConfigError) as e:
        load_config(write(tmp_path, "normalizer=groupnorm\n"))
    assert e.value.field == "normalizer"


def test_line_without_equals_is_rejected(tmp_path):
    with pytest.raises(ConfigError) as e:
        load_config(write(tmp_path, "epochs=2\njust words\n"))
    assert e.value.line == 2


def test_missing_file_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")


def test_csv_generator_needs_a_path():
    with pytest.raises(ConfigError):
        parse_config({"generator": "csv"})


def test_overrides_win(tmp_path):
    config = load_config(write(tmp_path, "seed=1\nepochs=4\n"), seed=7)
    assert (config.seed, config.epochs) == (7, 4)


def test_dump_and_load_round_trip(tmp_path):
    config = ExperimentConfig(normalizer="autodial", hidden=[6, 3], fixed_gate=0.75, shift=0.25, anneal=True)
    path = dump_config(config, tmp_path / "config.cfg")
    assert load_config(path) == config
    assert b"\r\n" not in path.read_bytes()


def test_permutation_indices():
    assert ExperimentConfig(features=4).permutation_indices() == [1, 0, 3, 2]
    assert ExperimentConfig(features=3, permutation="identity").permutation_indices() == [0, 1, 2]
    assert ExperimentConfig(features=3, permutation="2,0,1").permutation_indices() == [2, 0, 1]


def test_malformed_permutation_is_rejected():
    with pytest.raises(ValueError):
        ExperimentConfig(permutation="a,b")


def test_norm_options_carry_the_fixed_gate():
    assert ExperimentConfig(fixed_gate=0.5).norm_options()["fixed_gate"] == 0.5
    assert "fixed_gate" not in ExperimentConfig().norm_options()


def test_shift_and_scale_accept_one_value_or_one_per_feature(tmp_path):
    config = load_config(write(tmp_path, "features=3\nshift=5,0,0\nscale=2\n"))
    assert config.shift == [5.0, 0.0, 0.0]
    assert config.per_feature("shift") == [5.0, 0.0, 0.0]
    assert config.per_feature("scale") == 2.0
    assert ExperimentConfig(shift=0.5).shift == [0.5]


def test_shift_with_wrong_length_is_rejected(tmp_path):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, "features=4\nshift=1,2\n"))


def test_normalizer_parameters_are_not_decayed_by_default():
    assert ExperimentConfig().decay_norm_params is False
    assert load_config(DEFAULT_CONFIG).decay_norm_params is False
