import json

import pytest

from v2m.config import (
    ConfigError,
    RunConfig,
    env_overrides,
    load_config_file,
    resolve_config,
)


def write_config(tmp_path, doc):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


def test_defaults():
    config = resolve_config()
    assert config == RunConfig()
    assert config.lambda_weight == 0.4
    assert config.warmup_steps == 4000
    assert (config.beta1, config.beta2) == (0.9, 0.98)


def test_file_overrides_defaults(tmp_path):
    path = write_config(tmp_path, {"epochs": 3, "lr": 0.5, "test_mode": True})
    config = resolve_config(config_path=path)
    assert config.epochs == 3
    assert config.lr == 0.5
    assert config.test_mode is True
    assert config.seed == 0


def test_env_overrides_file(tmp_path):
    path = write_config(tmp_path, {"epochs": 3})
    config = resolve_config(config_path=path,
                            environ={"V2M_EPOCHS": "7", "V2M_DROPOUT": "0.2"})
    assert config.epochs == 7
    assert config.dropout == 0.2


def test_flags_override_env_and_file(tmp_path):
    path = write_config(tmp_path, {"epochs": 3, "seed": 1})
    config = resolve_config(
        flag_values={"epochs": 9, "seed": None},
        config_path=path,
        environ={"V2M_EPOCHS": "7"},
    )
    assert config.epochs == 9  # flag wins
    assert config.seed == 1    # None flag defers to the file


def test_unknown_file_key_rejected(tmp_path):
    path = write_config(tmp_path, {"epoch": 3})
    with pytest.raises(ConfigError, match="unknown config keys.*epoch"):
        load_config_file(path)


def test_file_must_be_json_object(tmp_path):
    path = tmp_path / "config.json"
    path.write_text("[1, 2]", encoding="utf-8")
    with pytest.raises(ConfigError, match="JSON object"):
        load_config_file(path)
    path.write_text("{nope", encoding="utf-8")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config_file(path)


def test_coercion_errors_name_the_source(tmp_path):
    path = write_config(tmp_path, {"epochs": "many"})
    with pytest.raises(ConfigError, match="epochs must be a int"):
        load_config_file(path)
    with pytest.raises(ConfigError, match="V2M_SEED"):
        env_overrides({"V2M_SEED": "1.5"})
    with pytest.raises(ConfigError, match="test_mode must be a boolean"):
        env_overrides({"V2M_TEST_MODE": "maybe"})


def test_env_bool_and_int_coercion():
    overrides = env_overrides({"V2M_TEST_MODE": "yes", "V2M_BATCH_SIZE": "4"})
    assert overrides == {"test_mode": True, "batch_size": 4}
    assert env_overrides({}) == {}


def test_unknown_flag_field_rejected():
    with pytest.raises(ConfigError, match="unknown config field"):
        resolve_config(flag_values={"epoch": 3})


@pytest.mark.parametrize("field,value,message", [
    ("epochs", 0, "epochs"),
    ("batch_size", 0, "batch_size"),
    ("lambda_weight", 1.5, "lambda_weight"),
    ("seed", -1, "seed"),
    ("t_max", 0, "t_max"),
    ("regressor_kind", "rnn", "regressor_kind"),
    ("key", "H:major", "key"),
])
def test_validation_failures(field, value, message):
    with pytest.raises(ConfigError, match=message):
        resolve_config(flag_values={field: value})


def test_validation_checks_head_divisibility():
    with pytest.raises(ConfigError, match="divisible"):
        resolve_config(flag_values={"d_model": 30, "n_heads": 4})


def test_derived_configs():
    config = resolve_config(flag_values={
        "d_model": 32, "n_heads": 4, "n_layers": 2, "d_ff": 64,
        "max_rel_dist": 8, "dropout": 0.0, "t_max": 20,
        "lr": 0.5, "warmup_steps": 10, "lambda_weight": 0.7,
        "regressor_kind": "gru", "regressor_hidden": 12, "regressor_layers": 1,
    })
    mc = config.model_config(d_sem=4)
    assert (mc.d_model, mc.n_heads, mc.n_layers_enc, mc.n_layers_dec) == (32, 4, 2, 2)
    assert (mc.max_len, mc.max_rel_dist, mc.d_sem) == (20, 8, 4)
    assert config.model_config(d_sem=4, max_len=50).max_len == 50
    spec = config.optimizer_spec()
    assert (spec.base_lr, spec.warmup_steps) == (0.5, 10)
    assert config.loss_weights().lambda_weight == 0.7
    rc = config.regressor_config(input_dim=12)
    assert (rc.kind, rc.input_dim, rc.hidden, rc.layers) == ("gru", 12, 12, 1)
