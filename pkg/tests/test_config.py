import json

import pytest

from tfno.config import ConfigError, default_dict, from_dict, load


def test_defaults_validate():
    rc = from_dict({})
    assert rc.grid.nx == 32
    assert rc.operator.factorization == "tt"
    assert rc.training.seed == rc.seed


def test_unknown_top_level_key_rejected():
    with pytest.raises(ConfigError, match="unknown keys"):
        from_dict({"bogus": 1})


def test_unknown_nested_key_rejected():
    with pytest.raises(ConfigError, match="config.operator"):
        from_dict({"operator": {"flux_capacitor": True}})


def test_type_errors_rejected():
    with pytest.raises(ConfigError):
        from_dict({"seed": "not-a-number"})
    with pytest.raises(ConfigError):
        from_dict({"grid": {"nx": 31.5}})
    with pytest.raises(ConfigError):
        from_dict({"training": {"fractions": [0.5, 0.5]}})


def test_schema_guard_runs_before_compute():
    with pytest.raises(ConfigError):
        from_dict({"grid": {"nx": 12}})  # not a power of two


def test_seed_threads_into_training():
    rc = from_dict({"seed": 777})
    assert rc.training.seed == 777


def test_partial_override_keeps_other_defaults():
    rc = from_dict({"operator": {"d_v": 6}})
    assert rc.operator.d_v == 6
    assert rc.operator.layers == default_dict()["operator"]["layers"]


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        load(tmp_path / "nope.json")


def test_load_invalid_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="valid JSON"):
        load(p)


def test_loss_weights_validated():
    with pytest.raises(ConfigError):
        from_dict({"training": {"loss": {"approximation": 0.0, "reconstruction": 0.5}}})


def test_round_trip_through_json(tmp_path):
    d = default_dict()
    d["seed"] = 5
    p = tmp_path / "c.json"
    p.write_text(json.dumps(d))
    rc = load(p)
    assert rc.seed == 5
    assert rc.raw["seed"] == 5
