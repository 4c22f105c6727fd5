"""Configuration document: strict parsing and lossless resolution."""

import json

import pytest

from mpdrive.config import (ConfigError, RunConfig, config_from_dict,
                            load_config)


def test_defaults_round_trip():
    cfg = RunConfig()
    again = config_from_dict(json.loads(cfg.resolved_json()))
    assert again == cfg


def test_custom_round_trip():
    cfg = config_from_dict({
        "seed": 5,
        "data": {"n_cars": 12, "history": 3, "road_length_m": 120.0},
        "model": {"channels": [4, 8], "strides": [1, 2], "nz": 2},
        "policy": {"steps": 7},
    })
    assert cfg.seed == 5
    assert cfg.data.n_cars == 12
    assert cfg.model.channels == (4, 8)
    assert config_from_dict(json.loads(cfg.resolved_json())) == cfg


def test_partial_document_fills_defaults():
    cfg = config_from_dict({"data": {"n_cars": 9}})
    assert cfg.data.n_cars == 9
    assert cfg.data.history == RunConfig().data.history
    assert cfg.eval == RunConfig().eval


def test_model_inherits_data_history():
    cfg = config_from_dict({"data": {"history": 6}})
    assert cfg.model.history == 6


def test_history_under_model_rejected():
    with pytest.raises(ConfigError, match="under 'data'"):
        config_from_dict({"model": {"history": 6}})


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="n_car"):
        config_from_dict({"data": {"n_car": 10}})


def test_unknown_section_rejected():
    with pytest.raises(ConfigError, match="unknown section"):
        config_from_dict({"polcy": {}})


def test_non_integer_seed_rejected():
    with pytest.raises(ConfigError, match="seed"):
        config_from_dict({"seed": "0"})


def test_section_must_be_object():
    with pytest.raises(ConfigError, match="must be an object"):
        config_from_dict({"data": 3})


def test_invalid_field_value_reported_with_section():
    with pytest.raises(ConfigError, match="model"):
        config_from_dict({"model": {"channels": [4, 8], "strides": [1]}})


def test_eval_mode_validated():
    with pytest.raises(ConfigError, match="eval"):
        config_from_dict({"eval": {"mode": "greedy"}})


def test_geometry_uses_configured_road_length():
    cfg = config_from_dict({"data": {"road_length_m": 160.0}})
    assert cfg.geometry().road_length_m == 160.0


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.json")


def test_load_config_invalid_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(p)
