import json

import pytest

from img_vmr.config import (ImportanceConfig, LossWeights, ModelConfig, SyntheticSpec, from_dict,
                            load_json, load_model_config, to_dict)
from img_vmr.errors import ConfigError


def test_defaults():
    cfg = ModelConfig()
    assert (cfg.d, cfg.max_frames, cfg.lr, cfg.epochs, cfg.batch_size) == (128, 128, 5e-4, 100, 16)
    assert cfg.kernel_bank == (1, 3, 5)
    assert (cfg.importance.gamma, cfg.importance.eps_min, cfg.importance.eps_max) == (3.0, 0.2, 0.8)
    lw = cfg.loss
    assert (lw.lambda1, lw.lambda2, lw.lambda3, lw.tau) == (5.0, 10.0, 0.5, 2.0)


def test_round_trip_through_json(tmp_path):
    cfg = ModelConfig(d=16, heads=2, kernel_bank=(1, 3), importance=ImportanceConfig(gamma=2.0))
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(to_dict(cfg)))
    assert load_json(ModelConfig, path) == cfg


def test_nested_dicts_become_subconfigs():
    cfg = from_dict(ModelConfig, {"importance": {"gamma": 5.0}, "loss": {"tau": 1.0}})
    assert isinstance(cfg.importance, ImportanceConfig) and cfg.importance.gamma == 5.0
    assert isinstance(cfg.loss, LossWeights) and cfg.loss.tau == 1.0


@pytest.mark.parametrize("data", [
    {"dd": 3},
    {"importance": {"gama": 1.0}},
    {"loss": {"lambda4": 1.0}},
])
def test_unknown_keys_rejected(data):
    with pytest.raises(ConfigError, match="unknown"):
        from_dict(ModelConfig, data)


@pytest.mark.parametrize("kwargs", [
    {"d": 0}, {"d": 7, "heads": 7}, {"d": 10, "heads": 4}, {"kernel_bank": (1, 2)},
    {"kernel_bank": ()}, {"conv_kernel": 4}, {"lr": 0.0}, {"epochs": 0},
    {"branch_for_inference": "text"}, {"dropout": 1.0}, {"dropout": -0.1},
])
def test_invalid_model_config(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig(**kwargs)


@pytest.mark.parametrize("kwargs", [
    {"gamma": 0.0}, {"eps_min": 0.5}, {"eps_min": 0.2, "eps_max": 1.2}, {"warmup_epochs": 0},
])
def test_invalid_importance_config(kwargs):
    with pytest.raises(ConfigError):
        ImportanceConfig(**kwargs)


@pytest.mark.parametrize("kwargs", [
    {"carrier_mix": (0.5, 0.5, 0.5, 0.0)}, {"carrier_mix": (1.0, 0.0, 0.0)},
    {"codebook_size": 1}, {"noise_std": -1.0}, {"n_test": 3000}, {"T": 1},
])
def test_invalid_synthetic_spec(kwargs):
    with pytest.raises(ConfigError):
        SyntheticSpec(**kwargs)


def test_invalid_json_is_config_error(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_json(ModelConfig, path)


def test_seed_env_override(tmp_path, monkeypatch):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"seed": 3}))
    assert load_model_config(path).seed == 3
    monkeypatch.setenv("IMG_SEED", "11")
    assert load_model_config(path).seed == 11
    monkeypatch.setenv("IMG_SEED", "eleven")
    with pytest.raises(ConfigError):
        load_model_config(path)
