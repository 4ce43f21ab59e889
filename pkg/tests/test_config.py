import json
from pathlib import Path

import pytest

from lspd import config

CONFIGS = sorted((Path(__file__).parent.parent / "configs").glob("*.json"))


@pytest.mark.parametrize("path", CONFIGS, ids=lambda p: p.stem)
def test_shipped_configs_parse(path):
    cfg = config.load(path)
    assert cfg.raw["name"] == path.stem


def test_unknown_key_rejected():
    with pytest.raises(config.ConfigError, match="model"):
        config.parse({"model": {"variant": "lspd", "depth": 3}})
    with pytest.raises(config.ConfigError):
        config.parse({"bogus": 1})


def test_bad_values_rejected():
    with pytest.raises(config.ConfigError):
        config.parse({"model": {"variant": "lspd", "K": 6, "m": 4, "schedule": "sideways"}})
    with pytest.raises(config.ConfigError):
        config.parse({"noise": {"I0": -1}})


def test_overrides():
    cfg = config.parse({"model": {"variant": "lpd"}, "theory": {"n": 64, "d": 8}}, seed=7, variant="lspd_vr")
    assert cfg.model.variant == "lspd_vr"
    assert cfg.train.seed == 7 and cfg.dataset["seed"] == 7 and cfg.theory.base_seed == 7


def test_unreadable(tmp_path):
    (tmp_path / "x.json").write_text("{not json")
    with pytest.raises(config.ConfigError, match="JSON"):
        config.load(tmp_path / "x.json")
    with pytest.raises(config.ConfigError, match="cannot read"):
        config.load(tmp_path / "missing.json")


def test_schema_documented_keys_match():
    # every top-level key used by a shipped config is part of the schema
    keys = set().union(*(json.loads(p.read_text()).keys() for p in CONFIGS))
    assert keys <= set(config.SCHEMA["properties"])
