import json

import pytest

from sigmap import config
from sigmap.config import ConfigError, ScenarioConfig


def test_defaults_validate():
    assert config.validate(ScenarioConfig()) == []


def test_toml_and_json_agree(tmp_path):
    (tmp_path / "a.toml").write_text('name = "x"\nseed = 3\n[synth]\nn_samples = 10\n[[synth.stations]]\nx_m = 5.0\n')
    a = config.load(tmp_path / "a.toml")
    (tmp_path / "a.json").write_text(a.to_json())
    b = config.load(tmp_path / "a.json")
    assert a == b and a.synth.stations[0].x_m == 5.0 and a.seed == 3


def test_unknown_keys_and_bad_values_are_reported():
    with pytest.raises(ConfigError) as e:
        config.from_dict({"synth": {"n_samplez": 3, "default_ple": 9.0}, "granularity": "region"})
    text = str(e.value)
    assert "n_samplez" in text and "default_ple" in text and "granularity" in text
    with pytest.raises(ConfigError):
        config.from_dict({"seed": "zero"})


def test_overrides():
    cfg = config.with_overrides(ScenarioConfig(), **{"quality.kind": "bars", "seed": 4, "target.kind": None})
    assert cfg.quality.kind == "bars" and cfg.seed == 4 and cfg.target.kind == "uniform"
    with pytest.raises(ConfigError):
        config.with_overrides(ScenarioConfig(), **{"quality.kind": "loud"})


def test_digest_ignores_execution_settings():
    a = ScenarioConfig()
    assert config.with_overrides(a, threads=8, out="/tmp/x").digest() == a.digest()
    assert config.with_overrides(a, seed=1).digest() != a.digest()
    assert config.effective_threads(3) == 3 and config.effective_threads(0) >= 1
    json.loads(a.to_json())


@pytest.mark.parametrize("name", ["base", "quality", "reweight", "shapley"])
def test_shipped_configs_load(name):
    from pathlib import Path
    config.load(Path(__file__).resolve().parents[1] / "configs" / f"{name}.toml")
