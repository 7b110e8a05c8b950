import sys

import numpy as np
import pytest

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from importlib import resources

from isacslam.config import (ConfigError, bundled_scenarios, canonical_strategy, load_scenario,
                             parse_scenario)


def _raw(name):
    return tomllib.loads((resources.files("isacslam") / "scenarios" / f"{name}.toml").read_text())


def test_bundled_scenarios_load():
    names = bundled_scenarios()
    assert {"indoor_s1", "indoor_s5", "outdoor", "indoor_beam_5ue"} <= set(names)
    for n in names:
        load_scenario(n)


def test_indoor_room_anchors():
    cfg = load_scenario("indoor_s1")
    assert cfg.ues.count == 3 and cfg.n_steps == 150
    a = cfg.anchors()
    assert np.allclose(a.vas, [[-10, 0], [0, 10], [0, -10], [10, 0]])


def test_outdoor_anchors():
    cfg = load_scenario("outdoor")
    assert cfg.ues.count == 5
    assert np.allclose(cfg.anchors().vas, [[-100.5, 45], [-28.5, 45]])


def test_missing_field_is_named():
    data = _raw("indoor_s1")
    del data["ues"]["count"]
    with pytest.raises(ConfigError, match=r"ues\.count"):
        parse_scenario(data)
    data = _raw("indoor_s1")
    del data["schema_version"]
    with pytest.raises(ConfigError, match="schema_version"):
        parse_scenario(data)


def test_unknown_key_rejected():
    data = _raw("indoor_s1")
    data["sensors"]["sigma_angel"] = 0.1
    with pytest.raises(ConfigError, match="sigma_angel"):
        parse_scenario(data)


def test_value_checks():
    data = _raw("indoor_s1")
    data["ues"]["motion"]["step_range"] = [0.5, 0.3]
    with pytest.raises(ConfigError, match="step_range"):
        parse_scenario(data)
    data = _raw("indoor_s1")
    data["run"] = {"mode": "solo"}
    with pytest.raises(ConfigError, match="run.mode"):
        parse_scenario(data)


def test_overrides_and_strategy_names(tmp_path):
    cfg = load_scenario("indoor_s1")
    assert cfg.with_overrides(run={"mode": "single"}).run.mode == "single"
    with pytest.raises(ConfigError):
        cfg.with_overrides(run={"runs": 0})
    assert canonical_strategy("management+tracking") == "management"
    with pytest.raises(ConfigError):
        canonical_strategy("greedy")
    with pytest.raises(ConfigError, match="unknown scenario"):
        load_scenario("no_such_scenario")
    bad = tmp_path / "bad.toml"
    bad.write_text("schema_version = [")
    with pytest.raises(ConfigError, match="cannot parse"):
        load_scenario(str(bad))
