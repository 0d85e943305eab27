from __future__ import annotations

import json

import pytest

from councilsim.config import ExperimentConfig, apply_overrides, config_hash, default_document, load_config
from councilsim.core import State
from councilsim.errors import ConfigError


def test_defaults_load(config):
    assert [e.name for e in config.evaluators] == [
        "Conservative", "Innovator", "Pragmatist", "Perfectionist", "Minimalist", "Driver", "Guardian",
    ]
    assert {c.option for c in config.champions} == {"A", "B", "C"}
    assert config.runs == {State.A: 25, State.B: 35}
    innovator = next(e for e in config.evaluators if e.name == "Innovator")
    assert innovator.primary == "Risk Tolerance"  # 0.9 / 0.9 tie settled by tie_break


def test_state_a_is_homogeneous(config):
    assert len({s.model for s in config.models[State.A].entries.values()}) == 1
    assert len({s.model for s in config.models[State.B].entries.values()}) == 7


def test_file_layering(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"master_seed": 7, "runs": {"A": 3}, "analysis": {"alpha": 0.01}}))
    cfg = load_config(path)
    assert cfg.master_seed == 7 and cfg.runs[State.A] == 3 and cfg.runs[State.B] == 35
    assert cfg.analysis.alpha == 0.01 and cfg.analysis.exact_max_n == 12


def test_overrides_parse_json_values(config):
    cfg = load_config(overrides=["analysis.exact_max_n=20", "runs.B=4", "analysis.borda_points=[3,1,0]"])
    assert cfg.analysis.exact_max_n == 20 and cfg.runs[State.B] == 4
    assert cfg.analysis.borda_points == (3, 1, 0)


@pytest.mark.parametrize("override", ["analysis.alpah=0.1", "nonsense=1", "novalue"])
def test_unknown_override_rejected(override):
    with pytest.raises(ConfigError):
        load_config(overrides=[override])


def test_unknown_file_key_rejected(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"analysis": {"alhpa": 0.1}}))
    with pytest.raises(ConfigError):
        load_config(path)


def test_state_a_must_share_one_model():
    doc = default_document()
    doc["models"]["A"] = {"*": {"model": "x", "endpoint": "local"}, "Guardian": {"model": "y", "endpoint": "local"}}
    with pytest.raises(ConfigError):
        ExperimentConfig.from_document(doc)


def test_state_c_takes_no_models_or_runs():
    doc = default_document()
    doc["runs"]["C"] = 3
    with pytest.raises(ConfigError):
        ExperimentConfig.from_document(doc)
    doc = default_document()
    doc["models"]["C"] = doc["models"]["B"]
    with pytest.raises(ConfigError):
        ExperimentConfig.from_document(doc)


def test_unknown_endpoint_rejected():
    doc = default_document()
    doc["models"]["A"] = {"*": {"model": "x", "endpoint": "mars"}}
    with pytest.raises(ConfigError):
        ExperimentConfig.from_document(doc)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.json")


def test_hash_ignores_execution_settings():
    doc = default_document()
    base = config_hash(doc)
    assert config_hash(apply_overrides(doc, ["parallelism.runs=4", "cache_dir=\"/tmp/x\""])) == base
    assert config_hash(apply_overrides(doc, ["master_seed=1"])) != base


def test_scenario_lookup(config):
    assert config.scenario("child_welfare").variant == "baseline"
    assert config.scenario("child_welfare:rebalanced").variant == "rebalanced"
    assert config.scenario("housing").k == 3
    with pytest.raises(ConfigError):
        config.scenario("atlantis")
