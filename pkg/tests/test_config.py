"""Run config validation: strict keys, mode exclusivity, resolution."""

import json
from pathlib import Path

import pytest

from storymend.config import build_suite, config_from_dict, load_config
from storymend.errors import ConfigError

DEMO = Path(__file__).parent.parent / "demo"


def minimal_doc():
    return {"mock": {"scenario": str(DEMO / "scenario.json")}}


def test_minimal_mock_config():
    config = config_from_dict(minimal_doc())
    assert config.director_config().tau == 90.0
    assert config.scale_controller().scale == 0.37
    suite = build_suite(config)
    assert suite.embedder.dim == 32


def test_unknown_top_level_key_rejected():
    with pytest.raises(ConfigError, match="unknown keys"):
        config_from_dict({**minimal_doc(), "surprise": 1})


def test_unknown_nested_keys_rejected():
    with pytest.raises(ConfigError, match="director"):
        config_from_dict({**minimal_doc(), "director": {"tau": 90, "typo": 1}})
    with pytest.raises(ConfigError, match="controller"):
        config_from_dict({**minimal_doc(), "controller": {"sdep": 0.08}})
    with pytest.raises(ConfigError, match="mock"):
        config_from_dict({"mock": {"scenario": "x", "extra": 2}})


def test_exactly_one_backend_mode():
    with pytest.raises(ConfigError, match="exactly one"):
        config_from_dict({})
    with pytest.raises(ConfigError, match="exactly one"):
        config_from_dict({
            "mock": {"scenario": "s.json"},
            "backends": {n: {"base_url": "http://x"} for n in ("vlm", "generator", "editor", "embedder", "segmenter")},
        })


def test_backends_require_all_five():
    with pytest.raises(ConfigError, match="backends.editor"):
        config_from_dict({"backends": {
            "vlm": {"base_url": "http://x"},
            "generator": {"base_url": "http://x"},
            "embedder": {"base_url": "http://x"},
            "segmenter": {"base_url": "http://x"},
        }})
    with pytest.raises(ConfigError, match="base_url"):
        config_from_dict({"backends": {
            **{n: {"base_url": "http://x"} for n in ("vlm", "generator", "editor", "embedder")},
            "segmenter": {"timeout_s": 3},
        }})


def test_invalid_director_values_rejected():
    with pytest.raises(ConfigError, match="director"):
        config_from_dict({**minimal_doc(), "director": {"tau": 120}})
    with pytest.raises(ConfigError, match="controller"):
        config_from_dict({**minimal_doc(), "controller": {"scale": 1.5}})


def test_relative_paths_resolve_against_config_dir(tmp_path):
    scenario = json.loads((DEMO / "scenario.json").read_text())
    (tmp_path / "sc.json").write_text(json.dumps(scenario))
    (tmp_path / "cfg.json").write_text(json.dumps({"mock": {"scenario": "sc.json"}}))
    config = load_config(tmp_path / "cfg.json")
    engine = config.engine_dict()
    assert Path(engine["mock"]["scenario"]).is_absolute()
    suite = build_suite(config)
    assert suite is not None


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    with pytest.raises(ConfigError, match="not JSON"):
        load_config(bad)
