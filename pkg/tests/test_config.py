from dataclasses import replace

import pytest
import yaml

from cotope.config import (
    EstimatorSection,
    ExperimentConfig,
    bundled_config_path,
    config_from_dict,
    load_config,
)
from cotope.errors import ConfigurationError


def test_bundled_config_loads():
    cfg = load_config(bundled_config_path())
    assert cfg.name == "toy-chain"
    assert cfg.resolve(cfg.templates).is_file()
    assert cfg.walks.hop_range == (1, 2)


def test_hash_is_stable_and_sensitive():
    cfg = load_config(bundled_config_path())
    assert cfg.hash() == load_config(bundled_config_path()).hash()
    assert replace(cfg, seed=cfg.seed + 1).hash() != cfg.hash()


def test_delta_out_of_range():
    cfg = replace(ExperimentConfig(), estimator=EstimatorSection(delta=1.5))
    with pytest.raises(ConfigurationError, match="delta"):
        cfg.validate()


def test_errors_collected():
    with pytest.raises(ConfigurationError) as info:
        config_from_dict({"estimator": {"delta": 0}, "walks": {"count": 0}})
    assert "delta" in str(info.value) and "walks.count" in str(info.value)


def test_unknown_keys_rejected():
    with pytest.raises(ConfigurationError, match="unknown"):
        config_from_dict({"seeds": 3})
    with pytest.raises(ConfigurationError, match="unknown"):
        config_from_dict({"graph": {"sorce": "chain"}})


def test_missing_files(tmp_path):
    with pytest.raises(ConfigurationError, match="templates"):
        config_from_dict({"templates": "nope.yaml"}, tmp_path)
    with pytest.raises(ConfigurationError, match="graph.triples"):
        config_from_dict({"graph": {"source": "files"}}, tmp_path)
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "absent.yaml")


def test_paths_resolve_against_config_dir(tmp_path):
    (tmp_path / "t.yaml").write_text(yaml.safe_dump({"P1": {"statement": "<SUBJ> to <OBJ> .", "question": "where <SUBJ> ?"}}))
    (tmp_path / "c.yaml").write_text(yaml.safe_dump({"templates": "t.yaml"}))
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.resolve(cfg.templates) == tmp_path / "t.yaml"
