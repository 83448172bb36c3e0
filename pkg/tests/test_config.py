import json

import pytest

from dynapose.config import ConfigError, RunConfig, apply_overrides, load_config


def test_defaults():
    c = RunConfig()
    assert c.model.feat_channels == 32 and c.model.head_depth == 3 and c.model.head_width == 32
    assert c.train.max_samples == 50 and c.train.alpha == 1.0 and c.train.beta == 0.25
    assert c.model.offset_radius == 3 and c.model.rel_coord_norm == 32
    assert c.eval.score_threshold == 0.05 and c.model.strides == (8, 16, 32)


def test_overrides_coerce_strings():
    c = apply_overrides(RunConfig(), {"model.head_width": "16", "train.beta": "0.5",
                                      "model.refinement_shared": "false", "model.levels": "[3,4,5,6,7]"})
    assert c.model.head_width == 16 and c.train.beta == 0.5
    assert c.model.refinement_shared is False
    assert c.model.levels == (3, 4, 5, 6, 7)


def test_unknown_and_invalid_keys():
    with pytest.raises(ConfigError, match="unknown config key"):
        apply_overrides(RunConfig(), {"model.nope": 1})
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), {"train.alpha": 0})
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), {"train.lr_decay_steps": [10, 5]})


def test_file_then_overrides_precedence(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"model": {"head_width": 16}, "train": {"beta": 0.5}}))
    c = load_config(tmp_path / "c.json", {"train.beta": 2.0})
    assert c.model.head_width == 16 and c.train.beta == 2.0
    (tmp_path / "c.yaml").write_text("model:\n  head_depth: 4\n")
    assert load_config(tmp_path / "c.yaml").model.head_depth == 4


def test_roundtrip_and_digest(tmp_path):
    c = apply_overrides(RunConfig(), {"model.head_width": 64})
    c.dump(tmp_path / "c.json")
    again = RunConfig.from_dict(json.loads((tmp_path / "c.json").read_text()))
    assert again == c
    assert again.digest() == c.digest() != RunConfig().digest()
    assert again.model.size_ranges[-1][1] == float("inf")
