import copy
import json
from pathlib import Path

import pytest

from advdisjoint.attacks import TABLE1
from advdisjoint.config import ConfigError, load_config, validate

BASE = {
    "dataset": {"train": {"kind": "templates", "n": 50, "shape": [1, 4, 4]},
                "test": {"kind": "templates", "n": 20, "shape": [1, 4, 4], "seed": 1}},
    "model": {"architecture": "small_conv", "input_shape": [1, 4, 4], "num_classes": 10, "widths": [2, 2, 4]},
    "train": {"n": 2, "epochs": 1, "at_eps": 0.02},
    "attacks": [{"preset": "pgd1", "steps": 3}, {"kind": "fgsm", "eps": 0.1}],
    "eval": {"samples": 10},
    "simulate": {"adversary": {"kind": "static", "accessible": [0]}, "trials": 100},
}


def test_valid_config_builds_typed_sections():
    cfg = validate(copy.deepcopy(BASE))
    assert cfg.model.widths == (2, 2, 4)
    assert cfg.train.n == 2
    assert cfg.at_params == (0.02, None)
    assert cfg.attacks[0] == TABLE1["pgd1"].replace(steps=3)
    assert cfg.attacks[1].kind == "fgsm"


@pytest.mark.parametrize("path", [
    ("model", "widht"), ("train", "epoch"), ("eval", "sample"), ("dataset", "tain"),
    ("simulate", "trails"), (None, "atacks"),
])
def test_misspelled_keys_are_rejected(path):
    raw = copy.deepcopy(BASE)
    section, key = path
    (raw if section is None else raw[section])[key] = 1
    with pytest.raises(ConfigError):
        validate(raw)


def test_misspelled_attack_field_is_rejected():
    raw = copy.deepcopy(BASE)
    raw["attacks"][0]["eps_"] = 0.1
    with pytest.raises(ConfigError):
        validate(raw)


@pytest.mark.parametrize("edit", [
    lambda r: r["train"].update(w2=-1.0),
    lambda r: r["train"].update(variant="ensemble"),
    lambda r: r["attacks"].append({"kind": "pgd", "eps": -0.1}),
    lambda r: r["attacks"].append({"preset": "pgd9"}),
    lambda r: r["dataset"]["train"].update(kind="cifar10"),
    lambda r: r["model"].update(input_shape=[1, 6, 6]),
])
def test_invalid_values_are_rejected(edit):
    raw = copy.deepcopy(BASE)
    edit(raw)
    with pytest.raises(ConfigError):
        validate(raw)


def test_seed_override_reaches_every_section():
    cfg = validate(copy.deepcopy(BASE)).with_seed(9)
    assert cfg.train.seed == 9
    assert all(a.rng_seed == 9 for a in cfg.attacks)
    assert cfg.simulate["seed"] == 9
    assert cfg.digest() != validate(copy.deepcopy(BASE)).digest()


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json")
    p = tmp_path / "bad.json"
    p.write_text("{nope")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(p)
    p.write_text(json.dumps(BASE))
    assert load_config(p).raw == BASE


@pytest.mark.parametrize("name", ["desk.json", "cifar10.json"])
def test_shipped_configs_validate(name):
    cfg = load_config(Path(__file__).parent.parent / "configs" / name)
    assert cfg.train.n == 3 and cfg.model.architecture == "small_conv"
