import json

import pytest
import yaml

from misleader.config import CONFIG_SCHEMA, canonical_json, config_hash, load_config, parse_config
from misleader.errors import ConfigError


def base():
    return {
        "dataset": {"kind": "gaussian_mixture"},
        "target": {"arch": {"kind": "mlp"}},
        "defense": {"members": [{"arch": {"kind": "mlp", "hidden": [8]}}]},
    }


def test_defaults_filled():
    cfg = parse_config(base())
    assert cfg["seed"] == 0 and cfg["randp_budget"] == 1.0
    assert cfg["dataset"]["params"] == {"n": 2000, "num_classes": 4, "dim": 2, "class_separation": 4.0,
                                        "noise_std": 0.8}
    d = cfg["defense"]
    assert (d["lambda"], d["alpha"], d["temperature"], d["a_iter"], d["epochs"]) == (0.01, 0.5, 4.0, 1, 30)
    assert d["members"][0] == {"arch": {"kind": "mlp", "hidden": [8], "activation": "relu"},
                               "attacker": None, "overrides": {}}
    assert cfg["theory"]["enabled"] is True and cfg["attacks"] == []


def test_parse_does_not_mutate_input():
    raw = base()
    parse_config(raw)
    assert raw == base()


@pytest.mark.parametrize("block", ["dataset", "target", "defense"])
def test_missing_block_names_field(block):
    raw = base()
    del raw[block]
    with pytest.raises(ConfigError, match=f"field '{block}'"):
        parse_config(raw)


@pytest.mark.parametrize("path,value,field", [
    (("defense", "alpha"), 1.5, "defense.alpha"),
    (("defense", "lambda"), -0.1, "defense.lambda"),
    (("target", "arch", "kind"), "resnet", "target.arch.kind"),
    (("dataset", "kind"), "cifar", "dataset.kind"),
    (("seed",), -1, "seed"),
    (("dataset", "bogus"), 1, "dataset.bogus"),
])
def test_bad_values_name_the_field(path, value, field):
    raw = base()
    node = raw
    for key in path[:-1]:
        node = node[key]
    node[path[-1]] = value
    with pytest.raises(ConfigError, match=f"field '{field}'"):
        parse_config(raw)


def test_idx_needs_paths():
    raw = base()
    raw["dataset"] = {"kind": "idx"}
    with pytest.raises(ConfigError, match="images"):
        parse_config(raw)


def test_hard_label_dfme_needs_student_only():
    raw = base()
    raw["attacks"] = [{"kind": "dfme", "mode": "hard", "clone": {"kind": "mlp"}}]
    with pytest.raises(ConfigError, match="attacks.0.mode"):
        parse_config(raw)
    raw["attacks"][0]["gen_steps"] = 0
    assert parse_config(raw)["attacks"][0]["gen_steps"] == 0


def test_member_attacker_block_defaults():
    raw = base()
    raw["defense"]["members"][0]["attacker"] = {"kind": "mlp"}
    assert parse_config(raw)["defense"]["members"][0]["attacker"] == {"kind": "mlp", "hidden": [64, 64],
                                                                      "activation": "relu"}


def test_load_yaml_and_json_with_overrides(tmp_path):
    y = tmp_path / "c.yaml"
    y.write_text(yaml.safe_dump(base()))
    j = tmp_path / "c.json"
    j.write_text(json.dumps(base()))
    a = load_config(y, seed=5, output_dir="out")
    b = load_config(j, seed=5, output_dir="out")
    assert a == b and a["seed"] == 5 and a["output_dir"] == "out"


def test_load_errors_name_the_file(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("dataset: [unclosed")
    with pytest.raises(ConfigError, match="bad.yaml"):
        load_config(bad)
    with pytest.raises(ConfigError, match="missing.yaml"):
        load_config(tmp_path / "missing.yaml")
    empty = tmp_path / "empty.yaml"
    empty.write_text("")
    with pytest.raises(ConfigError, match="field 'dataset'"):
        load_config(empty)


def test_hash_stable_and_sensitive():
    a, b = parse_config(base()), parse_config(base())
    assert config_hash(a["target"]) == config_hash(b["target"])
    b["target"]["epochs"] = 51
    assert config_hash(a["target"]) != config_hash(b["target"])
    assert canonical_json({"b": 1, "a": 2}) == '{"a":2,"b":1}'


def test_shipped_configs_parse():
    from pathlib import Path

    for path in sorted((Path(__file__).parents[1] / "configs").glob("*.yaml")):
        load_config(path)


def test_schema_is_valid_draft():
    import jsonschema

    jsonschema.Draft202012Validator.check_schema(CONFIG_SCHEMA)
