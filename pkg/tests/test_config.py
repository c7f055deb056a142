from __future__ import annotations

import json

import pytest

from condloc.config import RunConfig, dump_config, from_dict, parse_config
from condloc.errors import ConfigError


def write(tmp_path, data) -> str:
    p = tmp_path / "c.json"
    p.write_text(json.dumps(data) if not isinstance(data, str) else data)
    return p


def test_empty_object_is_all_defaults(tmp_path):
    cfg = parse_config(write(tmp_path, {}))
    assert cfg == RunConfig().validate()
    assert cfg.mining.t_i == 0.6 and cfg.mining.t_R == 10.0 and cfg.mining.t_T == 8.0
    assert cfg.mining.P == 8 and cfg.mining.N == 8
    assert cfg.training.epochs == 20 and cfg.network.p == 3.0


def test_ns_above_block_count(tmp_path):
    with pytest.raises(ConfigError) as exc:
        parse_config(write(tmp_path, {"network": {"N_S": 5}}))
    assert "N_S" in str(exc.value)


def test_round_trip(tmp_path):
    cfg = parse_config(write(tmp_path, {"seed": 4, "network": {"N_S": 2}, "retrieval": {"multiscale": True}}))
    again = parse_config(write(tmp_path, dump_config(cfg)))
    assert again == cfg and again.hash() == cfg.hash()


@pytest.mark.parametrize(
    "data, key",
    [
        ({"netwerk": {}}, "netwerk"),
        ({"mining": {"t_x": 1}}, "mining.t_x"),
        ({"training": {"epochs": "many"}}, "training.epochs"),
        ({"training": {"lr": -1.0}}, "training.lr"),
        ({"conditions": [{"gain": [1, 1, 1]}]}, "conditions[0].name"),
        ({"conditions": [{"name": "day", "colour": 1}]}, "conditions[0].colour"),
        ({"dataset": {"query_conditions": ["fog"]}}, "dataset.query_conditions"),
    ],
)
def test_errors_name_the_key(tmp_path, data, key):
    with pytest.raises(ConfigError) as exc:
        parse_config(write(tmp_path, data))
    assert key in str(exc.value)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "absent.json")


def test_malformed_json(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(write(tmp_path, "{not json"))


def test_hash_ignores_output_dir():
    a = from_dict({"output_dir": "x"})
    assert a.hash() == from_dict({"output_dir": "y"}).hash()
    assert a.hash() != from_dict({"seed": 1}).hash()


def test_with_overrides():
    cfg = RunConfig().validate().with_overrides(seed=3, network={"N_S": 0})
    assert cfg.seed == 3 and cfg.network.N_S == 0 and cfg.network.B == 4
