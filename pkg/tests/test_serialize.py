"""Byte-stable JSON/CSV writers and the config hash."""

import json
import math

import numpy as np
import pytest

from milexplain.serialize import (
    config_hash,
    dumps,
    format_float,
    read_json,
    write_csv,
    write_json,
)


def test_format_float_examples():
    assert format_float(0.5) == "0.5"
    assert format_float(1.0) == "1"
    assert format_float(-0.0) == "-0"
    assert format_float(1e-4) == "0.0001"
    assert format_float(1 / 3) == "0.33333333333333331"


def test_format_float_round_trips_every_double():
    rng = np.random.default_rng(0)
    for x in rng.standard_normal(200) * 10.0 ** rng.integers(-12, 13, size=200):
        assert float(format_float(x)) == x


@pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
def test_format_float_rejects_non_finite(bad):
    with pytest.raises(ValueError, match="non-finite"):
        format_float(bad)
    with pytest.raises(ValueError):
        dumps({"x": bad})


def test_dumps_scalars():
    assert dumps(None) == "null"
    assert dumps(True) == "true"
    assert dumps(False) == "false"
    assert dumps(7) == "7"
    assert dumps(0.25) == "0.25"
    assert dumps("café") == '"café"'


def test_dumps_preserves_insertion_order():
    assert dumps({"b": 1, "a": 2}) == '{"b":1,"a":2}'


def test_dumps_compact_nested():
    payload = {"xs": [1, 2.5, "z"], "inner": {"k": None}, "empty": [], "none": {}}
    text = dumps(payload)
    assert text == '{"xs":[1,2.5,"z"],"inner":{"k":null},"empty":[],"none":{}}'
    assert json.loads(text) == payload


def test_dumps_numpy_values():
    assert dumps(np.float64(0.5)) == "0.5"
    assert dumps(np.int32(3)) == "3"
    assert dumps(np.bool_(True)) == "true"
    assert dumps(np.array([1.0, 2.0])) == "[1,2]"
    assert dumps(np.array([[1, 2], [3, 4]])) == "[[1,2],[3,4]]"


def test_dumps_rejects_non_string_keys_and_unknown_types():
    with pytest.raises(TypeError, match="keys"):
        dumps({1: "x"})
    with pytest.raises(TypeError):
        dumps({"x": object()})


def test_dumps_indented_form_parses_back():
    payload = {"a": [1, 2], "b": {"c": 0.5}}
    text = dumps(payload, indent=1)
    assert json.loads(text) == payload
    assert text.startswith("{\n")


def test_write_json_round_trip(tmp_path):
    path = tmp_path / "out.json"
    payload = {"name": "run", "values": [0.1, 0.2], "n": 3}
    write_json(path, payload)
    assert read_json(path) == payload
    assert path.read_bytes().endswith(b"\n")


def test_write_json_byte_identical_across_calls(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    payload = {"values": list(np.random.default_rng(1).standard_normal(20))}
    write_json(a, payload)
    write_json(b, payload)
    assert a.read_bytes() == b.read_bytes()


def test_write_csv_format(tmp_path):
    path = tmp_path / "log.csv"
    write_csv(path, ["epoch", "loss"], [[0, 1.5], [1, 0.125]])
    assert path.read_text() == "epoch,loss\n0,1.5\n1,0.125\n"


def test_write_csv_rejects_cells_needing_quotes(tmp_path):
    for bad in ("a,b", 'say "hi"', "two\nlines"):
        with pytest.raises(ValueError, match="quoting"):
            write_csv(tmp_path / "x.csv", ["c"], [[bad]])


def test_write_csv_rejects_non_finite(tmp_path):
    with pytest.raises(ValueError, match="non-finite"):
        write_csv(tmp_path / "x.csv", ["c"], [[math.nan]])


def test_config_hash_stable_and_order_sensitive():
    payload = {"lr": 1e-4, "epochs": 100}
    assert config_hash(payload) == config_hash({"lr": 1e-4, "epochs": 100})
    assert config_hash(payload) != config_hash({"epochs": 100, "lr": 1e-4})
    assert len(config_hash(payload)) == 64
    assert config_hash({"lr": 1e-4}) != config_hash({"lr": 1.000001e-4})
