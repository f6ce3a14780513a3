import math

import numpy as np
import pytest

from pstest.errors import ValidationError
from pstest.io import dumps, format_value, read_matrix, read_partition, read_vector, write_csv


def test_round_trip_precision(tmp_path):
    vals = np.random.default_rng(0).standard_normal((4, 3)) * 1e-7
    vals[0, 0] = 0.1 + 0.2
    path = write_csv(tmp_path / "m.csv", ["a", "b", "c"], vals.tolist())
    back, names = read_matrix(path)
    assert names == ["a", "b", "c"]
    np.testing.assert_array_equal(back, vals)


def test_header_detection(tmp_path):
    (tmp_path / "h.csv").write_text("1,2\n3,4\n")
    a, names = read_matrix(tmp_path / "h.csv")
    assert a.shape == (2, 2) and names == ["V1", "V2"]


@pytest.mark.parametrize("text, match", [
    ("a,b\n1,\n", "missing"),
    ("a,b\n1,NA\n", "missing"),
    ("a,b\n1,x\n", "not a number"),
    ("a,b\n1,2,3\n", "expected 2"),
    ("a,b\n", "no data"),
    ("", "empty"),
])
def test_malformed_csv(tmp_path, text, match):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(ValidationError, match=match):
        read_matrix(p)


def test_missing_file_is_validation_error(tmp_path):
    with pytest.raises(ValidationError, match="does not exist"):
        read_matrix(tmp_path / "nope.csv", "predictor")


def test_vector_needs_one_column(tmp_path):
    (tmp_path / "y.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValidationError, match="exactly one column"):
        read_vector(tmp_path / "y.csv")


def test_partition_file(tmp_path):
    (tmp_path / "p.csv").write_text("index,group\n0,b\n1,a\n2,a\n")
    part = read_partition(tmp_path / "p.csv")
    assert part.groups == ((1, 2), (0,)) and part.labels == ("a", "b")


def test_format_value():
    assert format_value(True) == "true"
    assert format_value(np.int64(3)) == "3"
    assert float(format_value(1 / 3)) == 1 / 3
    assert format_value(None) == ""


def test_json_is_canonical():
    text = dumps({"b": np.float64(0.1), "a": [np.int32(1), math.nan], "c": np.array([True])})
    assert text == '{\n  "a": [\n    1,\n    null\n  ],\n  "b": 0.1,\n  "c": [\n    true\n  ]\n}\n'
