import json
import math

import numpy as np
import pytest

from magloc.export import dumps, read_pgm, sha256, to_gray, write_csv, write_field_csv, write_manifest, write_pgm
from magloc.grid import build_grid


def test_json_plain_values():
    obj = {"a": np.float64(1.5), "b": np.int32(3), "c": np.array([1.0, np.nan]), "d": 1 + 2j,
           "e": np.bool_(True), "f": (np.inf,)}
    back = json.loads(dumps(obj))
    assert back == {"a": 1.5, "b": 3, "c": [1.0, None], "d": {"re": 1.0, "im": 2.0}, "e": True, "f": [None]}
    assert dumps({"z": 1, "a": 2}).index('"a"') < dumps({"z": 1, "a": 2}).index('"z"')


def test_csv_round_trips_floats(tmp_path):
    vals = np.array([math.pi, 1e-300, -2.0 / 3.0, 0.1 + 0.2])
    path = write_csv(tmp_path / "v.csv", ["k", "v"], [np.arange(4), vals])
    lines = path.read_text().splitlines()
    assert lines[0] == "k,v"
    back = np.array([float(l.split(",")[1]) for l in lines[1:]])
    np.testing.assert_array_equal(back, vals)
    with pytest.raises(ValueError):
        write_csv(tmp_path / "bad.csv", ["a"], [vals, vals])


def test_field_csv_layout(tmp_path):
    g = build_grid((-1, 1, -1, 1), 3)
    X, Y = g.mesh()
    path = write_field_csv(tmp_path / "f.csv", g, s=X + 2 * Y)
    rows = [l.split(",") for l in path.read_text().splitlines()]
    assert rows[0] == ["x", "y", "s"]
    assert len(rows) == 10
    assert [float(v) for v in rows[2]] == [-1.0, 0.0, -1.0]


def test_pgm_round_trip_and_orientation(tmp_path):
    a = np.zeros((4, 3))
    a[3, 2] = 1.0  # largest x and y: top right of the image
    p = write_pgm(tmp_path / "a.pgm", a)
    assert p.read_bytes().startswith(b"P5\n4 3\n255\n")
    img = read_pgm(p)
    assert img.shape == (3, 4)
    assert img[0, 3] == 255 and img.sum() == 255


def test_gray_scaling():
    np.testing.assert_array_equal(to_gray(np.array([2.0, 3.0, 4.0])), [0, 128, 255])
    np.testing.assert_array_equal(to_gray(np.ones(3)), [255, 255, 255])
    np.testing.assert_array_equal(to_gray(np.zeros(3)), [0, 0, 0])


def test_manifest_checksums(tmp_path):
    (tmp_path / "a.txt").write_text("hello")
    (tmp_path / "b.bin").write_bytes(b"\x00\x01")
    m = write_manifest(tmp_path, [tmp_path / "a.txt", "b.bin"], {"version": "x"})
    body = json.loads(m.read_text())
    assert [e["file"] for e in body["files"]] == ["a.txt", "b.bin"]
    for e in body["files"]:
        assert e["sha256"] == sha256(tmp_path / e["file"])
        assert e["bytes"] == (tmp_path / e["file"]).stat().st_size
    assert body["version"] == "x"
