from __future__ import annotations

import time
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from tafs_grpo.artifacts import emit_scatter_svg, read_metrics, write_metrics


def test_zero_records_header_only(tmp_path):
    p = tmp_path / "m.csv"
    write_metrics(p, [], ["iteration", "reward"])
    assert p.read_text() == "iteration,reward\n"


def test_float_format_and_order(tmp_path):
    p = tmp_path / "m.csv"
    x = np.float32(0.1)
    write_metrics(p, [{"b": float(x), "a": 3}], ["a", "b"])
    row = p.read_text().splitlines()[1]
    assert row == "3,0.100000001"
    assert np.float32(float(row.split(",")[1])) == x


def test_append_keeps_iterations_contiguous(tmp_path):
    p = tmp_path / "m.csv"
    write_metrics(p, [{"iteration": i, "r": 0.5} for i in (1, 2)], ["iteration", "r"])
    write_metrics(p, [{"iteration": i, "r": 0.5} for i in (3, 4)], ["iteration", "r"], append=True)
    assert [int(r["iteration"]) for r in read_metrics(p)] == [1, 2, 3, 4]
    with pytest.raises(ValueError):
        write_metrics(p, [{"other": 1}], ["other"], append=True)


def test_unknown_column_rejected(tmp_path):
    with pytest.raises(ValueError):
        write_metrics(tmp_path / "m.csv", [{"a": 1, "z": 2}], ["a"])


def test_io_errors_surface(tmp_path):
    with pytest.raises(OSError):
        write_metrics(tmp_path / "missing" / "m.csv", [], ["a"])


def test_single_point_svg(tmp_path):
    p = tmp_path / "one.svg"
    emit_scatter_svg([("origin", np.zeros((1, 2)))], p)
    root = ET.parse(p).getroot()
    circles = root.findall(".//{http://www.w3.org/2000/svg}circle")
    assert len(circles) == 1


def test_svg_deterministic_and_legend(tmp_path, rng):
    sets = [("target", rng.normal(size=(50, 2))), ("model", rng.normal(size=(40, 2)) + 2)]
    a, b = tmp_path / "a.svg", tmp_path / "b.svg"
    emit_scatter_svg(sets, a, "title")
    emit_scatter_svg(sets, b, "title")
    assert a.read_bytes() == b.read_bytes()
    text = a.read_text()
    assert "target" in text and "model" in text
    fills = {g.get("fill") for g in ET.parse(a).getroot().iter("{http://www.w3.org/2000/svg}g")}
    assert len(fills) == 2


def test_svg_large_input_is_fast(tmp_path, rng):
    pts = rng.normal(size=(10_000, 2))
    t0 = time.perf_counter()
    emit_scatter_svg([("pts", pts)], tmp_path / "big.svg")
    assert time.perf_counter() - t0 < 1.0


def test_svg_rejects_empty(tmp_path):
    with pytest.raises(ValueError):
        emit_scatter_svg([("none", np.zeros((0, 2)))], tmp_path / "x.svg")
