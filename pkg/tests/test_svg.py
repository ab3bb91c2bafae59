import xml.etree.ElementTree as ET

import numpy as np
import pytest

from gam_audit import svg

NS = "{http://www.w3.org/2000/svg}"


def test_project_corners():
    box = (10.0, 20.0, 200.0, 100.0)
    px, py = svg.project([0.0, 1.0], [-1.0, 1.0], box, (0.0, 1.0), (-1.0, 1.0))
    assert list(px) == [10.0, 210.0]
    assert list(py) == [120.0, 20.0]


def test_padded_range():
    assert svg.padded_range([0.0, 10.0]) == pytest.approx((-0.5, 10.5))
    assert svg.padded_range([0.0, 10.0], pad=0) == (0.0, 10.0)
    lo, hi = svg.padded_range([3.0, 3.0])
    assert lo < 3.0 < hi


def test_render_panels_and_shared_range():
    x = np.linspace(0, 1, 5)
    grid = [[svg.Panel("a", x, x), svg.Panel("b", x, 10 * x)], [svg.Panel("c", note="not in this model")]]
    root = ET.fromstring(svg.render(grid, ["left", "right"], title="t & u"))
    panels = [g for g in root.iter(f"{NS}g") if "panel" in g.get("class", "")]
    assert len(panels) == 3
    full = [g for g in panels if g.get("class") == "panel"]
    assert {g.get("data-y0") for g in full} == {repr(svg.padded_range(np.concatenate([x, 10 * x]))[0])}
    empty = [g for g in panels if g.get("class") == "panel empty"][0]
    assert "not in this model" in "".join(empty.itertext())
    polyline = full[1].find(f"{NS}polyline").get("points").split()
    assert len(polyline) == 5
    own = ET.fromstring(svg.render(grid, shared_y=False))
    ranges = {g.get("data-y1") for g in own.iter(f"{NS}g") if g.get("class") == "panel"}
    assert len(ranges) == 2


def test_render_rejects_empty_grid():
    with pytest.raises(ValueError):
        svg.render([])


def test_render_deterministic(tmp_path):
    x = np.linspace(-2, 2, 50)
    grid = [[svg.Panel("s", x, np.sin(x))]]
    a, b = tmp_path / "a.svg", tmp_path / "b.svg"
    svg.write(a, grid)
    svg.write(b, grid)
    assert a.read_bytes() == b.read_bytes()
