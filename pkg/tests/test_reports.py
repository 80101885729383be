import xml.etree.ElementTree as ET

import pytest

from cognilab import svg
from cognilab.reports import cell, delta, pct_cell, pct_change, ratio, retention_pct


def test_comparison_conventions():
    assert delta(1.0, 3.0) == 2.0
    assert ratio(2.0, 3.0) == 1.5
    assert pct_change(2.0, 3.0) == 50.0
    assert pct_change(0.0, 1.0) is None and ratio(0.0, 1.0) is None and delta(None, 1.0) is None
    assert retention_pct(0, 0) is None


def test_cells():
    assert cell(None) == "n/a" and cell(float("nan")) == "n/a"
    assert cell(0.123456) == "0.1235" and cell(3) == "3"
    assert pct_cell(0.813) == "+0.8" and pct_cell(-47.0) == "-47.0" and pct_cell(None) == "n/a"


def test_emergence_speedups_that_round_cleanly():
    from cognilab.heads import speedup_pct
    assert pct_cell(speedup_pct(37870, 37562)) == "+0.8"
    assert pct_cell(speedup_pct(13021, 19137)) == "-47.0"
    assert f"{retention_pct(374, 378):.1f}" == "98.9"


@pytest.mark.parametrize("a,b,half,printed", [(0.32, 0.21, 0.005, -31.8), (1.054, 1.076, 0.0005, 2.04)])
def test_printed_change_is_reachable_from_unrounded_inputs(a, b, half, printed):
    # exact inputs miss the printed value, but some pair rounding to (a, b) hits it
    corners = [((b + sb) - (a + sa)) / (a + sa) * 100 for sa in (-half, half) for sb in (-half, half)]
    assert min(corners) <= printed <= max(corners)
    assert round(pct_change(a, b), 2) != printed


def _valid(doc):
    root = ET.fromstring(doc)
    assert root.tag.endswith("svg")
    return root


def test_charts_are_valid_and_deterministic():
    series = {"a": ([0, 1, 2], [0.0, 0.5, 1.0]), "b <&>": ([0, 2], [1.0, 0.0])}
    a = svg.line_chart(series, "t", "x", "y")
    assert a == svg.line_chart(series, "t", "x", "y")
    _valid(a)
    _valid(svg.bar_chart(["l0", "l1"], {"base": [1, 2], "cur": [0, 3]}, "t", "x", "y"))
    _valid(svg.scatter_chart([("p", 1.0, 2.0)], "t", "x", "y"))
    _valid(svg.line_chart({}, "empty", "x", "y"))
