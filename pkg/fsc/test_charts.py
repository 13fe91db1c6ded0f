"""
Tests for SVG chart rendering
"""

import xml.etree.ElementTree as ET

import pytest
from charts import line_chart_svg, write_chart

SVG = "{http://www.w3.org/2000/svg}"


class TestLineChart:
    """Test the generated markup"""

    def test_valid_svg_with_one_polyline_per_series(self):
        svg = line_chart_svg(
            {"a": [(1, 0.5), (2, 0.7)], "b": [(1, 0.2), (2, 0.1), (3, 0.4)]},
            "x",
            "y",
            "Title",
        )
        root = ET.fromstring(svg)
        polylines = root.findall(f"{SVG}polyline")
        assert len(polylines) == 2
        assert len(polylines[1].get("points").split()) == 3
        assert len(root.findall(f"{SVG}circle")) == 5

    def test_labels_are_escaped(self):
        svg = line_chart_svg({"<b>&": [(1, 1.0)]}, "x < y", "y", "A & B")
        ET.fromstring(svg)
        assert "&lt;b&gt;&amp;" in svg
        assert "A &amp; B" in svg

    def test_points_are_drawn_in_x_order(self):
        svg = line_chart_svg({"s": [(3, 1.0), (1, 0.0), (2, 0.5)]}, "x", "y")
        coords = ET.fromstring(svg).find(f"{SVG}polyline").get("points").split()
        xs = [float(c.split(",")[0]) for c in coords]
        assert xs == sorted(xs)

    def test_log_axis_ticks_at_data_sizes(self):
        svg = line_chart_svg({"s": [(64, 0.2), (256, 0.5), (1024, 0.9)]}, "points", "f", log_x=True)
        texts = [t.text for t in ET.fromstring(svg).iter(f"{SVG}text")]
        assert {"64", "256", "1e+03"} <= set(texts)

    def test_log_axis_rejects_non_positive_x(self):
        with pytest.raises(ValueError, match="positive"):
            line_chart_svg({"s": [(0, 1.0), (2, 1.0)]}, "x", "y", log_x=True)

    def test_empty_series(self):
        with pytest.raises(ValueError, match="nothing to plot"):
            line_chart_svg({"s": []}, "x", "y")

    def test_flat_series_does_not_divide_by_zero(self):
        svg = line_chart_svg({"s": [(5, 0.0)]}, "x", "y")
        assert "nan" not in svg

    def test_write_chart_creates_directories(self, tmp_path):
        path = tmp_path / "charts" / "c.svg"
        write_chart(path, line_chart_svg({"s": [(1, 1.0)]}, "x", "y"))
        assert path.read_text().startswith("<svg")
