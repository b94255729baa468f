import xml.etree.ElementTree as ET

import pytest

from ogtt_da.diagnosis import DiseaseClass
from ogtt_da.plotting import CLASS_COLORS, scatter_svg

NS = "{http://www.w3.org/2000/svg}"


def test_svg_structure_and_colours():
    pts = [(2005.1, 800.0, DiseaseClass.NORMAL), (2007.5, 300.0, DiseaseClass.DIABETES)]
    hb = [(2005.1, 5.4, DiseaseClass.NORMAL), (2007.5, 6.8, DiseaseClass.DIABETES)]
    svg = scatter_svg(pts, hb, title="P1 <test>", y_label="sigma_SI")
    root = ET.fromstring(svg)
    circles = [c for c in root.iter(NS + "circle") if "param" in c.get("class", "")]
    assert [c.get("fill") for c in circles] == [CLASS_COLORS[DiseaseClass.NORMAL], CLASS_COLORS[DiseaseClass.DIABETES]]
    diamonds = [p for p in root.iter(NS + "path") if "hba1c" in p.get("class", "")]
    assert len(diamonds) == 2
    # higher value plots higher (smaller y)
    assert float(circles[0].get("cy")) < float(circles[1].get("cy"))
    assert "P1 &lt;test&gt;" in svg
    texts = [t.text for t in root.iter(NS + "text")]
    assert "HbA1c (%)" in texts and "Year" in texts


def test_svg_deterministic():
    pts = [(2010.0, 1.5, DiseaseClass.IMPAIRED_GLUCOSE)]
    assert scatter_svg(pts) == scatter_svg(pts)


def test_svg_needs_points():
    with pytest.raises(ValueError):
        scatter_svg([])
