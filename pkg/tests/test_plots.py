import xml.etree.ElementTree as ET

import numpy as np
import pytest

from smoothgeo.attribution import AttributionMap
from smoothgeo.metrics import GridGeometry
from smoothgeo.plots import emit_contour_field, emit_heatmap, read_pgm

from conftest import linear_net, random_net

SVG = "{http://www.w3.org/2000/svg}"


class TestHeatmap:
    def test_point_mass(self, tmp_path):
        z = np.zeros(12)
        z[5] = -3.0
        pix = read_pgm(emit_heatmap(AttributionMap(z, "SM"), GridGeometry(3, 4), tmp_path / "a.pgm"))
        assert pix.shape == (3, 4)
        assert pix[1, 1] == 255 and pix.sum() == 255

    def test_constant_map_warns(self, tmp_path):
        with pytest.warns(RuntimeWarning, match="degenerate"):
            pix = read_pgm(emit_heatmap(np.ones(4), GridGeometry(2, 2), tmp_path / "c.pgm"))
        assert np.all(pix == 128)

    def test_header(self, tmp_path):
        path = emit_heatmap(np.arange(6.0), GridGeometry(2, 3), tmp_path / "h.pgm")
        assert path.read_bytes().startswith(b"P5\n3 2\n255\n")
        pix = read_pgm(path)
        assert pix.min() == 0 and pix.max() == 255

    def test_flat_geometry_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            emit_heatmap(np.arange(4.0), GridGeometry(), tmp_path / "x.pgm")


class TestContourField:
    def test_linear_model(self, tmp_path):
        net = linear_net([[1.0, 2.0], [-1.0, 0.5]])
        path = tmp_path / "f.svg"
        fld = emit_contour_field(net, ((-1, 1), (-1, 1)), path=path, resolution=40, arrows_per_side=4)
        # SM arrows are all the normalized weight row
        w = np.array([1.0, 2.0]) / np.sqrt(5.0)
        for _, u in fld.arrows["SM"]:
            np.testing.assert_allclose(u, w, atol=1e-12)
        # contours of a linear score are straight lines with a common normal
        for c in fld.contours:
            np.testing.assert_allclose((c - c[0]) @ np.array([1.0, 2.0]), 0.0, atol=1e-9)
        assert len(fld.contours) == len(fld.levels)
        ET.parse(path)

    def test_arrow_lengths(self, tmp_path, rng):
        net = random_net(rng, "relu", d=2, c=3)
        path = tmp_path / "g.svg"
        emit_contour_field(net, ((-2, 2), (-2, 2)), methods=("SM", "IG", "SG"), path=path,
                           resolution=30, arrows_per_side=3)
        lines = ET.parse(path).getroot().findall(f".//{SVG}g/{SVG}line")
        assert lines
        for ln in lines:
            length = np.hypot(float(ln.get("x2")), float(ln.get("y2")))
            assert abs(length - 1.0) <= 1e-6

    def test_needs_two_dims(self, tmp_path, rng):
        net = random_net(rng, "relu", d=3, c=2)
        with pytest.raises(ValueError):
            emit_contour_field(net, ((0, 1), (0, 1)), path=tmp_path / "x.svg")
