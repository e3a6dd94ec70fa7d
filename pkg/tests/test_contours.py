import math

import numpy as np
import pytest

from plasmapair.contours import Contour, marching_squares, polygon_area


def grid(n, lo=-1.0, hi=1.0):
    x = np.linspace(lo, hi, n)
    y = np.linspace(lo, hi, n)
    X, Y = np.meshgrid(x, y, indexing="ij")
    return x, y, X, Y


class TestMarchingSquares:
    def test_circle_level_set(self):
        x, y, X, Y = grid(101)
        r0 = 0.6
        cs = marching_squares(x, y, r0 * r0 - X * X - Y * Y)
        assert len(cs) == 1
        c = cs[0]
        assert c.closed
        assert abs(c.area - math.pi * r0 * r0) / (math.pi * r0 * r0) <= 5e-3
        radii = np.hypot(c.points[:, 0], c.points[:, 1])
        assert np.max(np.abs(radii - r0)) <= 2e-3

    def test_two_components(self):
        x, y, X, Y = grid(121)
        f = np.maximum(0.04 - (X - 0.5) ** 2 - Y**2, 0.04 - (X + 0.5) ** 2 - Y**2)
        f = np.where(f > 0, f, -0.01)
        cs = marching_squares(x, y, f)
        closed = [c for c in cs if c.closed]
        assert len(closed) == 2

    def test_no_crossing_empty(self):
        x, y, X, Y = grid(31)
        assert marching_squares(x, y, np.ones_like(X)) == []
        assert marching_squares(x, y, -np.ones_like(X)) == []

    def test_nan_region_gives_open_contour(self):
        # the level set runs into a masked hole: the polyline cannot close
        x, y, X, Y = grid(81)
        f = 0.25 - X * X - Y * Y
        f[X > 0.3] = np.nan
        cs = marching_squares(x, y, f)
        assert len(cs) >= 1
        assert any(not c.closed for c in cs)

    def test_interpolation_linear(self):
        # crossing point between two samples sits at the exact linear root
        x = np.array([0.0, 1.0])
        y = np.array([0.0, 1.0])
        z = np.array([[-1.0, -1.0], [3.0, 3.0]])
        cs = marching_squares(x, y, z)
        assert len(cs) == 1
        assert np.allclose(cs[0].points[:, 0], 0.25)

    def test_saddle_resolved_by_center(self):
        x = np.array([0.0, 1.0])
        y = np.array([0.0, 1.0])
        z = np.array([[1.0, -0.1], [-0.1, 1.0]])  # positive center average
        cs = marching_squares(x, y, z)
        assert len(cs) == 2  # two separate corner cuts, no crossing band


class TestPolygonArea:
    def test_unit_square_ccw(self):
        pts = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
        assert polygon_area(pts) == pytest.approx(1.0)

    def test_orientation_sign(self):
        pts = np.array([[0, 0], [0, 1], [1, 1], [1, 0]], dtype=float)
        assert polygon_area(pts) == pytest.approx(-1.0)
        assert Contour(points=pts, closed=True).area == pytest.approx(1.0)
