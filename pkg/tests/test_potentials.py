# Copyright (c) 2026 The nkit developers
#
# Permission is hereby granted, free of charge, to any person obtaining a copy
# of this software and associated documentation files (the "Software"), to deal
# in the Software without restriction, including without limitation the rights
# to use, copy, modify, merge, publish, distribute, sublicense, and/or sell
# copies of the Software, and to permit persons to whom the Software is
# furnished to do so, subject to the following conditions:
#
# The above copyright notice and this permission notice shall be included in
# all copies or substantial portions of the Software.
#
# THE SOFTWARE IS PROVIDED "AS IS", WITHOUT WARRANTY OF ANY KIND, EXPRESS OR
# IMPLIED, INCLUDING BUT NOT LIMITED TO THE WARRANTIES OF MERCHANTABILITY,
# FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL THE
# AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER
# LIABILITY, WHETHER IN AN ACTION OF CONTRACT, TORT OR OTHERWISE, ARISING FROM,
# OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER DEALINGS IN THE
# SOFTWARE.


"""Tests for the fundamental solution and the shape potentials."""

import math

import numpy as np
import pytest

from nkit.potentials import (ReferenceShape, ball_average_kernel, gamma_fund,
                             gamma_kernel, gauss_flux, newtonian_potential,
                             quadrature_rows, single_layer_normal,
                             surface_closure)

SHAPES = [ReferenceShape.ball(1.0, 32),
          ReferenceShape.ellipsoid((1.0, 0.75, 0.5), 32),
          ReferenceShape.cube(0.5, 32)]


def test_gamma_fund():
    assert gamma_fund((0, 3, 4)) == pytest.approx(-1 / (20 * math.pi))
    with pytest.raises(ValueError) as error:
        gamma_fund((0, 0, 0))
    error.match("singular")


def test_ball_average_kernel():
    a = 0.1
    assert ball_average_kernel(np.array([0.0]), a)[0] == pytest.approx(
        -3 / (8 * math.pi * a))
    at_edge = ball_average_kernel(np.array([a, 0.2]), a)
    assert at_edge == pytest.approx(gamma_kernel(np.array([a, 0.2])))


def test_unit_ball_at_center():
    ball = ReferenceShape.ball(1.0)
    assert newtonian_potential(ball) == pytest.approx(-0.5)


@pytest.mark.parametrize("radius", [0.5, 1.0, 2.0])
def test_ball_closed_form_is_continuous(radius):
    ball = ReferenceShape.ball(radius)
    inside = newtonian_potential(ball, (radius * (1 - 1e-12), 0, 0))
    outside = newtonian_potential(ball, (radius * (1 + 1e-12), 0, 0))
    assert inside == pytest.approx(outside)
    assert inside == pytest.approx(-radius ** 2 / 3)


@pytest.mark.parametrize("method", ["volume", "surface"])
def test_ball_quadrature_matches_closed_form(method):
    ball = ReferenceShape.ball(1.0, 32)
    assert newtonian_potential(ball, method=method) == pytest.approx(
        -0.5, abs=1e-6)


def test_ball_volume_rule_outside():
    ball = ReferenceShape.ball(1.0, 16)
    x = (2.0, 0.5, 0.0)
    assert newtonian_potential(ball, x, "volume") == pytest.approx(
        newtonian_potential(ball, x), rel=1e-6)


def test_ellipsoid_rules_agree():
    ellipsoid = SHAPES[1]
    volume = newtonian_potential(ellipsoid, method="volume")
    surface = newtonian_potential(ellipsoid, method="surface")
    assert volume == pytest.approx(surface, rel=1e-4)
    assert newtonian_potential(ellipsoid) == volume


def test_cube_rules_agree():
    cube = ReferenceShape.cube(0.5, 16)
    volume = newtonian_potential(cube, method="volume")
    surface = newtonian_potential(cube, method="surface")
    assert volume < 0
    assert volume == pytest.approx(surface, rel=1e-2)


def test_unknown_method():
    with pytest.raises(ValueError) as error:
        newtonian_potential(SHAPES[0], method="series")
    error.match("Method should be")


@pytest.mark.parametrize("shape", SHAPES, ids=lambda s: s.kind)
def test_gauss_flux_inside(shape):
    assert gauss_flux(shape) == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("shape", SHAPES, ids=lambda s: s.kind)
def test_gauss_flux_outside(shape):
    assert gauss_flux(shape, (3.0, 0.0, 0.5)) == pytest.approx(0.0, abs=1e-6)


@pytest.mark.parametrize("shape", SHAPES, ids=lambda s: s.kind)
def test_single_layer_vanishes_at_center(shape):
    assert np.allclose(single_layer_normal(shape), 0.0, atol=1e-6)


@pytest.mark.parametrize("shape", SHAPES, ids=lambda s: s.kind)
def test_surface_is_closed(shape):
    assert surface_closure(shape) < 1e-6


@pytest.mark.parametrize("resolution", [2, 5])
def test_coarse_ellipsoid_surface_is_closed(resolution):
    ellipsoid = ReferenceShape.ellipsoid((0.3, 0.5, 0.9), resolution)
    assert surface_closure(ellipsoid) < 1e-6

def test_single_layer_off_center_points_outward():
    ball = ReferenceShape.ball(1.0, 16)
    value = single_layer_normal(ball, (0.3, 0.0, 0.0))
    assert value[0] < 0
    assert abs(value[1]) < 1e-10 and abs(value[2]) < 1e-10


def test_single_layer_near_surface_warns():
    ball = ReferenceShape.ball(1.0, 16)
    with pytest.warns(RuntimeWarning, match="closer than the panel"):
        single_layer_normal(ball, (0.99, 0.0, 0.0))


@pytest.mark.parametrize("shape", SHAPES, ids=lambda s: s.kind)
def test_volume_weights_sum_to_volume(shape):
    _, weights = shape.volume_quadrature()
    assert weights.sum() == pytest.approx(shape.volume)


def test_surface_areas():
    _, normals, areas = SHAPES[0].surface_quadrature()
    assert areas.sum() == pytest.approx(4 * math.pi)
    assert np.allclose(np.linalg.norm(normals, axis=1), 1.0)
    _, _, areas = SHAPES[2].surface_quadrature()
    assert areas.sum() == pytest.approx(6.0)


def test_shape_geometry():
    cube = ReferenceShape.cube(0.5)
    assert cube.volume == pytest.approx(1.0)
    assert cube.diameter == pytest.approx(math.sqrt(3))
    assert cube.inradius == 0.5
    ellipsoid = ReferenceShape.ellipsoid((1.0, 0.75, 0.5))
    assert ellipsoid.diameter == 2.0
    assert ellipsoid.inradius == 0.5
    assert list(ellipsoid.contains([[0.9, 0, 0], [0, 0.9, 0]])) == [True,
                                                                    False]
    assert ReferenceShape.ball().semi_axes == (0.5, 0.5, 0.5)


def test_refined():
    ball = ReferenceShape.ball(1.0, 8).refined()
    assert ball.resolution == 16
    assert ball.size == (1.0,)


@pytest.mark.parametrize(["args", "message"], [
    (("sphere", (1.0,)), "Shape kind"),
    (("ellipsoid", (1.0, 2.0)), "needs 3 positive"),
    (("ball", (-1.0,)), "needs 1 positive"),
    (("cube", (1.0,), 1), "resolution"),
])
def test_invalid_shapes(args, message):
    with pytest.raises(ValueError) as error:
        ReferenceShape(*args)
    error.match(message)


def test_quadrature_rows():
    shape = ReferenceShape.ball(1.0, 4)
    volume, surface = quadrature_rows(shape)
    assert len(volume) == 4 * 4 * 8
    assert len(surface) == 4 * 8
    assert len(volume[0]) == 4
    assert len(surface[0]) == 7
