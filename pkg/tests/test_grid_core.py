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


"""Tests for the grid, field and coefficient layer."""

import math

import numpy as np
import pytest

from nkit.grid_core import (Constant, DiffusionRecip, HoelderBump, ScalarField,
                            SmoothWave, as_vector, frozen_coefficient,
                            generate_coefficient, make_domain,
                            validate_ellipticity)


@pytest.fixture(scope="module")
def domain():
    return make_domain(1.0, 17)


def test_domain_geometry(domain):
    assert domain.shape == (17, 17, 17)
    assert domain.size == 17 ** 3
    assert domain.h == pytest.approx((1 / 16,) * 3)
    assert domain.cell_volume == pytest.approx(1 / 16 ** 3)
    assert domain.center == (0.5, 0.5, 0.5)
    assert domain.diameter == pytest.approx(math.sqrt(3))


def test_anisotropic_extent():
    domain = make_domain((2.0, 1.0, 1.0), 9)
    assert domain.h == pytest.approx((0.25, 0.125, 0.125))
    assert domain.min_extent == 1.0
    assert domain.center == (1.0, 0.5, 0.5)


def test_flat_index_is_c_order(domain):
    n = domain.n
    assert domain.flat_index((1, 2, 3)) == (1 * n + 2) * n + 3
    assert domain.coordinates.reshape(-1, 3)[domain.flat_index((1, 2, 3))] \
        == pytest.approx([1 / 16, 2 / 16, 3 / 16])


def test_index_of_clips_and_rounds(domain):
    assert domain.index_of((0.5, 0.5, 0.5)) == (8, 8, 8)
    assert domain.index_of((-1.0, 0.03, 2.0)) == (0, 0, 16)


def test_point(domain):
    point = domain.point((16, 0, 8))
    assert point.index == (16, 0, 8)
    assert point.coord == pytest.approx((1.0, 0.0, 0.5))


def test_point_outside_grid(domain):
    with pytest.raises(ValueError) as error:
        domain.point((17, 0, 0))
    error.match("outside the grid")


def test_distance_to_boundary(domain):
    assert domain.distance_to_boundary((0.25, 0.5, 0.9)) == pytest.approx(0.1)


@pytest.mark.parametrize("n", [8, 3, 9.5])
def test_make_domain_rejects_small_or_fractional_n(n):
    with pytest.raises(ValueError) as error:
        make_domain(1.0, n)
    error.match("at least 9")


def test_make_domain_rejects_nonpositive_extent():
    with pytest.raises(ValueError) as error:
        make_domain((1.0, 0.0, 1.0), 9)
    error.match("positive")


def test_as_vector():
    assert as_vector(2) == (2.0, 2.0, 2.0)
    with pytest.raises(ValueError) as error:
        as_vector([1, 2], "point")
    error.match("point should have 3 components")


def test_scalar_field_arithmetic(domain):
    one = ScalarField(domain, np.ones(domain.size))
    two = one + one
    assert two.values.shape == domain.shape
    assert np.all(two.values == 2)
    assert np.all((two - one).values == 1)
    assert np.all((1j * one).values == 1j)
    assert np.all((-one).values == -1)
    assert one.integral() == pytest.approx(17 ** 3 / 16 ** 3)


def test_scalar_field_is_read_only(domain):
    field = ScalarField.zeros(domain)
    with pytest.raises(ValueError):
        field.values[0, 0, 0] = 1


def test_scalar_field_rejects_nonfinite(domain):
    values = np.zeros(domain.size)
    values[3] = np.nan
    with pytest.raises(ValueError) as error:
        ScalarField(domain, values)
    error.match("finite")


def test_scalar_field_wrong_size(domain):
    with pytest.raises(ValueError) as error:
        ScalarField(domain, np.zeros(10))
    error.match("10 values")


def test_scalar_field_different_domains(domain):
    other = make_domain(2.0, 17)
    with pytest.raises(ValueError) as error:
        ScalarField.zeros(domain) + ScalarField.zeros(other)
    error.match("different domains")


def test_constant_coefficient(domain):
    gamma = generate_coefficient(domain, Constant(2.0))
    assert gamma.is_constant
    assert gamma.nu == pytest.approx(0.5)
    assert gamma.seminorm == 0
    assert gamma.smoothness_class == "C2"
    assert gamma.spec_dict() == {"kind": "constant", "gamma0": 2.0,
                                 "lam": 0.5}


def test_hoelder_bump(domain):
    spec = HoelderBump(1.0, 0.5, domain.center, 0.5)
    gamma = generate_coefficient(domain, spec)
    assert gamma.at(domain.center) == pytest.approx(1.0)
    assert gamma.at((0.0, 0.5, 0.5)) == pytest.approx(1 + 0.5 * 0.5 ** 0.5)
    assert gamma.seminorm == 0.5
    assert gamma.smoothness_class == "C0λ"
    assert not gamma.is_constant


def test_smooth_wave(domain):
    gamma = generate_coefficient(domain, SmoothWave(1.0, 0.3))
    assert gamma.at((0, 0, 0)) == pytest.approx(1.3)
    assert gamma.at((1, 0, 0)) == pytest.approx(0.7)
    assert gamma.at(domain.center) == pytest.approx(1.0)
    assert gamma.nu == pytest.approx(0.7)


def test_diffusion_coefficient(domain):
    gamma = generate_coefficient(domain, DiffusionRecip(10.0))
    assert gamma.at(domain.center) == pytest.approx(1 / 30)
    assert gamma.is_constant


def test_diffusion_coefficient_rejects_negative_scattering(domain):
    with pytest.raises(ValueError) as error:
        generate_coefficient(domain, DiffusionRecip(-1.0))
    error.match("positive")


def test_nonelliptic_coefficient(domain):
    with pytest.raises(ValueError) as error:
        generate_coefficient(domain, SmoothWave(1.0, 1.5))
    error.match("not elliptic")


@pytest.mark.parametrize("lam", [0.0, 1.0, -0.2])
def test_hoelder_exponent_range(domain, lam):
    with pytest.raises(ValueError) as error:
        generate_coefficient(domain, Constant(1.0, lam))
    error.match("Hölder exponent")


def test_validate_ellipticity():
    assert validate_ellipticity(np.array([0.5, 1.0, 1.5])) == (
        pytest.approx(0.5), True)
    assert not validate_ellipticity(np.array([-0.1, 1.0])).ok


def test_frozen_coefficient(domain):
    gamma = generate_coefficient(domain, HoelderBump(1.0, 0.5, (0, 0, 0),
                                                     0.5))
    frozen = frozen_coefficient(gamma, domain.center)
    assert frozen.is_constant
    assert frozen.at((0, 0, 0)) == pytest.approx(gamma.at(domain.center))
    assert frozen.lam == gamma.lam
