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


"""Tests for Neumann columns, reciprocity and the representation formula."""

import numpy as np
import pytest

from nkit.elliptic_op import SolveReport, assemble, solve
from nkit.errors import NonConvergenceError
from nkit.grid_core import (Constant, HoelderBump, ScalarField,
                            generate_coefficient, make_domain)
from nkit.neumann_fn import (Mollifier, NeumannColumn, adjoint_column,
                             check_reciprocity, column_gradient,
                             column_hessian_norm, constant_coeff_column,
                             default_eps_mol, derivative_magnitude,
                             free_space_kernel, mollified_source,
                             mollified_value, neumann_column, neumann_columns,
                             oracle_deviation, representation_probe,
                             representation_solution, yukawa_kappa)

EPS = 0.125
Y = (0.35, 0.5, 0.5)
X = (0.65, 0.5, 0.5)


@pytest.fixture(scope="module")
def domain():
    return make_domain(1.0, 17)


@pytest.fixture(scope="module")
def gamma(domain):
    return generate_coefficient(domain, HoelderBump(1.0, 0.5, domain.center,
                                                    0.5))


@pytest.fixture(scope="module")
def column(gamma):
    return neumann_column(gamma, 2.0, Y, EPS, 1e-12, method="direct")


@pytest.fixture(scope="module")
def adjoint(gamma):
    return adjoint_column(gamma, 2.0, X, EPS, 1e-12, method="direct")


def test_mollified_source_has_unit_mass(domain):
    source = mollified_source(domain, Y, EPS)
    assert source.integral() == pytest.approx(1.0)
    assert source.at(Y) == pytest.approx(np.abs(source.values).max())


def test_default_mollification_radius(domain):
    assert default_eps_mol(domain) == pytest.approx(3 / 16)


def test_mollifier_stencil_sums_to_one(domain):
    stencil = Mollifier(domain.center, EPS).stencil(domain.h)
    assert stencil.shape == (5, 5, 5)
    assert stencil.sum() == pytest.approx(1.0)
    assert stencil[2, 2, 2] == stencil.max()
    density = Mollifier(domain.center, EPS).density(domain)
    center = domain.index_of(domain.center)
    assert density[center] * domain.cell_volume == pytest.approx(
        stencil[2, 2, 2])


def test_underresolved_mollifier(domain):
    with pytest.raises(ValueError) as error:
        mollified_source(domain, domain.center, 0.1)
    error.match("under-resolved")


def test_mollifier_touching_boundary(domain):
    with pytest.raises(ValueError) as error:
        mollified_source(domain, (0.1, 0.5, 0.5), EPS)
    error.match("touches the boundary")


def test_source_too_close_to_boundary(gamma):
    with pytest.raises(ValueError) as error:
        neumann_column(gamma, 1.0, (0.2, 0.5, 0.5), EPS)
    error.match("closer than twice")


def test_column_properties(column, gamma):
    assert column.report.converged
    assert not column.adjoint
    assert column.d_y == pytest.approx(0.35)
    assert column.gamma_at_source == pytest.approx(gamma.at(Y))


def test_nonconverged_column_raises(column):
    report = SolveReport(10, 0.5, False)
    with pytest.raises(NonConvergenceError) as error:
        NeumannColumn(column.field, column.y, column.k, column.eps_mol,
                      column.gamma, report, False, column.d_y)
    error.match("did not converge")
    assert error.value.report is report


def test_columns_share_operator_and_keep_order(gamma):
    points = [Y, X, (0.5, 0.5, 0.5)]
    sequential = neumann_columns(gamma, 1.0, points, EPS, 1e-10)
    threaded = neumann_columns(gamma, 1.0, points, EPS, 1e-10, threads=3)
    for first, second in zip(sequential, threaded):
        assert first.y == second.y
        assert np.allclose(first.values, second.values, rtol=0, atol=1e-7)


def test_mismatched_operator(gamma):
    op = assemble(gamma, 1.0)
    with pytest.raises(ValueError) as error:
        neumann_columns(gamma, 2.0, [Y], EPS, operator=op)
    error.match("Operator does not match")


def test_constant_coeff_column_freezes_gamma(gamma):
    column = constant_coeff_column(gamma, 1.0, Y, EPS, 1e-10)
    assert column.gamma.is_constant
    assert column.gamma.at((0, 0, 0)) == pytest.approx(gamma.at(Y))


def test_reciprocity_mollified(column, adjoint):
    assert check_reciprocity(column, adjoint) < 1e-8


def test_reciprocity_node_reading(column, adjoint):
    error = check_reciprocity(column, adjoint, "node")
    assert np.isfinite(error)
    assert error < 0.5


def test_reciprocity_unknown_reading(column, adjoint):
    with pytest.raises(ValueError) as error:
        check_reciprocity(column, adjoint, "cell")
    error.match("Reading should be")


def test_reciprocity_needs_adjoint(column):
    with pytest.raises(ValueError) as error:
        check_reciprocity(column, column)
    error.match("primal column and an adjoint column")


def test_reciprocity_points_too_close(gamma, column):
    near = adjoint_column(gamma, 2.0, (0.45, 0.5, 0.5), EPS, 1e-10)
    with pytest.raises(ValueError) as error:
        check_reciprocity(column, near)
    error.match("more than")


def test_reciprocity_different_shift(gamma, column):
    other = adjoint_column(gamma, 1.0, X, EPS, 1e-10)
    with pytest.raises(ValueError) as error:
        check_reciprocity(column, other)
    error.match("different configurations")


def test_representation_solution_of_node_source(gamma, column):
    domain = gamma.domain
    f = np.zeros(domain.shape)
    f[domain.index_of(Y)] = 2.0
    u = representation_solution(gamma, 2.0, ScalarField(domain, f), [column])
    assert np.allclose(u.values, 2.0 * domain.cell_volume * column.values)


def test_representation_solution_coverage(gamma, column):
    domain = gamma.domain
    f = np.zeros(domain.shape)
    f[domain.index_of(X)] = 1.0
    with pytest.raises(ValueError) as error:
        representation_solution(gamma, 2.0, ScalarField(domain, f), [column])
    error.match("Insufficient column coverage")


def test_representation_solution_matches_direct_solve():
    domain = make_domain(1.0, 33)
    gamma = generate_coefficient(domain, Constant(1.0))
    eps_mol = 2 / 32
    op = assemble(gamma, 1.0)
    f = mollified_source(domain, domain.center, eps_mol)
    support = np.argwhere(f.values != 0)
    assert len(support) == 27
    columns = neumann_columns(gamma, 1.0,
                              [domain.coord(index) for index in support],
                              eps_mol, 1e-10, operator=op, method="direct",
                              threads=2)
    summed = representation_solution(gamma, 1.0, f, columns)
    direct, _ = solve(op, f, 1e-10, method="direct")
    points = [(0.6875, 0.5, 0.5), (0.5, 0.3125, 0.5), (0.5, 0.5, 0.75),
              (0.3125, 0.3125, 0.5), (0.75, 0.75, 0.75)]
    for point in points:
        assert summed.at(point) == pytest.approx(direct.at(point), rel=1e-3)


def test_representation_probe_matches_direct_solve(gamma, adjoint):
    f = mollified_source(gamma.domain, Y, EPS)
    u, _ = solve(assemble(gamma, 2.0), f, 1e-12, method="direct")
    probe = representation_probe(gamma, 2.0, f, [adjoint])
    density = Mollifier(X, EPS).density(gamma.domain)
    direct = np.sum(density * u.values) * gamma.domain.cell_volume
    assert probe[0] == pytest.approx(direct, rel=1e-8)


def test_representation_probe_rejects_primal(gamma, column):
    f = mollified_source(gamma.domain, Y, EPS)
    with pytest.raises(ValueError) as error:
        representation_probe(gamma, 2.0, f, [column])
    error.match("Expected adjoint columns")


def test_mollified_value_of_constant_field(column):
    constant = ScalarField(column.domain, np.full(column.domain.size, 3j))
    shifted = NeumannColumn(constant, column.y, column.k, column.eps_mol,
                            column.gamma, column.report, False, column.d_y)
    assert mollified_value(shifted, X) == pytest.approx(3j)


@pytest.mark.parametrize(["k", "gamma0"], [(1.0, 1.0), (100.0, 0.5)])
def test_yukawa_kappa(k, gamma0):
    kappa = yukawa_kappa(k, gamma0)
    assert kappa.real > 0
    assert kappa ** 2 == pytest.approx(1j * k / gamma0)
    assert yukawa_kappa(k, gamma0, adjoint=True) == kappa.conjugate()


def test_free_space_kernel_small_shift():
    r = np.array([0.1, 0.2])
    assert np.allclose(free_space_kernel(r, 1e-12, 1.0),
                       1 / (4 * np.pi * r), rtol=1e-6, atol=0)


def test_oracle_deviation_constant_coefficient():
    domain = make_domain(1.0, 33)
    gamma = generate_coefficient(domain, Constant(1.0))
    column = neumann_column(gamma, 100.0, domain.center, 2 / 32, 1e-10,
                            method="direct")
    assert oracle_deviation(column, 0.125, 0.25) < 0.1


def test_mollified_columns_settle_as_radius_halves():
    domain = make_domain(2.0, 41)
    gamma = generate_coefficient(domain, Constant(1.0))
    y = domain.center
    x = (y[0] + 0.2, y[1], y[2])
    values = [neumann_column(gamma, 1.0, y, eps_mol, 1e-10).field.at(x)
              for eps_mol in (0.4, 0.2, 0.1)]
    first = abs(values[0] - values[1])
    second = abs(values[1] - values[2])
    assert second < first


def test_oracle_deviation_empty_shell(column):
    with pytest.raises(ValueError) as error:
        oracle_deviation(column, 5.0, 6.0)
    error.match("No nodes")


def test_derivative_magnitude_of_linear_field(domain):
    values = domain.coordinates[..., 0] * 2.0 + 1.0
    assert np.allclose(derivative_magnitude(values, domain), 2.0)
    hessian = derivative_magnitude(values, domain, order=2)
    assert np.allclose(hessian, 0.0, atol=1e-10)


def test_derivative_magnitude_of_quadratic(domain):
    values = domain.coordinates[..., 1] ** 2
    hessian = derivative_magnitude(values, domain, order=2)
    assert np.allclose(hessian[:, 2:-2, :], 2.0)


def test_derivative_order(domain):
    with pytest.raises(ValueError) as error:
        derivative_magnitude(np.zeros(domain.shape), domain, 3)
    error.match("order should be 0, 1 or 2")


def test_column_derivatives(column):
    gradient = column_gradient(column)
    assert gradient.shape == (3,) + column.domain.shape
    assert column_hessian_norm(column).shape == column.domain.shape
