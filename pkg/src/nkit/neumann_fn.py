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

"""Averaged Neumann functions N^eps(., y) of L, their constant coefficient
comparators, adjoint columns and the representation formula.

A column solves -L_h v = Phi_eps(. - y) where Phi_eps is a smooth bump of
radius ``eps_mol`` with unit discrete mass, so ``v(x) ~ N(x, y)``.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .elliptic_op import (DiscreteOperator, SolveReport, assemble,
                          solve_batch)
from .errors import NonConvergenceError
from .grid_core import (CoefficientField, Domain, ScalarField, Vector,
                        as_vector, frozen_coefficient)

logger = logging.getLogger(__name__)

DEFAULT_EPS_CELLS = 3.0
MIN_EPS_CELLS = 2.0
# Slack on the cell-count checks for radii given as multiples of h.
_RESOLUTION_SLACK = 1e-9


def default_eps_mol(domain: Domain) -> float:
    return DEFAULT_EPS_CELLS * max(domain.h)


def _bump(s2: np.ndarray) -> np.ndarray:
    """exp(-1 / (1 - s^2)) inside the unit ball, 0 outside."""
    inside = s2 < 1
    values = np.zeros_like(s2)
    values[inside] = np.exp(-1.0 / (1.0 - s2[inside]))
    return values


@dataclass(frozen=True)
class Mollifier:
    center: Vector
    radius: float
    profile: str = "bump"

    def density(self, domain: Domain) -> np.ndarray:
        """Node values with unit discrete mass: h^3 * sum = 1."""
        s2 = (domain.radius_from(self.center) / self.radius) ** 2
        values = _bump(s2)
        mass = values.sum() * domain.cell_volume
        if mass == 0:
            raise ValueError(
                "Mollifier of radius {} at {} contains no nodes".format(
                    self.radius, self.center))
        return values / mass

    def stencil(self, h: Sequence[float]) -> np.ndarray:
        """Weights on integer lattice offsets from a node center, summing
        to one; the interior-node form of ``density`` times h^3."""
        reach = [int(math.ceil(self.radius / step)) for step in h]
        offsets = np.meshgrid(*[np.arange(-r, r + 1) * step
                                for r, step in zip(reach, h)], indexing="ij")
        values = _bump(sum(o ** 2 for o in offsets) / self.radius ** 2)
        return values / values.sum()


def _check_mollifier(domain: Domain, y: Vector, eps_mol: float):
    if eps_mol < MIN_EPS_CELLS * max(domain.h) * (1 - _RESOLUTION_SLACK):
        raise ValueError(
            "Mollification radius {} is below {} cells (h={}): the delta is "
            "under-resolved".format(eps_mol, MIN_EPS_CELLS, max(domain.h)))
    if domain.distance_to_boundary(y) <= eps_mol:
        raise ValueError(
            "Mollifier support B({}, {}) touches the boundary".format(
                y, eps_mol))


def mollified_source(domain: Domain, y: Sequence[float],
                     eps_mol: Optional[float] = None) -> ScalarField:
    y = as_vector(y, "source")
    if eps_mol is None:
        eps_mol = default_eps_mol(domain)
    _check_mollifier(domain, y, eps_mol)
    return ScalarField(domain, Mollifier(y, eps_mol).density(domain))


@dataclass(frozen=True, eq=False)
class NeumannColumn:
    field: ScalarField
    y: Vector
    k: float
    eps_mol: float
    gamma: CoefficientField
    report: SolveReport
    adjoint: bool
    d_y: float

    def __post_init__(self):
        if not self.report.converged:
            raise NonConvergenceError(
                "Neumann column at {} did not converge (residual {:.3e})"
                "".format(self.y, self.report.residual), self.report)
        if not self.d_y > 2 * self.eps_mol:
            raise ValueError(
                "Source distance to the boundary {} should exceed twice the "
                "mollification radius {}".format(self.d_y, self.eps_mol))

    @property
    def domain(self) -> Domain:
        return self.field.domain

    @property
    def values(self) -> np.ndarray:
        return self.field.values

    @property
    def gamma_at_source(self) -> float:
        return self.gamma.at(self.y)


def neumann_columns(gamma: CoefficientField, k: float,
                    points: Sequence[Sequence[float]],
                    eps_mol: Optional[float] = None, tol: float = 1e-8, *,
                    adjoint: bool = False, threads: int = 1,
                    method: str = "cocg", mean: str = "harmonic",
                    operator: Optional[DiscreteOperator] = None
                    ) -> List[NeumannColumn]:
    """Columns for several source points sharing one operator."""
    domain = gamma.domain
    if eps_mol is None:
        eps_mol = default_eps_mol(domain)
    if operator is None:
        operator = assemble(gamma, k, adjoint=adjoint, mean=mean)
    elif (operator.gamma is not gamma or operator.adjoint != adjoint or
          operator.k != k or operator.absorption is not None):
        raise ValueError("Operator does not match the requested columns")
    points = [as_vector(point, "source") for point in points]
    sources = []
    for y in points:
        d_y = domain.distance_to_boundary(y)
        if not d_y > 2 * eps_mol:
            raise ValueError(
                "Source {} is {} from the boundary, closer than twice the "
                "mollification radius {}".format(y, d_y, eps_mol))
        sources.append(mollified_source(domain, y, eps_mol))
    columns = []
    for y, (field, report) in zip(points, solve_batch(
            operator, sources, tol, threads=threads, method=method)):
        if not report.converged:
            raise NonConvergenceError(
                "Neumann column at {} did not converge (residual {:.3e})"
                "".format(y, report.residual), report)
        columns.append(NeumannColumn(field, y, float(k), float(eps_mol),
                                     gamma, report, adjoint,
                                     domain.distance_to_boundary(y)))
    logger.debug("Computed %d %s columns", len(columns),
                 "adjoint" if adjoint else "primal")
    return columns


def neumann_column(gamma: CoefficientField, k: float, y: Sequence[float],
                   eps_mol: Optional[float] = None, tol: float = 1e-8,
                   **kwargs) -> NeumannColumn:
    return neumann_columns(gamma, k, [y], eps_mol, tol, **kwargs)[0]


def constant_coeff_column(gamma: CoefficientField, k: float,
                          y: Sequence[float], eps_mol: Optional[float] = None,
                          tol: float = 1e-8, **kwargs) -> NeumannColumn:
    """Column of L_0 = gamma(y) Laplacian - ik, gamma frozen at the node
    nearest to y."""
    kwargs.pop("operator", None)
    return neumann_column(frozen_coefficient(gamma, y), k, y, eps_mol, tol,
                          **kwargs)


def adjoint_column(gamma: CoefficientField, k: float, x: Sequence[float],
                   eps_mol: Optional[float] = None, tol: float = 1e-8,
                   **kwargs) -> NeumannColumn:
    return neumann_column(gamma, k, x, eps_mol, tol, adjoint=True, **kwargs)


def mollified_value(column: NeumannColumn, point: Sequence[float]) -> complex:
    """<Phi_eps(. - point), column>, the column read through the mollifier."""
    density = Mollifier(as_vector(point), column.eps_mol).density(
        column.domain)
    return complex(np.sum(density * column.values) *
                   column.domain.cell_volume)


def _same_configuration(first: NeumannColumn, second: NeumannColumn) -> bool:
    return (first.domain == second.domain and first.k == second.k and
            first.eps_mol == second.eps_mol and
            (first.gamma is second.gamma or
             np.array_equal(first.gamma.values, second.gamma.values)))


def check_reciprocity(col_n: NeumannColumn, col_nstar: NeumannColumn,
                      reading: str = "mollified") -> float:
    """Relative error |N(x,y) - conj(N*(y,x))| / |N(x,y)|.

    ``col_n`` is sourced at y, ``col_nstar`` is an adjoint column sourced at
    x. With ``reading="mollified"`` both values are read through the same
    mollifier that produced the columns, for which the discrete identity is
    exact up to the solver tolerance. ``reading="node"`` takes nearest-node
    values and only agrees to the mollification error.
    """
    if col_n.adjoint or not col_nstar.adjoint:
        raise ValueError("Expected a primal column and an adjoint column")
    if not _same_configuration(col_n, col_nstar):
        raise ValueError("Columns were computed for different configurations")
    x, y = col_nstar.y, col_n.y
    distance = math.dist(x, y)
    if distance <= 2 * col_n.eps_mol:
        raise ValueError(
            "Points {} and {} should be more than {} apart".format(
                x, y, 2 * col_n.eps_mol))
    if reading == "mollified":
        n_xy = mollified_value(col_n, x)
        nstar_yx = mollified_value(col_nstar, y)
    elif reading == "node":
        n_xy = col_n.field.at(x)
        nstar_yx = col_nstar.field.at(y)
    else:
        raise ValueError("Reading should be 'mollified' or 'node', "
                         "got {!r}".format(reading))
    error = abs(n_xy - nstar_yx.conjugate()) / abs(n_xy)
    logger.debug("Reciprocity between %s and %s (%s reading): %.3e",
                 y, x, reading, error)
    return error


def _check_columns(gamma: CoefficientField, k: float,
                   columns: Sequence[NeumannColumn], adjoint: bool):
    for column in columns:
        if column.adjoint != adjoint:
            raise ValueError("Expected {} columns".format(
                "adjoint" if adjoint else "primal"))
        if column.k != k or column.domain != gamma.domain or not (
                column.gamma is gamma or
                np.array_equal(column.gamma.values, gamma.values)):
            raise ValueError("Column does not match (gamma, k)")


def representation_solution(gamma: CoefficientField, k: float,
                            f: ScalarField,
                            columns: Sequence[NeumannColumn]) -> ScalarField:
    """u(x) = sum_y N(x, y) f(y) h^3 over the nodes supporting f.

    Needs one primal column per node of supp f.
    """
    _check_columns(gamma, k, columns, adjoint=False)
    domain = f.domain
    by_node = {domain.index_of(column.y): column for column in columns}
    support = np.argwhere(f.values != 0)
    values = np.zeros(domain.shape, dtype=np.complex128)
    for index in map(tuple, support):
        column = by_node.get(index)
        if column is None:
            raise ValueError(
                "Insufficient column coverage: no column for source node "
                "{}".format(index))
        values += f.values[index] * column.values
    return ScalarField(domain, values * domain.cell_volume)


def representation_probe(gamma: CoefficientField, k: float, f: ScalarField,
                         adjoint_columns: Sequence[NeumannColumn]
                         ) -> np.ndarray:
    """The representation formula at the sources of adjoint columns.

    By reciprocity N(x, y) = conj(N*(y, x)), so one adjoint column at x
    gives u(x) = h^3 sum_y conj(N*(y, x)) f(y).
    """
    _check_columns(gamma, k, adjoint_columns, adjoint=True)
    return np.array([np.sum(np.conj(column.values) * f.values) *
                     f.domain.cell_volume for column in adjoint_columns])


def yukawa_kappa(k: float, gamma0: float, adjoint: bool = False) -> complex:
    """Root of kappa^2 = ik/gamma0 with positive real part."""
    kappa = complex(np.sqrt(1j * k / gamma0))
    return kappa.conjugate() if adjoint else kappa


def free_space_kernel(r: np.ndarray, k: float, gamma0: float,
                      adjoint: bool = False) -> np.ndarray:
    """exp(-kappa r) / (4 pi gamma0 r), the free space fundamental solution
    of -(gamma0 Laplacian - ik)."""
    kappa = yukawa_kappa(k, gamma0, adjoint)
    r = np.asarray(r, dtype=np.float64)
    return np.exp(-kappa * r) / (4 * np.pi * gamma0 * r)


def oracle_deviation(column: NeumannColumn, r_min: float, r_max: float
                     ) -> float:
    """Largest relative deviation from the free space kernel on the nodes
    with r_min <= |x - y| <= r_max."""
    radius = column.domain.radius_from(column.y)
    shell = (radius >= r_min) & (radius <= r_max)
    if not shell.any():
        raise ValueError("No nodes with {} <= r <= {}".format(r_min, r_max))
    oracle = free_space_kernel(radius[shell], column.k,
                               column.gamma_at_source, column.adjoint)
    return float(np.max(np.abs(column.values[shell] - oracle) /
                        np.abs(oracle)))


def derivative_magnitude(values: np.ndarray, domain: Domain,
                         order: int = 1) -> np.ndarray:
    """|grad u| (order 1) or the Frobenius norm of the Hessian (order 2).

    Central differences inside, one sided differences on the boundary.
    """
    if order not in (0, 1, 2):
        raise ValueError("Derivative order should be 0, 1 or 2")
    if order == 0:
        return np.abs(values)
    gradient = np.gradient(values, *domain.h)
    if order == 1:
        return np.sqrt(sum(np.abs(g) ** 2 for g in gradient))
    total = np.zeros(domain.shape)
    for g in gradient:
        for second in np.gradient(g, *domain.h):
            total += np.abs(second) ** 2
    return np.sqrt(total)


def column_gradient(column: NeumannColumn) -> np.ndarray:
    """Gradient of the column, shape (3, n, n, n)."""
    return np.stack(np.gradient(column.values, *column.domain.h))


def column_hessian_norm(column: NeumannColumn) -> np.ndarray:
    return derivative_magnitude(column.values, column.domain, order=2)
