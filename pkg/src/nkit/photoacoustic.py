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

"""Quantitative photoacoustics with a small absorbing anomaly.

The fluence solves the diffusion model

    (i omega/c + mu_a chi_D - div(1 / (3 mu_s) grad)) Phi = 0

with conormal data g, on the same discretization as :mod:`nkit.elliptic_op`
(gamma = 1 / (3 mu_s), k = omega / c). The anomaly is D = z + eps * B. This
module provides the forward solves, the absorbed energy, the representation
identity for Phi - Phi0, the small volume asymptotic formula, the integral
operators of the anomaly equation with its two term series, and a fixed
point recovery of mu_a.

Kernels are in the fluence orientation N(x, y) ~ 3 mu_s Gamma(x - y), the
negative of a :class:`~nkit.neumann_fn.NeumannColumn`.
"""

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import (Any, Dict, List, Mapping, NamedTuple, Optional,
                    Sequence, Tuple, Union)

import numpy as np

from scipy import ndimage
from scipy.optimize import nnls

from .elliptic_op import (K_FLOOR, DiscreteOperator, SolveReport, assemble,
                          boundary_load, node_weights, solve)
from .errors import (NonConvergenceError, SeriesHypothesisError,
                     UnderresolvedAnomalyError)
from .estimates import FAIL, PASS, Verdict
from .grid_core import (CoefficientField, DiffusionRecip, Domain, ScalarField,
                        Vector, as_vector, generate_coefficient,
                        validate_ellipticity)
from .neumann_fn import (MIN_EPS_CELLS, Mollifier, default_eps_mol,
                         neumann_columns)
from .potentials import (ReferenceShape, newtonian_potential,
                         single_layer_normal)

logger = logging.getLogger(__name__)

MODELS = ("simplified", "full")
MIN_ANOMALY_NODES = 27
MIN_ANOMALY_CELLS = 2.0
BOUNDARY_FRACTION = 0.25
SMALLNESS_LIMIT = 0.3
SUBCELL_SAMPLES = 4
KERNEL_CHUNK = 16
STUDY_SLACK = 1.1
MAX_INVERSION_ITERATIONS = 100
INVERSION_RTOL = 1e-8
_RESOLUTION_SLACK = 1e-9


@dataclass(frozen=True, eq=False)
class OpticalMedium:
    """Scattering field, modulation omega / c and boundary illumination.

    ``g`` maps face names (``"x-"``, ``"x+"``, ... ``"z+"``) to constant
    conormal data on that face.
    """
    domain: Domain
    mu_s: Union[float, np.ndarray]
    omega_over_c: float
    g: Mapping[str, complex] = field(default_factory=lambda: {"z-": 1.0})

    def __post_init__(self):
        if not self.omega_over_c >= K_FLOOR:
            raise ValueError("omega / c should be at least {}, got {}".format(
                K_FLOOR, self.omega_over_c))
        report = validate_ellipticity(1.0 / (3.0 * self.mu_s_values))
        if not report.ok:
            raise ValueError("1 / (3 mu_s) is not elliptic")
        object.__setattr__(self, "g", dict(self.g))

    @cached_property
    def mu_s_values(self) -> np.ndarray:
        values = np.array(np.broadcast_to(
            np.asarray(self.mu_s, dtype=np.float64), self.domain.shape))
        if not np.all(np.isfinite(values)) or values.min() <= 0:
            raise ValueError("Scattering coefficient should be positive")
        values.setflags(write=False)
        return values

    @cached_property
    def gamma(self) -> CoefficientField:
        """The background diffusion coefficient 1 / (3 mu_s)."""
        return generate_coefficient(self.domain, DiffusionRecip(self.mu_s))

    @property
    def k(self) -> float:
        return float(self.omega_over_c)

    def mu_s_at(self, coord: Sequence[float]) -> float:
        return float(self.mu_s_values[self.domain.index_of(coord)])

    def boundary_load(self) -> np.ndarray:
        return boundary_load(self.domain, self.g)

    def scaled(self, factor: complex) -> "OpticalMedium":
        """The same medium with the illumination multiplied by ``factor``."""
        return replace(self, g={face: value * factor
                                for face, value in self.g.items()})


@dataclass(frozen=True)
class AnomalyConfig:
    z: Vector
    eps: float
    shape: ReferenceShape
    mu_a: float

    def __post_init__(self):
        object.__setattr__(self, "z", as_vector(self.z, "anomaly center"))
        if not self.eps > 0:
            raise ValueError("Anomaly scale eps should be positive, got "
                             "{}".format(self.eps))
        if not self.mu_a >= 0:
            raise ValueError("Absorption mu_a should be nonnegative, got "
                             "{}".format(self.mu_a))

    def with_eps(self, eps: float) -> "AnomalyConfig":
        return replace(self, eps=eps)

    def with_mu_a(self, mu_a: float) -> "AnomalyConfig":
        return replace(self, mu_a=mu_a)

    def contains(self, points: np.ndarray) -> np.ndarray:
        return self.shape.contains((np.asarray(points) - self.z) / self.eps)

    def validate(self, domain: Domain):
        """Geometric admissibility: dist(z, boundary) >= C0 with
        C0 = 0.25 * min extent, and eps * diam(B) < C0 / 2."""
        c0 = BOUNDARY_FRACTION * domain.min_extent
        distance = domain.distance_to_boundary(self.z)
        if distance < c0:
            raise ValueError(
                "Anomaly center {} is {} from the boundary, closer than "
                "C0={}".format(self.z, distance, c0))
        if not self.eps * self.shape.diameter < c0 / 2:
            raise ValueError(
                "Anomaly diameter {} should be below C0/2={}".format(
                    self.eps * self.shape.diameter, c0 / 2))


def smallness_flags(anomaly: AnomalyConfig, medium: OpticalMedium,
                    warn: bool = True) -> Dict[str, float]:
    """eps sqrt(mu_s) and mu_a / mu_s at z, warned about above 0.3."""
    mu_s_bar = medium.mu_s_at(anomaly.z)
    flags = {"eps_sqrt_mu_s": anomaly.eps * math.sqrt(mu_s_bar),
             "mu_a_over_mu_s": anomaly.mu_a / mu_s_bar}
    if warn:
        for name, value in flags.items():
            if value > SMALLNESS_LIMIT:
                message = "Smallness flag {} = {:.3g} exceeds {}".format(
                    name, value, SMALLNESS_LIMIT)
                logger.warning(message)
                warnings.warn(message, RuntimeWarning)
    return flags


@dataclass(frozen=True, eq=False)
class AnomalyNodes:
    """Grid realization of D: membership mask, indicator chi (0/1 or
    sub-cell volume fractions) and the node list in lexicographic order."""
    domain: Domain
    mask: np.ndarray
    chi: np.ndarray
    indices: np.ndarray

    @property
    def count(self) -> int:
        return len(self.indices)

    @property
    def coordinates(self) -> np.ndarray:
        return self.domain.coordinates[self.mask]

    @property
    def weights(self) -> np.ndarray:
        """Quadrature weights h^3 chi on the node list."""
        return self.domain.cell_volume * self.chi[self.mask]

    def same_as(self, other: "AnomalyNodes") -> bool:
        return other is self or (
            other.domain == self.domain and
            np.array_equal(other.chi, self.chi))

    def restrict(self, values: Union[ScalarField, np.ndarray]) -> np.ndarray:
        return np.asarray(getattr(values, "values", values))[self.mask]

    def bounds(self, pad: int = 1) -> Tuple[np.ndarray, np.ndarray]:
        low = np.maximum(self.indices.min(axis=0) - pad, 0)
        high = np.minimum(self.indices.max(axis=0) + pad + 1,
                          self.domain.n)
        return low, high


def _volume_fractions(domain: Domain, anomaly: AnomalyConfig,
                      near: np.ndarray) -> np.ndarray:
    offsets = (np.arange(SUBCELL_SAMPLES) + 0.5) / SUBCELL_SAMPLES - 0.5
    grid = np.stack(np.meshgrid(offsets, offsets, offsets, indexing="ij"),
                    axis=-1).reshape(-1, 3) * np.asarray(domain.h)
    chi = np.zeros(domain.shape)
    for index in map(tuple, np.argwhere(near)):
        inside = anomaly.contains(domain.coordinates[index] + grid)
        chi[index] = inside.mean()
    return chi


def anomaly_nodes(domain: Domain, anomaly: AnomalyConfig,
                  volume_fraction: bool = False) -> AnomalyNodes:
    """Nodes of D = z + eps B by node-center membership, or by sub-cell
    volume fractions when ``volume_fraction`` is set."""
    anomaly.validate(domain)
    h = max(domain.h)
    if anomaly.eps * anomaly.shape.inradius < (
            MIN_ANOMALY_CELLS * h * (1 - _RESOLUTION_SLACK)):
        raise UnderresolvedAnomalyError(
            "Anomaly inradius {} is below {} cells (h={})".format(
                anomaly.eps * anomaly.shape.inradius, MIN_ANOMALY_CELLS, h))
    if volume_fraction:
        radius = domain.radius_from(anomaly.z)
        near = radius <= anomaly.eps * anomaly.shape.diameter / 2 + h
        chi = _volume_fractions(domain, anomaly, near)
        mask = chi > 0
    else:
        mask = anomaly.contains(domain.coordinates)
        chi = mask.astype(np.float64)
    count = int(mask.sum())
    if count < MIN_ANOMALY_NODES:
        raise UnderresolvedAnomalyError(
            "Anomaly covers {} nodes, at least {} are needed".format(
                count, MIN_ANOMALY_NODES))
    mask.setflags(write=False)
    chi.setflags(write=False)
    logger.debug("Anomaly at %s with eps=%g covers %d nodes", anomaly.z,
                 anomaly.eps, count)
    return AnomalyNodes(domain, mask, chi, np.argwhere(mask))


@dataclass(frozen=True, eq=False)
class FluenceField:
    field: ScalarField
    anomaly: Optional[AnomalyConfig]
    report: SolveReport
    model: str = "simplified"

    def __post_init__(self):
        if not self.report.converged:
            raise NonConvergenceError(
                "Fluence solve did not converge (residual {:.3e})".format(
                    self.report.residual), self.report)

    @property
    def with_anomaly(self) -> bool:
        return self.anomaly is not None

    @property
    def domain(self) -> Domain:
        return self.field.domain

    @property
    def values(self) -> np.ndarray:
        return self.field.values

    def at(self, coord: Sequence[float]) -> complex:
        return self.field.at(coord)


@dataclass(frozen=True, eq=False)
class AbsorbedEnergy:
    field: ScalarField
    anomaly: AnomalyConfig
    support: np.ndarray

    @property
    def values(self) -> np.ndarray:
        return self.field.values


@dataclass(frozen=True, eq=False)
class AnomalyField:
    """Values on the nodes of D, in the order of ``nodes.indices``."""
    nodes: AnomalyNodes
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.complex128).ravel()
        if values.size != self.nodes.count:
            raise ValueError("Got {} values for {} anomaly nodes".format(
                values.size, self.nodes.count))
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def norm(self) -> float:
        """Discrete L2 norm over D."""
        return float(np.sqrt(np.sum(self.nodes.weights *
                                    np.abs(self.values) ** 2)))

    def to_scalar_field(self) -> ScalarField:
        values = np.zeros(self.nodes.domain.shape, dtype=np.complex128)
        values[self.nodes.mask] = self.values
        return ScalarField(self.nodes.domain, values)

    def _check(self, other: "AnomalyField"):
        if not other.nodes.same_as(self.nodes):
            raise ValueError("Fields live on different anomaly node sets")

    def __add__(self, other: "AnomalyField") -> "AnomalyField":
        self._check(other)
        return AnomalyField(self.nodes, self.values + other.values)

    def __sub__(self, other: "AnomalyField") -> "AnomalyField":
        self._check(other)
        return AnomalyField(self.nodes, self.values - other.values)

    def __mul__(self, scalar: complex) -> "AnomalyField":
        return AnomalyField(self.nodes, self.values * scalar)

    __rmul__ = __mul__


def _check_model(model: str):
    if model not in MODELS:
        raise ValueError("Model should be one of {}, got {!r}".format(
            MODELS, model))


def forward_operator(medium: OpticalMedium,
                     anomaly: Optional[AnomalyConfig] = None, *,
                     model: str = "simplified", volume_fraction: bool = False,
                     adjoint: bool = False) -> DiscreteOperator:
    """The discrete diffusion operator, with the anomaly when given.

    The simplified model adds mu_a chi_D to the zeroth order term; the
    full model also uses gamma = 1 / (3 (mu_s + mu_a chi_D)).
    """
    _check_model(model)
    if anomaly is None or anomaly.mu_a == 0:
        return assemble(medium.gamma, medium.k, adjoint=adjoint)
    chi = anomaly_nodes(medium.domain, anomaly, volume_fraction).chi
    gamma = medium.gamma
    if model == "full":
        gamma = generate_coefficient(medium.domain, DiffusionRecip(
            medium.mu_s_values + anomaly.mu_a * chi))
    return assemble(gamma, medium.k, adjoint=adjoint,
                    absorption=anomaly.mu_a * chi)


def _fluence(op: DiscreteOperator, medium: OpticalMedium,
             anomaly: Optional[AnomalyConfig], tol: float, method: str,
             model: str) -> FluenceField:
    load = medium.boundary_load()
    if op.adjoint:
        load = np.conj(load)
    if not np.any(load):
        logger.warning("Illumination g is identically zero")
    rhs = ScalarField.zeros(medium.domain)
    phi, report = solve(op, rhs, tol, method=method, boundary_load=load)
    logger.info("Fluence solve (%s): %d iterations, residual %.2e",
                "anomaly" if anomaly is not None else "background",
                report.iterations, report.residual)
    return FluenceField(phi, anomaly, report, model)


def solve_background(medium: OpticalMedium, tol: float = 1e-8, *,
                     method: str = "cocg",
                     adjoint: bool = False) -> FluenceField:
    """Phi0 for the medium without anomaly.

    ``adjoint=True`` solves with -i omega / c and conjugated data, which
    gives the complex conjugate fluence.
    """
    op = forward_operator(medium, adjoint=adjoint)
    return _fluence(op, medium, None, tol, method, "simplified")


def solve_with_anomaly(medium: OpticalMedium, anomaly: AnomalyConfig,
                       tol: float = 1e-8, *, model: str = "simplified",
                       volume_fraction: bool = False,
                       method: str = "cocg") -> FluenceField:
    anomaly_nodes(medium.domain, anomaly, volume_fraction)
    op = forward_operator(medium, anomaly, model=model,
                          volume_fraction=volume_fraction)
    return _fluence(op, medium, anomaly, tol, method, model)


def absorbed_energy(fluence: FluenceField, anomaly: AnomalyConfig,
                    volume_fraction: bool = False) -> AbsorbedEnergy:
    """A = mu_a chi_D Phi."""
    nodes = anomaly_nodes(fluence.domain, anomaly, volume_fraction)
    values = anomaly.mu_a * nodes.chi * fluence.values
    return AbsorbedEnergy(ScalarField(fluence.domain, values), anomaly,
                          nodes.mask)


def flux_balance(fluence: FluenceField, medium: OpticalMedium,
                 volume_fraction: bool = False) -> float:
    """Relative mismatch of sum_i w_i (i omega/c + mu_a chi_i) Phi_i against
    the integrated illumination; zero up to the solver tolerance."""
    weights = node_weights(medium.domain)
    zeroth = np.full(medium.domain.size, 1j * medium.k)
    if fluence.anomaly is not None and fluence.anomaly.mu_a != 0:
        chi = anomaly_nodes(medium.domain, fluence.anomaly,
                            volume_fraction).chi.ravel()
        zeroth = zeroth + fluence.anomaly.mu_a * chi
    absorbed = np.sum(weights * zeroth * fluence.field.flat)
    supplied = np.sum(medium.boundary_load())
    if supplied == 0:
        return float(abs(absorbed))
    return float(abs(absorbed - supplied) / abs(supplied))


def _column_operator(medium: OpticalMedium) -> DiscreteOperator:
    return assemble(medium.gamma, medium.k, adjoint=True)


class MainAsymCheck(NamedTuple):
    points: List[Tuple[float, float, float]]
    lhs: np.ndarray
    rhs: np.ndarray
    lhs_mollified: np.ndarray
    relative_error: float
    absolute_error: float
    mollified_error: float


def default_probe_points(domain: Domain, anomaly: AnomalyConfig
                         ) -> List[Vector]:
    """Nodes at 3 eps diam(B) from z along the positive axes."""
    distance = 3 * anomaly.eps * max(anomaly.shape.diameter, 1.0)
    points = []
    for axis in range(3):
        point = np.array(anomaly.z)
        point[axis] += distance
        points.append(tuple(domain.coord(domain.index_of(point))))
    return points


def identity_check_mainasym(medium: OpticalMedium, anomaly: AnomalyConfig,
                            columns=None, *,
                            points: Optional[Sequence[Sequence[float]]] = None,
                            tol: float = 1e-10, model: str = "simplified",
                            volume_fraction: bool = False,
                            eps_mol: Optional[float] = None,
                            background: Optional[FluenceField] = None,
                            fluence: Optional[FluenceField] = None,
                            threads: int = 1,
                            method: str = "cocg") -> MainAsymCheck:
    """Compare (Phi - Phi0)(x) with its representation over D.

    The right hand side is mu_a h^3 sum_D Phi(y) N(x, y) plus the discrete
    pairing of the coefficient contrast of the forward model with
    grad Phi and grad_y N(x, .). N(x, .) comes from one adjoint column
    sourced at x, by reciprocity. ``columns`` may hold those adjoint
    columns; otherwise they are computed at ``points``.
    """
    domain = medium.domain
    nodes = anomaly_nodes(domain, anomaly, volume_fraction)
    if columns is None:
        if points is None:
            points = default_probe_points(domain, anomaly)
    else:
        points = [column.y for column in columns]
    points = [as_vector(point, "probe point") for point in points]
    for point in points:
        if (nodes.mask[domain.index_of(point)] or
                math.dist(point, anomaly.z) <= 2 * anomaly.eps):
            raise ValueError(
                "Probe point {} should lie outside D, more than 2 eps from "
                "z".format(point))
    if background is None:
        background = solve_background(medium, tol, method=method)
    if fluence is None:
        fluence = solve_with_anomaly(medium, anomaly, tol, model=model,
                                     volume_fraction=volume_fraction,
                                     method=method)
    op_0 = _column_operator(medium)
    op_a = forward_operator(medium, anomaly, model=model,
                            volume_fraction=volume_fraction)
    if columns is None:
        columns = neumann_columns(medium.gamma, medium.k, points, eps_mol,
                                  tol, adjoint=True, threads=threads,
                                  method=method, operator=op_0)
    for column in columns:
        if not column.adjoint or column.k != medium.k or (
                column.domain != domain):
            raise ValueError("Expected adjoint diffusion columns for "
                             "omega/c={}".format(medium.k))

    phi = fluence.field.flat
    difference = fluence.values - background.values
    contrast = [tau_a - tau_0 for tau_a, tau_0 in
                zip(op_a.transmissibilities, op_0.transmissibilities)]
    absorption = (np.zeros(domain.size) if op_a.absorption is None
                  else op_a.absorption)
    lhs, rhs, lhs_mollified = [], [], []
    for point, column in zip(points, columns):
        kernel = -np.conj(column.field.flat)
        first = domain.cell_volume * np.sum(op_a.weights * absorption *
                                            phi * kernel)
        second = op_0.bilinear(kernel, phi, transmissibilities=contrast)
        rhs.append(first + second)
        lhs.append(difference[domain.index_of(point)])
        density = Mollifier(point, column.eps_mol).density(domain)
        lhs_mollified.append(np.sum(density * difference) *
                             domain.cell_volume)
    lhs, rhs = np.array(lhs), np.array(rhs)
    lhs_mollified = np.array(lhs_mollified)
    absolute = float(np.max(np.abs(lhs - rhs)))
    scale = float(np.max(np.abs(lhs)))
    relative = absolute / scale if scale > 0 else float("nan")
    mollified_scale = float(np.max(np.abs(lhs_mollified)))
    mollified = float(np.max(np.abs(lhs_mollified - rhs)))
    if mollified_scale > 0:
        mollified /= mollified_scale
    logger.info("Representation identity: relative error %.3e (node), "
                "%.3e (mollified), absolute %.3e", relative, mollified,
                absolute)
    return MainAsymCheck([tuple(p) for p in points], lhs, rhs,
                         lhs_mollified, relative, absolute, mollified)


def _central_gradient(fluence: FluenceField,
                      coord: Sequence[float]) -> np.ndarray:
    domain = fluence.domain
    index = np.array(domain.index_of(coord))
    gradient = np.zeros(3, dtype=np.complex128)
    for axis in range(3):
        step = np.zeros(3, dtype=int)
        step[axis] = 1
        low = tuple(np.maximum(index - step, 0))
        high = tuple(np.minimum(index + step, domain.n - 1))
        span = (high[axis] - low[axis]) * domain.h[axis]
        gradient[axis] = (fluence.values[high] - fluence.values[low]) / span
    return gradient


def _asymptotic_coefficient(medium: OpticalMedium, anomaly: AnomalyConfig,
                            background: FluenceField) -> complex:
    """Delta_asy / mu_a: the asymptotic perturbation is linear in mu_a."""
    mu_s_bar = medium.mu_s_at(anomaly.z)
    phi0 = background.at(anomaly.z)
    monopole = newtonian_potential(anomaly.shape)
    dipole = single_layer_normal(anomaly.shape)
    gradient = _central_gradient(background, anomaly.z)
    return complex(3 * anomaly.eps ** 2 * mu_s_bar * phi0 * monopole -
                   anomaly.eps / mu_s_bar * np.dot(dipole, gradient))


def asymptotic_perturbation(medium: OpticalMedium, anomaly: AnomalyConfig,
                            background: FluenceField) -> complex:
    """3 eps^2 mu_a mu_s Phi0(z) N_B(0) - eps mu_a / mu_s S_B[nu](0).grad
    Phi0(z), with mu_s taken at the node nearest to z."""
    smallness_flags(anomaly, medium)
    if anomaly.mu_a == 0:
        return 0j
    return anomaly.mu_a * _asymptotic_coefficient(medium, anomaly,
                                                  background)


def error_scale(anomaly: AnomalyConfig, mu_s_bar: float) -> float:
    """eps mu_s mu_a (1 + eps sqrt(mu_s))."""
    return (anomaly.eps * mu_s_bar * anomaly.mu_a *
            (1 + anomaly.eps * math.sqrt(mu_s_bar)))


class ConvergenceRow(NamedTuple):
    eps: float
    delta_direct: complex
    delta_asymptotic: complex
    absolute_error: float
    relative_error: float
    error_scale: float
    eps_sqrt_mu_s: float
    mu_a_over_mu_s: float


@dataclass(frozen=True, eq=False)
class ConvergenceStudy:
    rows: List[ConvergenceRow]
    verdict: Verdict

    def table(self) -> List[Tuple[float, ...]]:
        return [(row.eps, row.delta_direct.real, row.delta_direct.imag,
                 row.delta_asymptotic.real, row.delta_asymptotic.imag,
                 row.absolute_error, row.relative_error, row.error_scale)
                for row in self.rows]


def asymptotic_convergence_study(medium: OpticalMedium,
                                 anomaly: AnomalyConfig,
                                 eps_list: Sequence[float],
                                 tol: float = 1e-10, *,
                                 model: str = "simplified",
                                 volume_fraction: bool = False,
                                 threads: int = 1,
                                 method: str = "cocg") -> ConvergenceStudy:
    """Direct against asymptotic perturbation at z over decreasing eps.

    PASS iff every relative error is at most 1.1 times the previous one.
    """
    eps_list = [float(eps) for eps in eps_list]
    if len(eps_list) < 3:
        raise ValueError("The study needs at least 3 eps values, got "
                         "{}".format(len(eps_list)))
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps values should be strictly decreasing")
    anomalies = [anomaly.with_eps(eps) for eps in eps_list]
    for candidate in anomalies:
        anomaly_nodes(medium.domain, candidate, volume_fraction)
    background = solve_background(medium, tol, method=method)

    def work(candidate):
        return solve_with_anomaly(medium, candidate, tol, model=model,
                                  volume_fraction=volume_fraction,
                                  method=method)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            fluences = list(executor.map(work, anomalies))
    else:
        fluences = [work(candidate) for candidate in anomalies]

    mu_s_bar = medium.mu_s_at(anomaly.z)
    rows = []
    for candidate, fluence in zip(anomalies, fluences):
        direct = fluence.at(candidate.z) - background.at(candidate.z)
        asymptotic = asymptotic_perturbation(medium, candidate, background)
        absolute = abs(direct - asymptotic)
        relative = absolute / abs(direct) if direct != 0 else float("nan")
        flags = smallness_flags(candidate, medium, warn=False)
        rows.append(ConvergenceRow(
            candidate.eps, complex(direct), complex(asymptotic), absolute,
            relative, error_scale(candidate, mu_s_bar),
            flags["eps_sqrt_mu_s"], flags["mu_a_over_mu_s"]))
        logger.info("eps=%g: direct %.6e%+.6ej, asymptotic %.6e%+.6ej, "
                    "relative error %.3e", candidate.eps, direct.real,
                    direct.imag, asymptotic.real, asymptotic.imag, relative)
    errors = [row.relative_error for row in rows]
    passed = all(later <= STUDY_SLACK * earlier
                 for earlier, later in zip(errors, errors[1:]))
    verdict = Verdict("asymptotic-convergence", PASS if passed else FAIL,
                      details={"relative_errors": errors,
                               "eps": eps_list, "slack": STUDY_SLACK})
    logger.info("Asymptotic convergence study -> %s", verdict.status)
    return ConvergenceStudy(rows, verdict)


def _lattice_gamma(offsets: np.ndarray, h: Sequence[float]) -> np.ndarray:
    """Gamma on integer lattice offsets; the self value is the average of
    Gamma over the ball with the volume of one cell."""
    distance = np.linalg.norm(offsets * np.asarray(h), axis=-1)
    radius = (3 * float(np.prod(h)) / (4 * np.pi)) ** (1 / 3)
    values = np.empty(distance.shape)
    self_cell = distance == 0
    values[self_cell] = -3 / (8 * np.pi * radius)
    values[~self_cell] = -1 / (4 * np.pi * distance[~self_cell])
    return values


def _offset_lattice(reach: np.ndarray) -> np.ndarray:
    axes = [np.arange(-r, r + 1) for r in reach]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


@dataclass(frozen=True, eq=False)
class AnomalyKernel:
    """Rows N(x_i, .) on a window around D for every node x_i of D.

    ``rows[i]`` covers ``window`` (D's bounding box plus one node). Near
    the diagonal the mollified column is corrected by
    3 mu_s (Gamma_h - Gamma_h^eps); ``remainder[i]`` holds
    R(x_i, .) = N(x_i, .) - 3 mu_s Gamma_h(x_i - .).
    """
    anomaly: AnomalyConfig
    nodes: AnomalyNodes
    low: np.ndarray
    high: np.ndarray
    rows: np.ndarray
    remainder: np.ndarray
    mu_s_bar: float
    eps_mol: float
    reports: List[SolveReport] = field(default_factory=list)

    @property
    def window(self) -> Tuple[slice, slice, slice]:
        return tuple(slice(lo, hi) for lo, hi in zip(self.low, self.high))

    @property
    def local_indices(self) -> np.ndarray:
        """Positions of D's nodes inside the window."""
        return self.nodes.indices - self.low

    def on_nodes(self, blocks: np.ndarray) -> np.ndarray:
        """Restrict window blocks (m, wx, wy, wz) to D x D."""
        local = self.local_indices
        return blocks[:, local[:, 0], local[:, 1], local[:, 2]]

    def matrix(self) -> np.ndarray:
        """N(x_i, x_j) over D x D."""
        return self.on_nodes(self.rows)


def anomaly_kernel(medium: OpticalMedium, anomaly: AnomalyConfig,
                   eps_mol: Optional[float] = None, tol: float = 1e-8, *,
                   volume_fraction: bool = False, threads: int = 1,
                   method: str = "cocg") -> AnomalyKernel:
    """One adjoint diffusion column per node of D, read by reciprocity."""
    domain = medium.domain
    nodes = anomaly_nodes(domain, anomaly, volume_fraction)
    if eps_mol is None:
        eps_mol = default_eps_mol(domain)
    if eps_mol < MIN_EPS_CELLS * max(domain.h) * (1 - _RESOLUTION_SLACK):
        raise ValueError("Mollification radius {} is under-resolved".format(
            eps_mol))
    low, high = nodes.bounds()
    window = tuple(slice(lo, hi) for lo, hi in zip(low, high))
    span = high - low
    stencil = Mollifier((0.0, 0.0, 0.0), eps_mol).stencil(domain.h)
    reach = span + (np.array(stencil.shape) - 1) // 2
    gamma_h = _lattice_gamma(_offset_lattice(reach), domain.h)
    gamma_eps = ndimage.convolve(gamma_h, stencil, mode="constant", cval=0.0)
    mu_s_bar = medium.mu_s_at(anomaly.z)

    op = _column_operator(medium)
    points = [tuple(domain.coord(index)) for index in nodes.indices]
    rows, remainder, reports = [], [], []
    for start in range(0, len(points), KERNEL_CHUNK):
        chunk = points[start:start + KERNEL_CHUNK]
        columns = neumann_columns(medium.gamma, medium.k, chunk, eps_mol, tol,
                                  adjoint=True, threads=threads,
                                  method=method, operator=op)
        for offset, column in enumerate(columns):
            index = nodes.indices[start + offset]
            origin = reach + low - index
            block = tuple(slice(o, o + s) for o, s in zip(origin, span))
            mollified = -np.conj(column.values[window])
            rows.append(mollified + 3 * mu_s_bar * (gamma_h[block] -
                                                    gamma_eps[block]))
            remainder.append(mollified - 3 * mu_s_bar * gamma_eps[block])
            reports.append(column.report)
        logger.debug("Kernel rows %d/%d", len(rows), len(points))
    logger.info("Anomaly kernel: %d rows on a %s window", len(rows),
                tuple(int(s) for s in span))
    return AnomalyKernel(anomaly, nodes, low, high, np.array(rows),
                         np.array(remainder), mu_s_bar, float(eps_mol),
                         reports)


def _check_kernel(kernel: AnomalyKernel, anomaly: AnomalyConfig):
    """The kernel depends on the geometry of D only, not on mu_a."""
    built = kernel.anomaly
    if (built.z != anomaly.z or built.eps != anomaly.eps or
            built.shape != anomaly.shape):
        raise ValueError("Insufficient kernel coverage: the kernel was built "
                         "for a different anomaly geometry")


def n_of_x(anomaly: AnomalyConfig, kernel: AnomalyKernel) -> AnomalyField:
    """n(x) = integral over D of N(x, y) dy at every node of D."""
    _check_kernel(kernel, anomaly)
    nodes = kernel.nodes
    weights = nodes.domain.cell_volume * nodes.chi[kernel.window]
    values = np.tensordot(kernel.rows, weights, axes=3)
    return AnomalyField(nodes, values)


def multiplier_M(f: AnomalyField, n_field: AnomalyField,
                 mu_a: float) -> AnomalyField:
    """M[f] = mu_a n f."""
    f._check(n_field)
    return AnomalyField(f.nodes, mu_a * n_field.values * f.values)


def _on_anomaly(f: Union[AnomalyField, ScalarField, np.ndarray],
                nodes: AnomalyNodes) -> AnomalyField:
    if isinstance(f, AnomalyField):
        if not f.nodes.same_as(nodes):
            raise ValueError("Fields live on different anomaly node sets")
        return AnomalyField(nodes, f.values)
    return AnomalyField(nodes, nodes.restrict(f))


def masked_gradient(f: AnomalyField) -> np.ndarray:
    """Gradient of f on D, shape (m, 3): central differences where both
    neighbours lie in D, one sided where one does, zero otherwise."""
    nodes = f.nodes
    domain = nodes.domain
    values = np.zeros(domain.shape, dtype=np.complex128)
    values[nodes.mask] = f.values
    gradient = np.zeros((nodes.count, 3), dtype=np.complex128)
    for axis in range(3):
        step = np.zeros(3, dtype=int)
        step[axis] = 1
        upper = np.minimum(nodes.indices + step, domain.n - 1)
        lower = np.maximum(nodes.indices - step, 0)
        has_up = nodes.mask[tuple(upper.T)] & (upper[:, axis] !=
                                                nodes.indices[:, axis])
        has_down = nodes.mask[tuple(lower.T)] & (lower[:, axis] !=
                                                  nodes.indices[:, axis])
        here = f.values
        up = values[tuple(upper.T)]
        down = values[tuple(lower.T)]
        h = domain.h[axis]
        gradient[:, axis] = np.where(
            has_up & has_down, (up - down) / (2 * h),
            np.where(has_up, (up - here) / h,
                     np.where(has_down, (here - down) / h, 0)))
    return gradient


def _contrast(medium: OpticalMedium, nodes: AnomalyNodes, mu_a: float,
              frozen_mu_s: bool, mu_s_bar: float) -> np.ndarray:
    """1 / (mu_a + mu_s) - 1 / mu_s on the nodes of D."""
    if frozen_mu_s:
        mu_s = np.full(nodes.count, mu_s_bar)
    else:
        mu_s = nodes.restrict(medium.mu_s_values)
    return 1 / (mu_a + mu_s) - 1 / mu_s


def _pair_geometry(nodes: AnomalyNodes) -> Tuple[np.ndarray, np.ndarray]:
    """Offsets y_j - x_i, shape (m, m, 3), and the lattice Gamma."""
    points = nodes.coordinates
    offsets = points[None, :, :] - points[:, None, :]
    lattice = (nodes.indices[None, :, :] - nodes.indices[:, None, :])
    return offsets, _lattice_gamma(lattice, nodes.domain.h)


def operator_N_script(f: Union[AnomalyField, ScalarField],
                      anomaly: AnomalyConfig, medium: OpticalMedium, *,
                      frozen_mu_s: bool = False, gradient_term: bool = True,
                      volume_fraction: bool = False) -> AnomalyField:
    """3 mu_a mu_s int_D (f(y) - f(x)) Gamma(x - y) dy
    + mu_s int_D (1/(mu_a + mu_s) - 1/mu_s) grad f(y) . grad_y Gamma(x - y) dy

    mu_s outside the integrals is taken at z. ``frozen_mu_s`` also
    freezes the mu_s inside the second integral; ``gradient_term=False``
    drops it.
    """
    if isinstance(f, AnomalyField):
        nodes = f.nodes
    else:
        nodes = anomaly_nodes(medium.domain, anomaly, volume_fraction)
        f = _on_anomaly(f, nodes)
    mu_s_bar = medium.mu_s_at(anomaly.z)
    weights = nodes.weights
    offsets, gamma = _pair_geometry(nodes)
    differences = f.values[None, :] - f.values[:, None]
    first = 3 * anomaly.mu_a * mu_s_bar * (gamma * differences) @ weights
    result = first
    if gradient_term and anomaly.mu_a != 0:
        contrast = _contrast(medium, nodes, anomaly.mu_a, frozen_mu_s,
                             mu_s_bar)
        distance = np.linalg.norm(offsets, axis=-1)
        np.fill_diagonal(distance, np.inf)
        # grad_y Gamma(x - y) = (y - x) / (4 pi |x - y|^3), zero on the
        # self cell by symmetry of its ball average.
        kernel = offsets / (4 * np.pi * distance[..., None] ** 3)
        flux = masked_gradient(f) * (contrast * weights)[:, None]
        second = mu_s_bar * np.einsum("ijk,jk->i", kernel, flux)
        result = first + second
    return AnomalyField(nodes, result)


def _window_gradient(blocks: np.ndarray, h: Sequence[float]) -> np.ndarray:
    """Central differences of every window block, shape (m, 3, ...)."""
    return np.stack(np.gradient(blocks, *h, axis=(1, 2, 3)), axis=1)


def operator_R_script(f: Union[AnomalyField, ScalarField],
                      anomaly: AnomalyConfig, medium: OpticalMedium,
                      kernel: AnomalyKernel, *, frozen_mu_s: bool = False,
                      gradient_term: bool = True) -> AnomalyField:
    """mu_a int_D (f(y) - f(x)) R(x, y) dy
    + 1/3 int_D (1/(mu_a + mu_s) - 1/mu_s) grad f(y) . grad_y R(x, y) dy
    """
    _check_kernel(kernel, anomaly)
    nodes = kernel.nodes
    f = _on_anomaly(f, nodes)
    weights = nodes.weights
    remainder = kernel.on_nodes(kernel.remainder)
    differences = f.values[None, :] - f.values[:, None]
    result = anomaly.mu_a * (remainder * differences) @ weights
    if gradient_term and anomaly.mu_a != 0:
        contrast = _contrast(medium, nodes, anomaly.mu_a, frozen_mu_s,
                             kernel.mu_s_bar)
        gradient_r = _window_gradient(kernel.remainder, nodes.domain.h)
        local = kernel.local_indices
        gradient_r = gradient_r[:, :, local[:, 0], local[:, 1], local[:, 2]]
        flux = masked_gradient(f) * (contrast * weights)[:, None]
        result = result + np.einsum("ikj,jk->i", gradient_r, flux) / 3
    return AnomalyField(nodes, result)


class RemainderFit(NamedTuple):
    c1: float
    c2: float
    residual: float
    n_pairs: int


def remainder_bound_fit(kernel: AnomalyKernel,
                        lam: float = 0.5) -> RemainderFit:
    """Fit |R(x, y)| ~ c1 mu_s^(3/2) + c2 mu_s |x - y|^(lam - 1) by
    nonnegative least squares over window pairs with y != x."""
    nodes = kernel.nodes
    h = np.asarray(nodes.domain.h)
    window_axes = [np.arange(lo, hi) for lo, hi in zip(kernel.low,
                                                       kernel.high)]
    grid = np.stack(np.meshgrid(*window_axes, indexing="ij"), axis=-1)
    distance = np.linalg.norm(
        (grid[None, ...] - nodes.indices[:, None, None, None, :]) * h,
        axis=-1)
    off_diagonal = distance > 0
    values = np.abs(kernel.remainder[off_diagonal])
    mu = kernel.mu_s_bar
    design = np.column_stack([
        np.full(values.size, mu ** 1.5),
        mu * distance[off_diagonal] ** (lam - 1)])
    (c1, c2), residual = nnls(design, values)
    logger.info("Remainder bound fit: c1=%.3g, c2=%.3g", c1, c2)
    return RemainderFit(float(c1), float(c2), float(residual), values.size)


@dataclass(frozen=True, eq=False)
class SeriesResult:
    series: AnomalyField
    leading: AnomalyField
    direct: AnomalyField
    n_field: AnomalyField
    deviation: float
    leading_deviation: float
    contraction: float
    details: Dict[str, Any] = field(default_factory=dict)

    @property
    def remainder_ratio(self) -> float:
        """deviation / contraction^2."""
        if self.contraction == 0:
            return float("nan")
        return self.deviation / self.contraction ** 2


def two_term_series(medium: OpticalMedium, anomaly: AnomalyConfig,
                    kernel: Optional[AnomalyKernel] = None, *,
                    tol: float = 1e-10, model: str = "simplified",
                    frozen_mu_s: bool = False,
                    background: Optional[FluenceField] = None,
                    fluence: Optional[FluenceField] = None,
                    threads: int = 1, method: str = "cocg") -> SeriesResult:
    """(1 - mu_a n)^-1 Phi0 + (N + R)(1 - mu_a n)^-1 Phi0 on D, compared
    with the directly solved Phi.

    The gradient terms of both operators follow the forward model: they
    are kept for the full model and vanish for the simplified one.
    """
    _check_model(model)
    if kernel is None:
        kernel = anomaly_kernel(medium, anomaly, tol=tol, threads=threads,
                                method=method)
    _check_kernel(kernel, anomaly)
    nodes = kernel.nodes
    if background is None:
        background = solve_background(medium, tol, method=method)
    if fluence is None:
        fluence = solve_with_anomaly(medium, anomaly, tol, model=model,
                                     method=method)
    n_field = n_of_x(anomaly, kernel)
    largest = float(np.max(np.abs(anomaly.mu_a * n_field.values)))
    if largest >= 1:
        raise SeriesHypothesisError(
            "|mu_a n| reaches {:.3g} on D; the series needs it below "
            "1".format(largest))
    phi0 = _on_anomaly(background.field, nodes)
    leading = AnomalyField(nodes, phi0.values /
                           (1 - anomaly.mu_a * n_field.values))
    gradient_term = model == "full"
    correction = operator_N_script(
        leading, anomaly, medium, frozen_mu_s=frozen_mu_s,
        gradient_term=gradient_term) + operator_R_script(
        leading, anomaly, medium, kernel, frozen_mu_s=frozen_mu_s,
        gradient_term=gradient_term)
    series = leading + correction
    direct = _on_anomaly(fluence.field, nodes)
    direct_norm = direct.norm()
    deviation = (series - direct).norm() / direct_norm
    leading_deviation = (leading - direct).norm() / direct_norm
    contraction = correction.norm() / leading.norm()
    logger.info("Two term series: deviation %.3e (leading term %.3e), "
                "contraction %.3e", deviation, leading_deviation,
                contraction)
    return SeriesResult(series, leading, direct, n_field, deviation,
                        leading_deviation, contraction,
                        {"max_mu_a_n": largest, "model": model,
                         "frozen_mu_s": frozen_mu_s})


class InversionResult(NamedTuple):
    estimate: float
    converged: bool
    iterations: int
    history: List[float]
    contracted: bool


def synthetic_absorbed_energy(medium: OpticalMedium, anomaly: AnomalyConfig,
                              background: FluenceField) -> AbsorbedEnergy:
    """A = mu_a (Phi0(z) + Delta_asy) on D, the asymptotic forward model."""
    nodes = anomaly_nodes(medium.domain, anomaly)
    value = anomaly.mu_a * (background.at(anomaly.z) +
                            asymptotic_perturbation(medium, anomaly,
                                                    background))
    values = np.where(nodes.mask, value, 0)
    return AbsorbedEnergy(ScalarField(medium.domain, values), anomaly,
                          nodes.mask)


def invert_mu_a(absorbed: Union[AbsorbedEnergy, ScalarField],
                background: FluenceField, anomaly: AnomalyConfig,
                medium: OpticalMedium, *,
                max_iterations: int = MAX_INVERSION_ITERATIONS,
                rtol: float = INVERSION_RTOL) -> InversionResult:
    """Fixed point mu <- Re(A_bar / (Phi0(z) + Delta_asy(mu))).

    ``anomaly.mu_a`` is ignored; the geometry (z, eps, B) is known. A_bar
    is the mean of A over the nodes of D.
    """
    nodes = anomaly_nodes(medium.domain, anomaly)
    values = nodes.restrict(getattr(absorbed, "field", absorbed))
    a_bar = complex(np.mean(values))
    if a_bar == 0:
        raise ValueError("Absorbed energy vanishes on D")
    smallness_flags(anomaly, medium)
    phi0 = background.at(anomaly.z)
    coefficient = _asymptotic_coefficient(medium, anomaly, background)
    mu = float((a_bar / phi0).real)
    history = [mu]
    logger.info("Inversion iterate 0: mu_a=%.8g", mu)
    steps = []
    converged = False
    for iteration in range(1, max_iterations + 1):
        mu_next = float((a_bar / (phi0 + mu * coefficient)).real)
        steps.append(abs(mu_next - mu))
        history.append(mu_next)
        logger.info("Inversion iterate %d: mu_a=%.8g", iteration, mu_next)
        if steps[-1] < rtol * abs(mu):
            mu = mu_next
            converged = True
            break
        mu = mu_next
    contracted = all(later <= earlier for earlier, later in
                     zip(steps, steps[1:]))
    estimate = mu
    if not contracted:
        best = int(np.argmin(steps))
        estimate = history[best + 1]
        message = ("Inversion iterates do not contract; returning the best "
                   "iterate {:.6g}".format(estimate))
        logger.warning(message)
        warnings.warn(message, RuntimeWarning)
    return InversionResult(estimate, converged, len(steps), history,
                           contracted)
