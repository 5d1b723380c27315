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

"""Structured 3D box domains, complex node fields and coefficient fields with
prescribed Hölder regularity.

Nodes are stored in C order: node ``(i, j, k)`` has flat index
``(i * n + j) * n + k`` and coordinate ``(i * hx, j * hy, k * hz)``.
"""

import functools
import logging
import math
from dataclasses import dataclass
from typing import (Any, ClassVar, Dict, NamedTuple, Optional, Sequence,
                    Tuple, Union)

import numpy as np

logger = logging.getLogger(__name__)

MIN_NODES = 9
SMOOTHNESS_CLASSES = ("C0", "C0λ", "C1λ", "C2")

Vector = Tuple[float, float, float]


def as_vector(value, name="vector") -> Vector:
    array = np.asarray(value, dtype=np.float64)
    if array.ndim == 0:
        array = np.repeat(array, 3)
    if array.shape != (3,):
        raise ValueError("{} should have 3 components, got {}".format(
            name, array.shape))
    return (float(array[0]), float(array[1]), float(array[2]))


class GridPoint(NamedTuple):
    index: Tuple[int, int, int]
    coord: Vector


@dataclass(frozen=True)
class Domain:
    """The box [0, Lx]x[0, Ly]x[0, Lz] sampled by n nodes per axis."""
    extent: Vector
    n: int

    @property
    def h(self) -> Vector:
        return tuple(length / (self.n - 1)  # type: ignore
                     for length in self.extent)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.n, self.n, self.n)

    @property
    def size(self) -> int:
        return self.n ** 3

    @property
    def cell_volume(self) -> float:
        hx, hy, hz = self.h
        return hx * hy * hz

    @property
    def center(self) -> Vector:
        return as_vector([length / 2 for length in self.extent])

    @property
    def min_extent(self) -> float:
        return min(self.extent)

    @property
    def diameter(self) -> float:
        return math.sqrt(sum(length ** 2 for length in self.extent))

    @functools.cached_property
    def axes(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(np.arange(self.n) * step  # type: ignore
                     for step in self.h)

    @functools.cached_property
    def coordinates(self) -> np.ndarray:
        """Node coordinates as an array of shape (n, n, n, 3)."""
        grids = np.meshgrid(*self.axes, indexing="ij")
        coordinates = np.stack(grids, axis=-1)
        coordinates.setflags(write=False)
        return coordinates

    def coord(self, index: Sequence[int]) -> np.ndarray:
        return np.asarray(index, dtype=np.float64) * np.asarray(self.h)

    def index_of(self, coord: Sequence[float]) -> Tuple[int, int, int]:
        """Index of the node nearest to ``coord``."""
        scaled = np.rint(np.asarray(coord, dtype=np.float64) /
                         np.asarray(self.h))
        index = np.clip(scaled, 0, self.n - 1).astype(int)
        return (int(index[0]), int(index[1]), int(index[2]))

    def point(self, index: Sequence[int]) -> GridPoint:
        for i in index:
            if not 0 <= i < self.n:
                raise ValueError("Node index {} outside the grid".format(
                    tuple(index)))
        index = (int(index[0]), int(index[1]), int(index[2]))
        return GridPoint(index, as_vector(self.coord(index)))

    def flat_index(self, index: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(index), self.shape))

    def distance_to_boundary(self, coord: Sequence[float]) -> float:
        coord = np.asarray(coord, dtype=np.float64)
        extent = np.asarray(self.extent)
        return float(np.min(np.minimum(coord, extent - coord)))

    def radius_from(self, center: Sequence[float]) -> np.ndarray:
        offset = self.coordinates - np.asarray(center, dtype=np.float64)
        return np.sqrt(np.sum(offset ** 2, axis=-1))


def make_domain(extent: Union[float, Sequence[float]], n: int) -> Domain:
    if int(n) != n or n < MIN_NODES:
        raise ValueError(
            "Number of nodes per axis should be an integer of at least {}, "
            "got {}".format(MIN_NODES, n))
    extent = as_vector(extent, "extent")
    if min(extent) <= 0 or not all(math.isfinite(x) for x in extent):
        raise ValueError("Extent should be positive, got {}".format(extent))
    if n % 2 == 0:
        logger.info("Even node count %d: the domain has no center node", n)
    return Domain(extent, int(n))


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Complex node values on a domain. Values are stored read-only."""
    domain: Domain
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.complex128)
        if values.size != self.domain.size:
            raise ValueError(
                "Field has {} values, domain has {} nodes".format(
                    values.size, self.domain.size))
        values = values.reshape(self.domain.shape)
        if not np.all(np.isfinite(values)):
            raise ValueError("Field values should all be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, domain: Domain) -> "ScalarField":
        return cls(domain, np.zeros(domain.shape, dtype=np.complex128))

    @property
    def flat(self) -> np.ndarray:
        return self.values.ravel()

    def abs(self) -> np.ndarray:
        return np.abs(self.values)

    def at(self, coord: Sequence[float]) -> complex:
        """Value at the node nearest to ``coord``."""
        return complex(self.values[self.domain.index_of(coord)])

    def integral(self) -> complex:
        """Midpoint rule over the nodes."""
        return complex(self.domain.cell_volume * self.values.sum())

    def _check_domain(self, other: "ScalarField"):
        if other.domain != self.domain:
            raise ValueError("Fields live on different domains")

    def __add__(self, other: "ScalarField") -> "ScalarField":
        self._check_domain(other)
        return ScalarField(self.domain, self.values + other.values)

    def __sub__(self, other: "ScalarField") -> "ScalarField":
        self._check_domain(other)
        return ScalarField(self.domain, self.values - other.values)

    def __mul__(self, scalar: complex) -> "ScalarField":
        return ScalarField(self.domain, self.values * scalar)

    __rmul__ = __mul__

    def __neg__(self) -> "ScalarField":
        return ScalarField(self.domain, -self.values)


# Coefficient specifications. Each spec is a frozen description that
# generate_coefficient turns into node values.

@dataclass(frozen=True)
class Constant:
    kind: ClassVar[str] = "constant"
    gamma0: float = 1.0
    lam: float = 0.5

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "gamma0": self.gamma0, "lam": self.lam}


@dataclass(frozen=True)
class HoelderBump:
    """gamma(x) = gamma0 + a * |x - z| ** lam"""
    kind: ClassVar[str] = "hoelder_bump"
    gamma0: float
    a: float
    z: Vector
    lam: float

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "gamma0": self.gamma0, "a": self.a,
                "z": list(self.z), "lam": self.lam}


@dataclass(frozen=True)
class SmoothWave:
    """gamma(x) = gamma0 * (1 + a * prod(cos(pi * x_i / L_i)))"""
    kind: ClassVar[str] = "smooth_wave"
    gamma0: float
    a: float
    lam: float = 0.5

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "gamma0": self.gamma0, "a": self.a,
                "lam": self.lam}


@dataclass(frozen=True, eq=False)
class DiffusionRecip:
    """gamma = 1 / (3 * mu_s) for a scalar or node-wise scattering field."""
    kind: ClassVar[str] = "diffusion_recip"
    mu_s: Union[float, np.ndarray]
    lam: float = 0.5
    seminorm: Optional[float] = None
    smoothness_class: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        mu_s = np.asarray(self.mu_s, dtype=np.float64)
        return {"kind": self.kind, "mu_s_min": float(mu_s.min()),
                "mu_s_max": float(mu_s.max()), "lam": self.lam}


CoefficientSpec = Union[Constant, HoelderBump, SmoothWave, DiffusionRecip]


@dataclass(frozen=True, eq=False)
class CoefficientField:
    domain: Domain
    values: np.ndarray
    nu: float
    lam: float
    seminorm: float
    smoothness_class: str
    spec: Optional[CoefficientSpec] = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.size != self.domain.size:
            raise ValueError(
                "Coefficient has {} values, domain has {} nodes".format(
                    values.size, self.domain.size))
        values = values.reshape(self.domain.shape)
        if not 0 < self.nu <= 1:
            raise ValueError(
                "Ellipticity constant should be in (0, 1], got {}".format(
                    self.nu))
        if values.min() < self.nu or values.max() > 1 / self.nu:
            raise ValueError(
                "Coefficient values [{}, {}] violate nu <= gamma <= 1/nu "
                "for nu={}".format(values.min(), values.max(), self.nu))
        if not 0 < self.lam < 1:
            raise ValueError(
                "Hölder exponent should be in (0, 1), got {}".format(
                    self.lam))
        if self.seminorm < 0:
            raise ValueError("Hölder seminorm should be nonnegative")
        if self.smoothness_class not in SMOOTHNESS_CLASSES:
            raise ValueError("Unknown smoothness class {!r}".format(
                self.smoothness_class))
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def flat(self) -> np.ndarray:
        return self.values.ravel()

    def at(self, coord: Sequence[float]) -> float:
        return float(self.values[self.domain.index_of(coord)])

    @property
    def is_constant(self) -> bool:
        return bool(np.all(self.values == self.values.flat[0]))

    def spec_dict(self) -> Dict[str, Any]:
        if self.spec is None:
            return {"kind": "custom"}
        return self.spec.to_dict()


class EllipticityReport(NamedTuple):
    nu_effective: float
    ok: bool


def validate_ellipticity(field: Union[CoefficientField, np.ndarray]
                         ) -> EllipticityReport:
    values = np.asarray(getattr(field, "values", field), dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("Coefficient values should be finite")
    low = float(values.min())
    high = float(values.max())
    nu = low if high <= 0 else min(low, 1.0 / high)
    return EllipticityReport(nu, nu > 0)


def _check_lambda(lam):
    if not 0 < lam < 1:
        raise ValueError(
            "Hölder exponent should be in (0, 1), got {}".format(lam))


def generate_coefficient(domain: Domain, spec: CoefficientSpec
                         ) -> CoefficientField:
    _check_lambda(spec.lam)
    if isinstance(spec, Constant):
        values = np.full(domain.shape, float(spec.gamma0))
        seminorm = 0.0
        smoothness = "C2"
    elif isinstance(spec, HoelderBump):
        radius = domain.radius_from(spec.z)
        values = spec.gamma0 + spec.a * radius ** spec.lam
        seminorm = abs(spec.a)
        smoothness = "C0λ"
    elif isinstance(spec, SmoothWave):
        product = np.ones(domain.shape)
        for dim, (axis, length) in enumerate(zip(domain.axes,
                                                 domain.extent)):
            shape = [1, 1, 1]
            shape[dim] = -1
            product = product * np.cos(np.pi * axis / length).reshape(shape)
        values = spec.gamma0 * (1 + spec.a * product)
        # Lipschitz bound of the wave spread over the domain diameter.
        lipschitz = abs(spec.gamma0 * spec.a) * np.pi * math.sqrt(
            sum(1 / length ** 2 for length in domain.extent))
        seminorm = lipschitz * domain.diameter ** (1 - spec.lam)
        smoothness = "C2"
    elif isinstance(spec, DiffusionRecip):
        mu_s = np.broadcast_to(np.asarray(spec.mu_s, dtype=np.float64),
                               domain.shape)
        if not np.all(np.isfinite(mu_s)) or mu_s.min() <= 0:
            raise ValueError("Scattering coefficient should be positive")
        values = 1.0 / (3.0 * mu_s)
        if spec.seminorm is not None:
            seminorm = spec.seminorm
        else:
            seminorm = float(values.max() - values.min()) / (
                min(domain.h) ** spec.lam)
        if spec.smoothness_class is not None:
            smoothness = spec.smoothness_class
        else:
            smoothness = "C2" if seminorm == 0 else "C0"
    else:
        raise ValueError("Unknown coefficient spec {!r}".format(spec))

    report = validate_ellipticity(values)
    if not report.ok:
        raise ValueError(
            "Coefficient {} is not elliptic: minimum value {} gives "
            "nu={}".format(spec.kind, values.min(), report.nu_effective))
    return CoefficientField(domain, values, report.nu_effective, spec.lam,
                            seminorm, smoothness, spec)


def frozen_coefficient(gamma: CoefficientField, coord: Sequence[float]
                       ) -> CoefficientField:
    """Constant field equal to gamma at the node nearest to ``coord``."""
    return generate_coefficient(gamma.domain,
                                Constant(gamma.at(coord), gamma.lam))
